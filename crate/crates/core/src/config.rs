//! Run configuration: `key = value` text with `#` comments.
//!
//! The same text form is written at the top of every metrics file, so a run
//! can be reproduced from its output.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{GenSpec, Task};
use crate::models::Arch;
use crate::tensor::ChunkGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }

    /// The key the error is about, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key } | ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Syntax { .. } => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("expected one of {}", Self::ALL.join(", "))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

named_enum!(Algorithm {
    Ddp => "ddp",
    Diloco => "diloco",
    Demo => "demo",
    DlcMd => "dlc-md",
});

named_enum!(ModelKind {
    Quadratic => "quadratic",
    Logistic => "logistic",
    Mlp => "mlp",
    CharLm => "char-lm",
});

named_enum!(Backend {
    Local => "local",
    Tcp => "tcp",
});

named_enum!(ShardMode {
    Split => "split",
    Duplicate => "duplicate",
});

named_enum!(EvalMode {
    Rank0 => "rank0",
    Mean => "mean",
});

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algo: Algorithm,
    pub workers: usize,
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub batch: usize,
    /// Gradient accumulation slice; 0 means the whole batch at once.
    pub micro_batch: usize,
    pub inner_lr: f32,
    pub outer_lr: f32,
    pub beta: f32,
    pub alpha: f32,
    pub topk: usize,
    /// Maximum chunk edge per axis.
    pub chunk: usize,
    pub weight_decay: f32,
    /// Linear inner learning-rate warm-up, in inner steps.
    pub warmup: usize,
    pub backend: Backend,
    pub seed: u64,
    pub model: ModelKind,
    pub dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub context: usize,
    pub data_size: usize,
    /// Load this dataset file instead of generating one.
    pub dataset: Option<PathBuf>,
    pub shard_mode: ShardMode,
    pub eval_interval: usize,
    pub eval_mode: EvalMode,
    pub timeout_ms: u64,
    /// Record wall-clock time; off keeps metrics files byte-reproducible.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algorithm::DlcMd,
            workers: 2,
            outer_steps: 100,
            inner_steps: 8,
            batch: 32,
            micro_batch: 0,
            inner_lr: 0.005,
            outer_lr: 0.7,
            beta: 0.9,
            alpha: 0.5,
            topk: 8,
            chunk: 8,
            weight_decay: 0.01,
            warmup: 0,
            backend: Backend::Local,
            seed: 0,
            model: ModelKind::Mlp,
            dim: 16,
            hidden: 64,
            vocab: 16,
            context: 8,
            data_size: 2000,
            dataset: None,
            shard_mode: ShardMode::Split,
            eval_interval: 1,
            eval_mode: EvalMode::Rank0,
            timeout_ms: 30_000,
            wall_clock: false,
        }
    }
}

/// Keys that choose how workers talk, not what they compute.
pub const TRANSPORT_KEYS: &[&str] = &["backend", "timeout_ms"];

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("algo", "ddp | diloco | demo | dlc-md"),
    ("workers", "number of workers W"),
    ("outer_steps", "outer rounds T"),
    ("inner_steps", "inner steps per round H (forced to 1 for ddp and demo)"),
    ("batch", "per-worker batch size"),
    ("micro_batch", "gradient accumulation slice, 0 = off"),
    ("inner_lr", "AdamW learning rate (DeMo step size for demo)"),
    ("outer_lr", "outer learning rate"),
    ("beta", "outer momentum decay in [0, 1)"),
    ("alpha", "mixing coefficient in [0, 1]"),
    ("topk", "coefficients kept per chunk"),
    ("chunk", "maximum chunk edge per axis"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("warmup", "linear warm-up length in inner steps"),
    ("backend", "local | tcp"),
    ("seed", "run seed"),
    ("model", "quadratic | logistic | mlp | char-lm"),
    ("dim", "input width for quadratic, logistic, mlp"),
    ("hidden", "hidden width for mlp and char-lm"),
    ("vocab", "char-lm vocabulary size"),
    ("context", "char-lm context length"),
    ("data_size", "generated dataset size"),
    ("dataset", "dataset file to load (empty = generate)"),
    ("shard_mode", "split | duplicate"),
    ("eval_interval", "rounds between metrics records"),
    ("eval_mode", "rank0 | mean"),
    ("timeout_ms", "collective timeout in milliseconds"),
    ("wall_clock", "record wall-clock time (true | false)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| ConfigError::invalid(key, format!("cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one field from its text form. Dashes in `key` are accepted in
    /// place of underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "algo" => self.algo = parse(k, value)?,
            "workers" => self.workers = parse(k, value)?,
            "outer_steps" => self.outer_steps = parse(k, value)?,
            "inner_steps" => self.inner_steps = parse(k, value)?,
            "batch" => self.batch = parse(k, value)?,
            "micro_batch" => self.micro_batch = parse(k, value)?,
            "inner_lr" => self.inner_lr = parse(k, value)?,
            "outer_lr" => self.outer_lr = parse(k, value)?,
            "beta" => self.beta = parse(k, value)?,
            "alpha" => self.alpha = parse(k, value)?,
            "topk" => self.topk = parse(k, value)?,
            "chunk" => self.chunk = parse(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "warmup" => self.warmup = parse(k, value)?,
            "backend" => self.backend = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "model" => self.model = parse(k, value)?,
            "dim" => self.dim = parse(k, value)?,
            "hidden" => self.hidden = parse(k, value)?,
            "vocab" => self.vocab = parse(k, value)?,
            "context" => self.context = parse(k, value)?,
            "data_size" => self.data_size = parse(k, value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "shard_mode" => self.shard_mode = parse(k, value)?,
            "eval_interval" => self.eval_interval = parse(k, value)?,
            "eval_mode" => self.eval_mode = parse(k, value)?,
            "timeout_ms" => self.timeout_ms = parse(k, value)?,
            "wall_clock" => self.wall_clock = parse(k, value)?,
            _ => return Err(ConfigError::UnknownKey { key }),
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        match self.model {
            ModelKind::Quadratic => Arch::Quadratic { dim: self.dim },
            ModelKind::Logistic => Arch::Logistic { dim: self.dim, classes: 2 },
            ModelKind::Mlp => Arch::Mlp {
                dim: self.dim,
                hidden: self.hidden,
                classes: 2,
            },
            ModelKind::CharLm => Arch::CharLm {
                vocab: self.vocab,
                context: self.context,
                hidden: self.hidden,
            },
        }
    }

    pub fn task(&self) -> Task {
        match self.model {
            ModelKind::Quadratic => Task::Quadratic,
            ModelKind::Logistic | ModelKind::Mlp => Task::Blobs,
            ModelKind::CharLm => Task::Chars,
        }
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            task: self.task(),
            size: self.data_size,
            seed: self.seed,
            dim: self.dim,
            vocab: self.vocab,
            context: self.context,
        }
    }

    /// Largest chunk volume over the model's tensors.
    pub fn max_chunk_volume(&self) -> usize {
        self.arch()
            .param_shapes()
            .iter()
            .filter_map(|(_, s)| ChunkGrid::with_max_edge(s, self.chunk).ok())
            .map(|g| g.chunk_volume())
            .max()
            .unwrap_or(1)
    }

    /// Checks ranges and cross-field invariants. DDP and DeMo synchronize
    /// every step, so their `inner_steps` is normalized to 1.
    pub fn validate(&mut self) -> Result<()> {
        let positive = [
            ("workers", self.workers),
            ("outer_steps", self.outer_steps),
            ("inner_steps", self.inner_steps),
            ("batch", self.batch),
            ("topk", self.topk),
            ("chunk", self.chunk),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("context", self.context),
            ("eval_interval", self.eval_interval),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::invalid(key, "must be >= 1"));
            }
        }
        if self.workers > u16::MAX as usize {
            return Err(ConfigError::invalid("workers", "at most 65535"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError::invalid("alpha", format!("{} outside range [0,1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(ConfigError::invalid("beta", format!("{} outside range [0,1)", self.beta)));
        }
        for (key, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::invalid(key, format!("{v} must be finite and >= 0")));
            }
        }
        if self.micro_batch > self.batch {
            return Err(ConfigError::invalid("micro_batch", "must not exceed batch"));
        }
        if !(2..=64).contains(&self.vocab) {
            return Err(ConfigError::invalid("vocab", "must be in 2..=64"));
        }
        if self.timeout_ms == 0 {
            return Err(ConfigError::invalid("timeout_ms", "must be >= 1"));
        }
        let v = self.max_chunk_volume();
        if self.topk > v && matches!(self.algo, Algorithm::DlcMd | Algorithm::Demo) {
            return Err(ConfigError::invalid(
                "topk",
                format!("{} exceeds the largest chunk volume {v}", self.topk),
            ));
        }
        if self.data_size < self.workers * self.batch && self.dataset.is_none() {
            return Err(ConfigError::invalid(
                "data_size",
                format!("{} is smaller than workers x batch", self.data_size),
            ));
        }
        if matches!(self.algo, Algorithm::Ddp | Algorithm::Demo) && self.inner_steps != 1 {
            log::warn!("{}: inner_steps {} forced to 1", self.algo, self.inner_steps);
            self.inner_steps = 1;
        }
        Ok(())
    }

    /// `key = value` lines for every field, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let values: Vec<String> = vec![
            self.algo.to_string(),
            self.workers.to_string(),
            self.outer_steps.to_string(),
            self.inner_steps.to_string(),
            self.batch.to_string(),
            self.micro_batch.to_string(),
            self.inner_lr.to_string(),
            self.outer_lr.to_string(),
            self.beta.to_string(),
            self.alpha.to_string(),
            self.topk.to_string(),
            self.chunk.to_string(),
            self.weight_decay.to_string(),
            self.warmup.to_string(),
            self.backend.to_string(),
            self.seed.to_string(),
            self.model.to_string(),
            self.dim.to_string(),
            self.hidden.to_string(),
            self.vocab.to_string(),
            self.context.to_string(),
            self.data_size.to_string(),
            self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.shard_mode.to_string(),
            self.eval_interval.to_string(),
            self.eval_mode.to_string(),
            self.timeout_ms.to_string(),
            self.wall_clock.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((k, _), v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Like [`RunConfig::to_text`] without the keys in [`TRANSPORT_KEYS`],
    /// so the same experiment yields the same text on every backend.
    pub fn experiment_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !TRANSPORT_KEYS.iter().any(|k| l.starts_with(&format!("{k} ="))))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Resets the fields named in [`TRANSPORT_KEYS`] to their defaults.
    pub fn without_transport(&self) -> Self {
        let d = Self::default();
        Self {
            backend: d.backend,
            timeout_ms: d.timeout_ms,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse_str("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn alpha_out_of_range_names_the_key() {
        let err = RunConfig::parse_str("alpha = 1.5").unwrap_err();
        assert_eq!(err.key(), Some("alpha"));
        assert!(err.to_string().contains("[0,1]"), "{err}");
    }

    #[test]
    fn later_values_override() {
        let mut cfg = RunConfig::parse_str("topk = 32\nchunk = 8").unwrap();
        cfg.set("topk", "8").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.topk, 8);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(RunConfig::parse_str("bogus = 1").unwrap_err().key(), Some("bogus"));
        assert_eq!(RunConfig::parse_str("workers = two").unwrap_err().key(), Some("workers"));
        assert_eq!(RunConfig::parse_str("topk = 65").unwrap_err().key(), Some("topk"));
        assert_eq!(RunConfig::parse_str("algo = sgd").unwrap_err().key(), Some("algo"));
        assert_eq!(RunConfig::parse_str("beta = 1").unwrap_err().key(), Some("beta"));
        assert!(matches!(RunConfig::parse_str("workers 2"), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn dashed_keys_and_inline_comments() {
        let cfg = RunConfig::parse_str("outer-steps = 7 # rounds\nmodel = char-lm").unwrap();
        assert_eq!(cfg.outer_steps, 7);
        assert_eq!(cfg.model, ModelKind::CharLm);
    }

    #[test]
    fn ddp_forces_single_inner_step() {
        let cfg = RunConfig::parse_str("algo = ddp\ninner_steps = 8").unwrap();
        assert_eq!(cfg.inner_steps, 1);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            algo: Algorithm::Diloco,
            inner_lr: 0.0123,
            alpha: 0.3,
            dataset: Some(PathBuf::from("/tmp/x.dset")),
            eval_mode: EvalMode::Mean,
            wall_clock: true,
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn experiment_text_ignores_transport() {
        let mut tcp = RunConfig { backend: Backend::Tcp, timeout_ms: 5, ..RunConfig::default() };
        tcp.validate().unwrap();
        assert_eq!(tcp.experiment_text(), RunConfig::default().experiment_text());
        assert_eq!(RunConfig::parse_str(&tcp.experiment_text()).unwrap(), tcp.without_transport());
    }
}
