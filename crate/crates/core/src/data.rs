//! Synthetic datasets, their on-disk format, sharding, and batch sampling.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::models::{Batch, Inputs, Targets};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset size: {0}")]
    InvalidSize(String),
    #[error("{workers} workers for {train} training examples")]
    TooManyWorkers { workers: usize, train: usize },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Quadratic,
    Blobs,
    Chars,
}

impl Task {
    fn code(self) -> u8 {
        match self {
            Task::Quadratic => 1,
            Task::Blobs => 2,
            Task::Chars => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Task::Quadratic),
            2 => Some(Task::Blobs),
            3 => Some(Task::Chars),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Quadratic => "quadratic",
            Task::Blobs => "blobs",
            Task::Chars => "chars",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Examples {
    Regression { dim: usize, x: Vec<f32>, y: Vec<f32> },
    Classification { dim: usize, classes: usize, x: Vec<f32>, labels: Vec<u32> },
    /// Example `i` is the window `tokens[i..i + context]` predicting
    /// `tokens[i + context]`.
    Sequence { vocab: usize, context: usize, tokens: Vec<u32> },
}

impl Examples {
    pub fn len(&self) -> usize {
        match self {
            Examples::Regression { y, .. } => y.len(),
            Examples::Classification { labels, .. } => labels.len(),
            Examples::Sequence { context, tokens, .. } => tokens.len().saturating_sub(*context),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generation parameters. `dim` is the feature width for quadratic/blobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenSpec {
    pub task: Task,
    pub size: usize,
    pub seed: u64,
    pub dim: usize,
    pub vocab: usize,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub seed: u64,
    pub examples: Examples,
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
}

/// Mean separation of the two blobs, in units of the per-axis std.
pub const BLOB_SEPARATION: f64 = 4.0;
const EVAL_FRACTION: usize = 5;

fn order2_table(rng: &mut Rng, vocab: usize) -> Vec<f64> {
    // every context pair favours three tokens; the rest share 5%
    let mut table = vec![0.05 / vocab as f64; vocab * vocab * vocab];
    for ctx in 0..vocab * vocab {
        let row = &mut table[ctx * vocab..(ctx + 1) * vocab];
        let mut picks: Vec<usize> = (0..vocab).collect();
        rng.shuffle(&mut picks);
        for (&tok, p) in picks.iter().zip([0.6, 0.25, 0.1]) {
            row[tok] += p;
        }
    }
    table
}

pub fn generate(spec: GenSpec) -> Result<Dataset> {
    let GenSpec { task, size, seed, dim, vocab, context } = spec;
    if size < 2 * EVAL_FRACTION {
        return Err(DataError::InvalidSize(format!("{size} examples is too few")));
    }
    let mut rng = Rng::stream(seed, 0xDA7A);
    let examples = match task {
        Task::Quadratic => {
            if dim == 0 || size < 4 * dim {
                return Err(DataError::InvalidSize(format!(
                    "quadratic needs at least 4 x dim = {} rows, got {size}",
                    4 * dim
                )));
            }
            let x = rng.normal_vec(size * dim, 1.0);
            let theta = rng.normal_vec(dim, 1.0);
            let y = x
                .chunks(dim)
                .map(|row| row.iter().zip(&theta).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>() as f32)
                .collect();
            Examples::Regression { dim, x, y }
        }
        Task::Blobs => {
            if dim == 0 {
                return Err(DataError::InvalidSize("blobs need dim >= 1".into()));
            }
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let mut x = Vec::with_capacity(size * dim);
            let mut labels = Vec::with_capacity(size);
            for i in 0..size {
                let label = (i % 2) as u32;
                let sign = if label == 0 { -0.5 } else { 0.5 };
                for d in &dir {
                    x.push((sign * BLOB_SEPARATION * d + rng.normal()) as f32);
                }
                labels.push(label);
            }
            Examples::Classification { dim, classes: 2, x, labels }
        }
        Task::Chars => {
            if !(2..=64).contains(&vocab) || context == 0 {
                return Err(DataError::InvalidSize(format!("chars need vocab in 2..=64 (got {vocab}) and context >= 1")));
            }
            let table = order2_table(&mut rng, vocab);
            let mut tokens = vec![rng.below(vocab) as u32, rng.below(vocab) as u32];
            while tokens.len() < size + context {
                let n = tokens.len();
                let ctx = tokens[n - 2] as usize * vocab + tokens[n - 1] as usize;
                let row = &table[ctx * vocab..(ctx + 1) * vocab];
                let mut u = rng.uniform();
                let mut next = vocab - 1;
                for (t, &p) in row.iter().enumerate() {
                    if u < p {
                        next = t;
                        break;
                    }
                    u -= p;
                }
                tokens.push(next as u32);
            }
            tokens.truncate(size + context);
            Examples::Sequence { vocab, context, tokens }
        }
    };
    let mut order: Vec<u32> = (0..size as u32).collect();
    Rng::stream(seed, 0x5911).shuffle(&mut order);
    let eval = order[..size / EVAL_FRACTION].to_vec();
    let train = order[size / EVAL_FRACTION..].to_vec();
    Ok(Dataset { task, seed, examples, train, eval })
}

impl Dataset {
    /// Gathers the examples at `indices` into a batch.
    pub fn batch(&self, indices: &[u32]) -> Batch {
        let rows = indices.len();
        match &self.examples {
            Examples::Regression { dim, x, y } => Batch {
                rows,
                inputs: Inputs::Dense {
                    x: indices.iter().flat_map(|&i| x[i as usize * dim..(i as usize + 1) * dim].iter().copied()).collect(),
                    dim: *dim,
                },
                targets: Targets::Values(indices.iter().map(|&i| y[i as usize]).collect()),
            },
            Examples::Classification { dim, x, labels, .. } => Batch {
                rows,
                inputs: Inputs::Dense {
                    x: indices.iter().flat_map(|&i| x[i as usize * dim..(i as usize + 1) * dim].iter().copied()).collect(),
                    dim: *dim,
                },
                targets: Targets::Labels(indices.iter().map(|&i| labels[i as usize]).collect()),
            },
            Examples::Sequence { context, tokens, .. } => Batch {
                rows,
                inputs: Inputs::Tokens {
                    ids: indices.iter().flat_map(|&i| tokens[i as usize..i as usize + context].iter().copied()).collect(),
                    context: *context,
                },
                targets: Targets::Labels(indices.iter().map(|&i| tokens[i as usize + context]).collect()),
            },
        }
    }

    pub fn eval_batch(&self) -> Batch {
        self.batch(&self.eval)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// `DSET`, version, task tag, seed, five u64 counts (examples, width,
    /// classes/vocab, train, eval), then the arrays and the split indices.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"DSET");
        out.push(1);
        out.push(self.task.code());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let (width, classes) = match &self.examples {
            Examples::Regression { dim, .. } => (*dim, 0),
            Examples::Classification { dim, classes, .. } => (*dim, *classes),
            Examples::Sequence { vocab, context, .. } => (*context, *vocab),
        };
        for c in [self.examples.len(), width, classes, self.train.len(), self.eval.len()] {
            out.extend_from_slice(&(c as u64).to_le_bytes());
        }
        let f32s = |out: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        let u32s = |out: &mut Vec<u8>, v: &[u32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        match &self.examples {
            Examples::Regression { x, y, .. } => {
                f32s(&mut out, x);
                f32s(&mut out, y);
            }
            Examples::Classification { x, labels, .. } => {
                f32s(&mut out, x);
                u32s(&mut out, labels);
            }
            Examples::Sequence { tokens, .. } => u32s(&mut out, tokens),
        }
        u32s(&mut out, &self.train);
        u32s(&mut out, &self.eval);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != b"DSET" {
            return Err(DataError::Format("bad magic".into()));
        }
        let head = r.take(2)?;
        if head[0] != 1 {
            return Err(DataError::Format(format!("unsupported version {}", head[0])));
        }
        let task = Task::from_code(head[1]).ok_or_else(|| DataError::Format(format!("unknown task tag {}", head[1])))?;
        let seed = r.u64()?;
        let mut counts = [0usize; 5];
        for c in &mut counts {
            *c = r.u64()? as usize;
        }
        let [n, width, classes, n_train, n_eval] = counts;
        let examples = match task {
            Task::Quadratic => Examples::Regression {
                dim: width,
                x: r.f32s(n * width)?,
                y: r.f32s(n)?,
            },
            Task::Blobs => Examples::Classification {
                dim: width,
                classes,
                x: r.f32s(n * width)?,
                labels: r.u32s(n)?,
            },
            Task::Chars => Examples::Sequence {
                vocab: classes,
                context: width,
                tokens: r.u32s(n + width)?,
            },
        };
        let train = r.u32s(n_train)?;
        let eval = r.u32s(n_eval)?;
        if r.pos != bytes.len() {
            return Err(DataError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if train.iter().chain(&eval).any(|&i| i as usize >= n) {
            return Err(DataError::Format("split index out of range".into()));
        }
        Ok(Self { task, seed, examples, train, eval })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| DataError::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn words(&mut self, len: usize) -> Result<impl Iterator<Item = [u8; 4]> + 'a> {
        let n = len.checked_mul(4).ok_or_else(|| DataError::Format("count overflow".into()))?;
        Ok(self.take(n)?.chunks_exact(4).map(|b| b.try_into().unwrap()))
    }

    fn f32s(&mut self, len: usize) -> Result<Vec<f32>> {
        Ok(self.words(len)?.map(f32::from_le_bytes).collect())
    }

    fn u32s(&mut self, len: usize) -> Result<Vec<u32>> {
        Ok(self.words(len)?.map(u32::from_le_bytes).collect())
    }
}

/// A worker's slice of the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub rank: usize,
    pub indices: Vec<u32>,
}

/// Seeded permutation of `train`, dealt round-robin to `workers` shards.
pub fn shard(train: &[u32], workers: usize, seed: u64) -> Result<Vec<Shard>> {
    if workers == 0 || workers > train.len() {
        return Err(DataError::TooManyWorkers { workers, train: train.len() });
    }
    let mut perm = train.to_vec();
    Rng::stream(seed, 0x5AAD).shuffle(&mut perm);
    Ok((0..workers)
        .map(|rank| Shard {
            rank,
            indices: perm.iter().skip(rank).step_by(workers).copied().collect(),
        })
        .collect())
}

/// Sequential passes over a per-epoch shuffle of a fixed index set.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    indices: Vec<u32>,
    seed: u64,
    stream: u64,
    epoch: u64,
    order: Vec<u32>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(indices: Vec<u32>, seed: u64, stream: u64) -> Self {
        assert!(!indices.is_empty(), "sampler over an empty index set");
        let mut s = Self {
            indices,
            seed,
            stream,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = self.indices.clone();
        let epoch_seed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Rng::stream(epoch_seed, self.stream).shuffle(&mut self.order);
        self.pos = 0;
    }

    /// Next `n` indices, continuing into the next epoch when needed.
    pub fn next_indices(&mut self, n: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let take = (n - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}
