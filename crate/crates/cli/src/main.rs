use std::fs::{self, File};
use std::io::BufWriter;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use lowcomm::checkpoint;
use lowcomm::collective::TcpCollective;
use lowcomm::config::{Backend, RunConfig, KEYS};
use lowcomm::report::{self, LabeledRun, MetricsWriter, ReportError};
use lowcomm::trainer::{self, MetricsRecord, RunOutput, TrainError};
use lowcomm::{models::Model, selftest};

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;
const SELFTEST_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "lowcomm", version, about = "Low-communication distributed training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics and checkpoints.
    #[command(after_help = defaults_help())]
    Run(RunArgs),
    /// Tabulate final loss and traffic across runs, with pairwise ratios.
    Compare(CompareArgs),
    /// Plot loss curves and summarize metrics files.
    Report(ReportArgs),
    /// Run the transform and optimizer invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    outer_steps: Option<String>,
    #[arg(long)]
    inner_steps: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    micro_batch: Option<String>,
    #[arg(long)]
    inner_lr: Option<String>,
    #[arg(long)]
    outer_lr: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    topk: Option<String>,
    #[arg(long)]
    chunk: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    context: Option<String>,
    #[arg(long)]
    data_size: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    shard_mode: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    eval_mode: Option<String>,
    #[arg(long)]
    timeout_ms: Option<String>,
    #[arg(long)]
    wall_clock: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> [(&'static str, &Option<String>); 28] {
        [
            ("algo", &self.algo),
            ("workers", &self.workers),
            ("outer_steps", &self.outer_steps),
            ("inner_steps", &self.inner_steps),
            ("batch", &self.batch),
            ("micro_batch", &self.micro_batch),
            ("inner_lr", &self.inner_lr),
            ("outer_lr", &self.outer_lr),
            ("beta", &self.beta),
            ("alpha", &self.alpha),
            ("topk", &self.topk),
            ("chunk", &self.chunk),
            ("weight_decay", &self.weight_decay),
            ("warmup", &self.warmup),
            ("backend", &self.backend),
            ("seed", &self.seed),
            ("model", &self.model),
            ("dim", &self.dim),
            ("hidden", &self.hidden),
            ("vocab", &self.vocab),
            ("context", &self.context),
            ("data_size", &self.data_size),
            ("dataset", &self.dataset),
            ("shard_mode", &self.shard_mode),
            ("eval_interval", &self.eval_interval),
            ("eval_mode", &self.eval_mode),
            ("timeout_ms", &self.timeout_ms),
            ("wall_clock", &self.wall_clock),
        ]
    }
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// This process's rank (tcp backend, one process per worker).
    #[arg(long)]
    rank: Option<usize>,
    /// Address to listen on; defaults to this rank's entry in --peers.
    #[arg(long)]
    listen: Option<String>,
    /// Every rank's address, as `0=host:port,1=host:port,...`.
    #[arg(long)]
    peers: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Metrics files, or config files to run first.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "compare")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics files; each file stem labels its curve.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn defaults_help() -> String {
    let defaults = RunConfig::default().to_text();
    let mut s = String::from("Config keys (file `key = value`, or flag `--key value`) and defaults:\n");
    for ((key, desc), line) in KEYS.iter().zip(defaults.lines()) {
        let value = line.split_once(" = ").map(|(_, v)| v).unwrap_or("");
        s.push_str(&format!("  {:<14} {:<10} {desc}\n", key, if value.is_empty() { "\"\"" } else { value }));
    }
    s
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitContext<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => CONFIG_ERROR,
        _ => RUNTIME_ERROR,
    }
}

fn report_code(e: &ReportError) -> u8 {
    match e {
        ReportError::Config(_) | ReportError::MismatchedTasks { .. } => CONFIG_ERROR,
        _ => RUNTIME_ERROR,
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .code(CONFIG_ERROR)?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))
            .code(CONFIG_ERROR)?;
    }
    for (key, value) in overrides.pairs() {
        if let Some(v) = value {
            cfg.set(key, v).code(CONFIG_ERROR)?;
        }
    }
    cfg.validate().code(CONFIG_ERROR)?;
    Ok(cfg)
}

fn parse_peers(spec: &str, workers: usize) -> anyhow::Result<Vec<SocketAddr>> {
    let mut peers: Vec<Option<SocketAddr>> = vec![None; workers];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (rank, addr) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("peer `{part}` is not rank=host:port"))?;
        let rank: usize = rank.trim().parse().with_context(|| format!("peer rank `{rank}`"))?;
        let slot = peers
            .get_mut(rank)
            .ok_or_else(|| anyhow!("peer rank {rank} outside 0..{workers}"))?;
        let addr = addr
            .trim()
            .to_socket_addrs()
            .with_context(|| format!("peer address `{addr}`"))?
            .next()
            .ok_or_else(|| anyhow!("peer address `{addr}` did not resolve"))?;
        if slot.replace(addr).is_some() {
            bail!("peer rank {rank} listed twice");
        }
    }
    peers
        .into_iter()
        .enumerate()
        .map(|(r, p)| p.ok_or_else(|| anyhow!("no address for rank {r} in --peers")))
        .collect()
}

fn save_checkpoints(out: &Path, rank_params: &[(usize, Model)]) -> anyhow::Result<()> {
    for (rank, model) in rank_params {
        let path = out.join(format!("rank{rank}.ckpt"));
        checkpoint::save(&path, model.names(), model.params()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn metrics_sink(path: &Path, cfg: &RunConfig) -> anyhow::Result<Arc<Mutex<MetricsWriter<BufWriter<File>>>>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Arc::new(Mutex::new(MetricsWriter::new(BufWriter::new(file), cfg)?)))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let tcp_rank = match (cfg.backend, args.rank) {
        (Backend::Tcp, Some(rank)) => Some(rank),
        (Backend::Local, Some(_)) => {
            return Err(Failure {
                code: CONFIG_ERROR,
                error: anyhow!("--rank needs --backend tcp"),
            })
        }
        _ => None,
    };
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .code(RUNTIME_ERROR)?;
    let metrics_path = args.out.join("metrics.csv");
    match tcp_rank {
        None => {
            let writer = metrics_sink(&metrics_path, &cfg).code(RUNTIME_ERROR)?;
            let sink_writer = Arc::clone(&writer);
            let out: RunOutput = trainer::run_experiment_with(&cfg, &mut move |r: &MetricsRecord| {
                sink_writer.lock().expect("metrics writer").push(r)
            })
            .map_err(|e| Failure {
                code: train_code(&e),
                error: anyhow::Error::new(e).context(format!("partial metrics in {}", metrics_path.display())),
            })?;
            let models: Vec<(usize, Model)> = out
                .params
                .iter()
                .enumerate()
                .map(|(r, p)| (r, Model::with_params(out.arch, p.clone()).expect("arch shapes")))
                .collect();
            save_checkpoints(&args.out, &models).code(RUNTIME_ERROR)?;
            print_final(out.metrics.last());
        }
        Some(rank) => {
            let spec = args.peers.as_deref().ok_or_else(|| Failure {
                code: CONFIG_ERROR,
                error: anyhow!("--backend tcp with --rank needs --peers"),
            })?;
            let peers = parse_peers(spec, cfg.workers).code(CONFIG_ERROR)?;
            if rank >= cfg.workers {
                return Err(Failure {
                    code: CONFIG_ERROR,
                    error: anyhow!("--rank {rank} outside 0..{}", cfg.workers),
                });
            }
            let listen = match &args.listen {
                Some(a) => a.clone(),
                None => peers[rank].to_string(),
            };
            let listener = TcpListener::bind(&listen)
                .with_context(|| format!("listening on {listen}"))
                .code(RUNTIME_ERROR)?;
            let dataset = Arc::new(trainer::load_dataset(&cfg).map_err(|e| Failure {
                code: train_code(&e),
                error: e.into(),
            })?);
            let mut comm = TcpCollective::connect(rank, listener, &peers, Duration::from_millis(cfg.timeout_ms))
                .code(RUNTIME_ERROR)?;
            let mut writer = if rank == 0 { Some(metrics_sink(&metrics_path, &cfg).code(RUNTIME_ERROR)?) } else { None };
            let mut sink = |r: &MetricsRecord| match &mut writer {
                Some(w) => w.lock().expect("metrics writer").push(r),
                None => Ok(()),
            };
            let out = trainer::run_worker(&cfg, dataset, &mut comm, &mut sink).map_err(|e| Failure {
                code: train_code(&e),
                error: e.into(),
            })?;
            let model = Model::with_params(cfg.arch(), out.params).expect("arch shapes");
            save_checkpoints(&args.out, &[(rank, model)]).code(RUNTIME_ERROR)?;
            log::info!("rank {rank}: sent {} bytes, received {}", out.meter.bytes_sent, out.meter.bytes_received);
            if rank == 0 {
                print_final(out.metrics.last());
            }
        }
    }
    Ok(())
}

fn print_final(last: Option<&MetricsRecord>) {
    if let Some(r) = last {
        println!(
            "t={} inner_steps={} train_loss={:.6} eval_loss={:.6} perplexity={:.4} total_bytes={} drift={:.3e}",
            r.t,
            r.inner_steps,
            r.train_loss,
            r.eval_loss,
            r.perplexity,
            r.total_bytes(),
            r.drift
        );
    }
}

fn is_metrics_file(path: &Path) -> bool {
    fs::read_to_string(path)
        .map(|t| t.starts_with(report::METRICS_MAGIC_LINE))
        .unwrap_or(false)
}

fn compare(args: CompareArgs) -> Result<(), Failure> {
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .code(RUNTIME_ERROR)?;
    let mut runs = Vec::new();
    for input in &args.inputs {
        if is_metrics_file(input) {
            runs.push(LabeledRun::read(input).map_err(|e| Failure {
                code: report_code(&e),
                error: e.into(),
            })?);
            continue;
        }
        let cfg = load_config(Some(input), &Overrides::default())?;
        let label = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        log::info!("running {}", input.display());
        let out = trainer::run_experiment(&cfg).map_err(|e| Failure {
            code: train_code(&e),
            error: anyhow::Error::new(e).context(format!("running {}", input.display())),
        })?;
        let path = args.out.join(format!("{label}.csv"));
        report::write_metrics(&path, &cfg, &out.metrics).code(RUNTIME_ERROR)?;
        runs.push(LabeledRun::read(&path).code(RUNTIME_ERROR)?);
    }
    let cmp = report::compare(&runs).map_err(|e| Failure {
        code: report_code(&e),
        error: e.into(),
    })?;
    let write = |name: &str, body: &str| {
        let p = args.out.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display())).code(RUNTIME_ERROR)
    };
    write("comparison.csv", &cmp.table)?;
    write("ratios.csv", &cmp.ratios)?;
    print!("{}", cmp.table);
    if runs.len() > 1 {
        print!("\n{}", cmp.ratios);
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<(), Failure> {
    let runs = args
        .metrics
        .iter()
        .map(|p| LabeledRun::read(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure {
            code: report_code(&e),
            error: e.into(),
        })?;
    let svg = report::loss_svg(&runs).code(RUNTIME_ERROR)?;
    let summary = report::summary_csv(&runs).code(RUNTIME_ERROR)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .code(RUNTIME_ERROR)?;
    fs::write(args.out.join("loss.svg"), svg).code(RUNTIME_ERROR)?;
    fs::write(args.out.join("summary.csv"), &summary).code(RUNTIME_ERROR)?;
    print!("{summary}");
    Ok(())
}

fn run_selftest(seed: u64) -> Result<(), Failure> {
    let checks = selftest::run(seed);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: SELFTEST_FAILURE,
            error: anyhow!("{failed} of {} checks failed", checks.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CONFIG_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::Report(args) => report_cmd(args),
        Command::Selftest { seed } => run_selftest(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
