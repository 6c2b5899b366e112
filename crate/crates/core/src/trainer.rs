//! Runs DDP, DiLoCo, DeMo, or the decoupled-momentum method over `W`
//! workers and records metrics.
//!
//! Each worker runs the same loop in its own thread (or process) and talks
//! to the others only through its [`Collective`]. Rounds stay in lockstep
//! because every collective is a rendezvous. After each recorded round the
//! workers exchange losses, meter readings, and parameters over the
//! unmetered control channel, so rank 0 can report aggregate traffic and
//! replica drift.

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::collective::{self, Collective, CollectiveError, CommMeter, TcpCollective};
use crate::config::{Algorithm, Backend, ConfigError, EvalMode, RunConfig, ShardMode};
use crate::data::{self, BatchSampler, DataError, Dataset};
use crate::models::{self, Arch, Model, ModelError};
use crate::optim::{self, AdamW, AdamWConfig, MomentumCompressor, OptimError, OuterState};
use crate::tensor::{l2_distance, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("rank {rank}: non-finite loss at inner step {step}")]
    NonFiniteLoss { rank: usize, step: u64 },
    #[error("rank {rank}: {message}")]
    Worker { rank: usize, message: String },
    #[error("metrics sink: {0}")]
    Sink(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub t: u32,
    pub inner_steps: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub perplexity: f64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub drift: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    /// Aggregate communication: sent plus received, over all workers.
    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent + self.bytes_recv
    }
}

/// Max over worker pairs of the per-tensor L2 distances summed over tensors.
pub fn replica_drift(replicas: &[Vec<Tensor>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for a in 0..replicas.len() {
        for b in a + 1..replicas.len() {
            let mut d = 0.0;
            for (x, y) in replicas[a].iter().zip(&replicas[b]) {
                d += l2_distance(x, y)?;
            }
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

enum Sync {
    Ddp,
    Diloco { momentum: Vec<Tensor> },
    Demo { momentum: MomentumCompressor },
    DlcMd { outer: OuterState },
}

/// State private to one replica.
pub struct Worker {
    rank: usize,
    world: usize,
    cfg: RunConfig,
    dataset: Arc<Dataset>,
    model: Model,
    adam: Vec<AdamW>,
    sync: Sync,
    anchor: Vec<Tensor>,
    sampler: BatchSampler,
    steps: u64,
    loss_sum: f64,
    loss_count: u64,
}

impl Worker {
    pub fn new(rank: usize, cfg: &RunConfig, dataset: Arc<Dataset>) -> Result<Self> {
        let world = cfg.workers;
        let model = Model::init(cfg.arch(), cfg.seed);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
        let adam_cfg = AdamWConfig {
            lr: cfg.inner_lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let adam = shapes.iter().map(|s| AdamW::new(s, adam_cfg)).collect();
        let sync = match cfg.algo {
            Algorithm::Ddp => Sync::Ddp,
            Algorithm::Diloco => Sync::Diloco {
                momentum: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            },
            Algorithm::Demo => Sync::Demo {
                momentum: MomentumCompressor::new(&shapes, cfg.chunk, cfg.topk, cfg.beta)?,
            },
            Algorithm::DlcMd => Sync::DlcMd {
                outer: OuterState::new(&shapes, cfg.chunk, cfg.topk, cfg.beta, cfg.alpha, cfg.outer_lr)?,
            },
        };
        let sampler = match cfg.shard_mode {
            ShardMode::Split => {
                let shards = data::shard(&dataset.train, world, cfg.seed)?;
                BatchSampler::new(shards[rank].indices.clone(), cfg.seed, rank as u64 + 1)
            }
            ShardMode::Duplicate => BatchSampler::new(dataset.train.clone(), cfg.seed, 0),
        };
        Ok(Self {
            rank,
            world,
            cfg: cfg.clone(),
            dataset,
            anchor: model.params().to_vec(),
            model,
            adam,
            sync,
            sampler,
            steps: 0,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> &[Tensor] {
        self.model.params()
    }

    pub fn anchor(&self) -> &[Tensor] {
        &self.anchor
    }

    pub fn inner_steps_done(&self) -> u64 {
        self.steps
    }

    /// Residual outer momentum, for methods that keep one.
    pub fn residual_momentum(&self) -> Option<&[Tensor]> {
        match &self.sync {
            Sync::Demo { momentum } => Some(momentum.residual()),
            Sync::DlcMd { outer } => Some(outer.momentum.residual()),
            _ => None,
        }
    }

    fn next_batch_indices(&mut self) -> Vec<u32> {
        let b = self.cfg.batch;
        match self.cfg.shard_mode {
            ShardMode::Split => self.sampler.next_indices(b),
            ShardMode::Duplicate => {
                let all = self.sampler.next_indices(b * self.world);
                all[self.rank * b..(self.rank + 1) * b].to_vec()
            }
        }
    }

    /// Mean loss and gradient over one batch, accumulated over micro-batches
    /// when configured.
    fn batch_gradient(&mut self) -> Result<(f64, Vec<Tensor>)> {
        let indices = self.next_batch_indices();
        let micro = match self.cfg.micro_batch {
            0 => indices.len(),
            m => m,
        };
        if micro >= indices.len() {
            let (loss, grads) = self.model.loss_and_grad(&self.dataset.batch(&indices))?;
            return self.check_loss(loss).map(|l| (l, grads));
        }
        let total = indices.len() as f64;
        let mut loss = 0.0;
        let mut acc: Vec<Vec<f64>> = self.model.params().iter().map(|t| vec![0.0; t.len()]).collect();
        for part in indices.chunks(micro) {
            let w = part.len() as f64 / total;
            let (l, grads) = self.model.loss_and_grad(&self.dataset.batch(part))?;
            loss += w * l;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, &v) in a.iter_mut().zip(g.data()) {
                    *x += w * f64::from(v);
                }
            }
        }
        let grads = acc
            .into_iter()
            .zip(self.model.params())
            .map(|(a, p)| Tensor::new(p.shape().to_vec(), a.into_iter().map(|v| v as f32).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.check_loss(loss).map(|l| (l, grads))
    }

    fn check_loss(&mut self, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                rank: self.rank,
                step: self.steps,
            });
        }
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    fn lr_scale(&self) -> f32 {
        match self.cfg.warmup {
            0 => 1.0,
            w => ((self.steps + 1) as f32 / w as f32).min(1.0),
        }
    }

    fn adam_step(&mut self, grads: &[Tensor]) -> Result<()> {
        let scale = self.lr_scale();
        for ((opt, p), g) in self.adam.iter_mut().zip(self.model.params_mut()).zip(grads) {
            opt.step(p, g, scale)?;
        }
        self.steps += 1;
        Ok(())
    }

    /// `h` local AdamW steps on this worker's data, no communication.
    pub fn run_inner_phase(&mut self, h: usize) -> Result<()> {
        for _ in 0..h {
            let (_, grads) = self.batch_gradient()?;
            self.adam_step(&grads)?;
        }
        Ok(())
    }

    /// One outer round: inner work plus the algorithm's synchronization.
    pub fn run_round(&mut self, comm: &mut dyn Collective, round: u32) -> Result<()> {
        let h = self.cfg.inner_steps;
        match &mut self.sync {
            Sync::Ddp => {
                for _ in 0..h {
                    let (_, grads) = self.batch_gradient()?;
                    let avg = comm.all_reduce_mean(self.steps as u32, &grads)?;
                    self.adam_step(&avg)?;
                }
            }
            Sync::Demo { .. } => {
                for _ in 0..h {
                    let (_, grads) = self.batch_gradient()?;
                    let lr = self.cfg.inner_lr * self.lr_scale();
                    let Sync::Demo { momentum } = &mut self.sync else { unreachable!() };
                    optim::demo_step(self.model.params_mut(), &grads, momentum, lr, comm, self.steps as u32)?;
                    self.steps += 1;
                }
            }
            Sync::Diloco { .. } => {
                self.run_inner_phase(h)?;
                let pseudo: Vec<Tensor> = self
                    .anchor
                    .iter()
                    .zip(self.model.params())
                    .map(|(a, p)| a.sub(p))
                    .collect::<std::result::Result<_, _>>()?;
                let delta = comm.all_reduce_mean(round, &pseudo)?;
                let Sync::Diloco { momentum } = &mut self.sync else { unreachable!() };
                let (beta, lr) = (self.cfg.beta, self.cfg.outer_lr);
                for (i, d) in delta.iter().enumerate() {
                    let (theta, m) = optim::nesterov_outer(&self.anchor[i], d, &momentum[i], beta, lr)?;
                    momentum[i] = m;
                    self.model.params_mut()[i] = theta;
                }
            }
            Sync::DlcMd { .. } => {
                self.run_inner_phase(h)?;
                let Sync::DlcMd { outer } = &mut self.sync else { unreachable!() };
                optim::decoupled_outer_round(self.model.params_mut(), &self.anchor, outer, comm, round)?;
            }
        }
        if self.model.params().iter().any(|p| p.ensure_finite("parameters").is_err()) {
            return Err(TrainError::Worker {
                rank: self.rank,
                message: format!("non-finite parameters after round {round}"),
            });
        }
        self.anchor = self.model.params().to_vec();
        Ok(())
    }

    fn take_loss(&mut self) -> f64 {
        let mean = if self.loss_count == 0 { 0.0 } else { self.loss_sum / self.loss_count as f64 };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        mean
    }

    fn status_bytes(&mut self, meter: &CommMeter) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.take_loss().to_le_bytes());
        out.extend_from_slice(&meter.bytes_sent.to_le_bytes());
        out.extend_from_slice(&meter.bytes_received.to_le_bytes());
        for p in self.model.params() {
            p.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }
}

struct Status {
    loss: f64,
    sent: u64,
    recv: u64,
    params: Vec<Tensor>,
}

fn parse_status(bytes: &[u8], like: &[Tensor], peer: usize) -> Result<Status> {
    let expected = 24 + 4 * like.iter().map(Tensor::len).sum::<usize>();
    if bytes.len() != expected {
        return Err(CollectiveError::PayloadMismatch {
            peer,
            reason: format!("status is {} bytes, expected {expected}", bytes.len()),
        }
        .into());
    }
    let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().unwrap() };
    let mut pos = 24;
    let mut params = Vec::with_capacity(like.len());
    for t in like {
        let vals = bytes[pos..pos + 4 * t.len()]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        pos += 4 * t.len();
        params.push(Tensor::new(t.shape().to_vec(), vals)?);
    }
    Ok(Status {
        loss: f64::from_le_bytes(word(0)),
        sent: u64::from_le_bytes(word(8)),
        recv: u64::from_le_bytes(word(16)),
        params,
    })
}

fn mean_replica(replicas: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let n = replicas.len() as f64;
    (0..replicas[0].len())
        .map(|i| {
            let mut sum = vec![0.0f64; replicas[0][i].len()];
            for r in replicas {
                for (s, &v) in sum.iter_mut().zip(r[i].data()) {
                    *s += f64::from(v);
                }
            }
            Ok(Tensor::new(
                replicas[0][i].shape().to_vec(),
                sum.into_iter().map(|s| (s / n) as f32).collect(),
            )?)
        })
        .collect()
}

/// What one worker hands back after a run.
#[derive(Debug, Clone)]
pub struct WorkerOutput {
    pub rank: usize,
    /// Records, filled on rank 0 only.
    pub metrics: Vec<MetricsRecord>,
    pub params: Vec<Tensor>,
    pub meter: CommMeter,
}

/// The full training loop for one rank. Rank 0 passes each record to `sink`
/// as soon as it exists, so a failed run still leaves its earlier records.
pub fn run_worker(
    cfg: &RunConfig,
    dataset: Arc<Dataset>,
    comm: &mut dyn Collective,
    sink: &mut dyn FnMut(&MetricsRecord) -> std::io::Result<()>,
) -> Result<WorkerOutput> {
    let rank = comm.rank();
    if comm.world_size() != cfg.workers {
        return Err(TrainError::Worker {
            rank,
            message: format!("collective has {} ranks, config says {}", comm.world_size(), cfg.workers),
        });
    }
    let eval = dataset.eval_batch();
    let mut worker = Worker::new(rank, cfg, dataset)?;
    let start = Instant::now();
    let mut metrics = Vec::new();
    for t in 1..=cfg.outer_steps {
        let round = t as u32;
        worker.run_round(comm, round)?;
        if t % cfg.eval_interval != 0 && t != cfg.outer_steps {
            continue;
        }
        let status = worker.status_bytes(comm.meter());
        let gathered = comm.control_gather(round, &status)?;
        if rank != 0 {
            continue;
        }
        let statuses = gathered
            .iter()
            .enumerate()
            .map(|(peer, b)| parse_status(b, worker.params(), peer))
            .collect::<Result<Vec<_>>>()?;
        let replicas: Vec<Vec<Tensor>> = statuses.iter().map(|s| s.params.clone()).collect();
        let eval_params = match cfg.eval_mode {
            EvalMode::Rank0 => replicas[0].clone(),
            EvalMode::Mean => mean_replica(&replicas)?,
        };
        let eval_loss = Model::with_params(cfg.arch(), eval_params)?.loss(&eval)?;
        let record = MetricsRecord {
            t: round,
            inner_steps: worker.inner_steps_done(),
            train_loss: statuses.iter().map(|s| s.loss).sum::<f64>() / statuses.len() as f64,
            eval_loss,
            perplexity: models::perplexity(eval_loss),
            bytes_sent: statuses.iter().map(|s| s.sent).sum(),
            bytes_recv: statuses.iter().map(|s| s.recv).sum(),
            drift: replica_drift(&replicas)?,
            wall_ms: if cfg.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
        };
        log::info!(
            "t={} train={:.5} eval={:.5} bytes={} drift={:.3e}",
            record.t,
            record.train_loss,
            record.eval_loss,
            record.total_bytes(),
            record.drift
        );
        sink(&record)?;
        metrics.push(record);
    }
    Ok(WorkerOutput {
        rank,
        metrics,
        params: worker.model.into_params(),
        meter: comm.meter().clone(),
    })
}

/// Result of a complete multi-worker run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub arch: Arch,
    pub metrics: Vec<MetricsRecord>,
    /// Final parameters per rank.
    pub params: Vec<Vec<Tensor>>,
    pub meters: Vec<CommMeter>,
}

impl RunOutput {
    pub fn final_model(&self) -> Model {
        Model::with_params(self.arch, self.params[0].clone()).expect("shapes come from the same arch")
    }

    pub fn last(&self) -> &MetricsRecord {
        self.metrics.last().expect("at least one record")
    }
}

/// Loads `cfg.dataset` or generates the configured synthetic set.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Ok(match &cfg.dataset {
        Some(path) => Dataset::load(path)?,
        None => data::generate(cfg.gen_spec())?,
    })
}

/// Receives rank 0's records as they are produced.
pub type Sink<'a> = &'a mut (dyn FnMut(&MetricsRecord) -> std::io::Result<()> + Send);

/// Runs every rank in its own thread. `connect[r]` builds rank r's
/// collective inside that thread, so connection setup can rendezvous.
pub fn run_threads<C, F>(cfg: &RunConfig, dataset: Arc<Dataset>, connect: Vec<F>, sink: Sink<'_>) -> Result<RunOutput>
where
    C: Collective,
    F: FnOnce() -> std::result::Result<C, CollectiveError> + Send,
{
    let mut sink = Some(sink);
    let outputs: Vec<Result<WorkerOutput>> = thread::scope(|s| {
        let handles: Vec<_> = connect
            .into_iter()
            .enumerate()
            .map(|(rank, make)| {
                let dataset = Arc::clone(&dataset);
                let sink = if rank == 0 { sink.take() } else { None };
                s.spawn(move || {
                    let mut comm = make()?;
                    match sink {
                        Some(sink) => run_worker(cfg, dataset, &mut comm, sink),
                        None => run_worker(cfg, dataset, &mut comm, &mut |_| Ok(())),
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| {
                h.join().unwrap_or_else(|_| {
                    Err(TrainError::Worker {
                        rank,
                        message: "worker thread panicked".into(),
                    })
                })
            })
            .collect()
    });
    let mut workers = Vec::with_capacity(outputs.len());
    let mut first_err = None;
    for out in outputs {
        match out {
            Ok(w) => workers.push(w),
            // peers of a failed rank only see disconnects, so prefer any
            // other error as the reported cause
            Err(e) => {
                if first_err.is_none() || matches!(first_err, Some(TrainError::Collective(_))) {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    workers.sort_by_key(|w| w.rank);
    Ok(RunOutput {
        arch: cfg.arch(),
        metrics: std::mem::take(&mut workers[0].metrics),
        params: workers.iter().map(|w| w.params.clone()).collect(),
        meters: workers.into_iter().map(|w| w.meter).collect(),
    })
}

/// Runs every rank in its own thread over ready-made communicators.
pub fn run_on<C: Collective + Send>(cfg: &RunConfig, dataset: Arc<Dataset>, comms: Vec<C>) -> Result<RunOutput> {
    let connect = comms.into_iter().map(|c| move || Ok(c)).collect();
    run_threads(cfg, dataset, connect, &mut |_| Ok(()))
}

fn timeout(cfg: &RunConfig) -> Duration {
    Duration::from_millis(cfg.timeout_ms)
}

/// In-process run on the local backend.
pub fn run_local(cfg: &RunConfig, dataset: Arc<Dataset>, sink: Sink<'_>) -> Result<RunOutput> {
    let connect = collective::local_mesh(cfg.workers, timeout(cfg)).into_iter().map(|c| move || Ok(c)).collect();
    run_threads(cfg, dataset, connect, sink)
}

/// In-process run with every rank talking TCP over loopback.
pub fn run_tcp_loopback(cfg: &RunConfig, dataset: Arc<Dataset>, sink: Sink<'_>) -> Result<RunOutput> {
    let listeners = (0..cfg.workers)
        .map(|_| TcpListener::bind(("127.0.0.1", 0)))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CollectiveError::Setup(format!("bind loopback listener: {e}")))?;
    let addrs = listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CollectiveError::Setup(e.to_string()))?;
    let t = timeout(cfg);
    let connect = listeners
        .into_iter()
        .enumerate()
        .map(|(rank, l)| {
            let addrs = addrs.clone();
            move || TcpCollective::connect(rank, l, &addrs, t)
        })
        .collect();
    run_threads(cfg, dataset, connect, sink)
}

/// Validates `cfg`, builds the dataset, and runs every rank in this process
/// on the configured backend.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    run_experiment_with(cfg, &mut |_| Ok(()))
}

pub fn run_experiment_with(cfg: &RunConfig, sink: Sink<'_>) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let dataset = Arc::new(load_dataset(&cfg)?);
    match cfg.backend {
        Backend::Local => run_local(&cfg, dataset, sink),
        Backend::Tcp => run_tcp_loopback(&cfg, dataset, sink),
    }
}
