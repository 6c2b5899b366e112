//! Inner and outer optimizers.
//!
//! [`AdamW`] runs the local steps. The outer updates are:
//! - [`nesterov_outer`]: DiLoCo's step on the averaged pseudo-gradient;
//! - [`decoupled_outer_round`]: outer momentum is split in DCT space, only
//!   the top-k part of each chunk is exchanged, and the rest stays local;
//! - [`demo_step`]: the same split applied to raw gradients every step.
//!
//! Pseudo-gradients are oriented as descent directions,
//! `g = anchor - theta`, so a positive outer learning rate moves the anchor
//! towards where the inner steps went.

use thiserror::Error;

use crate::collective::{Collective, CollectiveError};
use crate::dct::{self, CompressedMomentum, DctError, FreqAccumulator};
use crate::tensor::{ChunkGrid, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dct(#[from] DctError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("replica shape drift: {0}")]
    ShapeDrift(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay, one instance per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl AdamW {
    pub fn new(shape: &[usize], config: AdamWConfig) -> Self {
        Self {
            config,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `theta` in place. `lr_scale` multiplies the configured
    /// learning rate (warm-up).
    pub fn step(&mut self, theta: &mut Tensor, grad: &Tensor, lr_scale: f32) -> Result<()> {
        if theta.shape() != grad.shape() || theta.shape() != self.m.shape() {
            return Err(TensorError::ShapeMismatch {
                left: theta.shape().to_vec(),
                right: grad.shape().to_vec(),
            }
            .into());
        }
        grad.ensure_finite("AdamW gradient")?;
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let lr = lr * lr_scale;
        let bc1 = (1.0 - f64::from(beta1).powf(self.step as f64)) as f32;
        let bc2 = (1.0 - f64::from(beta2).powf(self.step as f64)) as f32;
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((t, &g), m), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *t = *t - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * *t;
        }
        theta.ensure_finite("AdamW update")?;
        Ok(())
    }
}

/// Nesterov outer step: `momentum' = beta * momentum + delta`,
/// `theta' = theta_prev - lr * (delta + beta * momentum')`.
pub fn nesterov_outer(
    theta_prev: &Tensor,
    delta: &Tensor,
    momentum: &Tensor,
    beta: f32,
    lr: f32,
) -> Result<(Tensor, Tensor)> {
    let momentum = Tensor::axpy(beta, momentum, delta)?;
    let step = Tensor::axpy(beta, &momentum, delta)?;
    let theta = Tensor::axpy(-lr, &step, theta_prev)?;
    Ok((theta, momentum))
}

/// Per-worker residual momentum, chunked for top-k extraction.
#[derive(Debug, Clone)]
pub struct MomentumCompressor {
    pub beta: f32,
    grids: Vec<ChunkGrid>,
    ks: Vec<usize>,
    residual: Vec<Tensor>,
}

impl MomentumCompressor {
    /// `chunk_edge` is the maximum block edge on every axis; `k` is capped at
    /// each tensor's chunk volume.
    pub fn new(shapes: &[Vec<usize>], chunk_edge: usize, k: usize, beta: f32) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) && beta != 0.0 {
            return Err(OptimError::InvalidHyper(format!("beta = {beta} outside [0, 1)")));
        }
        if k == 0 {
            return Err(OptimError::InvalidHyper("k must be >= 1".into()));
        }
        let grids = shapes
            .iter()
            .map(|s| ChunkGrid::with_max_edge(s, chunk_edge))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let ks = grids.iter().map(|g| k.min(g.chunk_volume())).collect();
        let residual = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            beta,
            grids,
            ks,
            residual,
        })
    }

    pub fn grids(&self) -> &[ChunkGrid] {
        &self.grids
    }

    /// Effective per-chunk `k` for each tensor.
    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn residual(&self) -> &[Tensor] {
        &self.residual
    }

    pub fn residual_mut(&mut self) -> &mut [Tensor] {
        &mut self.residual
    }

    /// `m <- beta * m + g`, pull the top-k spectrum out of `m`, leave the rest.
    pub fn accumulate_and_extract(&mut self, grads: &[Tensor]) -> Result<Vec<CompressedMomentum>> {
        if grads.len() != self.residual.len() {
            return Err(OptimError::ShapeDrift(format!(
                "{} gradients for {} tensors",
                grads.len(),
                self.residual.len()
            )));
        }
        let mut qs = Vec::with_capacity(grads.len());
        for (id, (m, g)) in self.residual.iter_mut().zip(grads).enumerate() {
            let accumulated = Tensor::axpy(self.beta, m, g)?;
            let (mut q, rec) = dct::extract_top_k(&accumulated, &self.grids[id], self.ks[id])?;
            q.tensor_id = id as u16;
            *m = accumulated.sub(&rec)?;
            qs.push(q);
        }
        Ok(qs)
    }
}

/// All-gathers compressed payloads and returns, per tensor, the inverse DCT
/// of the worker-averaged coefficients.
pub fn synchronize(
    qs: &[CompressedMomentum],
    grids: &[ChunkGrid],
    sync: &mut dyn Collective,
    round: u32,
) -> Result<Vec<Tensor>> {
    let gathered = sync.all_gather(round, &dct::encode(qs))?;
    let mut accs: Vec<FreqAccumulator> = grids.iter().map(FreqAccumulator::new).collect();
    for (peer, bytes) in gathered.iter().enumerate() {
        let decoded = dct::decode(bytes, grids)?;
        if decoded.len() != grids.len() {
            return Err(OptimError::ShapeDrift(format!(
                "rank {peer} sent {} tensors, expected {}",
                decoded.len(),
                grids.len()
            )));
        }
        for q in &decoded {
            accs[q.tensor_id as usize].add(q)?;
        }
    }
    let inv_w = 1.0 / sync.world_size() as f64;
    accs.iter_mut()
        .map(|acc| {
            acc.scale(inv_w);
            Ok(acc.to_tensor()?)
        })
        .collect()
}

/// Outer state of the decoupled-momentum method.
#[derive(Debug, Clone)]
pub struct OuterState {
    pub momentum: MomentumCompressor,
    pub alpha: f32,
    pub lr: f32,
}

impl OuterState {
    pub fn new(shapes: &[Vec<usize>], chunk_edge: usize, k: usize, beta: f32, alpha: f32, lr: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(OptimError::InvalidHyper(format!("alpha = {alpha} outside [0, 1]")));
        }
        Ok(Self {
            momentum: MomentumCompressor::new(shapes, chunk_edge, k, beta)?,
            alpha,
            lr,
        })
    }
}

/// One synchronization of the decoupled-momentum method for one worker.
///
/// `params` holds the parameters after the inner phase and is overwritten
/// with the new round-start parameters; `anchor` holds the previous ones.
pub fn decoupled_outer_round(
    params: &mut [Tensor],
    anchor: &[Tensor],
    outer: &mut OuterState,
    sync: &mut dyn Collective,
    round: u32,
) -> Result<()> {
    if params.len() != anchor.len() {
        return Err(OptimError::ShapeDrift(format!(
            "{} parameters, {} anchors",
            params.len(),
            anchor.len()
        )));
    }
    let pseudo: Vec<Tensor> = anchor
        .iter()
        .zip(params.iter())
        .map(|(a, p)| a.sub(p))
        .collect::<std::result::Result<_, _>>()?;
    let qs = outer.momentum.accumulate_and_extract(&pseudo)?;
    let shared = synchronize(&qs, outer.momentum.grids(), sync, round)?;

    let (alpha, beta, lr) = (outer.alpha, outer.momentum.beta, outer.lr);
    let residual = outer.momentum.residual_mut();
    for (i, q_t) in shared.iter().enumerate() {
        residual[i] = Tensor::axpy(alpha, q_t, &residual[i])?;
        let g = pseudo[i].data();
        let m = residual[i].data();
        let q = q_t.data();
        let out: Vec<f32> = (0..g.len())
            .map(|j| {
                let step = alpha * g[j] + alpha * beta * m[j] + (1.0 - alpha) * q[j];
                anchor[i].data()[j] - lr * step
            })
            .collect();
        params[i] = Tensor::new(anchor[i].shape().to_vec(), out)?;
    }
    Ok(())
}

/// One DeMo step: momentum on the raw gradient, top-k exchange, and
/// `theta <- theta - lr * Q`.
pub fn demo_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    momentum: &mut MomentumCompressor,
    lr: f32,
    sync: &mut dyn Collective,
    round: u32,
) -> Result<()> {
    let qs = momentum.accumulate_and_extract(grads)?;
    let shared = synchronize(&qs, momentum.grids(), sync, round)?;
    for (p, q) in params.iter_mut().zip(&shared) {
        *p = Tensor::axpy(-lr, q, p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::{local_mesh, DEFAULT_TIMEOUT};

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut opt = AdamW::new(&[3], AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut theta = t(&[1., -2., 3.]);
        opt.step(&mut theta, &Tensor::zeros(&[3]), 1.0).unwrap();
        assert_eq!(theta.data(), &[1., -2., 3.]);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&[1], cfg);
        let mut theta = t(&[0.]);
        opt.step(&mut theta, &t(&[1.]), 1.0).unwrap();
        // m_hat = v_hat = 1
        assert!((theta.data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adamw_decay_only() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(&[1], cfg);
        let mut theta = t(&[1.]);
        opt.step(&mut theta, &t(&[0.]), 1.0).unwrap();
        assert!((theta.data()[0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn adamw_rejects_bad_gradients() {
        let mut opt = AdamW::new(&[2], AdamWConfig::default());
        let mut theta = Tensor::zeros(&[2]);
        assert!(opt.step(&mut theta, &Tensor::zeros(&[3]), 1.0).is_err());
        let mut bad = Tensor::zeros(&[2]);
        bad.data_mut()[0] = f32::NAN;
        assert!(opt.step(&mut theta, &bad, 1.0).is_err());
    }

    #[test]
    fn nesterov_examples() {
        let prev = t(&[1., 2.]);
        let delta = t(&[0.5, -1.]);
        let (theta, mom) = nesterov_outer(&prev, &delta, &Tensor::zeros(&[2]), 0.0, 0.5).unwrap();
        assert_eq!(theta.data(), &[0.75, 2.5]);
        assert_eq!(mom.data(), delta.data());

        // delta = 0: theta' = theta - lr * beta^2 * m
        let m = t(&[2., -4.]);
        let (theta, _) = nesterov_outer(&prev, &Tensor::zeros(&[2]), &m, 0.5, 1.0).unwrap();
        assert_eq!(theta.data(), &[0.5, 3.0]);

        // constant delta 1, beta 0.9, lr 1: displacements 1.9 then 2.71
        let one = t(&[1.]);
        let (th1, m1) = nesterov_outer(&t(&[0.]), &one, &t(&[0.]), 0.9, 1.0).unwrap();
        assert!((th1.data()[0] + 1.9).abs() < 1e-6);
        let (th2, _) = nesterov_outer(&th1, &one, &m1, 0.9, 1.0).unwrap();
        assert!((th2.data()[0] - th1.data()[0] + 2.71).abs() < 1e-5);
    }

    #[test]
    fn hyperparameter_ranges() {
        let shapes = vec![vec![8]];
        assert!(OuterState::new(&shapes, 4, 2, 0.9, 1.5, 1.0).is_err());
        assert!(OuterState::new(&shapes, 4, 2, 1.0, 0.5, 1.0).is_err());
        assert!(OuterState::new(&shapes, 4, 0, 0.9, 0.5, 1.0).is_err());
        let st = OuterState::new(&shapes, 4, 9, 0.9, 0.5, 1.0).unwrap();
        assert_eq!(st.momentum.ks(), &[4]);
    }

    #[test]
    fn demo_zero_gradient_is_fixed_point() {
        let mut comm = local_mesh(1, DEFAULT_TIMEOUT).pop().unwrap();
        let mut mom = MomentumCompressor::new(&[vec![8]], 8, 2, 0.9).unwrap();
        let mut params = vec![t(&[1., 2., 3., 4., 5., 6., 7., 8.])];
        let before = params.clone();
        demo_step(&mut params, &[Tensor::zeros(&[8])], &mut mom, 0.1, &mut comm, 0).unwrap();
        assert_eq!(params, before);
        assert_eq!(mom.residual()[0], Tensor::zeros(&[8]));
    }

    #[test]
    fn demo_lossless_single_worker_is_heavy_ball_step() {
        let mut comm = local_mesh(1, DEFAULT_TIMEOUT).pop().unwrap();
        let mut mom = MomentumCompressor::new(&[vec![4]], 4, 4, 0.5).unwrap();
        let m0 = t(&[1., -1., 2., 0.]);
        mom.residual_mut()[0] = m0.clone();
        let g = t(&[0.5, 0.5, -1., 2.]);
        let mut params = vec![t(&[0., 0., 0., 0.])];
        demo_step(&mut params, std::slice::from_ref(&g), &mut mom, 0.1, &mut comm, 0).unwrap();
        let want = [-0.1, 0.0, 0.0, -0.2]; // -lr * (beta m + g)
        for (a, b) in params[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(mom.residual()[0].max_abs() < 1e-6);
    }
}
