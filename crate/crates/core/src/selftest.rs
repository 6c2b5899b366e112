//! Quick invariant checks for the transform and the optimizers, run by
//! `lowcomm selftest`.

use std::time::Duration;

use crate::collective::local_mesh;
use crate::dct::{self, DctPlan};
use crate::optim::{self, AdamW, AdamWConfig, OuterState};
use crate::rng::Rng;
use crate::tensor::{ChunkGrid, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const SHAPES: &[&[usize]] = &[&[8], &[16], &[4, 4], &[8, 8], &[2, 3, 4], &[5, 7]];

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e}, tolerance {tol:.0e}"),
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

fn orthonormality() -> Check {
    let worst = SHAPES.iter().map(|s| DctPlan::new(s).orthogonality_error()).fold(0.0, f64::max);
    check("dct orthonormality", worst, 1e-6)
}

fn parseval_and_round_trip(rng: &mut Rng) -> Vec<Check> {
    let (mut parseval, mut round_trip) = (0.0f64, 0.0f64);
    for i in 0..300 {
        let plan = DctPlan::cached(SHAPES[i % SHAPES.len()]);
        let x: Vec<f64> = (0..plan.volume()).map(|_| rng.normal()).collect();
        let c = plan.forward_f64(&x).expect("volume matches");
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ec: f64 = c.iter().map(|v| v * v).sum();
        parseval = parseval.max((ex - ec).abs() / ex);
        round_trip = round_trip.max(rel(&plan.inverse(&c).expect("volume matches"), &x));
    }
    vec![check("dct parseval", parseval, 1e-5), check("dct round trip", round_trip, 1e-5)]
}

fn top_k_optimal(rng: &mut Rng) -> Check {
    let plan = DctPlan::new(&[8]);
    let grid = ChunkGrid::new(&[8], &[8]).expect("valid grid");
    let mut violations = 0u32;
    for case in 0..20 {
        let k = 1 + case % 7;
        let m = Tensor::from_vec(rng.normal_vec(8, 1.0)).expect("finite");
        let (_, rec) = dct::extract_top_k(&m, &grid, k).expect("k in range");
        let best = squared_error(&m, rec.data());
        let slack = 1e-6 * m.l2_norm().powi(2);
        let c = plan.forward(m.data()).expect("volume matches");
        for mask in 0u32..256 {
            if mask.count_ones() as usize != k {
                continue;
            }
            let sparse: Vec<f64> = (0..8).map(|i| if mask >> i & 1 == 1 { c[i] } else { 0.0 }).collect();
            let other: Vec<f32> = plan.inverse(&sparse).expect("volume").iter().map(|&v| v as f32).collect();
            if squared_error(&m, &other) < best - slack {
                violations += 1;
            }
        }
    }
    Check {
        name: "top-k optimality",
        passed: violations == 0,
        detail: format!("{violations} better subsets found"),
    }
}

fn squared_error(m: &Tensor, rec: &[f32]) -> f64 {
    m.data().iter().zip(rec).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum()
}

fn error_feedback(rng: &mut Rng) -> Check {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let shape = [8usize, 12];
        let grid = ChunkGrid::with_max_edge(&shape, 4 + i % 5).expect("valid grid");
        let k = 1 + i % grid.chunk_volume();
        let m = Tensor::new(shape.to_vec(), rng.normal_vec(96, 1.0)).expect("finite");
        let (q, _) = dct::extract_top_k(&m, &grid, k).expect("k in range");
        let residual = dct::subtract_selected(&m, &q).expect("shapes match");
        let plan = DctPlan::cached(grid.chunk_shape());
        for (c, chunk) in grid.split(&residual).expect("shape").iter().enumerate() {
            let spec = plan.forward(chunk).expect("volume");
            for &idx in q.chunk_entries(c).0 {
                worst = worst.max(spec[idx as usize].abs());
            }
        }
    }
    check("error feedback drains selected", worst, 1e-6)
}

fn codec_round_trip(rng: &mut Rng) -> Check {
    let grids = [ChunkGrid::with_max_edge(&[6, 10], 4).unwrap(), ChunkGrid::with_max_edge(&[9], 8).unwrap()];
    let qs: Vec<_> = grids
        .iter()
        .enumerate()
        .map(|(id, g)| {
            let m = Tensor::new(g.shape().to_vec(), rng.normal_vec(g.tensor_len(), 1.0)).unwrap();
            let (mut q, _) = dct::extract_top_k(&m, g, 2).unwrap();
            q.tensor_id = id as u16;
            q
        })
        .collect();
    let bytes = dct::encode(&qs);
    let ok = dct::decode(&bytes, &grids).map(|d| d == qs).unwrap_or(false);
    Check {
        name: "payload codec round trip",
        passed: ok,
        detail: format!("{} bytes", bytes.len()),
    }
}

fn adamw_first_step(rng: &mut Rng) -> Check {
    let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = AdamW::new(&[32], cfg);
    let theta0 = Tensor::from_vec(rng.normal_vec(32, 1.0)).unwrap();
    let grad = Tensor::from_vec(rng.normal_vec(32, 1.0)).unwrap();
    let mut theta = theta0.clone();
    opt.step(&mut theta, &grad, 1.0).unwrap();
    // the bias-corrected first step moves each weight by about lr against
    // the gradient sign
    let worst = theta0
        .data()
        .iter()
        .zip(theta.data())
        .zip(grad.data())
        .map(|((&a, &b), &g)| f64::from((a - b) - 0.01 * g.signum()).abs())
        .fold(0.0, f64::max);
    check("adamw first step", worst, 1e-5)
}

fn decoupled_matches_nesterov(rng: &mut Rng) -> Check {
    let shape = vec![4usize, 6];
    let (beta, lr) = (0.9f32, 0.7f32);
    let mut outer = OuterState::new(std::slice::from_ref(&shape), 8, 24, beta, 1.0, lr).unwrap();
    let mut comm = local_mesh(1, Duration::from_secs(5)).pop().unwrap();
    let mut anchor_a = Tensor::new(shape.clone(), rng.normal_vec(24, 1.0)).unwrap();
    let mut anchor_b = anchor_a.clone();
    let mut mom = Tensor::zeros(&shape);
    let mut worst = 0.0f64;
    for round in 1..=20 {
        let step = Tensor::new(shape.clone(), rng.normal_vec(24, 0.1)).unwrap();
        let mut params = vec![anchor_a.sub(&step).unwrap()];
        optim::decoupled_outer_round(&mut params, std::slice::from_ref(&anchor_a), &mut outer, &mut comm, round)
            .unwrap();
        let (theta, m) = optim::nesterov_outer(&anchor_b, &step, &mom, beta, lr).unwrap();
        mom = m;
        anchor_a = params.pop().unwrap();
        anchor_b = theta;
        let d: Vec<f64> = anchor_a.data().iter().map(|&v| f64::from(v)).collect();
        let n: Vec<f64> = anchor_b.data().iter().map(|&v| f64::from(v)).collect();
        worst = worst.max(rel(&d, &n));
    }
    check("alpha=1, k=V outer step equals nesterov", worst, 1e-6)
}

/// Runs every check. Deterministic for a given seed.
pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = Rng::new(seed);
    let mut out = vec![orthonormality()];
    out.extend(parseval_and_round_trip(&mut rng));
    out.push(top_k_optimal(&mut rng));
    out.push(error_feedback(&mut rng));
    out.push(codec_round_trip(&mut rng));
    out.push(adamw_first_step(&mut rng));
    out.push(decoupled_matches_nesterov(&mut rng));
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
