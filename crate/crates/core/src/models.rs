//! Small differentiable models with hand-written gradients.
//!
//! Forward and backward passes run in `f64` on a widened copy of the `f32`
//! parameters; gradients are rounded back to `f32`. Every loss is a batch
//! mean.

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("batch does not fit the model: {0}")]
    BatchMismatch(String),
    #[error("target {value} out of range 0..{limit}")]
    TargetOutOfRange { value: u32, limit: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// `0.5 * |A theta - b|^2 / n`.
    Quadratic { dim: usize },
    /// Softmax regression.
    Logistic { dim: usize, classes: usize },
    /// One tanh hidden layer.
    Mlp { dim: usize, hidden: usize, classes: usize },
    /// Next-token MLP over a one-hot window of `context` tokens.
    CharLm { vocab: usize, context: usize, hidden: usize },
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Quadratic { .. } => "quadratic",
            Arch::Logistic { .. } => "logistic",
            Arch::Mlp { .. } => "mlp",
            Arch::CharLm { .. } => "char-lm",
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, Arch::Quadratic { .. })
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Arch::Quadratic { dim } => vec![("theta", vec![dim])],
            Arch::Logistic { dim, classes } => vec![("weight", vec![dim, classes]), ("bias", vec![classes])],
            Arch::Mlp { dim, hidden, classes } => vec![
                ("w1", vec![dim, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, classes]),
                ("b2", vec![classes]),
            ],
            Arch::CharLm { vocab, context, hidden } => vec![
                ("embed", vec![context * vocab, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, vocab]),
                ("b2", vec![vocab]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// Row-major `rows x dim` features.
    Dense { x: Vec<f32>, dim: usize },
    /// Row-major `rows x context` token ids.
    Tokens { ids: Vec<u32>, context: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Vec<f32>),
    Labels(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub inputs: Inputs,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arch,
    names: Vec<String>,
    params: Vec<Tensor>,
}

struct Grads(Vec<Vec<f64>>);

impl Model {
    /// Seeded initialization; every worker calling this with the same seed
    /// gets the same replica.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, 0x1417);
        let shapes = arch.param_shapes();
        let params = shapes
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let std = match (arch, *name) {
                    (Arch::Mlp { dim, .. }, "w1") => 1.0 / (dim as f64).sqrt(),
                    (Arch::Mlp { hidden, .. }, "w2") => 1.0 / (hidden as f64).sqrt(),
                    (Arch::CharLm { context, .. }, "embed") => 1.0 / (context as f64).sqrt(),
                    (Arch::CharLm { hidden, .. }, "w2") => 1.0 / (hidden as f64).sqrt(),
                    _ => 0.0,
                };
                let data = if std == 0.0 { vec![0.0; n] } else { rng.normal_vec(n, std) };
                Tensor::new(shape.clone(), data).expect("init shapes are valid")
            })
            .collect();
        Self {
            arch,
            names: shapes.iter().map(|(n, _)| n.to_string()).collect(),
            params,
        }
    }

    /// Replaces all parameters; shapes must match the architecture.
    pub fn with_params(arch: Arch, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|((_, s), p)| p.shape() != s.as_slice()) {
            return Err(ModelError::BatchMismatch(format!(
                "parameter shapes do not match {}",
                arch.tag()
            )));
        }
        Ok(Self {
            arch,
            names: shapes.iter().map(|(n, _)| n.to_string()).collect(),
            params,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn widened(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        loss_at(self.arch, &self.widened(), batch)
    }

    /// Mean loss and its gradient with respect to every parameter tensor.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let (loss, grads, _) = run(self.arch, &self.widened(), batch, true)?;
        let grads = grads.expect("requested").0;
        let tensors = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| {
                let g32: Vec<f32> = g.into_iter().map(|v| v as f32).collect();
                Tensor::new(p.shape().to_vec(), g32).map_err(|_| ModelError::NonFinite("gradient"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, tensors))
    }

    /// Fraction of rows whose arg-max prediction equals the label.
    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        if !self.arch.is_classifier() {
            return Err(ModelError::BatchMismatch("accuracy needs a classifier".into()));
        }
        let (_, _, correct) = run(self.arch, &self.widened(), batch, false)?;
        Ok(correct as f64 / batch.rows as f64)
    }
}

/// Mean loss at `params` given in `f64`; used by finite-difference checks.
pub fn loss_at(arch: Arch, params: &[Vec<f64>], batch: &Batch) -> Result<f64> {
    run(arch, params, batch, false).map(|(l, _, _)| l)
}

pub fn perplexity(mean_ce_loss: f64) -> f64 {
    mean_ce_loss.exp()
}

fn check_rows(batch: &Batch) -> Result<()> {
    if batch.rows == 0 {
        return Err(ModelError::BatchMismatch("empty batch".into()));
    }
    let n_targets = match &batch.targets {
        Targets::Values(v) => v.len(),
        Targets::Labels(l) => l.len(),
    };
    if n_targets != batch.rows {
        return Err(ModelError::BatchMismatch(format!(
            "{} targets for {} rows",
            n_targets, batch.rows
        )));
    }
    Ok(())
}

fn dense<'a>(batch: &'a Batch, dim: usize) -> Result<&'a [f32]> {
    match &batch.inputs {
        Inputs::Dense { x, dim: d } if *d == dim && x.len() == batch.rows * dim => Ok(x),
        _ => Err(ModelError::BatchMismatch(format!("expected dense rows of width {dim}"))),
    }
}

fn labels(batch: &Batch, classes: usize) -> Result<&[u32]> {
    match &batch.targets {
        Targets::Labels(l) => {
            if let Some(&bad) = l.iter().find(|&&y| y as usize >= classes) {
                return Err(ModelError::TargetOutOfRange { value: bad, limit: classes });
            }
            Ok(l)
        }
        Targets::Values(_) => Err(ModelError::BatchMismatch("expected class labels".into())),
    }
}

/// `out[r, j] = bias[j] + sum_i input[r, i] * w[i, j]`.
fn affine(input: &[f64], rows: usize, w: &[f64], bias: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        out.extend_from_slice(bias);
        let row = &mut out[r * n_out..];
        for (i, &x) in input[r * n_in..(r + 1) * n_in].iter().enumerate() {
            if x != 0.0 {
                for (o, &wv) in row.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                    *o += x * wv;
                }
            }
        }
    }
    out
}

/// Backward of [`affine`]: accumulates `dw`, `db`, and returns `d input` if
/// asked.
fn affine_back(
    input: &[f64],
    d_out: &[f64],
    w: &[f64],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    for r in 0..rows {
        let d = &d_out[r * n_out..(r + 1) * n_out];
        for (b, &g) in db.iter_mut().zip(d) {
            *b += g;
        }
        for (i, &x) in input[r * n_in..(r + 1) * n_in].iter().enumerate() {
            if x != 0.0 {
                for (w, &g) in dw[i * n_out..(i + 1) * n_out].iter_mut().zip(d) {
                    *w += x * g;
                }
            }
        }
    }
    want_input.then(|| {
        let mut d_in = vec![0.0; rows * n_in];
        for r in 0..rows {
            let d = &d_out[r * n_out..(r + 1) * n_out];
            for i in 0..n_in {
                d_in[r * n_in + i] = w[i * n_out..(i + 1) * n_out].iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        d_in
    })
}

/// Mean cross-entropy, `d loss / d logits`, and the number of correct
/// arg-max predictions.
fn softmax_ce(logits: &[f64], rows: usize, classes: usize, y: &[u32]) -> (f64, Vec<f64>, usize) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let mut correct = 0;
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let (argmax, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        if argmax == y[r] as usize {
            correct += 1;
        }
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y[r] as usize];
        for (c, g) in grad[r * classes..(r + 1) * classes].iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *g = (p - if c == y[r] as usize { 1.0 } else { 0.0 }) * inv;
        }
    }
    (loss * inv, grad, correct)
}

fn run(arch: Arch, p: &[Vec<f64>], batch: &Batch, want_grad: bool) -> Result<(f64, Option<Grads>, usize)> {
    check_rows(batch)?;
    let shapes = arch.param_shapes();
    if p.len() != shapes.len() || p.iter().zip(&shapes).any(|(v, (_, s))| v.len() != s.iter().product::<usize>()) {
        return Err(ModelError::BatchMismatch("parameter sizes do not match architecture".into()));
    }
    let rows = batch.rows;
    let widen = |x: &[f32]| x.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
    let out = match arch {
        Arch::Quadratic { dim } => {
            let x = widen(dense(batch, dim)?);
            let Targets::Values(y) = &batch.targets else {
                return Err(ModelError::BatchMismatch("quadratic needs value targets".into()));
            };
            let theta = &p[0];
            let inv = 1.0 / rows as f64;
            let mut loss = 0.0;
            let mut g = vec![0.0; dim];
            for r in 0..rows {
                let xr = &x[r * dim..(r + 1) * dim];
                let resid: f64 = xr.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() - f64::from(y[r]);
                loss += 0.5 * resid * resid;
                if want_grad {
                    for (gi, &xi) in g.iter_mut().zip(xr) {
                        *gi += resid * xi * inv;
                    }
                }
            }
            (loss * inv, want_grad.then(|| Grads(vec![g])), 0)
        }
        Arch::Logistic { dim, classes } => {
            let x = widen(dense(batch, dim)?);
            let y = labels(batch, classes)?;
            let logits = affine(&x, rows, &p[0], &p[1], dim, classes);
            let (loss, d_logits, correct) = softmax_ce(&logits, rows, classes, y);
            let grads = want_grad.then(|| {
                let mut dw = vec![0.0; dim * classes];
                let mut db = vec![0.0; classes];
                affine_back(&x, &d_logits, &p[0], rows, dim, classes, &mut dw, &mut db, false);
                Grads(vec![dw, db])
            });
            (loss, grads, correct)
        }
        Arch::Mlp { dim, hidden, classes } => {
            let x = widen(dense(batch, dim)?);
            let y = labels(batch, classes)?;
            two_layer(&x, rows, dim, hidden, classes, y, p, want_grad, None)
        }
        Arch::CharLm { vocab, context, hidden } => {
            let ids = match &batch.inputs {
                Inputs::Tokens { ids, context: c } if *c == context && ids.len() == rows * context => ids,
                _ => return Err(ModelError::BatchMismatch(format!("expected token windows of {context}"))),
            };
            if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
                return Err(ModelError::TargetOutOfRange { value: bad, limit: vocab });
            }
            let y = labels(batch, vocab)?;
            two_layer(&[], rows, context * vocab, hidden, vocab, y, p, want_grad, Some((ids, vocab, context)))
        }
    };
    if !out.0.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    Ok(out)
}

/// tanh MLP. With `tokens`, the first layer input is the implicit one-hot
/// encoding of each window and `x` is unused.
#[allow(clippy::too_many_arguments)]
fn two_layer(
    x: &[f64],
    rows: usize,
    n_in: usize,
    hidden: usize,
    classes: usize,
    y: &[u32],
    p: &[Vec<f64>],
    want_grad: bool,
    tokens: Option<(&[u32], usize, usize)>,
) -> (f64, Option<Grads>, usize) {
    let (w1, b1, w2, b2) = (&p[0], &p[1], &p[2], &p[3]);
    let mut a = match tokens {
        None => affine(x, rows, w1, b1, n_in, hidden),
        Some((ids, vocab, context)) => {
            let mut a = Vec::with_capacity(rows * hidden);
            for r in 0..rows {
                a.extend_from_slice(b1);
                let row = &mut a[r * hidden..];
                for pos in 0..context {
                    let feature = pos * vocab + ids[r * context + pos] as usize;
                    for (o, &wv) in row.iter_mut().zip(&w1[feature * hidden..(feature + 1) * hidden]) {
                        *o += wv;
                    }
                }
            }
            a
        }
    };
    a.iter_mut().for_each(|v| *v = v.tanh());
    let h = a;
    let logits = affine(&h, rows, w2, b2, hidden, classes);
    let (loss, d_logits, correct) = softmax_ce(&logits, rows, classes, y);
    if !want_grad {
        return (loss, None, correct);
    }
    let mut dw2 = vec![0.0; hidden * classes];
    let mut db2 = vec![0.0; classes];
    let mut dh = affine_back(&h, &d_logits, w2, rows, hidden, classes, &mut dw2, &mut db2, true).expect("requested");
    for (d, &hv) in dh.iter_mut().zip(&h) {
        *d *= 1.0 - hv * hv;
    }
    let mut dw1 = vec![0.0; n_in * hidden];
    let mut db1 = vec![0.0; hidden];
    match tokens {
        None => {
            affine_back(x, &dh, w1, rows, n_in, hidden, &mut dw1, &mut db1, false);
        }
        Some((ids, vocab, context)) => {
            for r in 0..rows {
                let d = &dh[r * hidden..(r + 1) * hidden];
                for (b, &g) in db1.iter_mut().zip(d) {
                    *b += g;
                }
                for pos in 0..context {
                    let feature = pos * vocab + ids[r * context + pos] as usize;
                    for (w, &g) in dw1[feature * hidden..(feature + 1) * hidden].iter_mut().zip(d) {
                        *w += g;
                    }
                }
            }
        }
    }
    (loss, Some(Grads(vec![dw1, db1, dw2, db2])), correct)
}
