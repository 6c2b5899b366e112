//! Dense `f32` tensors, axis-aligned chunk grids, and the handful of
//! elementwise operations the optimizers need.
//!
//! Layout is row-major everywhere. Chunks are visited in lexicographic order
//! of their chunk coordinates and elements inside a chunk are row-major, so a
//! flat position inside chunk `c` means the same thing on every worker.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized axis")]
    EmptyAxis(Vec<usize>),
    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },
    #[error("invalid chunk grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Shape plus a row-major `f32` buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(data: &[f32], context: &'static str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { context, index }),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::EmptyAxis(shape));
        }
        if volume(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "zeros: empty shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; volume(shape)],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for worker-private updates. Callers that write through
    /// this must keep values finite; [`Tensor::ensure_finite`] re-checks.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        check_finite(&self.data, context)
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, "elementwise")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&a| a * factor).collect();
        check_finite(&data, "scale")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `alpha * x + y`.
    pub fn axpy(alpha: f32, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        x.zip_with(y, |a, b| alpha * a + b)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm with `f64` accumulation.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// `sqrt(sum((a_i - b_i)^2))`, accumulated in `f64`.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

/// Partition of a tensor shape into equal axis-aligned blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChunkGrid {
    shape: Vec<usize>,
    chunk: Vec<usize>,
    counts: Vec<usize>,
}

impl ChunkGrid {
    pub fn new(shape: &[usize], chunk: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.len() != chunk.len() {
            return Err(TensorError::InvalidGrid(format!(
                "rank mismatch: shape {shape:?}, chunk {chunk:?}"
            )));
        }
        let mut counts = Vec::with_capacity(shape.len());
        for (axis, (&n, &s)) in shape.iter().zip(chunk).enumerate() {
            if n == 0 || s == 0 || n % s != 0 {
                return Err(TensorError::InvalidGrid(format!(
                    "axis {axis}: chunk edge {s} does not divide extent {n}"
                )));
            }
            counts.push(n / s);
        }
        Ok(Self {
            shape: shape.to_vec(),
            chunk: chunk.to_vec(),
            counts,
        })
    }

    /// Grid whose chunk edge on each axis is the largest divisor of the
    /// axis extent that does not exceed `edge`.
    pub fn with_max_edge(shape: &[usize], edge: usize) -> Result<Self> {
        if edge == 0 {
            return Err(TensorError::InvalidGrid("chunk edge must be >= 1".into()));
        }
        let chunk: Vec<usize> = shape
            .iter()
            .map(|&n| (1..=edge.min(n)).rev().find(|s| n % s == 0).unwrap_or(1))
            .collect();
        Self::new(shape, &chunk)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn chunk_shape(&self) -> &[usize] {
        &self.chunk
    }

    pub fn chunks_per_axis(&self) -> &[usize] {
        &self.counts
    }

    /// Elements per chunk.
    pub fn chunk_volume(&self) -> usize {
        volume(&self.chunk)
    }

    pub fn chunk_count(&self) -> usize {
        volume(&self.counts)
    }

    pub fn tensor_len(&self) -> usize {
        volume(&self.shape)
    }

    /// Flat tensor index of element `local` (row-major inside the chunk) of
    /// chunk number `chunk` (lexicographic over chunk coordinates).
    pub fn flat_index(&self, chunk: usize, local: usize) -> usize {
        let d = self.shape.len();
        let mut chunk_rem = chunk;
        let mut local_rem = local;
        let mut coords = vec![0usize; d];
        for axis in (0..d).rev() {
            let c = chunk_rem % self.counts[axis];
            chunk_rem /= self.counts[axis];
            let l = local_rem % self.chunk[axis];
            local_rem /= self.chunk[axis];
            coords[axis] = c * self.chunk[axis] + l;
        }
        coords
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&c, &n)| acc * n + c)
    }

    /// Chunk-major enumeration of flat indices: entry `c * V + j` is the flat
    /// index of element `j` of chunk `c`.
    pub fn index_map(&self) -> Vec<usize> {
        let v = self.chunk_volume();
        let mut map = Vec::with_capacity(self.tensor_len());
        for c in 0..self.chunk_count() {
            for j in 0..v {
                map.push(self.flat_index(c, j));
            }
        }
        map
    }

    fn check_tensor(&self, t: &Tensor) -> Result<()> {
        if t.shape() != self.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Copies every chunk out of `t`, in chunk order.
    pub fn split(&self, t: &Tensor) -> Result<Vec<Vec<f32>>> {
        self.check_tensor(t)?;
        let v = self.chunk_volume();
        let map = self.index_map();
        Ok(map
            .chunks(v)
            .map(|idx| idx.iter().map(|&i| t.data[i]).collect())
            .collect())
    }

    /// Inverse of [`ChunkGrid::split`].
    pub fn assemble(&self, chunks: &[Vec<f32>]) -> Result<Tensor> {
        let v = self.chunk_volume();
        if chunks.len() != self.chunk_count() || chunks.iter().any(|c| c.len() != v) {
            return Err(TensorError::InvalidGrid(format!(
                "expected {} chunks of {} values",
                self.chunk_count(),
                v
            )));
        }
        let mut data = vec![0.0f32; self.tensor_len()];
        for (idx, chunk) in self.index_map().chunks(v).zip(chunks) {
            for (&i, &x) in idx.iter().zip(chunk) {
                data[i] = x;
            }
        }
        Tensor::new(self.shape.clone(), data)
    }
}
