//! Chunked orthonormal DCT and top-k momentum compression.
//!
//! A tensor is cut into blocks by a [`ChunkGrid`]; every block goes through
//! a separable d-dimensional DCT-II with orthonormal scaling. Compression
//! keeps, per chunk, the `k` coefficients of largest magnitude. The inverse
//! (DCT-III, the transpose) rebuilds a dense tensor from the sparse set.
//!
//! Orthonormality matters: it makes Parseval exact, so dropping the smallest
//! coefficients is the L2-optimal `k`-term approximation inside the basis.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

use crate::tensor::{ChunkGrid, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DctError {
    #[error("chunk has {got} values, plan expects {expected}")]
    ChunkLength { expected: usize, got: usize },
    #[error("k = {k} outside 1..={volume}")]
    KOutOfRange { k: usize, volume: usize },
    #[error("frequency index {index} out of range for chunk volume {volume}")]
    IndexOutOfRange { index: u32, volume: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("malformed payload: {0}")]
    Codec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DctError>;

/// Orthonormal DCT-II basis, `s x s`, row `m` holds frequency `m`.
fn dct_matrix(s: usize) -> Vec<f64> {
    let n = s as f64;
    let mut mat = vec![0.0; s * s];
    for m in 0..s {
        let scale = if m == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for j in 0..s {
            mat[m * s + j] = scale * (PI * (2 * j + 1) as f64 * m as f64 / (2.0 * n)).cos();
        }
    }
    mat
}

/// Per-axis DCT matrices for one chunk shape.
#[derive(Debug, Clone)]
pub struct DctPlan {
    chunk: Vec<usize>,
    volume: usize,
    matrices: Vec<Vec<f64>>,
}

impl DctPlan {
    pub fn new(chunk: &[usize]) -> Self {
        assert!(
            !chunk.is_empty() && !chunk.contains(&0),
            "DctPlan: bad chunk shape {chunk:?}"
        );
        Self {
            chunk: chunk.to_vec(),
            volume: chunk.iter().product(),
            matrices: chunk.iter().map(|&s| dct_matrix(s)).collect(),
        }
    }

    /// Shared plan for `chunk`, built once per process.
    pub fn cached(chunk: &[usize]) -> Arc<DctPlan> {
        static CACHE: OnceLock<Mutex<HashMap<Vec<usize>, Arc<DctPlan>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(chunk.to_vec())
            .or_insert_with(|| Arc::new(DctPlan::new(chunk)))
            .clone()
    }

    pub fn chunk_shape(&self) -> &[usize] {
        &self.chunk
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    /// Basis matrix for `axis`, row-major `s x s`.
    pub fn matrix(&self, axis: usize) -> &[f64] {
        &self.matrices[axis]
    }

    /// `max |M^T M - I|` over all axes.
    pub fn orthogonality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (mat, &s) in self.matrices.iter().zip(&self.chunk) {
            for a in 0..s {
                for b in 0..s {
                    let dot: f64 = (0..s).map(|m| mat[m * s + a] * mat[m * s + b]).sum();
                    let target = if a == b { 1.0 } else { 0.0 };
                    worst = worst.max((dot - target).abs());
                }
            }
        }
        worst
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.volume {
            return Err(DctError::ChunkLength {
                expected: self.volume,
                got,
            });
        }
        Ok(())
    }

    fn apply(&self, buf: &mut [f64], inverse: bool) {
        let mut line = Vec::new();
        let mut out = Vec::new();
        for (axis, &s) in self.chunk.iter().enumerate() {
            if s == 1 {
                continue;
            }
            let mat = &self.matrices[axis];
            let stride: usize = self.chunk[axis + 1..].iter().product();
            let outer = self.volume / (s * stride);
            line.resize(s, 0.0);
            out.resize(s, 0.0);
            for o in 0..outer {
                for i in 0..stride {
                    let base = o * s * stride + i;
                    for (n, slot) in line.iter_mut().enumerate() {
                        *slot = buf[base + n * stride];
                    }
                    for (m, dst) in out.iter_mut().enumerate() {
                        *dst = if inverse {
                            (0..s).map(|f| mat[f * s + m] * line[f]).sum()
                        } else {
                            let row = &mat[m * s..(m + 1) * s];
                            row.iter().zip(&line).map(|(a, b)| a * b).sum()
                        };
                    }
                    for (n, &v) in out.iter().enumerate() {
                        buf[base + n * stride] = v;
                    }
                }
            }
        }
    }

    pub fn forward_f64(&self, chunk: &[f64]) -> Result<Vec<f64>> {
        self.check_len(chunk.len())?;
        let mut buf = chunk.to_vec();
        self.apply(&mut buf, false);
        Ok(buf)
    }

    /// Orthonormal DCT-II of one chunk, computed in `f64`.
    pub fn forward(&self, chunk: &[f32]) -> Result<Vec<f64>> {
        self.check_len(chunk.len())?;
        let mut buf: Vec<f64> = chunk.iter().map(|&v| f64::from(v)).collect();
        self.apply(&mut buf, false);
        Ok(buf)
    }

    /// Orthonormal DCT-III (transpose of [`DctPlan::forward`]).
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(coeffs.len())?;
        let mut buf = coeffs.to_vec();
        self.apply(&mut buf, true);
        Ok(buf)
    }
}

/// Top-k coefficients of every chunk of one tensor.
///
/// `indices` and `amplitudes` are chunk-major: entries `c * k .. (c + 1) * k`
/// belong to chunk `c`, ordered by decreasing magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMomentum {
    pub tensor_id: u16,
    pub grid: ChunkGrid,
    pub k: usize,
    pub indices: Vec<u32>,
    pub amplitudes: Vec<f32>,
}

impl CompressedMomentum {
    pub fn chunk_entries(&self, chunk: usize) -> (&[u32], &[f32]) {
        let r = chunk * self.k..(chunk + 1) * self.k;
        (&self.indices[r.clone()], &self.amplitudes[r])
    }

    pub fn encoded_len(&self) -> usize {
        compressed_size(&self.grid, self.k)
    }

    fn validate(&self) -> Result<()> {
        let v = self.grid.chunk_volume();
        if self.k == 0 || self.k > v {
            return Err(DctError::KOutOfRange { k: self.k, volume: v });
        }
        let expected = self.grid.chunk_count() * self.k;
        if self.indices.len() != expected || self.amplitudes.len() != expected {
            return Err(DctError::Codec(format!(
                "expected {expected} entries, got {} indices / {} amplitudes",
                self.indices.len(),
                self.amplitudes.len()
            )));
        }
        let mut seen = vec![false; v];
        for idx in self.indices.chunks(self.k) {
            seen.iter_mut().for_each(|s| *s = false);
            for &i in idx {
                let slot = seen
                    .get_mut(i as usize)
                    .ok_or(DctError::IndexOutOfRange { index: i, volume: v })?;
                if *slot {
                    return Err(DctError::Codec(format!("duplicate frequency index {i}")));
                }
                *slot = true;
            }
        }
        Ok(())
    }
}

/// Per-tensor header: tensor id (u16), chunk count (u32), k (u16).
pub const TENSOR_HEADER_BYTES: usize = 8;
/// One u32 index plus one f32 amplitude.
pub const ENTRY_BYTES: usize = 8;

/// Encoded size of one tensor's compressed momentum.
pub fn compressed_size(grid: &ChunkGrid, k: usize) -> usize {
    TENSOR_HEADER_BYTES + grid.chunk_count() * k * ENTRY_BYTES
}

/// Indices of the `k` largest-magnitude entries; ties go to the smaller index.
pub fn top_k_indices(coeffs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coeffs.len()).collect();
    order.sort_by(|&a, &b| {
        coeffs[b]
            .abs()
            .total_cmp(&coeffs[a].abs())
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn check_k(grid: &ChunkGrid, k: usize) -> Result<()> {
    let v = grid.chunk_volume();
    if k == 0 || k > v || k > u16::MAX as usize {
        return Err(DctError::KOutOfRange { k, volume: v });
    }
    Ok(())
}

/// Selects the top-`k` DCT coefficients of each chunk of `m` and returns them
/// with their dense reconstruction.
///
/// The reconstruction is computed from the `f32` amplitudes as transmitted,
/// so subtracting it drains exactly what peers will receive.
pub fn extract_top_k(m: &Tensor, grid: &ChunkGrid, k: usize) -> Result<(CompressedMomentum, Tensor)> {
    check_k(grid, k)?;
    let plan = DctPlan::cached(grid.chunk_shape());
    let chunks = grid.split(m)?;
    let mut indices = Vec::with_capacity(chunks.len() * k);
    let mut amplitudes = Vec::with_capacity(chunks.len() * k);
    let mut rebuilt = Vec::with_capacity(chunks.len());
    let mut sparse = vec![0.0f64; plan.volume()];
    for chunk in &chunks {
        let coeffs = plan.forward(chunk)?;
        sparse.iter_mut().for_each(|c| *c = 0.0);
        for i in top_k_indices(&coeffs, k) {
            let amp = coeffs[i] as f32;
            indices.push(i as u32);
            amplitudes.push(amp);
            sparse[i] = f64::from(amp);
        }
        rebuilt.push(plan.inverse(&sparse)?.into_iter().map(|v| v as f32).collect());
    }
    let q = CompressedMomentum {
        tensor_id: 0,
        grid: grid.clone(),
        k,
        indices,
        amplitudes,
    };
    Ok((q, grid.assemble(&rebuilt)?))
}

/// Dense tensor whose chunk spectra are exactly the entries of `q`.
pub fn reconstruct(q: &CompressedMomentum) -> Result<Tensor> {
    let mut acc = FreqAccumulator::new(&q.grid);
    acc.add(q)?;
    acc.to_tensor()
}

/// `m - reconstruct(q)`.
pub fn subtract_selected(m: &Tensor, q: &CompressedMomentum) -> Result<Tensor> {
    if m.shape() != q.grid.shape() {
        return Err(DctError::GridMismatch(format!(
            "momentum shape {:?}, payload grid {:?}",
            m.shape(),
            q.grid.shape()
        )));
    }
    Ok(m.sub(&reconstruct(q)?)?)
}

/// Dense per-chunk coefficient buffers for summing payloads from several
/// workers. Workers may pick different indices, so the sum happens in
/// frequency space and is inverted once.
#[derive(Debug, Clone)]
pub struct FreqAccumulator {
    grid: ChunkGrid,
    coeffs: Vec<f64>,
}

impl FreqAccumulator {
    pub fn new(grid: &ChunkGrid) -> Self {
        Self {
            grid: grid.clone(),
            coeffs: vec![0.0; grid.chunk_count() * grid.chunk_volume()],
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn add(&mut self, q: &CompressedMomentum) -> Result<()> {
        if q.grid != self.grid {
            return Err(DctError::GridMismatch(format!(
                "accumulator grid {:?}/{:?}, payload grid {:?}/{:?}",
                self.grid.shape(),
                self.grid.chunk_shape(),
                q.grid.shape(),
                q.grid.chunk_shape()
            )));
        }
        let v = self.grid.chunk_volume();
        for c in 0..self.grid.chunk_count() {
            let (idx, amp) = q.chunk_entries(c);
            for (&i, &a) in idx.iter().zip(amp) {
                if i as usize >= v {
                    return Err(DctError::IndexOutOfRange { index: i, volume: v });
                }
                self.coeffs[c * v + i as usize] += f64::from(a);
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.coeffs.iter_mut().for_each(|c| *c *= factor);
    }

    /// Inverse transform of every chunk, rounded to `f32`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let plan = DctPlan::cached(self.grid.chunk_shape());
        let chunks = self
            .coeffs
            .chunks(plan.volume())
            .map(|c| Ok(plan.inverse(c)?.into_iter().map(|v| v as f32).collect()))
            .collect::<Result<Vec<Vec<f32>>>>()?;
        Ok(self.grid.assemble(&chunks)?)
    }
}

/// Serializes a payload set: per tensor the 8-byte header, then for each
/// chunk `k` u32 indices followed by `k` f32 amplitudes. Little-endian.
pub fn encode(qs: &[CompressedMomentum]) -> Vec<u8> {
    let total: usize = qs.iter().map(CompressedMomentum::encoded_len).sum();
    let mut out = Vec::with_capacity(total);
    for q in qs {
        out.extend_from_slice(&q.tensor_id.to_le_bytes());
        out.extend_from_slice(&(q.grid.chunk_count() as u32).to_le_bytes());
        out.extend_from_slice(&(q.k as u16).to_le_bytes());
        for c in 0..q.grid.chunk_count() {
            let (idx, amp) = q.chunk_entries(c);
            idx.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
            amp.iter().for_each(|a| out.extend_from_slice(&a.to_le_bytes()));
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            DctError::Codec(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a payload set produced by [`encode`]. `grids[id]` is the grid of
/// tensor `id`; the encoded chunk count must agree with it.
pub fn decode(bytes: &[u8], grids: &[ChunkGrid]) -> Result<Vec<CompressedMomentum>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let tensor_id = r.u16()?;
        let chunks = r.u32()? as usize;
        let k = r.u16()? as usize;
        let grid = grids.get(tensor_id as usize).ok_or_else(|| {
            DctError::Codec(format!("unknown tensor id {tensor_id} ({} known)", grids.len()))
        })?;
        if chunks != grid.chunk_count() {
            return Err(DctError::GridMismatch(format!(
                "tensor {tensor_id}: {chunks} chunks on the wire, grid has {}",
                grid.chunk_count()
            )));
        }
        check_k(grid, k)?;
        let mut indices = Vec::with_capacity(chunks * k);
        let mut amplitudes = Vec::with_capacity(chunks * k);
        for _ in 0..chunks {
            for _ in 0..k {
                indices.push(r.u32()?);
            }
            for _ in 0..k {
                let a = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                if !a.is_finite() {
                    return Err(DctError::Codec(format!("non-finite amplitude in tensor {tensor_id}")));
                }
                amplitudes.push(a);
            }
        }
        let q = CompressedMomentum {
            tensor_id,
            grid: grid.clone(),
            k,
            indices,
            amplitudes,
        };
        q.validate()?;
        out.push(q);
    }
    Ok(out)
}
