//! Single-codebook vector quantization.
//!
//! Squared Euclidean nearest-neighbour assignment, k-means++ seeding with
//! Lloyd refinement, exponential-moving-average codeword updates and
//! dead-code refresh. A codebook may carry a frozen all-zeros codeword at
//! index 0; it is never moved by training, so quantizing against such a
//! codebook can never increase the residual energy.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::le;

/// Floor applied to EMA counts before dividing.
pub const EMA_EPSILON: f64 = 1e-5;
/// Default EMA decay for codebook training.
pub const DEFAULT_DECAY: f64 = 0.99;

/// `T` frames of a `D`-dimensional latent, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FrameBatch {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "frame batch must have T >= 1 and D >= 1 (got T={rows}, D={dim})"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame batch"));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        assert!(rows > 0 && dim > 0, "empty frame batch");
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    /// Stacks the rows of several batches with a common dimension.
    pub fn concat(batches: &[FrameBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero batches".into()))?;
        let mut data = Vec::new();
        for b in batches {
            if b.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    actual: b.dim,
                });
            }
            data.extend_from_slice(&b.data);
        }
        Ok(Self {
            rows: data.len() / first.dim,
            dim: first.dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Time average of the frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for row in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(self.rows, self.dim, self.data.iter().map(|v| v * alpha).collect())
    }

    /// Mean squared difference over all `T x D` entries.
    pub fn mse(&self, other: &FrameBatch) -> Result<f64> {
        if self.rows != other.rows || self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        Ok(squared_distance(&self.data, &other.data) / self.data.len() as f64)
    }

    /// Mean squared value over all entries.
    pub fn mean_energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of quantizing one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub codeword: Vec<f64>,
    pub residual: Vec<f64>,
}

/// `K` codewords of dimension `D` together with their EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    codewords: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    usage: Vec<u64>,
    zero_code: bool,
}

impl Codebook {
    /// Builds a codebook from `size x dim` row-major codewords. EMA counts
    /// start at 1 and EMA sums at the codewords themselves.
    pub fn from_codewords(size: usize, dim: usize, codewords: Vec<f64>) -> Result<Self> {
        if size < 2 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs K >= 2 and D >= 1 (got K={size}, D={dim})"
            )));
        }
        if codewords.len() != size * dim {
            return Err(Error::DimensionMismatch {
                expected: size * dim,
                actual: codewords.len(),
            });
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codewords"));
        }
        Ok(Self {
            size,
            dim,
            ema_sums: codewords.clone(),
            codewords,
            ema_counts: vec![1.0; size],
            usage: vec![0; size],
            zero_code: false,
        })
    }

    /// Prepends a frozen all-zeros codeword at index 0, shifting the others up by one.
    pub fn with_zero_code(self) -> Self {
        if self.zero_code {
            return self;
        }
        let dim = self.dim;
        let mut codewords = vec![0.0; dim];
        codewords.extend_from_slice(&self.codewords);
        let mut ema_sums = vec![0.0; dim];
        ema_sums.extend_from_slice(&self.ema_sums);
        let mut ema_counts = vec![1.0];
        ema_counts.extend_from_slice(&self.ema_counts);
        let mut usage = vec![0];
        usage.extend_from_slice(&self.usage);
        Self {
            size: self.size + 1,
            dim,
            codewords,
            ema_counts,
            ema_sums,
            usage,
            zero_code: true,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when codeword 0 is the frozen all-zeros code.
    pub fn has_zero_code(&self) -> bool {
        self.zero_code
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.codewords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    fn is_frozen(&self, i: usize) -> bool {
        self.zero_code && i == 0
    }

    /// Nearest codeword by squared distance, lowest index on ties. No validation.
    #[inline]
    pub(crate) fn nearest_index(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, cw) in self.codewords.chunks_exact(self.dim).enumerate() {
            let d = squared_distance(v, cw);
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        best
    }

    pub fn nearest_code(&self, v: &[f64]) -> Result<Assignment> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("query vector"));
        }
        let index = self.nearest_index(v);
        let codeword = self.codeword(index).to_vec();
        let residual = v.iter().zip(&codeword).map(|(a, b)| a - b).collect();
        Ok(Assignment {
            index,
            codeword,
            residual,
        })
    }

    /// Row-wise nearest-code assignment. Returns codes and residual frames.
    pub fn quantize_frames(&self, fb: &FrameBatch) -> Result<(Vec<u32>, FrameBatch)> {
        self.check_dim(fb.dim())?;
        let mut codes = Vec::with_capacity(fb.rows());
        let mut residual = Vec::with_capacity(fb.as_slice().len());
        for row in fb.iter_rows() {
            let i = self.nearest_index(row);
            codes.push(i as u32);
            residual.extend(row.iter().zip(self.codeword(i)).map(|(a, b)| a - b));
        }
        Ok((
            codes,
            FrameBatch {
                rows: fb.rows(),
                dim: fb.dim(),
                data: residual,
            },
        ))
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: dim,
            });
        }
        Ok(())
    }

    /// One EMA step over a batch whose rows were assigned `codes`.
    ///
    /// `counts[i] <- decay*counts[i] + (1-decay)*n_i`, likewise for the sums,
    /// then `codeword[i] = sums[i] / max(counts[i], EMA_EPSILON)`. The frozen
    /// zero code keeps its count but its sum and codeword stay at zero.
    pub fn ema_update(&mut self, fb: &FrameBatch, codes: &[u32], decay: f64) -> Result<()> {
        self.ema_update_rows(fb.as_slice(), fb.dim(), codes, decay)
    }

    pub(crate) fn ema_update_rows(
        &mut self,
        rows: &[f64],
        dim: usize,
        codes: &[u32],
        decay: f64,
    ) -> Result<()> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay must lie in (0, 1), got {decay}"
            )));
        }
        self.check_dim(dim)?;
        if rows.len() != codes.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: codes.len(),
                actual: rows.len() / dim,
            });
        }
        let mut counts = vec![0u64; self.size];
        let mut sums = vec![0.0; self.size * dim];
        for (row, &code) in rows.chunks_exact(dim).zip(codes) {
            let c = code as usize;
            if c >= self.size {
                return Err(Error::CodeOutOfRange {
                    code: code as u64,
                    size: self.size,
                });
            }
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        let gain = 1.0 - decay;
        for i in 0..self.size {
            self.ema_counts[i] = decay * self.ema_counts[i] + gain * counts[i] as f64;
            self.usage[i] += counts[i];
            if self.is_frozen(i) {
                continue;
            }
            let denom = self.ema_counts[i].max(EMA_EPSILON);
            let span = i * dim..(i + 1) * dim;
            for ((s, cw), add) in self.ema_sums[span.clone()]
                .iter_mut()
                .zip(&mut self.codewords[span.clone()])
                .zip(&sums[span])
            {
                *s = decay * *s + gain * add;
                *cw = *s / denom;
            }
        }
        Ok(())
    }

    /// Replaces every codeword used fewer than `min_usage` times since the
    /// last refresh with a randomly drawn row of `fb`, then clears usage.
    /// Returns the number of replaced codewords.
    pub fn dead_code_refresh(&mut self, fb: &FrameBatch, min_usage: u64, seed: u64) -> Result<usize> {
        self.refresh_rows(fb.as_slice(), fb.dim(), min_usage, seed)
    }

    pub(crate) fn refresh_rows(
        &mut self,
        rows: &[f64],
        dim: usize,
        min_usage: u64,
        seed: u64,
    ) -> Result<usize> {
        self.check_dim(dim)?;
        let n = rows.len() / dim;
        if n == 0 {
            return Err(Error::InvalidArgument("dead-code refresh needs frames".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut replaced = 0;
        for i in 0..self.size {
            if self.is_frozen(i) || self.usage[i] >= min_usage {
                continue;
            }
            let pick = rng.random_range(0..n);
            let src = &rows[pick * dim..(pick + 1) * dim];
            self.codewords[i * dim..(i + 1) * dim].copy_from_slice(src);
            self.ema_sums[i * dim..(i + 1) * dim].copy_from_slice(src);
            self.ema_counts[i] = 1.0;
            replaced += 1;
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        Ok(replaced)
    }

    /// Serializes as `u32 K, u32 D`, then codewords, EMA counts and EMA
    /// sums as little-endian `f32`.
    pub fn write_bytes(&self, out: &mut Vec<u8>) -> Result<()> {
        le::put_u32(out, le::to_u32(self.size, "K")?);
        le::put_u32(out, le::to_u32(self.dim, "D")?);
        le::put_f32s(out, &self.codewords);
        le::put_f32s(out, &self.ema_counts);
        le::put_f32s(out, &self.ema_sums);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + 4 * self.size * (2 * self.dim + 1));
        self.write_bytes(&mut out)?;
        Ok(out)
    }

    /// Parses a codebook; the result has no frozen zero code.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = le::Reader::new(bytes);
        let cb = Self::read(&mut r)?;
        if !r.remaining().is_empty() {
            return Err(Error::TrailingBytes(r.remaining().len()));
        }
        Ok(cb)
    }

    pub(crate) fn read(r: &mut le::Reader<'_>) -> Result<Self> {
        let size = r.u32("codebook size")? as usize;
        let dim = r.u32("codebook dimension")? as usize;
        if size < 2 || dim == 0 {
            return Err(Error::InvalidHeader(format!(
                "codebook needs K >= 2 and D >= 1 (got K={size}, D={dim})"
            )));
        }
        let n = size
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidHeader("codebook size overflow".into()))?;
        let codewords = r.f32s(n, "codewords")?;
        let ema_counts = r.f32s(size, "EMA counts")?;
        let ema_sums = r.f32s(n, "EMA sums")?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&codewords) || !finite(&ema_counts) || !finite(&ema_sums) {
            return Err(Error::NonFinite("serialized codebook"));
        }
        if ema_counts.iter().any(|&c| c < 0.0) {
            return Err(Error::InvalidHeader("negative EMA count".into()));
        }
        Ok(Self {
            size,
            dim,
            codewords,
            ema_counts,
            ema_sums,
            usage: vec![0; size],
            zero_code: false,
        })
    }

    /// Marks codeword 0 as the frozen zero code; it must already be all zeros.
    pub(crate) fn freeze_zero_code(&mut self) -> Result<()> {
        if self.codeword(0).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidHeader(
                "codeword 0 must be the all-zeros code".into(),
            ));
        }
        self.zero_code = true;
        self.ema_sums[..self.dim].iter_mut().for_each(|s| *s = 0.0);
        Ok(())
    }
}

/// k-means++ seeding followed by `iters` Lloyd iterations over the rows of
/// `samples`. Deterministic for a given seed. Empty clusters keep their
/// previous centre.
pub fn kmeans_init(samples: &FrameBatch, k: usize, iters: usize, seed: u64) -> Result<Codebook> {
    let m = samples.rows();
    let dim = samples.dim();
    if m < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least K={k} samples, got {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = samples.as_slice();
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];

    let mut centres = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; m];
    let first = rng.random_range(0..m);
    chosen[first] = true;
    centres.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..m).map(|i| squared_distance(row(i), row(first))).collect();
    while centres.len() < k * dim {
        let pick = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(&mut rng),
            // Every remaining sample coincides with a centre already.
            Err(_) => {
                let free: Vec<usize> = (0..m).filter(|&i| !chosen[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(row(i), &c));
        }
        centres.extend_from_slice(&c);
    }

    let mut cb = Codebook::from_codewords(k, dim, centres)?;
    for _ in 0..iters {
        let assign: Vec<usize> = rows
            .par_chunks(dim)
            .map(|r| cb.nearest_index(r))
            .collect();
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.chunks_exact(dim).zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut moved = false;
        for (i, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            for j in 0..dim {
                let v = sums[i * dim + j] / n as f64;
                if v != cb.codewords[i * dim + j] {
                    moved = true;
                }
                cb.codewords[i * dim + j] = v;
            }
        }
        if !moved {
            break;
        }
    }
    cb.ema_sums = cb.codewords.clone();
    Ok(cb)
}
