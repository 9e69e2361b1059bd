//! The dual-path quantizer: a shared codebook on every frame, then a routed
//! subset of expert codebooks on the residual.
//!
//! Routing happens once per window. The router scores experts on the
//! time-averaged frame, the top `k_r` scores pick *which* experts run, and
//! the experts then run in ascending index order regardless of how they
//! scored. Expert ids are 1-based throughout; codebook code ids are 0-based.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bitstream::combinatorics::{binomial, subset_unrank, MAX_POOL};
use crate::error::{Error, Result};
use crate::le;
use crate::vq::{Codebook, FrameBatch};

/// Upper bound on the number of subsets [`RevqModel::oracle_select`] enumerates.
pub const ORACLE_SUBSET_LIMIT: u64 = 100_000;

pub const MODEL_MAGIC: [u8; 4] = *b"REVQ";
pub const MODEL_VERSION: u16 = 1;

/// Bias-free linear router, one weight row per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    n_experts: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl Router {
    /// `weights` is `n_experts x dim`, row-major.
    pub fn new(n_experts: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if n_experts == 0 || dim == 0 {
            return Err(Error::InvalidArgument("router needs N_r >= 1 and D >= 1".into()));
        }
        if weights.len() != n_experts * dim {
            return Err(Error::DimensionMismatch {
                expected: n_experts * dim,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("router weights"));
        }
        Ok(Self {
            n_experts,
            dim,
            weights,
        })
    }

    /// Gaussian weights with standard deviation `scale`.
    pub fn random(n_experts: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..n_experts * dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(n_experts, dim, weights)
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight row of expert `id` (1-based).
    pub fn row(&self, id: usize) -> &[f64] {
        &self.weights[(id - 1) * self.dim..id * self.dim]
    }

    /// Scores of a single (already averaged) frame.
    pub fn score_frame(&self, frame: &[f64]) -> AffinityScores {
        AffinityScores(
            self.weights
                .chunks_exact(self.dim)
                .map(|w| w.iter().zip(frame).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// Plain gradient step `U <- U - lr * grad`.
    pub fn descend(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                actual: grad.len(),
            });
        }
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("router weights after update"));
        }
        Ok(())
    }
}

/// Per-expert affinity, one entry per expert in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityScores(pub Vec<f64>);

impl AffinityScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `S_j = (1/T) sum_t sum_d fb[t,d] * U[j,d]`, accumulated frame by frame.
pub fn affinity_scores(fb: &FrameBatch, router: &Router) -> Result<AffinityScores> {
    if fb.dim() != router.dim {
        return Err(Error::DimensionMismatch {
            expected: router.dim,
            actual: fb.dim(),
        });
    }
    let mut s = vec![0.0; router.n_experts];
    for row in fb.iter_rows() {
        for (acc, w) in s.iter_mut().zip(router.weights.chunks_exact(router.dim)) {
            *acc += w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let inv = 1.0 / fb.rows() as f64;
    s.iter_mut().for_each(|v| *v *= inv);
    Ok(AffinityScores(s))
}

/// The set of active experts of one window, always kept in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoutingMask {
    n_experts: usize,
    selected: Vec<usize>,
}

impl RoutingMask {
    pub fn new(n_experts: usize, selected: Vec<usize>) -> Result<Self> {
        if selected.len() > n_experts {
            return Err(Error::TooManyExperts {
                k: selected.len(),
                n: n_experts,
            });
        }
        let mut prev = 0;
        for &i in &selected {
            if i == 0 || i > n_experts || i <= prev {
                return Err(Error::InvalidSubset(format!(
                    "mask {selected:?} must be strictly ascending within 1..={n_experts}"
                )));
            }
            prev = i;
        }
        Ok(Self {
            n_experts,
            selected,
        })
    }

    pub fn empty(n_experts: usize) -> Self {
        Self {
            n_experts,
            selected: Vec::new(),
        }
    }

    /// The fixed strategy: experts `1..=k`.
    pub fn prefix(n_experts: usize, k: usize) -> Result<Self> {
        Self::new(n_experts, (1..=k).collect())
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn contains(&self, id: usize) -> bool {
        self.selected.binary_search(&id).is_ok()
    }

    /// Hard binary mask, one entry per expert.
    pub fn to_binary(&self) -> Vec<f64> {
        (1..=self.n_experts)
            .map(|i| if self.contains(i) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Selects the `k_r` highest scores (lowest index wins ties) and returns
/// them sorted by index, not by score.
pub fn topk_mask(scores: &AffinityScores, k_r: usize) -> Result<RoutingMask> {
    let n = scores.len();
    if k_r > n {
        return Err(Error::TooManyExperts { k: k_r, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..k_r].iter().map(|i| i + 1).collect();
    selected.sort_unstable();
    RoutingMask::new(n, selected)
}

/// Backward pass of the straight-through mask `mask = S + sg(mask - S)`:
/// the forward value is the hard mask, the Jacobian w.r.t. `S` is the identity.
pub fn ste_mask_backward(upstream_grad_wrt_mask: &[f64]) -> Vec<f64> {
    upstream_grad_wrt_mask.to_vec()
}

/// Codes of one window: the shared stage plus one row per selected expert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedWindow {
    pub mask: RoutingMask,
    pub shared_codes: Vec<u32>,
    /// One row of `T` codes per selected expert, in ascending expert order.
    pub expert_codes: Vec<Vec<u32>>,
}

impl QuantizedWindow {
    pub fn frames(&self) -> usize {
        self.shared_codes.len()
    }
}

/// Everything the cascade computed for one window.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub window: QuantizedWindow,
    /// Residual entering each selected expert, in application order.
    pub stage_inputs: Vec<FrameBatch>,
    /// Shared-stage residual, i.e. the first expert's input when one is selected.
    pub shared_residual: FrameBatch,
    /// Residual left after the last stage.
    pub residual: FrameBatch,
    pub recon: FrameBatch,
}

/// One shared codebook, an ordered pool of expert codebooks, and a router.
#[derive(Debug, Clone, PartialEq)]
pub struct RevqModel {
    shared: Codebook,
    experts: Vec<Codebook>,
    router: Router,
}

impl RevqModel {
    /// Every codebook must carry the frozen zero code, so that no stage can
    /// increase the residual energy.
    pub fn new(shared: Codebook, experts: Vec<Codebook>, router: Router) -> Result<Self> {
        let dim = shared.dim();
        if experts.is_empty() || experts.len() > MAX_POOL {
            return Err(Error::InvalidArgument(format!(
                "expert pool size must lie in 1..={MAX_POOL}, got {}",
                experts.len()
            )));
        }
        if router.n_experts() != experts.len() {
            return Err(Error::DimensionMismatch {
                expected: experts.len(),
                actual: router.n_experts(),
            });
        }
        let expert_size = experts[0].size();
        for cb in std::iter::once(&shared).chain(&experts) {
            if cb.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: cb.dim(),
                });
            }
            if !cb.has_zero_code() {
                return Err(Error::InvalidArgument(
                    "every codebook needs the frozen zero code (Codebook::with_zero_code)".into(),
                ));
            }
        }
        if experts.iter().any(|e| e.size() != expert_size) {
            return Err(Error::InvalidArgument(
                "all expert codebooks must have the same size".into(),
            ));
        }
        if router.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: router.dim(),
            });
        }
        Ok(Self {
            shared,
            experts,
            router,
        })
    }

    pub fn dim(&self) -> usize {
        self.shared.dim()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn shared_size(&self) -> usize {
        self.shared.size()
    }

    pub fn expert_size(&self) -> usize {
        self.experts[0].size()
    }

    pub fn shared(&self) -> &Codebook {
        &self.shared
    }

    pub fn experts(&self) -> &[Codebook] {
        &self.experts
    }

    /// Expert `id`, 1-based.
    pub fn expert(&self, id: usize) -> &Codebook {
        &self.experts[id - 1]
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub(crate) fn shared_mut(&mut self) -> &mut Codebook {
        &mut self.shared
    }

    pub(crate) fn expert_mut(&mut self, id: usize) -> &mut Codebook {
        &mut self.experts[id - 1]
    }

    pub(crate) fn router_mut(&mut self) -> &mut Router {
        &mut self.router
    }

    fn check_frames(&self, fb: &FrameBatch) -> Result<()> {
        if fb.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: fb.dim(),
            });
        }
        Ok(())
    }

    pub fn affinity(&self, fb: &FrameBatch) -> Result<AffinityScores> {
        affinity_scores(fb, &self.router)
    }

    /// Router decision for a window.
    pub fn route(&self, fb: &FrameBatch, k_r: usize) -> Result<RoutingMask> {
        topk_mask(&self.affinity(fb)?, k_r)
    }

    /// Routes with the top `k_r` experts, then runs the cascade.
    pub fn quantize(&self, fb: &FrameBatch, k_r: usize) -> Result<(QuantizedWindow, FrameBatch)> {
        let mask = self.route(fb, k_r)?;
        let c = self.cascade(fb, &mask)?;
        Ok((c.window, c.recon))
    }

    /// Runs the cascade with an externally chosen mask.
    pub fn quantize_with_mask(
        &self,
        fb: &FrameBatch,
        mask: &RoutingMask,
    ) -> Result<(QuantizedWindow, FrameBatch)> {
        let c = self.cascade(fb, mask)?;
        Ok((c.window, c.recon))
    }

    /// Shared stage, then each selected expert in ascending index order on
    /// the running residual.
    pub fn cascade(&self, fb: &FrameBatch, mask: &RoutingMask) -> Result<Cascade> {
        self.check_frames(fb)?;
        if mask.n_experts() != self.n_experts() {
            return Err(Error::DimensionMismatch {
                expected: self.n_experts(),
                actual: mask.n_experts(),
            });
        }
        let (shared_codes, shared_residual) = self.shared.quantize_frames(fb)?;
        let mut residual = shared_residual.clone();
        let mut stage_inputs = Vec::with_capacity(mask.k());
        let mut expert_codes = Vec::with_capacity(mask.k());
        for &id in mask.selected() {
            let (codes, next) = self.expert(id).quantize_frames(&residual)?;
            stage_inputs.push(std::mem::replace(&mut residual, next));
            expert_codes.push(codes);
        }
        let window = QuantizedWindow {
            mask: mask.clone(),
            shared_codes,
            expert_codes,
        };
        let recon = self.reconstruct(&window);
        Ok(Cascade {
            window,
            stage_inputs,
            shared_residual,
            residual,
            recon,
        })
    }

    /// Sum of the shared codeword and each selected expert codeword per frame.
    pub fn dequantize(&self, qw: &QuantizedWindow) -> Result<FrameBatch> {
        self.check_window(qw)?;
        Ok(self.reconstruct(qw))
    }

    fn check_window(&self, qw: &QuantizedWindow) -> Result<()> {
        if qw.mask.n_experts() != self.n_experts() {
            return Err(Error::DimensionMismatch {
                expected: self.n_experts(),
                actual: qw.mask.n_experts(),
            });
        }
        if qw.expert_codes.len() != qw.mask.k() {
            return Err(Error::InconsistentStream(format!(
                "{} expert code rows for {} selected experts",
                qw.expert_codes.len(),
                qw.mask.k()
            )));
        }
        let t = qw.shared_codes.len();
        if t == 0 {
            return Err(Error::InvalidArgument("window has no frames".into()));
        }
        let check = |codes: &[u32], size: usize| -> Result<()> {
            if codes.len() != t {
                return Err(Error::DimensionMismatch {
                    expected: t,
                    actual: codes.len(),
                });
            }
            match codes.iter().find(|&&c| c as usize >= size) {
                Some(&c) => Err(Error::CodeOutOfRange {
                    code: c as u64,
                    size,
                }),
                None => Ok(()),
            }
        };
        check(&qw.shared_codes, self.shared_size())?;
        for row in &qw.expert_codes {
            check(row, self.expert_size())?;
        }
        Ok(())
    }

    fn reconstruct(&self, qw: &QuantizedWindow) -> FrameBatch {
        let dim = self.dim();
        let t = qw.shared_codes.len();
        let mut out = Vec::with_capacity(t * dim);
        for (frame, &code) in qw.shared_codes.iter().enumerate() {
            let start = out.len();
            out.extend_from_slice(self.shared.codeword(code as usize));
            for (&id, codes) in qw.mask.selected().iter().zip(&qw.expert_codes) {
                let cw = self.expert(id).codeword(codes[frame] as usize);
                for (o, c) in out[start..].iter_mut().zip(cw) {
                    *o += c;
                }
            }
        }
        FrameBatch::new(t, dim, out).expect("reconstruction of valid codes is finite")
    }

    /// Reconstruction MSE of one window under `mask`.
    pub fn mask_mse(&self, fb: &FrameBatch, mask: &RoutingMask) -> Result<f64> {
        let (_, recon) = self.quantize_with_mask(fb, mask)?;
        fb.mse(&recon)
    }

    /// Exhaustive search over all `k_r`-subsets for the lowest reconstruction
    /// MSE; ties go to the lexicographically smallest subset.
    pub fn oracle_select(&self, fb: &FrameBatch, k_r: usize) -> Result<(RoutingMask, f64)> {
        let n = self.n_experts();
        if k_r > n {
            return Err(Error::TooManyExperts { k: k_r, n });
        }
        let count = binomial(n, k_r);
        if count > ORACLE_SUBSET_LIMIT {
            return Err(Error::EnumerationLimit {
                n,
                k: k_r,
                count,
                limit: ORACLE_SUBSET_LIMIT,
            });
        }
        let mut best: Option<(RoutingMask, f64)> = None;
        for rank in 0..count {
            let mask = RoutingMask::new(n, subset_unrank(rank, n, k_r)?)?;
            let err = self.mask_mse(fb, &mask)?;
            if best.as_ref().is_none_or(|(_, e)| err < *e) {
                best = Some((mask, err));
            }
        }
        Ok(best.expect("at least one subset"))
    }

    /// Serializes the model: magic `REVQ`, `u16` version, `u32` D, N_r,
    /// K_shared, K_expert, the shared and expert codebooks, then the router.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        le::put_u16(&mut out, MODEL_VERSION);
        le::put_u32(&mut out, le::to_u32(self.dim(), "D")?);
        le::put_u32(&mut out, le::to_u32(self.n_experts(), "N_r")?);
        le::put_u32(&mut out, le::to_u32(self.shared_size(), "K_shared")?);
        le::put_u32(&mut out, le::to_u32(self.expert_size(), "K_expert")?);
        self.shared.write_bytes(&mut out)?;
        for e in &self.experts {
            e.write_bytes(&mut out)?;
        }
        le::put_f32s(&mut out, self.router.weights());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = le::Reader::new(bytes);
        let magic = r.array4("model magic")?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            });
        }
        let version = r.u16("model version")?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32("D")? as usize;
        let n_experts = r.u32("N_r")? as usize;
        let k_shared = r.u32("K_shared")? as usize;
        let k_expert = r.u32("K_expert")? as usize;
        if n_experts == 0 || n_experts > MAX_POOL {
            return Err(Error::InvalidHeader(format!("N_r = {n_experts}")));
        }
        let mut read_cb = |size: usize| -> Result<Codebook> {
            let mut cb = Codebook::read(&mut r)?;
            if cb.size() != size || cb.dim() != dim {
                return Err(Error::InvalidHeader(format!(
                    "codebook is {}x{}, header says {size}x{dim}",
                    cb.size(),
                    cb.dim()
                )));
            }
            cb.freeze_zero_code()?;
            Ok(cb)
        };
        let shared = read_cb(k_shared)?;
        let experts = (0..n_experts)
            .map(|_| read_cb(k_expert))
            .collect::<Result<Vec<_>>>()?;
        let weights = r.f32s(n_experts * dim, "router weights")?;
        if !r.remaining().is_empty() {
            return Err(Error::TrailingBytes(r.remaining().len()));
        }
        Self::new(shared, experts, Router::new(n_experts, dim, weights)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
