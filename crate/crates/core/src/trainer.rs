//! Training: EMA codebook updates interleaved with straight-through gradient
//! descent on the router.
//!
//! Per step every window in the batch samples its own `k_r`, runs the
//! routed cascade, and contributes (a) its frames to the EMA statistics of
//! every codebook it touched and (b) a router gradient. The router gradient
//! treats the hard mask as if it were the scores (identity backward), so only
//! selected experts receive a signal. Parameters are written once per step.

use std::borrow::Borrow;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::engine::{ste_mask_backward, Cascade, RevqModel, RoutingMask, Router};
use crate::error::{Error, Result};
use crate::vq::{kmeans_init, Codebook, FrameBatch, DEFAULT_DECAY};

/// How many experts each training window activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KrSchedule {
    Fixed(usize),
    /// Uniform over `min..=max`.
    Range { min: usize, max: usize },
    /// Uniform over `1..=N_r-1` (just `1` when `N_r = 1`).
    Vbr,
}

impl KrSchedule {
    pub fn bounds(&self, n_experts: usize) -> (usize, usize) {
        match *self {
            KrSchedule::Fixed(k) => (k, k),
            KrSchedule::Range { min, max } => (min, max),
            KrSchedule::Vbr => (1, n_experts.saturating_sub(1).max(1)),
        }
    }

    pub fn sample(&self, n_experts: usize, rng: &mut impl Rng) -> usize {
        let (lo, hi) = self.bounds(n_experts);
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        let (lo, hi) = self.bounds(n_experts);
        if lo < 1 || hi > n_experts || lo > hi {
            return Err(Error::Config(format!(
                "k_r schedule {self} must stay within 1..={n_experts}"
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for KrSchedule {
    type Err = Error;

    /// `vbr`, a single count like `3`, or a range like `1..4`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid k_r schedule {s:?}"));
        if s.eq_ignore_ascii_case("vbr") {
            return Ok(KrSchedule::Vbr);
        }
        if let Some((a, b)) = s.split_once("..") {
            let min = a.trim().parse().map_err(|_| bad())?;
            let max = b.trim().parse().map_err(|_| bad())?;
            return Ok(KrSchedule::Range { min, max });
        }
        s.parse().map(KrSchedule::Fixed).map_err(|_| bad())
    }
}

impl std::fmt::Display for KrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KrSchedule::Fixed(k) => write!(f, "{k}"),
            KrSchedule::Range { min, max } => write!(f, "{min}..{max}"),
            KrSchedule::Vbr => write!(f, "vbr"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_windows: usize,
    pub frames_per_window: usize,
    pub decay: f64,
    pub router_lr: f64,
    pub k_r: KrSchedule,
    pub seed: u64,
    pub refresh_interval: usize,
    pub min_usage: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_windows: 16,
            frames_per_window: 16,
            decay: DEFAULT_DECAY,
            router_lr: 1e-2,
            k_r: KrSchedule::Vbr,
            seed: 0,
            refresh_interval: 50,
            min_usage: 1,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_windows",
    "frames_per_window",
    "decay",
    "router_lr",
    "k_r",
    "seed",
    "refresh_interval",
    "min_usage",
];

impl TrainConfig {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.batch_windows == 0 || self.frames_per_window == 0 {
            return Err(Error::Config(
                "batch_windows and frames_per_window must be positive".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1)", self.decay)));
        }
        if !(self.router_lr >= 0.0 && self.router_lr.is_finite()) {
            return Err(Error::Config(format!("router_lr {} must be >= 0", self.router_lr)));
        }
        self.k_r.validate(n_experts)
    }

    /// Reads the keys in [`TRAIN_KEYS`]; missing keys keep their defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            steps: kv.get_or("steps", d.steps)?,
            batch_windows: kv.get_or("batch_windows", d.batch_windows)?,
            frames_per_window: kv.get_or("frames_per_window", d.frames_per_window)?,
            decay: kv.get_or("decay", d.decay)?,
            router_lr: kv.get_or("router_lr", d.router_lr)?,
            k_r: kv.get_or("k_r", d.k_r)?,
            seed: kv.get_or("seed", d.seed)?,
            refresh_interval: kv.get_or("refresh_interval", d.refresh_interval)?,
            min_usage: kv.get_or("min_usage", d.min_usage)?,
        })
    }
}

/// Shape and initialization of a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_experts: usize,
    /// Including the frozen zero code.
    pub shared_size: usize,
    /// Including the frozen zero code.
    pub expert_size: usize,
    pub kmeans_iters: usize,
    /// Router weight standard deviation; `None` means `1/sqrt(D)`.
    pub router_scale: Option<f64>,
    /// Frames drawn for each k-means initialization.
    pub init_frames: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_experts: 7,
            shared_size: 256,
            expert_size: 256,
            kmeans_iters: 10,
            router_scale: None,
            init_frames: 8192,
            seed: 0,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "n_experts",
    "shared_size",
    "expert_size",
    "kmeans_iters",
    "router_scale",
    "init_frames",
    "model_seed",
];

impl ModelConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            n_experts: kv.get_or("n_experts", d.n_experts)?,
            shared_size: kv.get_or("shared_size", d.shared_size)?,
            expert_size: kv.get_or("expert_size", d.expert_size)?,
            kmeans_iters: kv.get_or("kmeans_iters", d.kmeans_iters)?,
            router_scale: kv.get("router_scale")?,
            init_frames: kv.get_or("init_frames", d.init_frames)?,
            seed: kv.get_or("model_seed", d.seed)?,
        })
    }
}

fn sample_rows(pool: &FrameBatch, n: usize, rng: &mut impl Rng) -> Result<FrameBatch> {
    if pool.rows() <= n {
        return Ok(pool.clone());
    }
    let picks = rand::seq::index::sample(rng, pool.rows(), n);
    let mut data = Vec::with_capacity(n * pool.dim());
    for i in picks.iter() {
        data.extend_from_slice(pool.row(i));
    }
    FrameBatch::new(n, pool.dim(), data)
}

/// Builds an untrained model from data: k-means on the frames for the shared
/// codebook, k-means on shared-stage residuals (a different random subset
/// per expert) for the experts, Gaussian router weights.
pub fn init_model(data: &[FrameBatch], cfg: &ModelConfig) -> Result<RevqModel> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot initialize a model from no data".into()));
    }
    if cfg.shared_size < 2 || cfg.expert_size < 2 {
        return Err(Error::Config("codebook sizes must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = FrameBatch::concat(data)?;
    let dim = pool.dim();
    let init = sample_rows(&pool, cfg.init_frames, &mut rng)?;
    let shared = kmeans_init(&init, cfg.shared_size - 1, cfg.kmeans_iters, rng.random())?.with_zero_code();
    let (_, residuals) = shared.quantize_frames(&pool)?;
    let experts = (0..cfg.n_experts)
        .map(|_| {
            let subset = sample_rows(&residuals, cfg.init_frames, &mut rng)?;
            Ok(kmeans_init(&subset, cfg.expert_size - 1, cfg.kmeans_iters, rng.random())?.with_zero_code())
        })
        .collect::<Result<Vec<Codebook>>>()?;
    let scale = cfg.router_scale.unwrap_or(1.0 / (dim as f64).sqrt());
    let router = Router::random(cfg.n_experts, dim, scale, rng.random())?;
    RevqModel::new(shared, experts, router)
}

/// Gradient of the per-window MSE `(1/(T*D)) * ||x - recon||^2` w.r.t. `recon`.
pub fn mse_gradient(fb: &FrameBatch, recon: &FrameBatch) -> Result<FrameBatch> {
    if fb.rows() != recon.rows() || fb.dim() != recon.dim() {
        return Err(Error::DimensionMismatch {
            expected: fb.as_slice().len(),
            actual: recon.as_slice().len(),
        });
    }
    let scale = -2.0 / fb.as_slice().len() as f64;
    FrameBatch::new(
        fb.rows(),
        fb.dim(),
        fb.as_slice()
            .iter()
            .zip(recon.as_slice())
            .map(|(x, r)| scale * (x - r))
            .collect(),
    )
}

/// `dL/dmask_i`: inner product of expert `i`'s chosen codewords with the
/// reconstruction gradient; zero for experts outside the mask.
fn mask_gradient(model: &RevqModel, cascade: &Cascade, grad: &FrameBatch) -> Vec<f64> {
    let mut out = vec![0.0; model.n_experts()];
    let qw = &cascade.window;
    for (&id, codes) in qw.mask.selected().iter().zip(&qw.expert_codes) {
        let cb = model.expert(id);
        out[id - 1] = codes
            .iter()
            .zip(grad.iter_rows())
            .map(|(&c, g)| cb.codeword(c as usize).iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
            .sum();
    }
    out
}

fn outer_gradient(dl_ds: &[f64], mean_frame: &[f64]) -> Vec<f64> {
    dl_ds
        .iter()
        .flat_map(|&g| mean_frame.iter().map(move |&m| g * m))
        .collect()
}

/// Router weight gradient `dL/dU` (`N_r x D`, row-major) for one window.
///
/// Chains `dL/dmask` from the reconstruction gradient, the straight-through
/// identity `dL/dS = dL/dmask`, and `dS_j/dU[j,:] = mean frame`.
pub fn router_gradient(
    fb: &FrameBatch,
    model: &RevqModel,
    mask: &RoutingMask,
    recon_err_grad: &FrameBatch,
) -> Result<Vec<f64>> {
    if mask.n_experts() != model.n_experts() {
        return Err(Error::DimensionMismatch {
            expected: model.n_experts(),
            actual: mask.n_experts(),
        });
    }
    if recon_err_grad.rows() != fb.rows() || recon_err_grad.dim() != fb.dim() {
        return Err(Error::DimensionMismatch {
            expected: fb.as_slice().len(),
            actual: recon_err_grad.as_slice().len(),
        });
    }
    let cascade = model.cascade(fb, mask)?;
    let dl_ds = ste_mask_backward(&mask_gradient(model, &cascade, recon_err_grad));
    Ok(outer_gradient(&dl_ds, &fb.mean_frame()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean reconstruction MSE of the batch, before the update.
    pub mse: f64,
    pub grad_norm: f64,
    /// Fraction of windows in the batch that selected each expert.
    pub selection_freq: Vec<f64>,
    pub mean_k_r: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    /// CSV with columns `step, mse, grad_norm, freq_1..freq_N`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let n = self.records.first().map(|r| r.selection_freq.len()).unwrap_or(0);
        let mut head = String::from("step,mse,grad_norm");
        for i in 1..=n {
            head.push_str(&format!(",freq_{i}"));
        }
        writeln!(out, "{head}")?;
        for r in &self.records {
            let mut line = format!("{},{},{}", r.step, r.mse, r.grad_norm);
            for f in &r.selection_freq {
                line.push_str(&format!(",{f}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

const STREAM_BATCH: u64 = 0;
const STREAM_KR: u64 = 1;
const STREAM_REFRESH: u64 = 2;

fn step_rng(seed: u64, step: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 * 4 + purpose);
    rng
}

struct WindowOutcome {
    cascade: Cascade,
    mse: f64,
    dl_ds: Vec<f64>,
    mean_frame: Vec<f64>,
}

/// Rows and codes gathered for one codebook during a step.
#[derive(Default)]
struct Pool {
    rows: Vec<f64>,
    codes: Vec<u32>,
}

impl Pool {
    fn push(&mut self, fb: &FrameBatch, codes: &[u32]) {
        self.rows.extend_from_slice(fb.as_slice());
        self.codes.extend_from_slice(codes);
    }
}

/// One optimization step over `batch`. Windows are processed in parallel;
/// parameters are updated once, deterministically, at the end.
pub fn train_step<B: Borrow<FrameBatch> + Sync>(
    model: &mut RevqModel,
    batch: &[B],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let n = model.n_experts();
    let dim = model.dim();
    cfg.validate(n)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut rng = step_rng(cfg.seed, step, STREAM_KR);
    let ks: Vec<usize> = batch.iter().map(|_| cfg.k_r.sample(n, &mut rng)).collect();

    let frozen: &RevqModel = model;
    let outcomes = batch
        .par_iter()
        .zip(&ks)
        .map(|(fb, &k)| {
            let fb = fb.borrow();
            let mask = frozen.route(fb, k)?;
            let cascade = frozen.cascade(fb, &mask)?;
            let mse = fb.mse(&cascade.recon)?;
            let grad = mse_gradient(fb, &cascade.recon)?;
            let dl_ds = ste_mask_backward(&mask_gradient(frozen, &cascade, &grad));
            Ok(WindowOutcome {
                cascade,
                mse,
                dl_ds,
                mean_frame: fb.mean_frame(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let inv_b = 1.0 / batch.len() as f64;
    let mut weight_grad = vec![0.0; n * dim];
    let mut freq = vec![0.0; n];
    let mut shared_pool = Pool::default();
    let mut residual_pool = Pool::default();
    let mut expert_pools: Vec<Pool> = (0..n).map(|_| Pool::default()).collect();
    let mut mse = 0.0;
    for (fb, out) in batch.iter().zip(&outcomes) {
        mse += out.mse * inv_b;
        for (g, v) in weight_grad.iter_mut().zip(outer_gradient(&out.dl_ds, &out.mean_frame)) {
            *g += v * inv_b;
        }
        let qw = &out.cascade.window;
        shared_pool.push(fb.borrow(), &qw.shared_codes);
        residual_pool.push(&out.cascade.shared_residual, &[]);
        for ((&id, codes), input) in qw
            .mask
            .selected()
            .iter()
            .zip(&qw.expert_codes)
            .zip(&out.cascade.stage_inputs)
        {
            freq[id - 1] += inv_b;
            expert_pools[id - 1].push(input, codes);
        }
    }
    let grad_norm = weight_grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    model.router_mut().descend(&weight_grad, cfg.router_lr)?;
    model
        .shared_mut()
        .ema_update_rows(&shared_pool.rows, dim, &shared_pool.codes, cfg.decay)?;
    for (i, pool) in expert_pools.iter().enumerate() {
        if !pool.codes.is_empty() {
            model
                .expert_mut(i + 1)
                .ema_update_rows(&pool.rows, dim, &pool.codes, cfg.decay)?;
        }
    }

    if cfg.refresh_interval > 0 && (step + 1).is_multiple_of(cfg.refresh_interval) {
        let mut rng = step_rng(cfg.seed, step, STREAM_REFRESH);
        model
            .shared_mut()
            .refresh_rows(&shared_pool.rows, dim, cfg.min_usage, rng.random())?;
        for (i, pool) in expert_pools.iter().enumerate() {
            let rows = if pool.codes.is_empty() {
                &residual_pool.rows
            } else {
                &pool.rows
            };
            model
                .expert_mut(i + 1)
                .refresh_rows(rows, dim, cfg.min_usage, rng.random())?;
        }
    }

    Ok(StepRecord {
        step,
        mse,
        grad_norm,
        selection_freq: freq,
        mean_k_r: ks.iter().sum::<usize>() as f64 * inv_b,
    })
}

/// Runs `cfg.steps` steps, each on `batch_windows` windows drawn uniformly
/// (with replacement) from `data`.
pub fn train(cfg: &TrainConfig, data: &[FrameBatch], init: RevqModel) -> Result<(RevqModel, TrainHistory)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    cfg.validate(init.n_experts())?;
    for (i, w) in data.iter().enumerate() {
        if w.dim() != init.dim() || w.rows() != cfg.frames_per_window {
            return Err(Error::InvalidArgument(format!(
                "window {i} is {}x{}, expected {}x{}",
                w.rows(),
                w.dim(),
                cfg.frames_per_window,
                init.dim()
            )));
        }
    }
    let mut model = init;
    let mut history = TrainHistory::default();
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step, STREAM_BATCH);
        let batch: Vec<&FrameBatch> = (0..cfg.batch_windows)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        history.records.push(train_step(&mut model, &batch, cfg, step)?);
    }
    Ok((model, history))
}

/// One Gaussian cluster of windows.
///
/// Frames are `mean + scale * z` with `z` isotropic when `basis` is empty,
/// otherwise `z = sum_i g_i * basis_i` over the rows of `basis`
/// (`rank x D`, row-major) with standard normal `g_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMode {
    pub mean: Vec<f64>,
    pub scale: f64,
    pub weight: f64,
    pub basis: Vec<f64>,
}

/// Mixture of Gaussian modes; each window is drawn from a single mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub modes: Vec<SynthMode>,
    pub dim: usize,
    pub frames_per_window: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.dim == 0 || self.frames_per_window == 0 {
            return Err(Error::InvalidArgument(
                "synthetic dataset needs modes, D >= 1 and T >= 1".into(),
            ));
        }
        let mut total = 0.0;
        for m in &self.modes {
            if m.mean.len() != self.dim || m.basis.len() % self.dim != 0 {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: m.mean.len(),
                });
            }
            if !(m.weight > 0.0) || !(m.scale >= 0.0) || m.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "mode weights must be positive and scales nonnegative".into(),
                ));
            }
            total += m.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mode weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// `n_modes` equally weighted modes with means drawn from `N(0, spread^2)`
    /// and scales spaced evenly over `scales`.
    pub fn clustered(
        n_modes: usize,
        dim: usize,
        frames_per_window: usize,
        spread: f64,
        scales: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = (0..n_modes)
            .map(|i| {
                let t = if n_modes > 1 { i as f64 / (n_modes - 1) as f64 } else { 0.0 };
                SynthMode {
                    mean: (0..dim).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect(),
                    scale: scales.0 + t * (scales.1 - scales.0),
                    weight: 1.0 / n_modes as f64,
                    basis: Vec::new(),
                }
            })
            .collect();
        let spec = Self {
            modes,
            dim,
            frames_per_window,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Confines each mode's spread to its own random `rank`-dimensional
    /// subspace (unit-norm Gaussian directions).
    pub fn with_subspaces(mut self, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.dim;
        for m in &mut self.modes {
            m.basis.clear();
            for _ in 0..rank {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                m.basis.extend(v.iter().map(|x| x / norm));
            }
        }
        self
    }
}

/// Windows drawn from `spec`, with the mode index of each window.
pub fn synth_dataset_with_modes(
    spec: &SynthSpec,
    n_windows: usize,
    seed: u64,
) -> Result<(Vec<FrameBatch>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chooser = WeightedIndex::new(spec.modes.iter().map(|m| m.weight))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut windows = Vec::with_capacity(n_windows);
    let mut labels = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let m = chooser.sample(&mut rng);
        let mode = &spec.modes[m];
        let mut data = Vec::with_capacity(spec.frames_per_window * spec.dim);
        for _ in 0..spec.frames_per_window {
            if mode.basis.is_empty() {
                for &mu in &mode.mean {
                    data.push(mu + mode.scale * rng.sample::<f64, _>(StandardNormal));
                }
            } else {
                let start = data.len();
                data.extend_from_slice(&mode.mean);
                for dir in mode.basis.chunks_exact(spec.dim) {
                    let g: f64 = rng.sample(StandardNormal);
                    for (x, b) in data[start..].iter_mut().zip(dir) {
                        *x += mode.scale * g * b;
                    }
                }
            }
        }
        windows.push(FrameBatch::new(spec.frames_per_window, spec.dim, data)?);
        labels.push(m);
    }
    Ok((windows, labels))
}

pub fn synth_dataset(spec: &SynthSpec, n_windows: usize, seed: u64) -> Result<Vec<FrameBatch>> {
    Ok(synth_dataset_with_modes(spec, n_windows, seed)?.0)
}

/// Splits off the last tenth of the windows (at least one) as held-out data.
pub fn holdout_split(data: &[FrameBatch]) -> (&[FrameBatch], &[FrameBatch]) {
    let held = (data.len() / 10).max(1).min(data.len());
    data.split_at(data.len() - held)
}
