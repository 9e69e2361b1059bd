//! Structural experiments: fixed versus adaptive expert selection, pool
//! utilization as the pool grows, and the rate/quality sweep over `k_r`.

use std::io::Write;

use rayon::prelude::*;

use crate::bitstream::{bitrate_report, StreamHeader, STREAM_VERSION};
use crate::engine::{RevqModel, RoutingMask};
use crate::error::{Error, Result};
use crate::trainer::{holdout_split, init_model, train, ModelConfig, TrainConfig};
use crate::frontend::PcmSignal;
use crate::vq::FrameBatch;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn require_data(data: &[FrameBatch]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("experiment needs at least one window".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveRow {
    pub window: usize,
    pub fixed_mse: f64,
    pub oracle_mse: f64,
    pub routed_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveReport {
    pub k_r: usize,
    pub fixed_mse: f64,
    pub oracle_mse: f64,
    pub routed_mse: f64,
    /// `100 * (fixed - oracle) / fixed`.
    pub improvement_pct: f64,
    /// `100 * (fixed - routed) / fixed`.
    pub routed_improvement_pct: f64,
    pub rows: Vec<AdaptiveRow>,
}

impl AdaptiveReport {
    /// Share of the oracle's gain over the fixed prefix that the router
    /// achieves; `None` when the oracle gains nothing.
    pub fn gap_recovered(&self) -> Option<f64> {
        let gap = self.fixed_mse - self.oracle_mse;
        (gap > 0.0).then(|| (self.fixed_mse - self.routed_mse) / gap)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "window,fixed_mse,oracle_mse,routed_mse")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.window, r.fixed_mse, r.oracle_mse, r.routed_mse)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let recovered = self
            .gap_recovered()
            .map(|g| format!("{:.1}%", 100.0 * g))
            .unwrap_or_else(|| "n/a".into());
        format!(
            "k_r={} fixed_mse={:.6} oracle_mse={:.6} routed_mse={:.6} improvement_pct={:.2} routed_improvement_pct={:.2} gap_recovered={}",
            self.k_r,
            self.fixed_mse,
            self.oracle_mse,
            self.routed_mse,
            self.improvement_pct,
            self.routed_improvement_pct,
            recovered
        )
    }
}

/// Mean MSE of the first `k_r` experts, the best `k_r`-subset, and the
/// router's choice, over `data`.
pub fn exp_adaptive(model: &RevqModel, data: &[FrameBatch], k_r: usize) -> Result<AdaptiveReport> {
    require_data(data)?;
    let fixed = RoutingMask::prefix(model.n_experts(), k_r)?;
    let rows = data
        .par_iter()
        .enumerate()
        .map(|(window, fb)| {
            let (_, oracle_mse) = model.oracle_select(fb, k_r)?;
            let routed = model.route(fb, k_r)?;
            Ok(AdaptiveRow {
                window,
                fixed_mse: model.mask_mse(fb, &fixed)?,
                oracle_mse,
                routed_mse: model.mask_mse(fb, &routed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fixed_mse = mean(rows.iter().map(|r| r.fixed_mse));
    let oracle_mse = mean(rows.iter().map(|r| r.oracle_mse));
    let routed_mse = mean(rows.iter().map(|r| r.routed_mse));
    let pct = |v: f64| {
        if fixed_mse > 0.0 {
            100.0 * (fixed_mse - v) / fixed_mse
        } else {
            0.0
        }
    };
    Ok(AdaptiveReport {
        k_r,
        fixed_mse,
        oracle_mse,
        routed_mse,
        improvement_pct: pct(oracle_mse),
        routed_improvement_pct: pct(routed_mse),
        rows,
    })
}

/// Percentage of experts the router selects at least once over `data`.
pub fn usage_pct(model: &RevqModel, data: &[FrameBatch], k_r: usize) -> Result<f64> {
    let masks = data
        .par_iter()
        .map(|fb| model.route(fb, k_r))
        .collect::<Result<Vec<_>>>()?;
    let mut used = vec![false; model.n_experts()];
    for m in &masks {
        for &id in m.selected() {
            used[id - 1] = true;
        }
    }
    Ok(100.0 * used.iter().filter(|&&u| u).count() as f64 / model.n_experts() as f64)
}

/// Mean routed MSE over `data` at `k_r`.
pub fn routed_mse(model: &RevqModel, data: &[FrameBatch], k_r: usize) -> Result<f64> {
    require_data(data)?;
    let errs = data
        .par_iter()
        .map(|fb| {
            let mask = model.route(fb, k_r)?;
            model.mask_mse(fb, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(errs.into_iter()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilizationRow {
    pub n_experts: usize,
    pub mse: f64,
    pub usage_pct: f64,
}

pub fn write_utilization_csv(rows: &[UtilizationRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "n_experts,mse,usage_pct")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.n_experts, r.mse, r.usage_pct)?;
    }
    Ok(())
}

/// Text table in the layout `N_r | MSE | Usage`.
pub fn utilization_table(rows: &[UtilizationRow]) -> String {
    let mut s = format!("{:>4} | {:>12} | {:>7}\n", "N_r", "MSE", "Usage");
    for r in rows {
        s.push_str(&format!("{:>4} | {:>12.6} | {:>6.1}%\n", r.n_experts, r.mse, r.usage_pct));
    }
    s
}

/// Trains one model per pool size on the first 90% of `data` (everything
/// else identical, seeds included) and measures held-out MSE and usage at
/// `k_r` on the last 10%.
pub fn exp_utilization(
    pool_sizes: &[usize],
    k_r: usize,
    data: &[FrameBatch],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<UtilizationRow>> {
    require_data(data)?;
    let (train_set, held_out) = holdout_split(data);
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("need at least two windows to hold one out".into()));
    }
    pool_sizes
        .iter()
        .map(|&n| {
            if k_r > n {
                return Err(Error::TooManyExperts { k: k_r, n });
            }
            let cfg = ModelConfig {
                n_experts: n,
                ..model_cfg.clone()
            };
            let (model, _) = train(train_cfg, train_set, init_model(train_set, &cfg)?)?;
            Ok(UtilizationRow {
                n_experts: n,
                mse: routed_mse(&model, held_out, k_r)?,
                usage_pct: usage_pct(&model, held_out, k_r)?,
            })
        })
        .collect()
}

/// Sample rate and block size that turn frame counts into seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateContext {
    pub sample_rate: u32,
    pub block_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VbrRow {
    pub k_r: usize,
    pub total_bps: f64,
    /// Routing side information as a fraction of `total_bps`.
    pub mask_share: f64,
    pub mse: f64,
    pub snr_db: f64,
}

pub fn write_vbr_csv(rows: &[VbrRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "k_r,total_bps,mask_share,mse,snr_db")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.k_r, r.total_bps, r.mask_share, r.mse, r.snr_db)?;
    }
    Ok(())
}

/// Codes `data` at every `k_r` from 0 to `N_r` with the same frozen model and
/// reports the measured stream rate against distortion.
pub fn exp_vbr(model: &RevqModel, data: &[FrameBatch], rate: RateContext) -> Result<Vec<VbrRow>> {
    require_data(data)?;
    let frames = data[0].rows();
    if data.iter().any(|w| w.rows() != frames) {
        return Err(Error::InvalidArgument("all windows must have the same length".into()));
    }
    let header = StreamHeader {
        version: STREAM_VERSION,
        sample_rate: rate.sample_rate,
        block_size: rate.block_size as u32,
        frames_per_window: frames as u32,
        dim: model.dim() as u32,
        n_experts: model.n_experts() as u32,
        shared_size: model.shared_size() as u32,
        expert_size: model.expert_size() as u32,
        n_windows: u32::try_from(data.len())
            .map_err(|_| Error::InvalidArgument("too many windows".into()))?,
        tail_padding: 0,
    };
    header.validate()?;
    let energy: f64 = data.iter().map(|w| w.mean_energy()).sum();
    (0..=model.n_experts())
        .map(|k| {
            let coded = data
                .par_iter()
                .map(|fb| {
                    let (qw, recon) = model.quantize(fb, k)?;
                    Ok((qw, fb.mse(&recon)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let err: f64 = coded.iter().map(|(_, e)| e).sum();
            let windows: Vec<_> = coded.into_iter().map(|(qw, _)| qw).collect();
            let report = bitrate_report(&header, &windows)?;
            Ok(VbrRow {
                k_r: k,
                total_bps: report.total_bps,
                mask_share: report.mask_share(),
                mse: err / data.len() as f64,
                snr_db: if err == 0.0 {
                    f64::INFINITY
                } else {
                    10.0 * (energy / err).log10()
                },
            })
        })
        .collect()
}

/// A sine at `freq_hz` with amplitude `amplitude` plus white Gaussian noise
/// of standard deviation `noise_rms`.
pub fn tone_plus_noise(
    freq_hz: f64,
    amplitude: f64,
    noise_rms: f64,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<PcmSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate as f64;
    let phase: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let samples = (0..n_samples)
        .map(|i| amplitude * (w * i as f64 + phase).sin() + noise_rms * rng.sample::<f64, _>(StandardNormal))
        .collect();
    PcmSignal::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tests::random_model;
    use crate::trainer::{synth_dataset, SynthSpec};
    use crate::Router;

    fn windows(n: usize, seed: u64) -> Vec<FrameBatch> {
        let spec = SynthSpec::clustered(4, 6, 5, 2.0, (0.3, 0.8), seed).unwrap();
        synth_dataset(&spec, n, seed + 1).unwrap()
    }

    #[test]
    fn oracle_dominates_per_window() {
        let m = random_model(5, 6, 16, 3);
        let r = exp_adaptive(&m, &windows(30, 0), 2).unwrap();
        for row in &r.rows {
            assert!(row.oracle_mse <= row.fixed_mse);
            assert!(row.oracle_mse <= row.routed_mse);
        }
        assert!(r.improvement_pct >= 0.0);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 31);
    }

    #[test]
    fn identical_experts_give_no_improvement() {
        let m = random_model(1, 6, 16, 4);
        let e = m.expert(1).clone();
        let clones = RevqModel::new(
            m.shared().clone(),
            vec![e.clone(), e.clone(), e.clone(), e],
            Router::random(4, 6, 1.0, 0).unwrap(),
        )
        .unwrap();
        let r = exp_adaptive(&clones, &windows(20, 1), 1).unwrap();
        assert_eq!(r.improvement_pct, 0.0);
        assert_eq!(r.routed_mse, r.fixed_mse);
    }

    #[test]
    fn full_pool_usage_is_total() {
        let m = random_model(3, 6, 8, 5);
        assert_eq!(usage_pct(&m, &windows(10, 2), 3).unwrap(), 100.0);
        assert_eq!(usage_pct(&m, &windows(10, 2), 0).unwrap(), 0.0);
    }

    #[test]
    fn vbr_rates_and_shared_only_row() {
        let m = random_model(4, 6, 16, 6);
        let data = windows(12, 3);
        let rate = RateContext {
            sample_rate: 600,
            block_size: 6,
        };
        let rows = exp_vbr(&m, &data, rate).unwrap();
        assert_eq!(rows.len(), 5);
        for pair in rows.windows(2) {
            assert!(pair[1].total_bps > pair[0].total_bps);
        }
        let shared_only = mean(data.iter().map(|w| {
            let (_, r) = m.shared().quantize_frames(w).unwrap();
            r.mse(&FrameBatch::zeros(r.rows(), r.dim())).unwrap()
        }));
        assert!((rows[0].mse - shared_only).abs() < 1e-12);
        let mut csv = Vec::new();
        write_vbr_csv(&rows, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("k_r,total_bps"));
    }

    #[test]
    fn tone_has_requested_power() {
        let sig = tone_plus_noise(440.0, 0.5, 0.0, 16000, 16000, 1).unwrap();
        let p = sig.samples.iter().map(|v| v * v).sum::<f64>() / sig.len() as f64;
        // 440 whole cycles in one second: mean power is exactly A^2 / 2.
        assert!((p - 0.125).abs() < 1e-9);
        assert_eq!(tone_plus_noise(440.0, 0.5, 0.1, 100, 16000, 3).unwrap(), tone_plus_noise(440.0, 0.5, 0.1, 100, 16000, 3).unwrap());
    }

    #[test]
    fn utilization_table_layout() {
        let rows = [UtilizationRow {
            n_experts: 9,
            mse: 0.5,
            usage_pct: 44.4,
        }];
        let t = utilization_table(&rows);
        assert!(t.lines().nth(1).unwrap().contains("44.4%"));
    }

    #[test]
    fn utilization_sweep_runs_small() {
        let data = windows(40, 7);
        let model_cfg = ModelConfig {
            shared_size: 8,
            expert_size: 8,
            kmeans_iters: 3,
            init_frames: 500,
            ..ModelConfig::default()
        };
        let train_cfg = TrainConfig {
            steps: 10,
            batch_windows: 4,
            frames_per_window: 5,
            k_r: crate::trainer::KrSchedule::Fixed(2),
            ..TrainConfig::default()
        };
        let rows = exp_utilization(&[2, 3], 2, &data, &model_cfg, &train_cfg).unwrap();
        assert_eq!(rows[0].usage_pct, 100.0);
        assert!(exp_utilization(&[1], 2, &data, &model_cfg, &train_cfg).is_err());
    }
}
