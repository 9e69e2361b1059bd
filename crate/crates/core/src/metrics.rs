//! Signal-domain quality metrics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::bitstream::BitrateReport;
use crate::error::{Error, Result};
use crate::frontend::PcmSignal;

pub const STFT_SIZE: usize = 512;
pub const STFT_HOP: usize = 256;
pub const STFT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    /// `+inf` when the signals are identical.
    pub snr_db: f64,
    pub log_stft_l1: f64,
    pub bitrate: Option<BitrateReport>,
}

/// `10 * log10(signal power / error power)`.
pub fn snr_db(reference: &[f64], degraded: &[f64]) -> Result<f64> {
    check_lengths(reference.len(), degraded.len())?;
    let signal: f64 = reference.iter().map(|x| x * x).sum();
    let noise: f64 = reference.iter().zip(degraded).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude spectrogram: Hann-windowed 512-point frames at hop 256, the
/// signal zero-padded so that every sample lands in some frame.
pub fn stft_magnitude(samples: &[f64]) -> Vec<Vec<f64>> {
    if samples.is_empty() {
        return Vec::new();
    }
    let n_frames = if samples.len() <= STFT_SIZE {
        1
    } else {
        1 + (samples.len() - STFT_SIZE).div_ceil(STFT_HOP)
    };
    let window = hann(STFT_SIZE);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(STFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_SIZE];
    (0..n_frames)
        .map(|f| {
            let start = f * STFT_HOP;
            for (i, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
                let x = samples.get(start + i).copied().unwrap_or(0.0);
                *b = Complex::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            buf[..=STFT_SIZE / 2].iter().map(|c| c.norm()).collect()
        })
        .collect()
}

/// Mean absolute difference of log-magnitude spectrograms.
pub fn log_stft_l1(reference: &[f64], degraded: &[f64]) -> Result<f64> {
    check_lengths(reference.len(), degraded.len())?;
    let a = stft_magnitude(reference);
    let b = stft_magnitude(degraded);
    let mut total = 0.0;
    let mut count = 0usize;
    for (fa, fb) in a.iter().zip(&b) {
        for (x, y) in fa.iter().zip(fb) {
            total += ((x + STFT_EPSILON).ln() - (y + STFT_EPSILON).ln()).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn eval_metrics(reference: &PcmSignal, degraded: &PcmSignal) -> Result<Metrics> {
    check_lengths(reference.len(), degraded.len())?;
    if reference.sample_rate != degraded.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate, degraded.sample_rate
        )));
    }
    let r = &reference.samples;
    let d = &degraded.samples;
    let mse = if r.is_empty() {
        0.0
    } else {
        r.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64
    };
    Ok(Metrics {
        mse,
        snr_db: snr_db(r, d)?,
        log_stft_l1: log_stft_l1(r, d)?,
        bitrate: None,
    })
}
