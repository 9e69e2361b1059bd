//! Audio front-end: 16-bit mono WAV I/O and a blockwise orthonormal DCT.
//!
//! The transform is exactly invertible, so all coding loss in the pipeline
//! comes from quantization.

use std::f64::consts::PI;
use std::io::Cursor;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::vq::FrameBatch;

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PcmSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("pcm samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Parses a PCM 16-bit mono RIFF/WAVE file; samples are scaled by 1/32768.
pub fn read_wav(bytes: &[u8]) -> Result<PcmSignal> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "only 16-bit integer PCM is supported (got {:?}, {} bits)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Wav(format!("expected mono, got {} channels", spec.channels)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(e.to_string()))?;
    PcmSignal::new(samples, spec.sample_rate)
}

/// Quantizes to 16 bits, rounding half away from zero and clamping.
pub fn to_i16(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(sig: &PcmSignal) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sig.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec).map_err(|e| Error::Wav(e.to_string()))?;
        for &s in &sig.samples {
            w.write_sample(to_i16(s)).map_err(|e| Error::Wav(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

/// Orthonormal DCT-II / DCT-III of a fixed length, computed with one
/// complex FFT of the even/odd reordered block.
#[derive(Clone)]
pub struct Dct {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    twiddles: Vec<Complex64>,
}

impl std::fmt::Debug for Dct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dct").field("len", &self.len).finish()
    }
}

impl Dct {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("DCT length must be positive".into()));
        }
        let mut planner = FftPlanner::new();
        let twiddles = (0..len)
            .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / (2 * len) as f64))
            .collect();
        Ok(Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            twiddles,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.len {
            return Err(Error::DimensionMismatch {
                expected: self.len,
                actual: n,
            });
        }
        Ok(())
    }

    fn scale(&self, k: usize) -> f64 {
        let n = self.len as f64;
        if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        }
    }

    pub fn forward(&self, block: &[f64]) -> Result<Vec<f64>> {
        self.check(block.len())?;
        let n = self.len;
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n.div_ceil(2) {
            v[i].re = block[2 * i];
        }
        for i in 0..n / 2 {
            v[n - 1 - i].re = block[2 * i + 1];
        }
        self.forward.process(&mut v);
        Ok((0..n)
            .map(|k| (v[k] * self.twiddles[k]).re * self.scale(k))
            .collect())
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check(coeffs.len())?;
        let n = self.len;
        let unscaled: Vec<f64> = (0..n).map(|k| coeffs[k] / self.scale(k)).collect();
        let mut v: Vec<Complex64> = (0..n)
            .map(|k| {
                let mirror = if k == 0 { 0.0 } else { unscaled[n - k] };
                Complex64::new(unscaled[k], -mirror) * self.twiddles[k].conj()
            })
            .collect();
        self.inverse.process(&mut v);
        let inv_n = 1.0 / n as f64;
        let mut out = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            out[2 * i] = v[i].re * inv_n;
        }
        for i in 0..n / 2 {
            out[2 * i + 1] = v[n - 1 - i].re * inv_n;
        }
        Ok(out)
    }
}

/// Blocks of `block_size` samples, DCT per block, `frames_per_window`
/// frames per routing window.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    block_size: usize,
    frames_per_window: usize,
    dct: Dct,
}

/// Output of [`FrontEnd::signal_to_windows`].
#[derive(Debug, Clone)]
pub struct Windowed {
    pub windows: Vec<FrameBatch>,
    /// Zero samples appended to reach a whole number of windows.
    pub padding: usize,
}

impl FrontEnd {
    pub fn new(block_size: usize, frames_per_window: usize) -> Result<Self> {
        if block_size == 0 || frames_per_window == 0 {
            return Err(Error::InvalidArgument(
                "block size and frames per window must be positive".into(),
            ));
        }
        Ok(Self {
            block_size,
            frames_per_window,
            dct: Dct::new(block_size)?,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn frames_per_window(&self) -> usize {
        self.frames_per_window
    }

    pub fn window_samples(&self) -> usize {
        self.block_size * self.frames_per_window
    }

    pub fn signal_to_windows(&self, sig: &PcmSignal) -> Result<Windowed> {
        let span = self.window_samples();
        let n_windows = sig.len().div_ceil(span);
        let padding = n_windows * span - sig.len();
        let mut padded = sig.samples.clone();
        padded.resize(n_windows * span, 0.0);
        let windows = padded
            .chunks_exact(span)
            .map(|w| {
                let mut frames = Vec::with_capacity(span);
                for block in w.chunks_exact(self.block_size) {
                    frames.extend(self.dct.forward(block)?);
                }
                FrameBatch::new(self.frames_per_window, self.block_size, frames)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Windowed { windows, padding })
    }

    pub fn windows_to_signal(
        &self,
        windows: &[FrameBatch],
        padding: usize,
        sample_rate: u32,
    ) -> Result<PcmSignal> {
        let mut samples = Vec::with_capacity(windows.len() * self.window_samples());
        for w in windows {
            if w.dim() != self.block_size || w.rows() != self.frames_per_window {
                return Err(Error::DimensionMismatch {
                    expected: self.window_samples(),
                    actual: w.rows() * w.dim(),
                });
            }
            for frame in w.iter_rows() {
                samples.extend(self.dct.inverse(frame)?);
            }
        }
        if padding > samples.len() {
            return Err(Error::InvalidArgument(format!(
                "padding {padding} exceeds decoded length {}",
                samples.len()
            )));
        }
        samples.truncate(samples.len() - padding);
        PcmSignal::new(samples, sample_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn naive_dct(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let s: f64 = (0..n)
                    .map(|i| x[i] * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos())
                    .sum();
                let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                a * s
            })
            .collect()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dct_matches_direct_summation() {
        for n in [1, 2, 3, 7, 8, 64, 65] {
            let dct = Dct::new(n).unwrap();
            for seed in 0..10 {
                let x = random(n, seed);
                let fast = dct.forward(&x).unwrap();
                let slow = naive_dct(&x);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-9, "n={n}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn dct_constant_block() {
        let dct = Dct::new(64).unwrap();
        let c = dct.forward(&[0.3; 64]).unwrap();
        assert!((c[0] - 0.3 * 8.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dct_parseval_and_inverse() {
        for n in [5, 64] {
            let dct = Dct::new(n).unwrap();
            let x = random(n, 42);
            let c = dct.forward(&x).unwrap();
            let e_x: f64 = x.iter().map(|v| v * v).sum();
            let e_c: f64 = c.iter().map(|v| v * v).sum();
            assert!((e_x.sqrt() - e_c.sqrt()).abs() < 1e-10);
            let back = dct.inverse(&c).unwrap();
            let rms = (x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!(rms < 1e-10);
        }
        assert!(Dct::new(64).unwrap().forward(&[0.0; 63]).is_err());
    }

    #[test]
    fn windowing_round_trip() {
        let fe = FrontEnd::new(8, 4).unwrap();
        let exact = PcmSignal::new(random(32, 1), 8000).unwrap();
        let w = fe.signal_to_windows(&exact).unwrap();
        assert_eq!(w.windows.len(), 1);
        assert_eq!(w.padding, 0);

        for len in [1, 31, 33, 100, 257] {
            let sig = PcmSignal::new(random(len, len as u64), 16000).unwrap();
            let w = fe.signal_to_windows(&sig).unwrap();
            assert_eq!(w.windows.len(), len.div_ceil(32));
            let back = fe.windows_to_signal(&w.windows, w.padding, 16000).unwrap();
            assert_eq!(back.len(), len);
            let rms = (sig.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / len as f64)
                .sqrt();
            assert!(rms < 1e-9);
        }

        let empty = PcmSignal::new(vec![], 16000).unwrap();
        let w = fe.signal_to_windows(&empty).unwrap();
        assert!(w.windows.is_empty());
        assert_eq!(w.padding, 0);
    }

    #[test]
    fn wav_golden_bytes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 16).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
        bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        let raw: [i16; 8] = [0, 1, -1, 16384, -16384, 32767, -32768, 100];
        for s in raw {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        let sig = read_wav(&bytes).unwrap();
        assert_eq!(sig.sample_rate, 8000);
        let want: Vec<f64> = raw.iter().map(|&s| s as f64 / 32768.0).collect();
        assert_eq!(sig.samples, want);
        assert_eq!(sig.samples[3], 0.5);
        assert_eq!(sig.samples[6], -1.0);
        // Grid values survive a write/read cycle exactly.
        assert_eq!(read_wav(&write_wav(&sig).unwrap()).unwrap(), sig);
    }

    #[test]
    fn wav_rounding_and_clamping() {
        assert_eq!(to_i16(1.0), 32767);
        assert_eq!(to_i16(-1.5), -32768);
        assert_eq!(to_i16(0.5 / 32768.0), 1);
        assert_eq!(to_i16(-0.5 / 32768.0), -1);
        assert_eq!(to_i16(0.49 / 32768.0), 0);
        let zeros = PcmSignal::new(vec![0.0; 10], 44100).unwrap();
        assert_eq!(read_wav(&write_wav(&zeros).unwrap()).unwrap(), zeros);
    }

    #[test]
    fn wav_rejects_unsupported_files() {
        let stereo = {
            let spec = hound::WavSpec {
                channels: 2,
                sample_rate: 8000,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut c = Cursor::new(Vec::new());
            let mut w = hound::WavWriter::new(&mut c, spec).unwrap();
            w.write_sample(0i16).unwrap();
            w.write_sample(0i16).unwrap();
            w.finalize().unwrap();
            c.into_inner()
        };
        assert!(matches!(read_wav(&stereo), Err(Error::Wav(m)) if m.contains("mono")));
        let float = {
            let spec = hound::WavSpec {
                channels: 1,
                sample_rate: 8000,
                bits_per_sample: 32,
                sample_format: hound::SampleFormat::Float,
            };
            let mut c = Cursor::new(Vec::new());
            let mut w = hound::WavWriter::new(&mut c, spec).unwrap();
            w.write_sample(0.0f32).unwrap();
            w.finalize().unwrap();
            c.into_inner()
        };
        assert!(matches!(read_wav(&float), Err(Error::Wav(_))));
        assert!(read_wav(b"RIFF\x00\x00").is_err());
        assert!(read_wav(b"not a wav file at all").is_err());
    }
}
