//! The `RVQ1` stream format.
//!
//! ```text
//! header   42 bytes, little-endian integers
//!   magic "RVQ1" | u16 version | u32 sample_rate | u32 block_size
//!   u32 frames_per_window | u32 D | u32 N_r | u32 K_shared | u32 K_expert
//!   u32 n_windows | u32 tail_padding
//! packets  one per window, MSB-first bit fields, zero-padded to a byte
//!   k_r (4) | mask rank (ceil log2 C(N_r, k_r)) | T shared codes
//!   | k_r x T expert codes (ascending expert order, expert-major)
//! trailer  u32 CRC-32 (IEEE) of every preceding byte, little-endian
//! ```
//!
//! Code fields are `ceil(log2 K)` bits wide. `FORMAT.md` at the repository
//! root has the byte-level walk-through and a golden vector.

pub mod bits;
pub mod combinatorics;

use crate::engine::{QuantizedWindow, RoutingMask};
use crate::error::{Error, Result};
use crate::le;
use bits::{BitReader, BitWriter};
use combinatorics::{binomial, ceil_log2, mask_bits, subset_rank, subset_unrank, MAX_POOL};

pub const STREAM_MAGIC: [u8; 4] = *b"RVQ1";
pub const STREAM_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 42;
pub const TRAILER_BYTES: usize = 4;
/// Width of the per-window `k_r` field.
pub const KR_BITS: u32 = 4;
pub const MAX_KR: usize = (1 << KR_BITS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u16,
    pub sample_rate: u32,
    pub block_size: u32,
    pub frames_per_window: u32,
    pub dim: u32,
    pub n_experts: u32,
    pub shared_size: u32,
    pub expert_size: u32,
    pub n_windows: u32,
    /// Zero samples appended to the signal to fill the last window.
    pub tail_padding: u32,
}

impl StreamHeader {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidHeader(what.to_string()));
        if self.version != STREAM_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.block_size == 0 || self.frames_per_window == 0 || self.dim == 0 {
            return bad("block_size, frames_per_window and D must be positive");
        }
        if self.n_experts == 0 || self.n_experts as usize > MAX_POOL {
            return bad("N_r must lie in 1..=64");
        }
        if self.shared_size < 2 || self.expert_size < 2 {
            return bad("codebook sizes must be at least 2");
        }
        if self.tail_padding as u64 >= self.window_samples().max(1) && self.n_windows > 0 {
            return bad("tail padding must be shorter than one window");
        }
        if self.n_windows == 0 && self.tail_padding != 0 {
            return bad("tail padding without windows");
        }
        Ok(())
    }

    pub fn window_samples(&self) -> u64 {
        self.frames_per_window as u64 * self.block_size as u64
    }

    pub fn window_seconds(&self) -> f64 {
        self.window_samples() as f64 / self.sample_rate as f64
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_windows as f64 * self.window_seconds()
    }

    pub fn shared_code_bits(&self) -> u32 {
        ceil_log2(self.shared_size as u64)
    }

    pub fn expert_code_bits(&self) -> u32 {
        ceil_log2(self.expert_size as u64)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&STREAM_MAGIC);
        le::put_u16(out, self.version);
        for v in [
            self.sample_rate,
            self.block_size,
            self.frames_per_window,
            self.dim,
            self.n_experts,
            self.shared_size,
            self.expert_size,
            self.n_windows,
            self.tail_padding,
        ] {
            le::put_u32(out, v);
        }
    }

    fn read(r: &mut le::Reader<'_>) -> Result<Self> {
        let magic = r.array4("stream magic")?;
        if magic != STREAM_MAGIC {
            return Err(Error::BadMagic {
                expected: STREAM_MAGIC,
                found: magic,
            });
        }
        let version = r.u16("stream version")?;
        if version != STREAM_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let h = Self {
            version,
            sample_rate: r.u32("sample_rate")?,
            block_size: r.u32("block_size")?,
            frames_per_window: r.u32("frames_per_window")?,
            dim: r.u32("D")?,
            n_experts: r.u32("N_r")?,
            shared_size: r.u32("K_shared")?,
            expert_size: r.u32("K_expert")?,
            n_windows: r.u32("n_windows")?,
            tail_padding: r.u32("tail_padding")?,
        };
        h.validate()?;
        Ok(h)
    }
}

/// Bits spent by one packet, measured from the writer's cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PacketBits {
    pub k_r: u32,
    pub mask_rank: u32,
    pub shared_codes: u64,
    pub expert_codes: u64,
    pub padding: u32,
}

impl PacketBits {
    pub fn total(&self) -> u64 {
        self.k_r as u64 + self.mask_rank as u64 + self.shared_codes + self.expert_codes + self.padding as u64
    }
}

fn check_window(h: &StreamHeader, index: usize, w: &QuantizedWindow) -> Result<()> {
    let fail = |msg: String| Err(Error::InconsistentStream(format!("window {index}: {msg}")));
    if w.mask.n_experts() != h.n_experts as usize {
        return fail(format!("mask over {} experts, header says {}", w.mask.n_experts(), h.n_experts));
    }
    if w.mask.k() > MAX_KR {
        return fail(format!("k_r = {} does not fit the 4-bit field", w.mask.k()));
    }
    if w.shared_codes.len() != h.frames_per_window as usize {
        return fail(format!("{} frames, header says {}", w.shared_codes.len(), h.frames_per_window));
    }
    if w.expert_codes.len() != w.mask.k() {
        return fail(format!("{} expert rows for k_r = {}", w.expert_codes.len(), w.mask.k()));
    }
    if w.shared_codes.iter().any(|&c| c >= h.shared_size) {
        return fail("shared code out of range".into());
    }
    for row in &w.expert_codes {
        if row.len() != h.frames_per_window as usize {
            return fail("expert code row has the wrong length".into());
        }
        if row.iter().any(|&c| c >= h.expert_size) {
            return fail("expert code out of range".into());
        }
    }
    Ok(())
}

fn pack_measured(h: &StreamHeader, windows: &[QuantizedWindow]) -> Result<(Vec<u8>, Vec<PacketBits>)> {
    h.validate()?;
    if windows.len() != h.n_windows as usize {
        return Err(Error::InconsistentStream(format!(
            "{} windows, header says {}",
            windows.len(),
            h.n_windows
        )));
    }
    let n = h.n_experts as usize;
    let shared_bits = h.shared_code_bits();
    let expert_bits = h.expert_code_bits();
    let mut w = BitWriter::new();
    let mut stats = Vec::with_capacity(windows.len());
    for (i, win) in windows.iter().enumerate() {
        check_window(h, i, win)?;
        let mut s = PacketBits::default();
        let mut mark = w.bit_len();
        let mut span = |w: &BitWriter| {
            let now = w.bit_len();
            let d = now - mark;
            mark = now;
            d
        };
        let k = win.mask.k();
        w.write(k as u64, KR_BITS);
        s.k_r = span(&w) as u32;
        w.write(subset_rank(win.mask.selected(), n)?, mask_bits(n, k)?);
        s.mask_rank = span(&w) as u32;
        for &c in &win.shared_codes {
            w.write(c as u64, shared_bits);
        }
        s.shared_codes = span(&w);
        for row in &win.expert_codes {
            for &c in row {
                w.write(c as u64, expert_bits);
            }
        }
        s.expert_codes = span(&w);
        w.align();
        s.padding = span(&w) as u32;
        stats.push(s);
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + (w.bit_len() / 8) as usize + TRAILER_BYTES);
    h.write(&mut out);
    out.extend_from_slice(&w.into_bytes());
    let crc = crc32fast::hash(&out);
    le::put_u32(&mut out, crc);
    Ok((out, stats))
}

/// Serializes a header and its windows. Deterministic.
pub fn pack_stream(h: &StreamHeader, windows: &[QuantizedWindow]) -> Result<Vec<u8>> {
    Ok(pack_measured(h, windows)?.0)
}

/// Per-packet bit usage of a stream, read off the writer while packing.
pub fn packet_bits(h: &StreamHeader, windows: &[QuantizedWindow]) -> Result<Vec<PacketBits>> {
    Ok(pack_measured(h, windows)?.1)
}

/// Exact inverse of [`pack_stream`]; every malformed input is a typed error.
pub fn unpack_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<QuantizedWindow>)> {
    let mut r = le::Reader::new(bytes);
    let h = StreamHeader::read(&mut r)?;
    let payload = r.remaining();
    let n = h.n_experts as usize;
    let t = h.frames_per_window as usize;
    let shared_bits = h.shared_code_bits();
    let expert_bits = h.expert_code_bits();
    let mut br = BitReader::new(payload);
    let mut windows = Vec::new();
    for index in 0..h.n_windows as usize {
        let k = br.read(KR_BITS, "k_r field")? as usize;
        if k > n {
            return Err(Error::WindowKrOutOfRange { window: index, k, n });
        }
        let count = binomial(n, k);
        let rank = br.read(mask_bits(n, k)?, "mask rank")?;
        if rank >= count {
            return Err(Error::MaskRankOutOfRange {
                window: index,
                rank,
                n,
                k,
                count,
            });
        }
        let mask = RoutingMask::new(n, subset_unrank(rank, n, k)?)?;
        let mut read_codes = |width: u32, size: u32| -> Result<Vec<u32>> {
            let mut codes = Vec::new();
            for _ in 0..t {
                let c = br.read(width, "code")?;
                if c >= size as u64 {
                    return Err(Error::StreamCodeOutOfRange {
                        window: index,
                        code: c,
                        size: size as usize,
                    });
                }
                codes.push(c as u32);
            }
            Ok(codes)
        };
        let shared_codes = read_codes(shared_bits, h.shared_size)?;
        let expert_codes = (0..k)
            .map(|_| read_codes(expert_bits, h.expert_size))
            .collect::<Result<Vec<_>>>()?;
        if br.align() != 0 {
            return Err(Error::NonZeroPadding { window: index });
        }
        windows.push(QuantizedWindow {
            mask,
            shared_codes,
            expert_codes,
        });
    }
    let body_end = HEADER_BYTES + br.byte_position();
    let tail = &bytes[body_end..];
    if tail.len() < TRAILER_BYTES {
        return Err(Error::Truncated("checksum"));
    }
    if tail.len() > TRAILER_BYTES {
        return Err(Error::TrailingBytes(tail.len() - TRAILER_BYTES));
    }
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok((h, windows))
}

/// Rate breakdown of a stream in bits per second of audio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitrateReport {
    pub duration_seconds: f64,
    /// Shared plus expert code indices.
    pub codes_bps: f64,
    /// Routing side information: the `k_r` field plus the mask rank.
    pub mask_bps: f64,
    /// The mask rank alone, without the `k_r` field.
    pub mask_rank_bps: f64,
    /// Byte-alignment padding at the end of each packet.
    pub padding_bps: f64,
    /// Header and checksum spread over the stream duration.
    pub header_amortized_bps: f64,
    pub total_bps: f64,
}

impl BitrateReport {
    pub fn mask_share(&self) -> f64 {
        self.mask_bps / self.total_bps
    }
}

pub fn bitrate_report(h: &StreamHeader, windows: &[QuantizedWindow]) -> Result<BitrateReport> {
    let duration = h.duration_seconds();
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument("bitrate of a zero-length stream".into()));
    }
    let stats = packet_bits(h, windows)?;
    let sum = |f: fn(&PacketBits) -> u64| stats.iter().map(f).sum::<u64>() as f64 / duration;
    let codes_bps = sum(|p| p.shared_codes + p.expert_codes);
    let mask_bps = sum(|p| p.k_r as u64 + p.mask_rank as u64);
    let mask_rank_bps = sum(|p| p.mask_rank as u64);
    let padding_bps = sum(|p| p.padding as u64);
    let header_amortized_bps = ((HEADER_BYTES + TRAILER_BYTES) * 8) as f64 / duration;
    Ok(BitrateReport {
        duration_seconds: duration,
        codes_bps,
        mask_bps,
        mask_rank_bps,
        padding_bps,
        header_amortized_bps,
        total_bps: codes_bps + mask_bps + padding_bps + header_amortized_bps,
    })
}
