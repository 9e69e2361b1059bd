//! PCM in, "RVQ1" stream out, and back.

use crate::bitstream::{pack_stream, unpack_stream, StreamHeader, STREAM_VERSION};
use crate::engine::{QuantizedWindow, RevqModel};
use crate::error::{Error, Result};
use crate::frontend::{FrontEnd, PcmSignal};

fn header_for(
    model: &RevqModel,
    sample_rate: u32,
    front: &FrontEnd,
    n_windows: usize,
    tail_padding: usize,
) -> Result<StreamHeader> {
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in 32 bits")))
    };
    let h = StreamHeader {
        version: STREAM_VERSION,
        sample_rate,
        block_size: u32_of(front.block_size(), "block size")?,
        frames_per_window: u32_of(front.frames_per_window(), "frames per window")?,
        dim: u32_of(model.dim(), "dimension")?,
        n_experts: u32_of(model.n_experts(), "expert count")?,
        shared_size: u32_of(model.shared_size(), "shared codebook size")?,
        expert_size: u32_of(model.expert_size(), "expert codebook size")?,
        n_windows: u32_of(n_windows, "window count")?,
        tail_padding: u32_of(tail_padding, "tail padding")?,
    };
    h.validate()?;
    Ok(h)
}

fn check_model(model: &RevqModel, front: &FrontEnd) -> Result<()> {
    if model.dim() != front.block_size() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: front.block_size(),
        });
    }
    Ok(())
}

/// Transforms, routes, quantizes and packs `sig`, activating `k_r` experts
/// in every window.
pub fn encode_signal(
    model: &RevqModel,
    sig: &PcmSignal,
    block_size: usize,
    frames_per_window: usize,
    k_r: usize,
) -> Result<Vec<u8>> {
    let front = FrontEnd::new(block_size, frames_per_window)?;
    check_model(model, &front)?;
    let windowed = front.signal_to_windows(sig)?;
    let coded = windowed
        .windows
        .iter()
        .map(|w| Ok(model.quantize(w, k_r)?.0))
        .collect::<Result<Vec<QuantizedWindow>>>()?;
    let h = header_for(model, sig.sample_rate, &front, coded.len(), windowed.padding)?;
    pack_stream(&h, &coded)
}

/// Unpacks a stream, checks it against `model`, and reconstructs the PCM
/// signal with the original length and sample rate.
pub fn decode_stream(model: &RevqModel, bytes: &[u8]) -> Result<PcmSignal> {
    let (h, windows) = unpack_stream(bytes)?;
    let mismatch = |what: &str, stream: u32, model: usize| {
        Error::InconsistentStream(format!("{what}: stream has {stream}, model has {model}"))
    };
    if h.dim as usize != model.dim() {
        return Err(mismatch("dimension", h.dim, model.dim()));
    }
    if h.n_experts as usize != model.n_experts() {
        return Err(mismatch("expert count", h.n_experts, model.n_experts()));
    }
    if h.shared_size as usize != model.shared_size() {
        return Err(mismatch("shared codebook size", h.shared_size, model.shared_size()));
    }
    if h.expert_size as usize != model.expert_size() {
        return Err(mismatch("expert codebook size", h.expert_size, model.expert_size()));
    }
    let front = FrontEnd::new(h.block_size as usize, h.frames_per_window as usize)?;
    check_model(model, &front)?;
    let frames = windows
        .iter()
        .map(|w| model.dequantize(w))
        .collect::<Result<Vec<_>>>()?;
    front.windows_to_signal(&frames, h.tail_padding as usize, h.sample_rate)
}
