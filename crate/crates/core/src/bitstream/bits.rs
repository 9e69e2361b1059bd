//! MSB-first bit packing.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct BitWriter {
    buf: Vec<u8>,
    acc: u8,
    filled: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn write(&mut self, value: u64, width: u32) {
        assert!(width <= 64, "field wider than 64 bits");
        debug_assert!(width == 64 || value >> width == 0, "value does not fit its field");
        for shift in (0..width).rev() {
            let bit = ((value >> shift) & 1) as u8;
            self.acc = (self.acc << 1) | bit;
            self.filled += 1;
            if self.filled == 8 {
                self.buf.push(self.acc);
                self.acc = 0;
                self.filled = 0;
            }
        }
    }

    /// Zero-pads to the next byte boundary; returns the number of pad bits.
    pub fn align(&mut self) -> u32 {
        if self.filled == 0 {
            return 0;
        }
        let pad = 8 - self.filled;
        self.write(0, pad);
        pad
    }

    pub fn bit_len(&self) -> u64 {
        self.buf.len() as u64 * 8 + self.filled as u64
    }

    /// Finishes the stream, zero-padding a partial final byte.
    pub fn into_bytes(mut self) -> Vec<u8> {
        self.align();
        self.buf
    }
}

pub struct BitReader<'a> {
    buf: &'a [u8],
    bit_pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, bit_pos: 0 }
    }

    pub fn bit_position(&self) -> u64 {
        self.bit_pos
    }

    pub fn byte_position(&self) -> usize {
        self.bit_pos.div_ceil(8) as usize
    }

    pub fn read(&mut self, width: u32, what: &'static str) -> Result<u64> {
        assert!(width <= 64, "field wider than 64 bits");
        if self.bit_pos + width as u64 > self.buf.len() as u64 * 8 {
            return Err(Error::Truncated(what));
        }
        let mut v = 0u64;
        for _ in 0..width {
            let byte = self.buf[(self.bit_pos / 8) as usize];
            let bit = (byte >> (7 - (self.bit_pos % 8))) & 1;
            v = (v << 1) | bit as u64;
            self.bit_pos += 1;
        }
        Ok(v)
    }

    /// Skips to the next byte boundary, returning the skipped bits.
    pub fn align(&mut self) -> u64 {
        let rem = (self.bit_pos % 8) as u32;
        if rem == 0 {
            return 0;
        }
        let pad = 8 - rem;
        // In bounds: a partially consumed byte exists.
        self.read(pad, "alignment padding").unwrap_or(0)
    }
}
