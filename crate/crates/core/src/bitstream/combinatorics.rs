//! Lexicographic combinatorial number system for `k`-subsets of `{1..n}`.

use crate::error::{Error, Result};

/// Largest pool size the mask coder accepts; keeps every `C(n, k)` inside `u64`.
pub const MAX_POOL: usize = 64;

/// Binomial coefficient `C(n, k)`, zero when `k > n`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    u64::try_from(acc).expect("binomial overflows u64; pool size is capped at MAX_POOL")
}

fn check_pool(n: usize) -> Result<()> {
    if n > MAX_POOL {
        return Err(Error::InvalidArgument(format!(
            "pool size {n} exceeds the supported maximum {MAX_POOL}"
        )));
    }
    Ok(())
}

/// Rank of an ascending subset of `{1..n}` among all subsets of the same
/// size, in lexicographic order.
pub fn subset_rank(selected: &[usize], n: usize) -> Result<u64> {
    check_pool(n)?;
    let k = selected.len();
    if k > n {
        return Err(Error::InvalidSubset(format!("{k} indices drawn from {n}")));
    }
    let mut rank = 0u64;
    let mut prev = 0usize;
    for (i, &c) in selected.iter().enumerate() {
        if c == 0 || c > n {
            return Err(Error::InvalidSubset(format!("index {c} outside 1..={n}")));
        }
        if c <= prev {
            return Err(Error::InvalidSubset(format!(
                "indices must be strictly ascending ({prev} then {c})"
            )));
        }
        let remaining = k - i - 1;
        for j in prev + 1..c {
            rank += binomial(n - j, remaining);
        }
        prev = c;
    }
    Ok(rank)
}

/// Inverse of [`subset_rank`].
pub fn subset_unrank(rank: u64, n: usize, k: usize) -> Result<Vec<usize>> {
    check_pool(n)?;
    let count = binomial(n, k);
    if k > n || rank >= count {
        return Err(Error::RankOutOfRange { rank, n, k, count });
    }
    let mut out = Vec::with_capacity(k);
    let mut rank = rank;
    let mut next = 1usize;
    for i in 0..k {
        let remaining = k - i - 1;
        loop {
            let block = binomial(n - next, remaining);
            if rank < block {
                break;
            }
            rank -= block;
            next += 1;
        }
        out.push(next);
        next += 1;
    }
    Ok(out)
}

/// `ceil(log2(C(n, k)))`: bits needed to send one routing mask.
pub fn mask_bits(n: usize, k: usize) -> Result<u32> {
    check_pool(n)?;
    if k > n {
        return Err(Error::TooManyExperts { k, n });
    }
    Ok(ceil_log2(binomial(n, k)))
}

pub(crate) fn ceil_log2(x: u64) -> u32 {
    debug_assert!(x > 0);
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

/// Side-information rate of the routing mask for a window of `window_seconds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskOverhead {
    /// `mask_bits / W`, the rate actually spent on the wire.
    pub ceiled_bps: f64,
    /// `log2(C(n, k)) / W`, the information-theoretic figure.
    pub exact_bps: f64,
}

pub fn overhead_bps(n: usize, k: usize, window_seconds: f64) -> Result<MaskOverhead> {
    if !(window_seconds > 0.0 && window_seconds.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "window length must be positive, got {window_seconds}"
        )));
    }
    let bits = mask_bits(n, k)?;
    Ok(MaskOverhead {
        ceiled_bps: bits as f64 / window_seconds,
        exact_bps: (binomial(n, k) as f64).log2() / window_seconds,
    })
}
