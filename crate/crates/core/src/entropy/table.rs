use std::cmp::Ordering;
use std::collections::BinaryHeap;

use log::warn;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real};

use super::FactorizedPrior;

/// Probability precision of the coding tables, in bits.
pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
/// Probability mass allowed outside the coded support, per side.
pub const TAIL_MASS: f64 = 1e-9;
/// Upper bound on the number of in-support symbols of one channel.
pub const MAX_SUPPORT: usize = 4096;

/// Integer cumulative frequency table of one latent channel.
///
/// Symbols `0..support_len()` stand for the values `min..=max()`; the final
/// symbol is the escape, followed in the stream by the raw value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingTable {
    pub min: i32,
    /// `support_len() + 2` entries, from 0 to [`PROB_TOTAL`].
    pub cdf: Vec<u32>,
}

impl CodingTable {
    pub fn support_len(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn max(&self) -> i32 {
        self.min + self.support_len() as i32 - 1
    }

    pub fn escape_symbol(&self) -> usize {
        self.support_len()
    }

    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    /// In-support symbol for `value`, if any.
    pub fn symbol_of(&self, value: i32) -> Option<usize> {
        let offset = value as i64 - self.min as i64;
        (0..self.support_len() as i64)
            .contains(&offset)
            .then_some(offset as usize)
    }

    pub fn value_of(&self, symbol: usize) -> i32 {
        self.min + symbol as i32
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cdf[symbol + 1] - self.cdf[symbol]
    }

    pub fn probability(&self, symbol: usize) -> f64 {
        self.freq(symbol) as f64 / PROB_TOTAL as f64
    }

    /// Ideal code length of `value` under this table, including the raw
    /// escape payload for out-of-support values.
    pub fn cost_bits(&self, value: i32) -> f64 {
        match self.symbol_of(value) {
            Some(s) => -self.probability(s).log2(),
            None => -self.probability(self.escape_symbol()).log2() + 8.0 * escape_payload_len(value) as f64,
        }
    }

    /// Checks the structural invariants the range coder relies on.
    pub fn validate(&self, channel: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::CorruptTable { channel, reason });
        if self.cdf.len() < 3 {
            return bad(format!("{} entries", self.cdf.len()));
        }
        if self.cdf[0] != 0 || *self.cdf.last().unwrap() != PROB_TOTAL {
            return bad(format!(
                "endpoints {} and {} (expected 0 and {PROB_TOTAL})",
                self.cdf[0],
                self.cdf.last().unwrap()
            ));
        }
        if let Some(i) = self.cdf.windows(2).position(|w| w[1] <= w[0]) {
            return bad(format!("entry {} not strictly increasing", i + 1));
        }
        if self.min as i64 + self.support_len() as i64 - 1 > i32::MAX as i64 {
            return bad("support overflows i32".into());
        }
        Ok(())
    }
}

/// Bytes of the zigzag varint that follows an escape symbol.
pub(crate) fn escape_payload_len(value: i32) -> usize {
    let mut z = zigzag(value);
    let mut n = 1;
    while z >= 0x80 {
        z >>= 7;
        n += 1;
    }
    n
}

pub(crate) fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

pub(crate) fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    symbol: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Max-heap on the negated cost: the smallest deviation pops first,
    // lower symbol index breaking ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.symbol.cmp(&self.symbol))
    }
}

/// Scales probabilities to integer frequencies summing to [`PROB_TOTAL`],
/// each at least 1. The rounding surplus or deficit is spent one unit at a
/// time on the symbol whose frequency ends up closest to its exact scaled
/// probability, which keeps the worst per-symbol error small when many tail
/// symbols are raised to the 1-unit minimum.
pub(crate) fn quantize_pmf(pmf: &[f64]) -> Vec<u32> {
    let total = PROB_TOTAL as i64;
    assert!(!pmf.is_empty() && pmf.len() as i64 <= total);
    let mut freq: Vec<i64> = pmf
        .iter()
        .map(|&p| ((p * total as f64).round() as i64).max(1))
        .collect();
    let mut diff: i64 = freq.iter().sum::<i64>() - total;

    // Deviation in units after the adjustment.
    let removal_cost = |p: f64, f: i64| {
        if f <= 1 {
            f64::INFINITY
        } else {
            p * total as f64 - (f - 1) as f64
        }
    };
    let addition_cost = |p: f64, f: i64| (f + 1) as f64 - p * total as f64;

    if diff > 0 {
        let mut heap: BinaryHeap<_> = (0..pmf.len())
            .map(|s| Candidate {
                cost: removal_cost(pmf[s], freq[s]),
                symbol: s,
            })
            .collect();
        while diff > 0 {
            let c = heap.pop().expect("total frequency can always be reduced");
            let s = c.symbol;
            freq[s] -= 1;
            diff -= 1;
            heap.push(Candidate {
                cost: removal_cost(pmf[s], freq[s]),
                symbol: s,
            });
        }
    } else if diff < 0 {
        let mut heap: BinaryHeap<_> = (0..pmf.len())
            .map(|s| Candidate {
                cost: addition_cost(pmf[s], freq[s]),
                symbol: s,
            })
            .collect();
        while diff < 0 {
            let c = heap.pop().unwrap();
            let s = c.symbol;
            freq[s] += 1;
            diff += 1;
            heap.push(Candidate {
                cost: addition_cost(pmf[s], freq[s]),
                symbol: s,
            });
        }
    }
    freq.into_iter().map(|f| f as u32).collect()
}

/// Samples the prior into one coding table per channel.
///
/// The support of channel `i` is the smallest integer range `[min, max]`
/// with `c(min − ½) ≤ τ` and `1 − c(max + ½) ≤ τ`; the escape symbol carries
/// the remaining tail mass. A channel whose support would exceed
/// [`MAX_SUPPORT`] symbols (a numerically flat CDF) is clamped to a window
/// around its median with a warning.
pub fn build_tables<T: Real>(prior: &FactorizedPrior, store: &ParamStore<T>) -> Vec<CodingTable> {
    let store: ParamStore<f64> = store.cast();
    let lo_logit = (TAIL_MASS / (1.0 - TAIL_MASS)).ln();
    let limit = 1e7;
    (0..prior.channels())
        .map(|ch| {
            let median = prior.solve_logit(&store, ch, 0.0, limit).unwrap_or(0.0);
            let lo = prior.solve_logit(&store, ch, lo_logit, limit);
            let hi = prior.solve_logit(&store, ch, -lo_logit, limit);
            let (mut min, mut max) = match (lo, hi) {
                (Some(lo), Some(hi)) => ((lo + 0.5).floor() as i64, (hi - 0.5).ceil() as i64),
                _ => (i64::MIN, i64::MAX),
            };
            max = max.max(min);
            if (max - min + 1) as u128 > MAX_SUPPORT as u128 {
                warn!(
                    "entropy model channel {ch}: support too wide, clamping to {MAX_SUPPORT} symbols around {median:.1}"
                );
                min = median.round() as i64 - (MAX_SUPPORT / 2) as i64;
                max = min + MAX_SUPPORT as i64 - 1;
            }
            let min = min.clamp(i32::MIN as i64 / 2, i32::MAX as i64 / 2) as i32;
            let len = (max - min as i64 + 1) as usize;

            let mut pmf: Vec<f64> = (0..len)
                .map(|s| prior.bin_probability(&store, ch, (min as i64 + s as i64) as f64))
                .collect();
            let below = prior.cdf(&store, ch, min as f64 - 0.5);
            let above = 1.0 - prior.cdf(&store, ch, (min as i64 + len as i64) as f64 - 0.5);
            pmf.push((below + above).max(0.0));

            let freq = quantize_pmf(&pmf);
            let mut cdf = Vec::with_capacity(freq.len() + 1);
            cdf.push(0);
            let mut acc = 0;
            for f in freq {
                acc += f;
                cdf.push(acc);
            }
            CodingTable { min, cdf }
        })
        .collect()
}
