//! Bit-exact entropy coding of integer symbols under the dither-conditional
//! PMF.
//!
//! The coder is a 64-bit-state range coder with 32-bit renormalization and
//! carry propagation into the emitted words. Symbol CDFs are rebuilt on the
//! fly from the density for every coefficient because the PMF depends on that
//! coefficient's dither offset; there are no static tables. Symbols outside a
//! channel's mass window are sent as an escape followed by 32 raw bits.

use crate::channel::DitherStream;
use crate::density::EvalDensity;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CoderError {
    #[error("pmf has {n} symbols, more than the 2^16 frequency slots")]
    TooManySymbols { n: usize },
    #[error("pmf row is empty or not normalizable")]
    InvalidPmf,
    #[error("payload exhausted after {decoded} of {expected} symbols")]
    PayloadExhausted { decoded: usize, expected: usize },
}

/// Cumulative frequency total: all rows are quantized to 16-bit precision.
pub const CDF_TOTAL: u32 = 1 << 16;

const RENORM_THRESHOLD: u64 = 1 << 32;

// ---------------------------------------------------------------------------
// Range coder primitive.
// ---------------------------------------------------------------------------

pub struct RangeEncoder {
    low: u64,
    range: u64,
    words: Vec<u32>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder { low: 0, range: u64::MAX, words: Vec::new() }
    }

    /// Narrows the interval to `[cum, cum + freq) / 2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq >= 1 && cum + freq <= CDF_TOTAL);
        let r = self.range >> 16;
        let (low, carry) = self.low.overflowing_add(r * cum as u64);
        self.low = low;
        if carry {
            // Propagate into already-emitted words.
            for w in self.words.iter_mut().rev() {
                let (inc, again) = w.overflowing_add(1);
                *w = inc;
                if !again {
                    break;
                }
            }
        }
        self.range = r * freq as u64;
        while self.range < RENORM_THRESHOLD {
            self.words.push((self.low >> 32) as u32);
            self.low <<= 32;
            self.range <<= 32;
        }
    }

    /// Sixteen raw bits through the coder (uniform slot of width 1).
    pub fn encode_raw16(&mut self, value: u16) {
        self.encode(value as u32, 1);
    }

    /// Flushes the remaining state; the payload is a big-endian byte stream.
    pub fn finish(mut self) -> Vec<u8> {
        self.words.push((self.low >> 32) as u32);
        self.words.push(self.low as u32);
        let mut out = Vec::with_capacity(self.words.len() * 4);
        for w in self.words {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    payload: &'a [u8],
    next_word: usize,
    range: u64,
    code: u64,
    exhausted: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(payload: &'a [u8]) -> RangeDecoder<'a> {
        let mut d =
            RangeDecoder { payload, next_word: 0, range: u64::MAX, code: 0, exhausted: false };
        let hi = d.pull() as u64;
        let lo = d.pull() as u64;
        d.code = (hi << 32) | lo;
        d
    }

    fn pull(&mut self) -> u32 {
        let base = self.next_word * 4;
        self.next_word += 1;
        if base + 4 <= self.payload.len() {
            u32::from_be_bytes(self.payload[base..base + 4].try_into().unwrap())
        } else {
            self.exhausted = true;
            0
        }
    }

    /// True once the decoder has had to read past the end of the payload.
    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    /// Quantile of the current code point, in `[0, 2^16)`.
    pub fn decode_cum(&self) -> u32 {
        let r = self.range >> 16;
        ((self.code / r) as u32).min(CDF_TOTAL - 1)
    }

    /// Consumes the symbol slot `[cum, cum + freq)`.
    pub fn advance(&mut self, cum: u32, freq: u32) {
        let r = self.range >> 16;
        self.code = self.code.wrapping_sub(r * cum as u64);
        self.range = r * freq as u64;
        while self.range < RENORM_THRESHOLD {
            self.code = (self.code << 32) | self.pull() as u64;
            self.range <<= 32;
        }
    }

    pub fn decode_raw16(&mut self) -> u16 {
        let v = self.decode_cum() as u16;
        self.advance(v as u32, 1);
        v
    }
}

// ---------------------------------------------------------------------------
// Quantized CDFs.
// ---------------------------------------------------------------------------

/// Per-symbol cumulative frequencies at 16-bit precision; every symbol keeps
/// a frequency of at least one so any symbol stays codable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>, // length n+1: cum[0] = 0, cum[n] = 2^16, strictly increasing
}

impl QuantizedCdf {
    pub fn from_pmf(pmf: &[f64]) -> Result<QuantizedCdf, CoderError> {
        let n = pmf.len();
        if n == 0 {
            return Err(CoderError::InvalidPmf);
        }
        if n as u64 > CDF_TOTAL as u64 {
            return Err(CoderError::TooManySymbols { n });
        }
        let mut freqs: Vec<u64> =
            pmf.iter().map(|&p| ((p * CDF_TOTAL as f64).round() as u64).max(1)).collect();
        let mut total: u64 = freqs.iter().sum();
        while total > CDF_TOTAL as u64 {
            // Shave the most probable symbol first; ties break to the lowest
            // index so the outcome is deterministic.
            let (idx, &max) =
                freqs.iter().enumerate().max_by_key(|&(i, &f)| (f, usize::MAX - i)).unwrap();
            let cut = (total - CDF_TOTAL as u64).min(max - 1);
            if cut == 0 {
                return Err(CoderError::InvalidPmf);
            }
            freqs[idx] -= cut;
            total -= cut;
        }
        if total < CDF_TOTAL as u64 {
            let (idx, _) =
                freqs.iter().enumerate().max_by_key(|&(i, &f)| (f, usize::MAX - i)).unwrap();
            freqs[idx] += CDF_TOTAL as u64 - total;
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freqs {
            acc += f as u32;
            cum.push(acc);
        }
        debug_assert_eq!(*cum.last().unwrap(), CDF_TOTAL);
        Ok(QuantizedCdf { cum })
    }

    pub fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn slot(&self, symbol: usize) -> (u32, u32) {
        (self.cum[symbol], self.cum[symbol + 1] - self.cum[symbol])
    }

    /// Symbol whose slot contains quantile `q`.
    pub fn find(&self, q: u32) -> usize {
        self.cum.partition_point(|&c| c <= q) - 1
    }

    /// Code length of `symbol` in bits.
    pub fn bits(&self, symbol: usize) -> f64 {
        let (_, f) = self.slot(symbol);
        -(f as f64 / CDF_TOTAL as f64).log2()
    }
}

// ---------------------------------------------------------------------------
// Dither-conditional symbol codec.
// ---------------------------------------------------------------------------

#[inline]
fn zigzag(k: i64) -> u32 {
    ((k << 1) ^ (k >> 63)) as u32
}

#[inline]
fn unzigzag(v: u32) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

/// Entropy codec for coefficient symbols under a frozen density. Each
/// channel carries a symbol window covering all but ~1e-9 of the model mass;
/// out-of-window symbols use the escape slot plus 32 raw bits.
pub struct SymbolCodec<'a> {
    density: &'a EvalDensity,
    alpha: f64,
    ranges: Vec<(i64, i64)>,
}

impl<'a> SymbolCodec<'a> {
    pub fn new(density: &'a EvalDensity, alpha: f64) -> SymbolCodec<'a> {
        let ranges = (0..density.channels()).map(|ch| density.symbol_range(ch)).collect();
        SymbolCodec { density, alpha, ranges }
    }

    pub fn range(&self, channel: usize) -> (i64, i64) {
        self.ranges[channel]
    }

    fn row(&self, channel: usize, u: f64, buf: &mut Vec<f64>) -> QuantizedCdf {
        let (k_min, k_max) = self.ranges[channel];
        self.density.pmf_row(channel, u, self.alpha, k_min, k_max, buf);
        let in_window: f64 = buf.iter().sum();
        buf.push((1.0 - in_window).max(1e-12)); // escape slot
        QuantizedCdf::from_pmf(buf).expect("window capped below 2^16 slots")
    }

    /// Encodes symbols in their storage order; the offset for symbol `i` is
    /// `dither.offset(index_base + i)` and its channel is `channel_of(i)`.
    pub fn encode(
        &self,
        symbols: &[i64],
        dither: &DitherStream,
        index_base: u64,
        channel_of: impl Fn(usize) -> usize,
    ) -> Vec<u8> {
        let mut enc = RangeEncoder::new();
        let mut buf = Vec::new();
        for (i, &k) in symbols.iter().enumerate() {
            let ch = channel_of(i);
            let (k_min, k_max) = self.ranges[ch];
            let u = dither.offset(index_base + i as u64);
            let cdf = self.row(ch, u, &mut buf);
            let n = cdf.num_symbols();
            if k >= k_min && k <= k_max {
                let (cum, freq) = cdf.slot((k - k_min) as usize);
                enc.encode(cum, freq);
            } else {
                let (cum, freq) = cdf.slot(n - 1);
                enc.encode(cum, freq);
                let z = zigzag(k);
                enc.encode_raw16((z >> 16) as u16);
                enc.encode_raw16(z as u16);
            }
        }
        enc.finish()
    }

    pub fn decode(
        &self,
        payload: &[u8],
        count: usize,
        dither: &DitherStream,
        index_base: u64,
        channel_of: impl Fn(usize) -> usize,
    ) -> Result<Vec<i64>, CoderError> {
        let mut dec = RangeDecoder::new(payload);
        let mut buf = Vec::new();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let ch = channel_of(i);
            let (k_min, _) = self.ranges[ch];
            let u = dither.offset(index_base + i as u64);
            let cdf = self.row(ch, u, &mut buf);
            let n = cdf.num_symbols();
            let sym = cdf.find(dec.decode_cum());
            let (cum, freq) = cdf.slot(sym);
            dec.advance(cum, freq);
            let k = if sym == n - 1 {
                let hi = dec.decode_raw16() as u32;
                let lo = dec.decode_raw16() as u32;
                unzigzag((hi << 16) | lo)
            } else {
                k_min + sym as i64
            };
            if dec.exhausted() {
                return Err(CoderError::PayloadExhausted { decoded: i, expected: count });
            }
            out.push(k);
        }
        Ok(out)
    }

    /// Model cross-entropy of the symbols in bits (sum of `-log2 P(k|u)`),
    /// before CDF quantization.
    pub fn ideal_bits(
        &self,
        symbols: &[i64],
        dither: &DitherStream,
        index_base: u64,
        channel_of: impl Fn(usize) -> usize,
    ) -> f64 {
        symbols
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let u = dither.offset(index_base + i as u64);
                -self.density.pmf_given_dither(channel_of(i), k, u, self.alpha).log2()
            })
            .sum()
    }
}
