//! Byte-oriented range coder with 16-bit probability precision.
//!
//! State is a 33-bit `low` with a pending-byte cache for carry propagation
//! and a 32-bit `range` kept at or above `2^24`. The leading byte of the
//! classic formulation is always zero and is not emitted, and the flush
//! writes exactly the four bytes the decoder preloads, so a valid stream is
//! consumed to its last byte.

use crate::error::EntropyError;

type Result<T> = std::result::Result<T, EntropyError>;

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;

/// Cumulative frequency table: `cum[0] = 0`, `cum[k] = TOTAL`, every
/// symbol interval at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cdf {
    cum: Vec<u32>,
}

impl Cdf {
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(EntropyError::InvalidCdf("empty alphabet".into()));
        }
        if let Some(i) = freqs.iter().position(|&f| f == 0) {
            return Err(EntropyError::InvalidCdf(format!("symbol {i} has zero frequency")));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            acc += f as u64;
            cum.push(acc.min(u32::MAX as u64) as u32);
        }
        if acc != TOTAL as u64 {
            return Err(EntropyError::InvalidCdf(format!("frequencies sum to {acc}, expected {TOTAL}")));
        }
        Ok(Self { cum })
    }

    /// Quantizes a probability mass function to 16 bits. Every symbol gets at
    /// least one unit; the rounding surplus or deficit is absorbed by the
    /// largest bins.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        let k = pmf.len();
        if k == 0 || k > TOTAL as usize {
            return Err(EntropyError::InvalidCdf(format!("alphabet of {k} symbols")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EntropyError::InvalidCdf("negative or non-finite mass".into()));
        }
        let mass: f64 = pmf.iter().sum();
        if mass <= 0.0 {
            return Err(EntropyError::InvalidCdf("zero total mass".into()));
        }
        let mut freqs: Vec<u32> = pmf
            .iter()
            .map(|p| ((p / mass) * TOTAL as f64).round().max(1.0) as u32)
            .collect();
        let mut sum: i64 = freqs.iter().map(|&f| f as i64).sum();
        while sum != TOTAL as i64 {
            let (i, &fmax) = freqs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty");
            if sum > TOTAL as i64 {
                let take = ((sum - TOTAL as i64) as u32).min(fmax - 1);
                if take == 0 {
                    return Err(EntropyError::InvalidCdf("alphabet too large for precision".into()));
                }
                freqs[i] -= take;
                sum -= take as i64;
            } else {
                freqs[i] += (TOTAL as i64 - sum) as u32;
                sum = TOTAL as i64;
            }
        }
        Self::from_freqs(&freqs)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_pmf(&vec![1.0; k])
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Coded probability of symbol `s`.
    pub fn prob(&self, s: usize) -> f64 {
        self.freq(s) as f64 / TOTAL as f64
    }

    /// Symbol whose interval contains `v`.
    fn find(&self, v: u32) -> usize {
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    skipped_first: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
            skipped_first: false,
        }
    }

    fn emit(&mut self, b: u8) {
        if self.skipped_first {
            self.out.push(b);
        } else {
            debug_assert_eq!(b, 0);
            self.skipped_first = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.emit(b.wrapping_add(carry));
                b = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode_interval(&mut self, start: u32, freq: u32) {
        let r = self.range >> PRECISION;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &Cdf) -> Result<()> {
        if symbol >= cdf.len() {
            return Err(EntropyError::SymbolOutOfSupport {
                symbol,
                support: cdf.len(),
            });
        }
        self.encode_interval(cdf.start(symbol), cdf.freq(symbol));
        Ok(())
    }

    /// Sixteen raw bits at uniform probability.
    pub fn encode_raw16(&mut self, v: u16) {
        self.encode_interval(v as u32, 1);
    }

    pub fn encode_raw32(&mut self, v: u32) {
        self.encode_raw16((v >> 16) as u16);
        self.encode_raw16(v as u16);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(EntropyError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn target(&self) -> Result<(u32, u32)> {
        let r = self.range >> PRECISION;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(EntropyError::Corrupt);
        }
        Ok((r, v))
    }

    fn consume(&mut self, r: u32, start: u32, freq: u32) -> Result<()> {
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, cdf: &Cdf) -> Result<usize> {
        let (r, v) = self.target()?;
        let s = cdf.find(v);
        self.consume(r, cdf.start(s), cdf.freq(s))?;
        Ok(s)
    }

    pub fn decode_raw16(&mut self) -> Result<u16> {
        let (r, v) = self.target()?;
        self.consume(r, v, 1)?;
        Ok(v as u16)
    }

    pub fn decode_raw32(&mut self) -> Result<u32> {
        let hi = self.decode_raw16()? as u32;
        let lo = self.decode_raw16()? as u32;
        Ok((hi << 16) | lo)
    }

    /// Succeeds only when every byte was consumed.
    pub fn finish(self) -> Result<()> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(EntropyError::TrailingBytes(n)),
        }
    }
}

/// Encodes `symbols[i]` under `cdfs[i]`.
pub fn rc_encode(symbols: &[usize], cdfs: &[&Cdf]) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

pub fn rc_decode(bytes: &[u8], cdfs: &[&Cdf]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let out = cdfs.iter().map(|c| dec.decode(c)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// Ideal code length in bits of `symbols` under the coded probabilities.
pub fn ideal_bits(symbols: &[usize], cdfs: &[&Cdf]) -> f64 {
    symbols
        .iter()
        .zip(cdfs)
        .map(|(&s, c)| -c.prob(s).log2())
        .sum()
}
