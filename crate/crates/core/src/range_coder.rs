//! 32-bit carry-propagating range coder over 16-bit integer CDFs.
//!
//! The encoder keeps a 33-bit `low` and propagates carries straight into the
//! bytes already written. The decoder reads zero bytes past the end of its
//! input; a well-formed stream never needs more than four of them, which is
//! how truncation is detected.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;
const MAX_OVERRUN: usize = 4;

/// Cumulative frequency table; `bounds[s]..bounds[s + 1]` is symbol `s`'s slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cdf {
    bounds: Vec<u32>,
}

impl Cdf {
    /// Builds a CDF from per-symbol frequencies that sum to [`PROB_TOTAL`].
    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Range("CDF needs at least one symbol".into()));
        }
        let mut bounds = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        bounds.push(0);
        for &f in freqs {
            if f == 0 {
                return Err(Error::Range(
                    "every symbol needs a nonzero frequency".into(),
                ));
            }
            acc = acc
                .checked_add(f)
                .ok_or_else(|| Error::Range("CDF total overflows".into()))?;
            bounds.push(acc);
        }
        if acc != PROB_TOTAL {
            return Err(Error::Range(format!("CDF total {acc} != {PROB_TOTAL}")));
        }
        Ok(Self { bounds })
    }

    pub fn uniform(symbols: usize) -> Result<Self> {
        if symbols == 0 || symbols > PROB_TOTAL as usize {
            return Err(Error::Range(format!(
                "cannot build a uniform CDF over {symbols} symbols"
            )));
        }
        let base = PROB_TOTAL / symbols as u32;
        let extra = (PROB_TOTAL % symbols as u32) as usize;
        let freqs: Vec<u32> = (0..symbols).map(|s| base + (s < extra) as u32).collect();
        Self::from_frequencies(&freqs)
    }

    /// Quantizes real-valued probabilities: every symbol gets a floor of 1
    /// and the rounding remainder goes to the most probable symbol.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        if n == 0 || n > PROB_TOTAL as usize {
            return Err(Error::Range(format!("cannot quantize {n} probabilities")));
        }
        let budget = (PROB_TOTAL as usize - n) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| 1 + (p.clamp(0.0, 1.0) * budget).floor() as u32)
            .collect();
        let mode = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        let target = PROB_TOTAL as u64;
        if total <= target {
            freqs[mode] += (target - total) as u32;
        } else {
            let excess = (total - target) as u32;
            if freqs[mode] <= excess {
                return Err(Error::Range("probabilities do not sum to one".into()));
            }
            freqs[mode] -= excess;
        }
        Self::from_frequencies(&freqs)
    }

    pub fn symbols(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn range_of(&self, symbol: usize) -> (u32, u32) {
        (
            self.bounds[symbol],
            self.bounds[symbol + 1] - self.bounds[symbol],
        )
    }

    pub fn probability(&self, symbol: usize) -> f64 {
        self.range_of(symbol).1 as f64 / PROB_TOTAL as f64
    }

    fn find(&self, value: u32) -> usize {
        // Largest s with bounds[s] <= value.
        self.bounds.partition_point(|&b| b <= value) - 1
    }
}

/// Adaptive binary probability, 16-bit, exponential-decay update.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveBit {
    p_zero: u32,
}

impl Default for AdaptiveBit {
    fn default() -> Self {
        Self {
            p_zero: PROB_TOTAL / 2,
        }
    }
}

impl AdaptiveBit {
    const SHIFT: u32 = 5;
    const MIN: u32 = 1 << 6;

    fn update(&mut self, bit: bool) {
        if bit {
            self.p_zero -= self.p_zero >> Self::SHIFT;
        } else {
            self.p_zero += (PROB_TOTAL - self.p_zero) >> Self::SHIFT;
        }
        self.p_zero = self.p_zero.clamp(Self::MIN, PROB_TOTAL - Self::MIN);
    }
}

#[derive(Debug, Default)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    fn propagate_carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("range coder carry past the start of the stream");
    }

    /// Codes the slot `[cum, cum + freq)` out of [`PROB_TOTAL`]. Slot edges
    /// are `floor(range * cum / PROB_TOTAL)`, so the whole interval is used.
    pub fn encode_range(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let range = self.range as u64;
        let start = (range * cum as u64) >> PROB_BITS;
        let end = (range * (cum + freq) as u64) >> PROB_BITS;
        self.low += start;
        self.range = (end - start) as u32;
        if self.low >> 32 != 0 {
            self.low &= 0xFFFF_FFFF;
            self.propagate_carry();
        }
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & 0xFFFF_FFFF;
            self.range <<= 8;
        }
    }

    pub fn encode(&mut self, cdf: &Cdf, symbol: usize) {
        let (cum, freq) = cdf.range_of(symbol);
        self.encode_range(cum, freq);
    }

    pub fn encode_bit(&mut self, model: &mut AdaptiveBit, bit: bool) {
        let p0 = model.p_zero;
        if bit {
            self.encode_range(p0, PROB_TOTAL - p0);
        } else {
            self.encode_range(0, p0);
        }
        model.update(bit);
    }

    /// Emits the fewest bytes that pin a value inside the final interval,
    /// given that the decoder pads with zeros.
    pub fn finish(mut self) -> Vec<u8> {
        let hi = self.low + self.range as u64;
        for n in 0..=4u32 {
            let unit = 1u64 << (32 - 8 * n);
            let v = self.low.div_ceil(unit) * unit;
            if v < hi {
                let v = if v >> 32 != 0 {
                    self.propagate_carry();
                    v & 0xFFFF_FFFF
                } else {
                    v
                };
                for i in 0..n {
                    self.out.push((v >> (24 - 8 * i)) as u8);
                }
                break;
            }
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        if self.pos > self.data.len() + MAX_OVERRUN {
            return Err(Error::bitstream(
                "range decoder read past the end of its payload",
            ));
        }
        Ok(())
    }

    /// Largest cumulative frequency whose slot starts at or below `code`.
    fn target(&self) -> Result<u32> {
        let v = (((self.code as u64 + 1) << PROB_BITS) - 1) / self.range as u64;
        if v >= PROB_TOTAL as u64 {
            return Err(Error::bitstream(
                "range decoder state outside the coded interval",
            ));
        }
        Ok(v as u32)
    }

    fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        let range = self.range as u64;
        let start = (range * cum as u64) >> PROB_BITS;
        let end = (range * (cum + freq) as u64) >> PROB_BITS;
        self.code -= start as u32;
        self.range = (end - start) as u32;
        self.normalize()
    }

    pub fn decode(&mut self, cdf: &Cdf) -> Result<usize> {
        let v = self.target()?;
        let s = cdf.find(v);
        let (cum, freq) = cdf.range_of(s);
        self.consume(cum, freq)?;
        Ok(s)
    }

    pub fn decode_bit(&mut self, model: &mut AdaptiveBit) -> Result<bool> {
        let v = self.target()?;
        let p0 = model.p_zero;
        let bit = v >= p0;
        if bit {
            self.consume(p0, PROB_TOTAL - p0)?;
        } else {
            self.consume(0, p0)?;
        }
        model.update(bit);
        Ok(bit)
    }

    /// Bytes consumed, including zero padding past the end.
    pub fn consumed(&self) -> usize {
        self.pos
    }
}

/// Supplies the CDF for position `index`, seeing every symbol coded before it.
pub trait CdfProvider {
    fn cdf(&mut self, index: usize, history: &[usize]) -> Result<Cdf>;
}

impl<F> CdfProvider for F
where
    F: FnMut(usize, &[usize]) -> Result<Cdf>,
{
    fn cdf(&mut self, index: usize, history: &[usize]) -> Result<Cdf> {
        self(index, history)
    }
}

pub fn range_encode(symbols: &[usize], provider: &mut impl CdfProvider) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let cdf = provider.cdf(i, &symbols[..i])?;
        if s >= cdf.symbols() {
            return Err(Error::Range(format!(
                "symbol {s} outside a {}-symbol alphabet",
                cdf.symbols()
            )));
        }
        enc.encode(&cdf, s);
    }
    Ok(enc.finish())
}

pub fn range_decode(
    bytes: &[u8],
    count: usize,
    provider: &mut impl CdfProvider,
) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let cdf = provider.cdf(i, &out)?;
        let s = dec.decode(&cdf)?;
        out.push(s);
    }
    Ok(out)
}

/// Laplace CDF at `x`, evaluated in f64.
pub fn laplace_cdf(x: f64, mu: f64, b: f64) -> f64 {
    let t = (x - mu) / b;
    if t < 0.0 {
        0.5 * t.exp()
    } else {
        1.0 - 0.5 * (-t).exp()
    }
}

/// Integer CDF of a discretized Laplace over the integers `lo..=hi`, with the
/// mass below `lo` and above `hi` folded into the end symbols. Encoder and
/// decoder call this with identical f32 inputs, so the table is identical.
pub fn laplace_integer_cdf(mu: f32, b: f32, lo: i32, hi: i32) -> Result<Cdf> {
    if hi < lo {
        return Err(Error::Range(format!("empty alphabet [{lo}, {hi}]")));
    }
    let n = (hi as i64 - lo as i64 + 1) as usize;
    if n > PROB_TOTAL as usize {
        return Err(Error::Range(format!(
            "alphabet of {n} symbols exceeds the CDF precision"
        )));
    }
    if n == 1 {
        return Cdf::from_frequencies(&[PROB_TOTAL]);
    }
    let (mu, b) = (mu as f64, b as f64);
    let mut probs = Vec::with_capacity(n);
    let mut prev = 0.0;
    for v in lo..hi {
        let c = laplace_cdf(v as f64 + 0.5, mu, b);
        probs.push((c - prev).max(0.0));
        prev = c;
    }
    probs.push((1.0 - prev).max(0.0));
    Cdf::from_probabilities(&probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixed(cdf: Cdf) -> impl FnMut(usize, &[usize]) -> Result<Cdf> {
        move |_, _| Ok(cdf.clone())
    }

    #[test]
    fn single_binary_symbol_is_tiny() {
        for s in 0..2 {
            let bytes = range_encode(&[s], &mut fixed(Cdf::uniform(2).unwrap())).unwrap();
            assert!(bytes.len() <= 3);
            let back = range_decode(&bytes, 1, &mut fixed(Cdf::uniform(2).unwrap())).unwrap();
            assert_eq!(back, vec![s]);
        }
    }

    #[test]
    fn skewed_source_codes_near_entropy() {
        let freqs = [39000u32, 15000, 6000, 3000, 1500, 536, 400, 100];
        let cdf = Cdf::from_frequencies(&freqs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let symbols: Vec<usize> = (0..100_000)
            .map(|_| {
                let v = rng.random_range(0..PROB_TOTAL);
                cdf.find(v)
            })
            .collect();
        let ideal_bits: f64 = symbols.iter().map(|&s| -cdf.probability(s).log2()).sum();
        let bytes = range_encode(&symbols, &mut fixed(cdf.clone())).unwrap();
        let actual_bits = bytes.len() as f64 * 8.0;
        assert!(
            actual_bits <= ideal_bits * 1.01 + 64.0,
            "{actual_bits} vs {ideal_bits}"
        );
        assert!(actual_bits <= ideal_bits + 32.0 + 16.0);
        let back = range_decode(&bytes, symbols.len(), &mut fixed(cdf)).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn deterministic_symbol_costs_nothing() {
        let cdf = Cdf::from_frequencies(&[1, PROB_TOTAL - 2, 1]).unwrap();
        let symbols = vec![1usize; 1000];
        let bytes = range_encode(&symbols, &mut fixed(cdf.clone())).unwrap();
        assert!(bytes.len() <= 4, "{} bytes", bytes.len());
        assert_eq!(
            range_decode(&bytes, 1000, &mut fixed(cdf)).unwrap(),
            symbols
        );

        let single = Cdf::from_frequencies(&[PROB_TOTAL]).unwrap();
        let bytes = range_encode(&[0; 500], &mut fixed(single.clone())).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(
            range_decode(&bytes, 500, &mut fixed(single)).unwrap(),
            vec![0; 500]
        );
    }

    #[test]
    fn provider_sees_history() {
        // Next-symbol model depends on the previous symbol.
        let mut model = |_: usize, h: &[usize]| -> Result<Cdf> {
            match h.last() {
                Some(0) => Cdf::from_frequencies(&[60000, 5000, 536]),
                _ => Cdf::uniform(3),
            }
        };
        let symbols = vec![0, 0, 1, 2, 0, 0, 0, 1];
        let bytes = range_encode(&symbols, &mut model).unwrap();
        assert_eq!(
            range_decode(&bytes, symbols.len(), &mut model).unwrap(),
            symbols
        );
    }

    #[test]
    fn corrupt_and_truncated_streams_error() {
        let cdf = Cdf::from_frequencies(&[30000, 30000, 5536]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let symbols: Vec<usize> = (0..2000).map(|_| rng.random_range(0..3)).collect();
        let bytes = range_encode(&symbols, &mut fixed(cdf.clone())).unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        assert!(range_decode(truncated, symbols.len(), &mut fixed(cdf.clone())).is_err());

        // Flipped bytes either fail or decode to something else; never panic.
        let mut flipped = bytes.clone();
        flipped[3] ^= 0x5A;
        match range_decode(&flipped, symbols.len(), &mut fixed(cdf)) {
            Ok(back) => assert_ne!(back, symbols),
            Err(e) => assert!(matches!(e, Error::Bitstream(_))),
        }
    }

    #[test]
    fn adaptive_bits_roundtrip_and_compress() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bits: Vec<bool> = (0..20_000).map(|_| rng.random::<f32>() < 0.05).collect();
        let mut enc = RangeEncoder::new();
        let mut m = AdaptiveBit::default();
        for &b in &bits {
            enc.encode_bit(&mut m, b);
        }
        let bytes = enc.finish();
        let h = -(0.05f64 * 0.05f64.log2() + 0.95 * 0.95f64.log2());
        assert!((bytes.len() as f64 * 8.0) < 20_000.0 * h * 1.1);
        let mut dec = RangeDecoder::new(&bytes);
        let mut m = AdaptiveBit::default();
        for &b in &bits {
            assert_eq!(dec.decode_bit(&mut m).unwrap(), b);
        }
    }

    #[test]
    fn laplace_table_properties() {
        let cdf = laplace_integer_cdf(0.3, 1.7, -20, 20).unwrap();
        assert_eq!(cdf.symbols(), 41);
        let mode = (0..41)
            .max_by(|&a, &b| cdf.probability(a).partial_cmp(&cdf.probability(b)).unwrap())
            .unwrap();
        assert_eq!(mode as i32 - 20, 0);
        // Folded tails: the ends carry at least the open-interval mass.
        let tail = laplace_cdf(-19.5, 0.3, 1.7);
        assert!(cdf.probability(0) >= tail * 0.99);
        assert_eq!(laplace_integer_cdf(0.0, 1.0, 4, 4).unwrap().symbols(), 1);
        assert!(laplace_integer_cdf(0.0, 1.0, 4, 3).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_random_tables(seed in any::<u64>(), n in 1usize..300, alphabet in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut freqs: Vec<u32> = (0..alphabet).map(|_| rng.random_range(1..1000)).collect();
            let sum: u32 = freqs.iter().sum();
            let scaled: Vec<f64> = freqs.iter().map(|&f| f as f64 / sum as f64).collect();
            let cdf = Cdf::from_probabilities(&scaled).unwrap();
            freqs.clear();
            let symbols: Vec<usize> = (0..n).map(|_| rng.random_range(0..alphabet)).collect();
            let bytes = range_encode(&symbols, &mut fixed(cdf.clone())).unwrap();
            let ideal: f64 = symbols.iter().map(|&s| -cdf.probability(s).log2()).sum();
            prop_assert!(bytes.len() as f64 * 8.0 <= ideal + 32.0 + 16.0);
            prop_assert_eq!(range_decode(&bytes, n, &mut fixed(cdf)).unwrap(), symbols);
        }
    }
}
