//! Rounding primitives and the counter-based random source behind them.
//!
//! Every rounding draw is a pure function of `(seed, op, index, lane)`, so the
//! result of an operation never depends on the order in which its elements are
//! processed.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoundingMode {
    Stochastic,
    /// Round to nearest, ties to even.
    Nearest,
}

impl std::str::FromStr for RoundingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stochastic" | "sr" => Ok(RoundingMode::Stochastic),
            "nearest" | "rn" => Ok(RoundingMode::Nearest),
            other => Err(format!("unknown rounding mode `{other}`")),
        }
    }
}

impl std::fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoundingMode::Stochastic => "stochastic",
            RoundingMode::Nearest => "nearest",
        })
    }
}

/// Source of rounding randomness for a sequence of operations.
///
/// Each tensor operation claims one operation id via [`RoundingContext::next_op`];
/// element `j` of that operation then draws from `(seed, op, j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundingContext {
    seed: u64,
    op_counter: u64,
    mode: RoundingMode,
}

impl RoundingContext {
    pub fn new(seed: u64, mode: RoundingMode) -> Self {
        Self {
            seed,
            op_counter: 0,
            mode,
        }
    }

    pub fn stochastic(seed: u64) -> Self {
        Self::new(seed, RoundingMode::Stochastic)
    }

    pub fn nearest() -> Self {
        Self::new(0, RoundingMode::Nearest)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> RoundingMode {
        self.mode
    }

    pub fn op_counter(&self) -> u64 {
        self.op_counter
    }

    pub fn set_mode(&mut self, mode: RoundingMode) {
        self.mode = mode;
    }

    /// Claims the next operation id.
    pub fn next_op(&mut self) -> OpStream {
        let op = self.op_counter;
        self.op_counter += 1;
        OpStream::new(self.seed, op, self.mode)
    }

    /// Derives an independent context, e.g. one per pass of a training step.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(
            mix64(self.seed ^ mix64(stream.wrapping_add(1).wrapping_mul(GOLDEN))),
            self.mode,
        )
    }
}

/// The draws available to a single operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpStream {
    key: u64,
    mode: RoundingMode,
}

impl OpStream {
    pub fn new(seed: u64, op: u64, mode: RoundingMode) -> Self {
        let key = mix64(mix64(seed).wrapping_add(op.wrapping_mul(GOLDEN) ^ 0xD6E8_FEB8_6659_FD93));
        Self { key, mode }
    }

    pub fn mode(&self) -> RoundingMode {
        self.mode
    }

    /// 64 uniform bits for element `index`.
    #[inline]
    pub fn draw(&self, index: usize) -> u64 {
        mix64(self.key ^ mix64((index as u64).wrapping_mul(GOLDEN)))
    }

    /// Rounds `magnitude >> shift` according to the stream's mode, using the
    /// draw of element `index`.
    #[inline]
    pub fn round_shift(&self, magnitude: u128, shift: u32, index: usize) -> u128 {
        match self.mode {
            RoundingMode::Nearest => round_shift_nearest(magnitude, shift),
            RoundingMode::Stochastic => round_shift_stochastic(magnitude, shift, self.draw(index)),
        }
    }
}

/// Stochastically rounds a 24-bit mantissa down to its top `keep_bits` bits.
///
/// `draw` must be uniform on `[0, 2^(24 - keep_bits))`. The result is `hi + 1`
/// when `draw < lo`, which can reach `2^keep_bits`; saturation is the caller's
/// job.
#[inline]
pub fn stochastic_round(m24: u32, keep_bits: u32, draw: u32) -> u32 {
    debug_assert!((1..=23).contains(&keep_bits));
    debug_assert!(m24 < 1 << 24);
    let drop = 24 - keep_bits;
    let hi = m24 >> drop;
    let lo = m24 & ((1 << drop) - 1);
    debug_assert!(draw < 1 << drop);
    if draw < lo {
        hi + 1
    } else {
        hi
    }
}

/// Round-to-nearest-even of a 24-bit mantissa down to `keep_bits` bits.
#[inline]
pub fn nearest_round(m24: u32, keep_bits: u32) -> u32 {
    round_shift_nearest(m24 as u128, 24 - keep_bits) as u32
}

#[inline]
pub(crate) fn round_shift_nearest(magnitude: u128, shift: u32) -> u128 {
    if shift == 0 {
        return magnitude;
    }
    if shift > 127 {
        return 0;
    }
    let hi = magnitude >> shift;
    let lo = magnitude & ((1u128 << shift) - 1);
    let half = 1u128 << (shift - 1);
    if lo > half || (lo == half && hi & 1 == 1) {
        hi + 1
    } else {
        hi
    }
}

/// Stochastic rounding of `magnitude >> shift`, rounding up with probability
/// equal to the discarded fraction. Exact for `shift <= 64`; longer shifts
/// first fold the excess bits into a sticky bit.
#[inline]
pub(crate) fn round_shift_stochastic(magnitude: u128, shift: u32, draw: u64) -> u128 {
    if shift == 0 {
        return magnitude;
    }
    let (magnitude, shift) = if shift > 64 {
        (sticky_shift_right(magnitude, shift - 64), 64)
    } else {
        (magnitude, shift)
    };
    let hi = magnitude >> shift;
    let lo = magnitude & ((1u128 << shift) - 1);
    let r = if shift == 64 {
        draw as u128
    } else {
        (draw & ((1u64 << shift) - 1)) as u128
    };
    if r < lo {
        hi + 1
    } else {
        hi
    }
}

/// Right shift that ORs every discarded bit into the result's lowest bit.
#[inline]
pub(crate) fn sticky_shift_right(magnitude: u128, shift: u32) -> u128 {
    if shift == 0 {
        return magnitude;
    }
    if shift >= 128 {
        return (magnitude != 0) as u128;
    }
    let kept = magnitude >> shift;
    let sticky = magnitude & ((1u128 << shift) - 1) != 0;
    kept | sticky as u128
}

/// Sticky right shift on a signed value, applied to the magnitude.
#[inline]
pub(crate) fn sticky_shift_right_signed(value: i128, shift: u32) -> i128 {
    let mag = sticky_shift_right(value.unsigned_abs(), shift) as i128;
    if value < 0 {
        -mag
    } else {
        mag
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn representable_mantissa_ignores_draw() {
        let m24 = 0b0010110 << 17;
        for draw in [0, 1, 12345, (1 << 17) - 1] {
            assert_eq!(stochastic_round(m24, 7, draw), 0b0010110);
        }
    }

    #[test]
    fn all_ones_mantissa_branches() {
        // lo = 2^17 - 1, so only the largest draw keeps hi = 127.
        assert_eq!(stochastic_round(0xFF_FFFF, 7, (1 << 17) - 1), 127);
        for draw in [0, 1, (1 << 17) - 2] {
            assert_eq!(stochastic_round(0xFF_FFFF, 7, draw), 128);
        }
    }

    #[test]
    fn exact_expectation_over_all_draws() {
        // Enumerate all 2^(24-k) draws for a handful of mantissas.
        for &(m24, keep) in &[(0x5A_5A5Au32, 8u32), (0x12_3457, 7), (0xFF_FFFF, 3), (0x80_0001, 5)] {
            let drop = 24 - keep;
            let total: u64 = (0..1u32 << drop)
                .map(|d| stochastic_round(m24, keep, d) as u64)
                .sum();
            assert_eq!(total, m24 as u64, "m24={m24:#x} keep={keep}");
        }
    }

    #[test]
    fn nearest_ties_to_even() {
        // lower 17 bits exactly half
        assert_eq!(nearest_round(0b1010_1000_0000_0000_0000_0000 | (1 << 16), 7), 0b1010100);
        assert_eq!(nearest_round(0b1010_1010_0000_0000_0000_0000 | (1 << 16), 7), 0b1010110);
        assert_eq!(nearest_round(0b1010_1000_0000_0000_0000_0000 | (1 << 16) | 1, 7), 0b1010101);
        // exactly half, even hi stays
        assert_eq!(round_shift_nearest(0b100_1000, 4), 0b100);
        // exactly half, odd hi rounds up
        assert_eq!(round_shift_nearest(0b101_1000, 4), 0b110);
        assert_eq!(round_shift_nearest(0b100_1001, 4), 0b101);
    }

    #[test]
    fn draws_are_pure_functions_of_seed_op_index() {
        let mut a = RoundingContext::stochastic(7);
        let mut b = RoundingContext::stochastic(7);
        let (sa, sb) = (a.next_op(), b.next_op());
        let forward: Vec<u64> = (0..100).map(|j| sa.draw(j)).collect();
        let backward: Vec<u64> = (0..100).rev().map(|j| sb.draw(j)).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
        assert_ne!(a.next_op().draw(0), sa.draw(0));
        assert_ne!(RoundingContext::stochastic(8).next_op().draw(0), sa.draw(0));
    }

    #[test]
    fn sticky_shift_keeps_evidence_of_discarded_bits() {
        assert_eq!(sticky_shift_right(0b1000, 3), 1);
        assert_eq!(sticky_shift_right(0b1001, 3), 1);
        assert_eq!(sticky_shift_right(0b10001, 3), 0b11);
        assert_eq!(sticky_shift_right(5, 200), 1);
        assert_eq!(sticky_shift_right(0, 200), 0);
        assert_eq!(sticky_shift_right_signed(-17, 3), -3);
    }

    #[test]
    fn wide_stochastic_shift_is_unbiased_in_expectation() {
        // P(up) = lo / 2^shift exactly; check with a 4-bit shift by enumeration.
        let total: u128 = (0..16u64).map(|d| round_shift_stochastic(0b1011_0111, 4, d)).sum();
        assert_eq!(total, 0b1011_0111);
    }
}
