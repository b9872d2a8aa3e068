//! Alignment of wide integer terms that live at different units.

use crate::numfmt::rounding::sticky_shift_right_signed;

/// Headroom kept below the largest term so sums of many aligned terms still
/// fit in an `i128`.
const SPAN: i32 = 96;

fn bit_len(v: u128) -> i32 {
    128 - v.leading_zeros() as i32
}

/// Picks a common unit for terms described by `(max |value|, unit)`: the
/// finest unit present, but never more than [`SPAN`] bits below the top.
pub(crate) fn common_unit(terms: &[(u128, i32)]) -> Option<i32> {
    let live = terms.iter().filter(|(m, _)| *m != 0);
    let top = live.clone().map(|&(m, u)| u + bit_len(m)).max()?;
    let finest = live.map(|&(_, u)| u).min()?;
    Some(finest.max(top - SPAN))
}

/// Moves `value` from `from` to `to`; coarser-to-finer shifts are exact,
/// finer-to-coarser shifts keep a sticky bit.
#[inline]
pub(crate) fn shift_to(value: i128, from: i32, to: i32) -> i128 {
    if from >= to {
        value << (from - to) as u32
    } else {
        sticky_shift_right_signed(value, (to - from) as u32)
    }
}

pub(crate) fn max_abs<T: Copy + Into<i128>>(values: &[T]) -> u128 {
    values.iter().map(|&v| v.into().unsigned_abs()).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finest_unit_when_in_range() {
        assert_eq!(common_unit(&[(127, -6), (127, -10)]), Some(-10));
        assert_eq!(common_unit(&[(0, -6), (0, -10)]), None);
        assert_eq!(common_unit(&[(127, 0), (1, -200)]), Some(7 - SPAN));
        assert_eq!(shift_to(3, -2, -5), 24);
        assert_eq!(shift_to(-9, -5, -2), -1);
        assert_eq!(shift_to(-8, -5, -2), -1);
        assert_eq!(shift_to(-16, -5, -2), -2);
    }
}
