//! Text format for rounding golden vectors.
//!
//! One case per line: `m24_hex keep_bits draw_hex expected_hex`. Blank lines
//! and lines starting with `#` are ignored. `expected` is the rounded value
//! before saturation, so it may equal `2^keep_bits`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundingCase {
    pub m24: u32,
    pub keep_bits: u32,
    pub draw: u32,
    pub expected: u32,
}

impl RoundingCase {
    pub fn to_line(&self) -> String {
        format!("{:06x} {} {:x} {:x}", self.m24, self.keep_bits, self.draw, self.expected)
    }
}

fn hex(field: &str, line: usize) -> Result<u32> {
    u32::from_str_radix(field.trim_start_matches("0x"), 16)
        .map_err(|e| Error::Format(format!("line {line}: bad hex field `{field}`: {e}")))
}

pub fn parse_rounding_cases(text: &str) -> Result<Vec<RoundingCase>> {
    let mut cases = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [m, keep, draw, expected] = fields[..] else {
            return Err(Error::Format(format!("line {}: expected 4 fields", n + 1)));
        };
        let keep_bits: u32 = keep
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad keep_bits `{keep}`", n + 1)))?;
        if !(1..=23).contains(&keep_bits) {
            return Err(Error::Format(format!("line {}: keep_bits {keep_bits} out of range", n + 1)));
        }
        cases.push(RoundingCase {
            m24: hex(m, n + 1)?,
            keep_bits,
            draw: hex(draw, n + 1)?,
            expected: hex(expected, n + 1)?,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prints() {
        let text = "# header\n596aa0 7 0 17\n\nffffff 7 1ffff 80\n";
        let cases = parse_rounding_cases(text).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0], RoundingCase { m24: 0x596aa0, keep_bits: 7, draw: 0, expected: 0x17 });
        assert_eq!(cases[1].to_line(), "ffffff 7 1ffff 80");
        assert!(parse_rounding_cases("1 2 3").is_err());
        assert!(parse_rounding_cases("zz 7 0 0").is_err());
    }
}
