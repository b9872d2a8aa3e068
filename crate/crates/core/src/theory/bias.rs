//! Monte Carlo bias of stochastic rounding on 24-bit mantissas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numfmt::{stochastic_round, OpStream, RoundingMode};
use crate::report::{Cell, Csv};

/// Flag threshold in binomial standard deviations.
pub const FLAG_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub mantissa: u32,
    pub keep_bits: u32,
    /// `mantissa / 2^(24 - keep_bits)`, in units of the kept grid.
    pub exact: f64,
    pub mean: f64,
    /// Binomial standard error of `mean`.
    pub sigma: f64,
    pub flagged: bool,
}

impl BiasRow {
    pub fn z(&self) -> f64 {
        if self.sigma > 0.0 {
            (self.mean - self.exact) / self.sigma
        } else if self.mean == self.exact {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub trials: u64,
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    pub fn flagged(&self) -> usize {
        self.rows.iter().filter(|r| r.flagged).count()
    }

    pub fn to_csv(&self) -> String {
        let mut c = Csv::new(&["mantissa", "keep_bits", "exact", "mean", "sigma", "z", "flagged"]);
        for r in &self.rows {
            c.row(&[
                Cell::U(r.mantissa as u64),
                Cell::U(r.keep_bits as u64),
                Cell::F(r.exact),
                Cell::F(r.mean),
                Cell::F(r.sigma),
                Cell::F(r.z()),
                Cell::B(r.flagged),
            ]);
        }
        c.into_string()
    }
}

/// Rounds `m24` to `keep_bits` bits `trials` times on one stream and compares
/// the empirical mean with the exact value.
pub fn measure(m24: u32, keep_bits: u32, trials: u64, stream: &OpStream) -> BiasRow {
    let drop = 24 - keep_bits;
    let mut ups = 0u64;
    let hi = (m24 >> drop) as u64;
    for t in 0..trials {
        let draw = (stream.draw(t as usize) >> (64 - drop)) as u32;
        ups += stochastic_round(m24, keep_bits, draw) as u64 - hi;
    }
    let exact = m24 as f64 / (1u64 << drop) as f64;
    let p = exact - hi as f64;
    let mean = hi as f64 + ups as f64 / trials as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let mut row = BiasRow {
        mantissa: m24,
        keep_bits,
        exact,
        mean,
        sigma,
        flagged: false,
    };
    row.flagged = row.z().abs() > FLAG_SIGMAS;
    row
}

/// Random normalized 24-bit mantissas, each rounded to a random width in
/// `3..=7` kept bits (the magnitude bits of k = 4..8).
pub fn rounding_bias_suite(n_mantissas: usize, n_trials: u64, seed: u64) -> BiasReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n_mantissas)
        .map(|i| {
            let m24 = rng.random_range(1u32 << 23..1 << 24);
            let keep = rng.random_range(3..=7);
            measure(m24, keep, n_trials, &OpStream::new(seed, i as u64, RoundingMode::Stochastic))
        })
        .collect();
    BiasReport { trials: n_trials, rows }
}

/// The mantissa `(0.01011001010101010100000)_2` rounded to six fraction bits.
pub const WORKED_MANTISSA: u32 = 0b0101_1001_0101_0101_0100_000;
pub const WORKED_KEEP: u32 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkedExample {
    pub lower: u32,
    pub upper: u32,
    /// Lower 17 bits over 2^17.
    pub expected_up: f64,
    pub observed_up: f64,
    pub sigma: f64,
    /// Results other than `lower` or `upper`.
    pub strays: u64,
}

pub fn worked_example(draws: u64, seed: u64) -> WorkedExample {
    let drop = 24 - WORKED_KEEP;
    let lower = WORKED_MANTISSA >> drop;
    let stream = OpStream::new(seed, 0, RoundingMode::Stochastic);
    let (mut ups, mut strays) = (0u64, 0u64);
    for t in 0..draws {
        let draw = (stream.draw(t as usize) >> (64 - drop)) as u32;
        match stochastic_round(WORKED_MANTISSA, WORKED_KEEP, draw) {
            r if r == lower => {}
            r if r == lower + 1 => ups += 1,
            _ => strays += 1,
        }
    }
    let p = (WORKED_MANTISSA & ((1 << drop) - 1)) as f64 / (1u64 << drop) as f64;
    WorkedExample {
        lower,
        upper: lower + 1,
        expected_up: p,
        observed_up: ups as f64 / draws as f64,
        sigma: (p * (1.0 - p) / draws as f64).sqrt(),
        strays,
    }
}
