//! `dfxtrain verify SUITE`: groups of acceptance checks with CSV detail.

use crate::criteria::{self, Criterion};
use crate::error::{CliError, Result};

pub const SUITES: [&str; 7] = ["rounding", "mapping", "gemm", "norm", "sgd", "theorem1", "variance"];

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Criterion>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Detail tables of every check, each preceded by a `# AC<n>` line.
    pub fn csv(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!("# AC{} {}\n", c.id, c.title));
            s.push_str(&c.csv);
        }
        s
    }
}

pub fn cmd_verify(suite: &str) -> Result<SuiteReport> {
    let checks = match suite {
        "rounding" => vec![criteria::ac1_rounding_unbiased(), criteria::ac2_worked_example()],
        "mapping" => vec![criteria::ac3_inverse_mapping_example(), criteria::ac5_roundtrip()],
        "gemm" => vec![criteria::ac4_gemm_oracle()],
        "norm" => vec![criteria::ac6_batchnorm_stats()],
        "sgd" => vec![criteria::ac9_sgd_unbiased()],
        "theorem1" => vec![criteria::ac8_theorem1()],
        "variance" => vec![criteria::ac7_variance_probe()],
        _ => return Err(CliError::UnknownSuite(suite.to_string())),
    };
    Ok(SuiteReport {
        suite: suite.to_string(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(matches!(cmd_verify("everything"), Err(CliError::UnknownSuite(_))));
    }
}
