use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinatewise test function `φ` whose posterior expectation is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TestFunction {
    Identity,
    Log,
    Power(i32),
}

impl TestFunction {
    /// Output dimension for inputs of dimension `dim`.
    pub fn dim(&self, dim: usize) -> usize {
        dim
    }

    pub fn apply(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, &v) in out.iter_mut().zip(z) {
            *o = match self {
                TestFunction::Identity => v,
                TestFunction::Log => {
                    if !(v > 0.0) {
                        return Err(Error::Domain(format!("log test function at {v}")));
                    }
                    v.ln()
                }
                TestFunction::Power(m) => v.powi(*m),
            };
        }
        Ok(())
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; z.len()];
        self.apply(z, &mut out)?;
        Ok(out)
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Identity => write!(f, "identity"),
            TestFunction::Log => write!(f, "log"),
            TestFunction::Power(m) => write!(f, "power:{m}"),
        }
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "id" => Ok(TestFunction::Identity),
            "log" => Ok(TestFunction::Log),
            _ => s
                .strip_prefix("power:")
                .and_then(|m| m.parse().ok())
                .map(TestFunction::Power)
                .ok_or_else(|| {
                    Error::config("phi", format!("unknown test function {s:?}"))
                }),
        }
    }
}

impl TryFrom<String> for TestFunction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TestFunction> for String {
    fn from(t: TestFunction) -> String {
        t.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for t in [TestFunction::Identity, TestFunction::Log, TestFunction::Power(5)] {
            assert_eq!(t.to_string().parse::<TestFunction>().unwrap(), t);
        }
        assert!("cube".parse::<TestFunction>().is_err());
    }

    #[test]
    fn log_rejects_nonpositive() {
        assert!(TestFunction::Log.eval(&[0.0]).is_err());
        assert_eq!(TestFunction::Power(3).eval(&[2.0]).unwrap(), vec![8.0]);
    }
}
