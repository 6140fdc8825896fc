//! Range arguments: seed ranges and scale-factor sweeps.

use std::str::FromStr;

/// `A..B` (exclusive), `A..=B` (inclusive) or a single seed `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    /// Exclusive end.
    pub end: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> Vec<u64> {
        (self.start..self.end).collect()
    }
}

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |v: &str| v.trim().parse::<u64>().map_err(|_| format!("invalid seed '{v}'"));
        let (start, end) = if let Some((a, b)) = s.split_once("..=") {
            let b = num(b)?;
            (num(a)?, b.checked_add(1).ok_or("seed range end overflows")?)
        } else if let Some((a, b)) = s.split_once("..") {
            (num(a)?, num(b)?)
        } else {
            let a = num(s)?;
            (a, a + 1)
        };
        if end <= start {
            return Err(format!("seed range '{s}' is empty"));
        }
        Ok(Self { start, end })
    }
}

/// `LO..HI` (log-spaced, count set separately) or a comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    Range { lo: f64, hi: f64 },
    List(Vec<f64>),
}

impl FromStr for Factors {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |v: &str| -> Result<f64, String> {
            let x = v.trim().parse::<f64>().map_err(|_| format!("invalid factor '{v}'"))?;
            if x > 0.0 && x.is_finite() {
                Ok(x)
            } else {
                Err(format!("factor '{v}' must be positive"))
            }
        };
        if let Some((a, b)) = s.split_once("..") {
            let (lo, hi) = (num(a)?, num(b.trim_start_matches('='))?);
            if hi < lo {
                return Err(format!("factor range '{s}' is reversed"));
            }
            return Ok(Factors::Range { lo, hi });
        }
        let list = s.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
        Ok(Factors::List(list))
    }
}
