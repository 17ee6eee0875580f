//! Parsing of `--vary` specifications and the per-value run table.

use std::fmt::Write as _;

use fedsim_core::sim::SimOutcome;
use fedsim_core::{rounds_to_threshold, Error, Result, SimConfig};

/// One configuration key and the values it takes across a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Vary {
    pub key: String,
    pub values: Vec<String>,
}

impl Vary {
    /// Accepts `key=a,b,c` or `key=lo..hi[:step]`. Ranges include both ends.
    /// Without a step, integer ranges move by 1 and real ranges by 0.1.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, rhs) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--vary expects key=values, got `{spec}`")))?;
        let key = key.trim().to_string();
        SimConfig::default().get(&key)?;
        let rhs = rhs.trim();
        let values = match rhs.split_once("..") {
            Some((lo, rest)) => {
                let (hi, step) = match rest.split_once(':') {
                    Some((hi, step)) => (hi, Some(step)),
                    None => (rest, None),
                };
                range(lo.trim(), hi.trim(), step.map(str::trim))?
            }
            None => rhs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect(),
        };
        if values.is_empty() {
            return Err(Error::Config(format!("--vary `{spec}` names no values")));
        }
        Ok(Vary { key, values })
    }

    /// Configurations for each value, with outputs under `root/key=value`.
    pub fn configs(&self, base: &SimConfig) -> Result<Vec<(String, SimConfig)>> {
        self.values
            .iter()
            .map(|v| {
                let mut cfg = base.clone();
                cfg.set(&self.key, v)?;
                if let Some(root) = &base.out_dir {
                    cfg.out_dir = Some(root.join(format!("{}={v}", self.key)));
                }
                cfg.validate()?;
                Ok((v.clone(), cfg))
            })
            .collect()
    }
}

fn range(lo: &str, hi: &str, step: Option<&str>) -> Result<Vec<String>> {
    let bad = |what: &str| Error::Config(format!("bad sweep range {what}"));
    if let (Ok(a), Ok(b), Ok(s)) = (lo.parse::<i64>(), hi.parse::<i64>(), step.unwrap_or("1").parse::<i64>()) {
        if s <= 0 || a > b {
            return Err(bad(&format!("{lo}..{hi}:{s}")));
        }
        return Ok((a..=b).step_by(s as usize).map(|v| v.to_string()).collect());
    }
    let a: f64 = lo.parse().map_err(|_| bad(lo))?;
    let b: f64 = hi.parse().map_err(|_| bad(hi))?;
    let s: f64 = step.unwrap_or("0.1").parse().map_err(|_| bad(step.unwrap_or_default()))?;
    if s.is_nan() || s <= 0.0 || !a.is_finite() || !b.is_finite() || a > b {
        return Err(bad(&format!("{lo}..{hi}:{s}")));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize;
    // Rounding keeps 0.1 + 2 * 0.1 printing as 0.3.
    Ok((0..=n).map(|i| format!("{}", ((a + i as f64 * s) * 1e9).round() / 1e9)).collect())
}

pub const SWEEP_HEADER: &str = "value,rounds,final_val_ppl,final_test_ppl,best_round,best_val_ppl,test_at_best,rounds_to_threshold";

/// One CSV row summarizing a finished run.
pub fn sweep_row(value: &str, threshold: Option<f64>, out: &SimOutcome) -> String {
    let last = out.records.last();
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
    let mut row = String::new();
    let _ = write!(
        row,
        "{value},{},{},{},",
        out.records.len(),
        opt(last.and_then(|r| r.val_ppl)),
        opt(last.and_then(|r| r.test_ppl))
    );
    match out.best {
        Some((round, val, test)) => {
            let _ = write!(row, "{round},{val:.6},{test:.6},");
        }
        None => row.push_str(",,,"),
    }
    if let Some(t) = threshold {
        match rounds_to_threshold(&out.records, t) {
            Some(r) => row.push_str(&r.to_string()),
            None => row.push_str("not reached"),
        }
    }
    row
}
