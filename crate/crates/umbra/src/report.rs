//! Metrics report serialization.
//!
//! ```text
//! S 31.2046 0.9412 4.1873
//! NS 100.0000 1.0000 0.0000
//! ALL 37.0301 0.9850 1.9466
//!
//! S.psnr=31.204612...
//! ...
//! ```
//!
//! The first block is for people (four decimals), the second carries full
//! precision. An empty region prints `undefined` in every column.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use umbra_core::metrics::{MetricsReport, RegionMetrics};

pub const UNDEFINED: &str = "undefined";

pub fn format_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    for (name, m) in report.regions() {
        match m {
            Some(m) => writeln!(s, "{name} {:.4} {:.4} {:.4}", m.psnr, m.ssim, m.rmse_lab).unwrap(),
            None => writeln!(s, "{name} {UNDEFINED} {UNDEFINED} {UNDEFINED}").unwrap(),
        }
    }
    s.push('\n');
    for (name, m) in report.regions() {
        let fields: [(&str, Option<f64>); 3] = [
            ("psnr", m.map(|m| m.psnr)),
            ("ssim", m.map(|m| m.ssim)),
            ("rmse", m.map(|m| m.rmse_lab)),
        ];
        for (key, v) in fields {
            match v {
                Some(v) => writeln!(s, "{name}.{key}={v:?}").unwrap(),
                None => writeln!(s, "{name}.{key}={UNDEFINED}").unwrap(),
            }
        }
    }
    s
}

/// Reads the key=value block back.
pub fn parse_report(text: &str) -> Result<MetricsReport, String> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let region = |name: &str| -> Result<Option<RegionMetrics>, String> {
        let get = |key: &str| {
            let full = format!("{name}.{key}");
            let v = kv.get(&full).ok_or_else(|| format!("report lacks {full}"))?;
            if v == UNDEFINED {
                Ok(None)
            } else {
                v.parse::<f64>().map(Some).map_err(|_| format!("bad value {v:?} for {full}"))
            }
        };
        match (get("psnr")?, get("ssim")?, get("rmse")?) {
            (Some(psnr), Some(ssim), Some(rmse_lab)) => Ok(Some(RegionMetrics { psnr, ssim, rmse_lab })),
            (None, None, None) => Ok(None),
            _ => Err(format!("region {name} is partially undefined")),
        }
    };
    Ok(MetricsReport { shadow: region("S")?, non_shadow: region("NS")?, all: region("ALL")? })
}
