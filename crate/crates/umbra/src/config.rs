//! `key=value` model configuration: files, command-line overrides and the
//! canonical listing used in logs and checkpoint manifests.

use std::fmt::Write as _;

use umbra_core::net::ModelConfig;

pub const KEYS: [&str; 9] = [
    "channels",
    "unet_depth",
    "patch_size",
    "state_dim",
    "expansion",
    "dropout",
    "residual_output",
    "seed",
    "threshold",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

/// Sets one field. Unknown keys are an error.
pub fn apply(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<(), String> {
    let value = value.trim();
    match key.trim() {
        "channels" => cfg.channels = parse(key, value)?,
        "unet_depth" => cfg.unet_depth = parse(key, value)?,
        "patch_size" => cfg.patch_size = parse(key, value)?,
        "state_dim" => cfg.state_dim = parse(key, value)?,
        "expansion" => cfg.expansion = parse(key, value)?,
        "dropout" => cfg.dropout = parse(key, value)?,
        "residual_output" => cfg.residual_output = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "threshold" => cfg.threshold = parse(key, value)?,
        other => return Err(format!("unknown config key {other:?} (known: {})", KEYS.join(", "))),
    }
    Ok(())
}

/// Splits `key=value`.
pub fn split_assignment(s: &str) -> Result<(&str, &str), String> {
    s.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Parses a config file: one `key=value` per line, `#` starts a comment.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_assignment(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if !KEYS.contains(&k) {
            return Err(format!("line {}: unknown config key {k:?}", i + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Every field as `key=value`, in [`KEYS`] order.
pub fn entries(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("channels", cfg.channels.to_string()),
        ("unet_depth", cfg.unet_depth.to_string()),
        ("patch_size", cfg.patch_size.to_string()),
        ("state_dim", cfg.state_dim.to_string()),
        ("expansion", cfg.expansion.to_string()),
        ("dropout", cfg.dropout.to_string()),
        ("residual_output", cfg.residual_output.to_string()),
        ("seed", cfg.seed.to_string()),
        ("threshold", cfg.threshold.to_string()),
    ]
}

pub fn format_config(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    for (k, v) in entries(cfg) {
        writeln!(s, "{k}={v}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_roundtrips() {
        let cfg = ModelConfig { channels: 5, dropout: 0.125, residual_output: false, seed: 77, ..Default::default() };
        let mut back = ModelConfig::default();
        for (k, v) in parse_file(&format_config(&cfg)).unwrap() {
            apply(&mut back, &k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let kv = parse_file("# model\n\nchannels = 4  # narrow\n").unwrap();
        assert_eq!(kv, vec![("channels".to_string(), "4".to_string())]);
        assert!(parse_file("width=3").is_err());
        assert!(parse_file("channels").is_err());
        let mut cfg = ModelConfig::default();
        assert!(apply(&mut cfg, "channels", "-1").is_err());
        assert!(apply(&mut cfg, "colour", "1").is_err());
    }
}
