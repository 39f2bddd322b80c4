//! Checkpoints: a text manifest followed by the raw parameter data.
//!
//! ```text
//! umbra-checkpoint 1
//! config channels=8
//! ...
//! param enc.w 8x4x3x3 0 288
//! ...
//! end
//! <little-endian f64 data>
//! ```
//!
//! Offsets are in bytes from the first data byte, lengths in elements. A
//! checkpoint loads only into a model whose parameter names and shapes match
//! the manifest exactly.

use std::fmt::Write as _;

use umbra_core::net::{Model, ModelConfig};
use umbra_core::{ParamStore, Tensor};

use crate::config;

pub const MAGIC: &str = "umbra-checkpoint 1";

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

pub fn encode(cfg: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut manifest = format!("{MAGIC}\n");
    for (k, v) in config::entries(cfg) {
        writeln!(manifest, "config {k}={v}").unwrap();
    }
    let mut offset = 0;
    for id in store.ids() {
        let t = store.value(id);
        writeln!(manifest, "param {} {} {offset} {}", store.name(id), format_shape(t.shape()), t.len()).unwrap();
        offset += 8 * t.len();
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.reserve(offset);
    for id in store.ids() {
        for v in store.value(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Rebuilds the model from the manifest's config and fills in the stored
/// parameters.
pub fn decode(bytes: &[u8]) -> Result<(Model, ParamStore), String> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str, String> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or("manifest is not terminated by \"end\"")?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| "manifest is not UTF-8".to_string())
    };
    if next_line()? != MAGIC {
        return Err(format!("not an umbra checkpoint (expected {MAGIC:?})"));
    }
    let mut cfg = ModelConfig::default();
    let mut seen = Vec::new();
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[..] {
            ["config", kv] => {
                let (k, v) = config::split_assignment(kv)?;
                config::apply(&mut cfg, k, v)?;
                seen.push(k.to_string());
            }
            ["param", name, shape, offset, len] => entries.push(Entry {
                name: name.to_string(),
                shape: parse_shape(shape).ok_or_else(|| format!("bad shape {shape:?} for {name}"))?,
                offset: offset.parse().map_err(|_| format!("bad offset for {name}"))?,
                len: len.parse().map_err(|_| format!("bad length for {name}"))?,
            }),
            _ => return Err(format!("unrecognised manifest line {line:?}")),
        }
    }
    if let Some(k) = config::KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
        return Err(format!("manifest lacks config key {k}"));
    }
    let data = &bytes[pos..];

    let mut store = ParamStore::new();
    let model = Model::new(cfg, &mut store).map_err(|e| e.to_string())?;
    if entries.len() != store.len() {
        return Err(format!("manifest lists {} parameters, the configured model has {}", entries.len(), store.len()));
    }
    let mut expected_offset = 0;
    for (id, e) in store.ids().collect::<Vec<_>>().into_iter().zip(&entries) {
        if e.name != store.name(id) {
            return Err(format!("parameter {:?} where the model expects {:?}", e.name, store.name(id)));
        }
        if e.shape != store.value(id).shape() || e.len != e.shape.iter().product::<usize>() {
            return Err(format!("parameter {} has shape {:?}, the model expects {:?}", e.name, e.shape, store.value(id).shape()));
        }
        if e.offset != expected_offset {
            return Err(format!("parameter {} at offset {}, expected {expected_offset}", e.name, e.offset));
        }
        let raw = data.get(e.offset..e.offset + 8 * e.len).ok_or_else(|| format!("data for {} is truncated", e.name))?;
        let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        store.set_value(id, Tensor::new(&e.shape, values).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        expected_offset += 8 * e.len;
    }
    if data.len() != expected_offset {
        return Err(format!("{} trailing bytes after parameter data", data.len() - expected_offset));
    }
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Model, ParamStore) {
        let cfg = ModelConfig { channels: 3, unet_depth: 1, state_dim: 2, seed: 9, ..Default::default() };
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store).unwrap();
        (model, store)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (model, mut store) = small();
        let id = store.ids().next().unwrap();
        store.value_mut(id).data_mut()[0] = f64::from_bits(0x3FF0_0000_0000_0001);
        let bytes = encode(&model.config, &store);
        let (m2, s2) = decode(&bytes).unwrap();
        assert_eq!(m2.config, model.config);
        for id in store.ids() {
            let (a, b) = (store.value(id).data(), s2.value(id).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode(&m2.config, &s2), bytes);
    }

    #[test]
    fn manifest_is_the_contract() {
        let (model, store) = small();
        let bytes = encode(&model.config, &store);
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("umbra-checkpoint 1\nconfig channels=3\n"));

        let split = text.find("end\n").unwrap() + 4;
        let mut tampered = text[..split].replacen("config channels=3", "config channels=4", 1).into_bytes();
        tampered.extend_from_slice(&bytes[split..]);
        assert!(decode(&tampered).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"P6\n").is_err());
    }
}
