//! Versioned binary checkpoints.
//!
//! Layout: magic `GNCF`, format version (u32 LE), the canonical textual
//! model configuration (u32 length + UTF-8), then every parameter in
//! store order as name length + name + rank + extents (u64 LE each) +
//! raw little-endian f64 data. The loader rebuilds the expected layout
//! from the embedded configuration and rejects unknown versions and any
//! name or shape mismatch.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::esa::FusionMode;
use crate::model::{build_model, GncformerModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"GNCF";
pub const VERSION: u32 = 1;

/// Canonical key = value serialization with a fixed key order.
pub fn config_to_text(c: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "encoder_layers = {}", c.encoder_layers);
    let _ = writeln!(s, "decoder_layers = {}", c.decoder_layers);
    let _ = writeln!(s, "model_dim = {}", c.model_dim);
    let _ = writeln!(s, "heads = {}", c.heads);
    let _ = writeln!(s, "ffn_dim = {}", c.ffn_dim);
    let _ = writeln!(s, "order = {}", c.order);
    let _ = writeln!(s, "kernel = {}", c.kernel);
    let _ = writeln!(s, "alpha = {}", c.alpha);
    let _ = writeln!(s, "fusion = {}", c.fusion);
    let _ = writeln!(s, "esa_in_encoder = {}", c.esa_in_encoder);
    let _ = writeln!(s, "esa_in_decoder = {}", c.esa_in_decoder);
    let _ = writeln!(s, "source_vocab = {}", c.source_vocab);
    let _ = writeln!(s, "target_vocab = {}", c.target_vocab);
    let _ = writeln!(s, "max_len = {}", c.max_len);
    let _ = writeln!(s, "dropout = {}", c.dropout);
    let _ = writeln!(s, "pad_id = {}", c.pad_id);
    s
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    let bad = |line: usize, reason: String| Error::ConfigParse { line, reason };
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(i + 1, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize = || {
            value
                .parse::<usize>()
                .map_err(|e| bad(i + 1, format!("bad value for {key}: {e}")))
        };
        let parse_f64 = || {
            value
                .parse::<f64>()
                .map_err(|e| bad(i + 1, format!("bad value for {key}: {e}")))
        };
        let parse_bool = || {
            value
                .parse::<bool>()
                .map_err(|e| bad(i + 1, format!("bad value for {key}: {e}")))
        };
        match key {
            "encoder_layers" => c.encoder_layers = parse_usize()?,
            "decoder_layers" => c.decoder_layers = parse_usize()?,
            "model_dim" => c.model_dim = parse_usize()?,
            "heads" => c.heads = parse_usize()?,
            "ffn_dim" => c.ffn_dim = parse_usize()?,
            "order" => c.order = parse_usize()?,
            "kernel" => c.kernel = parse_usize()?,
            "alpha" => c.alpha = parse_f64()?,
            "fusion" => c.fusion = FusionMode::from_str(value)?,
            "esa_in_encoder" => c.esa_in_encoder = parse_bool()?,
            "esa_in_decoder" => c.esa_in_decoder = parse_bool()?,
            "source_vocab" => c.source_vocab = parse_usize()?,
            "target_vocab" => c.target_vocab = parse_usize()?,
            "max_len" => c.max_len = parse_usize()?,
            "dropout" => c.dropout = parse_f64()?,
            "pad_id" => c.pad_id = parse_usize()?,
            other => return Err(bad(i + 1, format!("unknown key `{other}`"))),
        }
        seen.push(key.to_string());
    }
    if seen.len() != 16 {
        return Err(Error::Checkpoint(format!(
            "config lists {} keys, expected 16",
            seen.len()
        )));
    }
    Ok(c)
}

pub fn save_model(model: &GncformerModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_to_text(model.config());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    for e in model.store().entries() {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &extent in &e.shape {
            buf.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &v in e.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what}"
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_model(path: &Path) -> Result<GncformerModel> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown format version {version}, expected {VERSION}"
        )));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config = config_from_text(cfg_text)?;
    let mut model = build_model(&config, 0)?;

    for idx in 0..model.store().len() {
        let expected = {
            let e = &model.store().entries()[idx];
            (e.name.clone(), e.shape.clone())
        };
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        if name != expected.0 {
            return Err(Error::Checkpoint(format!(
                "parameter {idx}: found `{name}`, config expects `{}`",
                expected.0
            )));
        }
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        if shape != expected.1 {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: shape {shape:?} does not match expected {:?}",
                expected.1
            )));
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 8, "parameter data")?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        model.store_mut().entries_mut()[idx].value = Arc::new(data);
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            buf.len() - cur.pos
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn config_text_round_trips() {
        let c = ModelConfig::default();
        let parsed = config_from_text(&config_to_text(&c)).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn save_load_round_trip_preserves_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.gncf");
        let model = build_model(&ModelConfig::default(), 13).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in loaded.store().entries().iter().zip(model.store().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn loader_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.gncf");
        let model = build_model(&ModelConfig::default(), 13).unwrap();
        save_model(&model, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(load_model(&path).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 9);
        std::fs::write(&path, &truncated).unwrap();
        assert!(load_model(&path).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }
}
