//! Checkpoint container.
//!
//! ```text
//! PREFLEARN-CKPT 1
//! kind=policy
//! version=12
//! width=64
//! layers=2
//! heads=4
//! context=32
//! vocab=258
//! array tok_emb 258,64
//! ...
//! end
//! <little-endian f32 payload, arrays in manifest order>
//! ```
//!
//! Reward and value checkpoints carry a trailing `head` array (`width`
//! weights then the bias) and `kind=reward` / `kind=value`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::{Layout, ModelConfig, ModelKind, Params};
use crate::error::{Error, Result};

pub const MAGIC: &str = "PREFLEARN-CKPT 1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_to<W: Write>(params: &Params<f32>, mut w: W) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::Numerical("refusing to write non-finite parameters".into()));
    }
    let layout = params.layout();
    let cfg = &params.config;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in [
        ("kind", params.kind.as_str().to_string()),
        ("version", params.version.to_string()),
        ("width", cfg.width.to_string()),
        ("layers", cfg.layers.to_string()),
        ("heads", cfg.heads.to_string()),
        ("context", cfg.context.to_string()),
        ("vocab", cfg.vocab.to_string()),
    ] {
        header.push_str(&format!("{k}={v}\n"));
    }
    for spec in &layout.specs {
        let dims: Vec<String> = spec.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("array {} {}\n", spec.name, dims.join(",")));
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(params.data.len() * 4);
    for x in &params.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_from<R: Read>(r: R) -> Result<Params<f32>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of manifest"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("missing or unsupported checkpoint header"));
    }
    let mut manifest = BTreeMap::new();
    let mut arrays = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        if let Some(rest) = l.strip_prefix("array ") {
            let (name, dims) = rest.split_once(' ').ok_or_else(|| bad(format!("bad array line `{l}`")))?;
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension in `{l}`"))))
                .collect::<Result<Vec<_>>>()?;
            arrays.push((name.to_string(), shape));
        } else {
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("bad manifest line `{l}`")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| manifest.get(k).ok_or_else(|| bad(format!("manifest missing `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("manifest `{k}` is not a count"))) };
    let kind = ModelKind::parse(get("kind")?).ok_or_else(|| bad("unknown model kind"))?;
    let config = ModelConfig {
        width: num("width")?,
        layers: num("layers")?,
        heads: num("heads")?,
        context: num("context")?,
        vocab: num("vocab")?,
    };
    config.validate()?;
    let version: u64 = get("version")?.parse().map_err(|_| bad("bad version"))?;

    let layout = Layout::new(&config, kind);
    if arrays.len() != layout.specs.len() {
        return Err(bad(format!("expected {} arrays, found {}", layout.specs.len(), arrays.len())));
    }
    for ((name, shape), spec) in arrays.iter().zip(&layout.specs) {
        if *name != spec.name || *shape != spec.shape {
            return Err(bad(format!(
                "array `{name}` {shape:?} does not match expected `{}` {:?}",
                spec.name, spec.shape
            )));
        }
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != layout.total * 4 {
        return Err(bad(format!("payload has {} bytes, expected {}", bytes.len(), layout.total * 4)));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let params = Params { config, kind, version, data };
    if !params.is_finite() {
        return Err(bad("checkpoint contains non-finite values"));
    }
    Ok(params)
}

pub fn save(params: &Params<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = fs::File::create(path)?;
    write_to(params, std::io::BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<Params<f32>> {
    read_from(fs::File::open(path)?)
}

/// Load and require a particular kind.
pub fn load_kind(path: &Path, kind: ModelKind) -> Result<Params<f32>> {
    let p = load(path)?;
    if p.kind != kind {
        return Err(bad(format!(
            "{} holds a {} model, expected {}",
            path.display(),
            p.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params(kind: ModelKind) -> Params<f32> {
        let cfg = ModelConfig::new(8, 2, 2, 10).unwrap();
        let mut p = Params::<f32>::init(cfg, kind, 3).unwrap();
        p.version = 17;
        p
    }

    #[test]
    fn round_trip_policy_and_reward() {
        for kind in [ModelKind::Policy, ModelKind::Reward, ModelKind::Value] {
            let p = sample_params(kind);
            let mut buf = Vec::new();
            write_to(&p, &mut buf).unwrap();
            let q = read_from(buf.as_slice()).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn reward_manifest_has_head_and_kind() {
        let p = sample_params(ModelKind::Reward);
        let mut buf = Vec::new();
        write_to(&p, &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.contains("kind=reward\n"));
        assert!(text.contains("array head 9\n"));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let p = sample_params(ModelKind::Policy);
        let mut buf = Vec::new();
        write_to(&p, &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf).into_owned();
        let tampered = text.replacen("width=8", "width=4", 1);
        let mut bytes = tampered.into_bytes();
        bytes.truncate(bytes.len());
        assert!(matches!(read_from(bytes.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let p = sample_params(ModelKind::Policy);
        let mut buf = Vec::new();
        write_to(&p, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_from(buf.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_from(&b"garbage\n"[..]).is_err());
    }
}
