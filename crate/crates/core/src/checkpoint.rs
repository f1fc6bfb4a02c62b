//! Checkpoint files: model configuration plus full optimizer state.
//!
//! Format: a magic line, a JSON header (config, train step, optimizer
//! step), then four named tensor sections (`params`, `ema`, `adam_m`,
//! `adam_v`) so training can resume bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;
use crate::train::{Adam, TrainState};

const MAGIC: &str = "audiofm-ckpt v1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    adam_step: usize,
}

fn write_section(
    w: &mut impl Write,
    name: &str,
    tensors: impl Iterator<Item = (String, Tensor)>,
) -> Result<()> {
    let items: Vec<(String, Tensor)> = tensors.collect();
    writeln!(w, "section {name} {}", items.len())?;
    for (tname, t) in items {
        writeln!(w, "tensor {tname}")?;
        t.write_to(w)?;
    }
    Ok(())
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(CoreError::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end().to_string())
}

fn read_section(r: &mut impl BufRead, expect: &str) -> Result<BTreeMap<String, Tensor>> {
    let line = read_line(r)?;
    let mut parts = line.split_whitespace();
    let (kw, name, count) = (parts.next(), parts.next(), parts.next());
    if kw != Some("section") || name != Some(expect) {
        return Err(CoreError::Checkpoint(format!(
            "expected section {expect}, got {line:?}"
        )));
    }
    let count: usize = count
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| CoreError::Checkpoint(format!("bad section count in {line:?}")))?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let line = read_line(r)?;
        let tname = line
            .strip_prefix("tensor ")
            .ok_or_else(|| CoreError::Checkpoint(format!("expected tensor line, got {line:?}")))?
            .to_string();
        let t = Tensor::read_from(r)?;
        map.insert(tname, t);
    }
    Ok(map)
}

pub fn save(path: &Path, config: &ModelConfig, state: &TrainState) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MAGIC}")?;
    let header = Header {
        config: config.clone(),
        step: state.step,
        adam_step: state.adam.step,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| CoreError::Checkpoint(format!("header encode: {e}")))?;
    writeln!(w, "{header_json}")?;
    let owned = |it: std::collections::btree_map::Iter<'_, String, Tensor>| {
        it.map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>()
    };
    write_section(&mut w, "params", state.params.iter().map(|(k, v)| (k.clone(), v.clone())))?;
    write_section(&mut w, "ema", state.ema.iter().map(|(k, v)| (k.clone(), v.clone())))?;
    write_section(&mut w, "adam_m", owned(state.adam.m.iter()).into_iter())?;
    write_section(&mut w, "adam_v", owned(state.adam.v.iter()).into_iter())?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, TrainState)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let magic = read_line(&mut r)?;
    if magic != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "not a checkpoint file (magic {magic:?})"
        )));
    }
    let header: Header = serde_json::from_str(&read_line(&mut r)?)
        .map_err(|e| CoreError::Checkpoint(format!("header decode: {e}")))?;
    header.config.validate()?;
    let params = Parameters::from_map(read_section(&mut r, "params")?);
    let ema = Parameters::from_map(read_section(&mut r, "ema")?);
    let m = read_section(&mut r, "adam_m")?;
    let v = read_section(&mut r, "adam_v")?;

    let names: Vec<&String> = params.names().collect();
    for other in [&ema] {
        let other_names: Vec<&String> = other.names().collect();
        if other_names != names {
            return Err(CoreError::Checkpoint("ema/param name mismatch".into()));
        }
    }
    for map in [&m, &v] {
        if map.keys().collect::<Vec<_>>() != names {
            return Err(CoreError::Checkpoint("adam/param name mismatch".into()));
        }
    }
    for name in &names {
        let shape = params.get(name).shape();
        for t in [ema.get(name), &m[*name], &v[*name]] {
            if t.shape() != shape {
                return Err(CoreError::Checkpoint(format!("shape mismatch for {name}")));
            }
        }
    }

    let state = TrainState {
        params,
        ema,
        adam: Adam {
            m,
            v,
            step: header.adam_step,
        },
        step: header.step,
    };
    Ok((header.config, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::rng::SeededRng;

    fn sample_state() -> (ModelConfig, TrainState) {
        let cfg = tiny_config();
        let mut rng = SeededRng::new(11);
        let params = Parameters::init(&cfg, &mut rng).unwrap();
        let mut state = TrainState::new(params);
        state.step = 7;
        state.adam.step = 7;
        // make optimizer state nonzero so the roundtrip is meaningful
        for t in state.adam.m.values_mut() {
            for v in t.data_mut() {
                *v = 0.125;
            }
        }
        (cfg, state)
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let (cfg, state) = sample_state();
        save(&path, &cfg, &state).unwrap();
        let (cfg2, state2) = load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(state.step, state2.step);
        assert_eq!(state.adam.step, state2.adam.step);
        for (name, t) in state.params.iter() {
            assert_eq!(t, state2.params.get(name), "param {name}");
        }
        for (name, t) in state.ema.iter() {
            assert_eq!(t, state2.ema.get(name), "ema {name}");
        }
        for (name, t) in &state.adam.m {
            assert_eq!(t, &state2.adam.m[name], "adam m {name}");
        }
        for (name, t) in &state.adam.v {
            assert_eq!(t, &state2.adam.v[name], "adam v {name}");
        }
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, state) = sample_state();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, &cfg, &state).unwrap();
        save(&p2, &cfg, &state).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint\n").unwrap();
        assert!(matches!(load(&path), Err(CoreError::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let (cfg, state) = sample_state();
        save(&path, &cfg, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err());
    }
}
