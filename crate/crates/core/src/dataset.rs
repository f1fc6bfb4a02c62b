//! On-disk dataset layout: one file per clip (JSON manifest line plus
//! binary tensors) and a JSON index listing clip ids, durations, and seeds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ConditioningBundle;
use crate::synth::{DatasetClip, ToyScene};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub duration_s: f64,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipManifest {
    id: String,
    seed: u64,
    scene: ToyScene,
}

pub fn save_dataset(dir: &Path, clips: &[DatasetClip]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(clips.len());
    for clip in clips {
        let file_name = format!("{}.clip", clip.id);
        let mut w = BufWriter::new(File::create(dir.join(&file_name))?);
        let manifest = ClipManifest {
            id: clip.id.clone(),
            seed: clip.seed,
            scene: clip.scene.clone(),
        };
        let line = serde_json::to_string(&manifest)
            .map_err(|e| CoreError::Checkpoint(format!("manifest encode: {e}")))?;
        writeln!(w, "{line}")?;
        clip.latents.write_to(&mut w)?;
        clip.cond.semantic_seq.write_to(&mut w)?;
        clip.cond.sync_seq.write_to(&mut w)?;
        clip.cond.text_vec.write_to(&mut w)?;
        w.flush()?;
        index.push(IndexEntry {
            id: clip.id.clone(),
            duration_s: clip.scene.duration_s,
            seed: clip.seed,
            file: file_name,
        });
    }
    let index_json = serde_json::to_string_pretty(&index)
        .map_err(|e| CoreError::Checkpoint(format!("index encode: {e}")))?;
    std::fs::write(dir.join("index.json"), index_json + "\n")?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<DatasetClip> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: ClipManifest = serde_json::from_str(line.trim_end())
        .map_err(|e| CoreError::Checkpoint(format!("manifest decode in {}: {e}", path.display())))?;
    let latents = Tensor::read_from(&mut r)?;
    let semantic_seq = Tensor::read_from(&mut r)?;
    let sync_seq = Tensor::read_from(&mut r)?;
    let text_vec = Tensor::read_from(&mut r)?;
    Ok(DatasetClip {
        id: manifest.id,
        seed: manifest.seed,
        scene: manifest.scene,
        latents,
        cond: ConditioningBundle {
            semantic_seq,
            sync_seq,
            text_vec,
            drop_semantic: false,
            drop_sync: false,
            drop_text: false,
        },
    })
}

pub fn load_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let raw = std::fs::read_to_string(dir.join("index.json"))?;
    serde_json::from_str(&raw)
        .map_err(|e| CoreError::Checkpoint(format!("index decode: {e}")))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetClip>> {
    let index = load_index(dir)?;
    index
        .iter()
        .map(|entry| load_clip(&dir.join(&entry.file)))
        .collect()
}
