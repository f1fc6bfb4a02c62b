//! SigLIP-style contrastive alignment of audio and video snippets.
//!
//! Snippets cover 0.667 s of their modality (16 video frames at 24 FPS,
//! 29 audio latent frames at 43 Hz). Each modality has a two-layer MLP
//! encoder applied per frame, mean-pooled over time and L2-normalized.
//! The pairwise sigmoid loss is
//!     −(1/B) Σ_ij log σ(z_ij · (t · x̃v_i · x̃a_j − b)),
//! with z_ii = +1, z_ij = −1, learned temperature t (stored as log t,
//! init t = 10) and bias b (init −10).

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::model::{ParamVars, Parameters};
use crate::rng::SeededRng;
use crate::synth::DatasetClip;
use crate::tensor::Tensor;
use crate::train::{Adam, GradMap};
use crate::{LATENT_RATE_HZ, SYNC_FPS};

/// Snippet duration in seconds (16 video frames at 24 FPS).
pub const SNIPPET_SECONDS: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub video_dim: usize,
    pub audio_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub video_frames: usize,
    pub audio_frames: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Center every training snippet on one of its clip's events.
    pub anchor_events: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            video_dim: 8,
            audio_dim: 64,
            hidden_dim: 64,
            embed_dim: 32,
            video_frames: (SNIPPET_SECONDS * SYNC_FPS).round() as usize,
            audio_frames: (SNIPPET_SECONDS * LATENT_RATE_HZ).round() as usize,
            batch_size: 30,
            lr: 1e-2,
            steps: 10_000,
            seed: 0,
            anchor_events: true,
        }
    }
}

/// One synchronized snippet pair (index i of a batch pairs with i).
#[derive(Debug, Clone)]
pub struct SnippetPair {
    pub video: Tensor,
    pub audio: Tensor,
}

pub type SnippetBatch = Vec<SnippetPair>;

/// Mean over the temporal axis: `[t, d] -> [1, d]`.
pub fn pool_temporal(seq: &Tensor) -> Result<Tensor> {
    if seq.rows() == 0 {
        return Err(CoreError::Range("empty sequence".into()));
    }
    let (t, d) = (seq.rows(), seq.cols());
    let mut out = Tensor::zeros(vec![1, d]);
    for i in 0..t {
        for j in 0..d {
            out.data_mut()[j] += seq.get2(i, j);
        }
    }
    for v in out.data_mut() {
        *v /= t as f64;
    }
    Ok(out)
}

/// The pairwise sigmoid loss on pooled embeddings (plain evaluation).
pub fn siglip_loss(xv: &Tensor, xa: &Tensor, t: f64, b: f64) -> Result<f64> {
    if xv.rows() != xa.rows() || xv.cols() != xa.cols() {
        return Err(CoreError::Dimension(format!(
            "embedding shapes {:?} vs {:?}",
            xv.shape(),
            xa.shape()
        )));
    }
    if !xv.all_finite() || !xa.all_finite() {
        return Err(CoreError::Numeric("non-finite embeddings".into()));
    }
    let bsz = xv.rows();
    let mut loss = 0.0;
    for i in 0..bsz {
        for j in 0..bsz {
            let sim: f64 = xv.row(i).iter().zip(xa.row(j)).map(|(a, c)| a * c).sum();
            let z = if i == j { 1.0 } else { -1.0 };
            let logit = z * (t * sim - b);
            // -log sigmoid(logit), numerically stable
            let nls = if logit >= 0.0 {
                (-logit).exp().ln_1p()
            } else {
                -logit + logit.exp().ln_1p()
            };
            loss += nls;
        }
    }
    Ok(loss / bsz as f64)
}

/// Initialize both encoders plus the SigLIP temperature/bias.
pub fn init_contrastive_params(cfg: &ContrastiveConfig, rng: &mut SeededRng) -> Parameters {
    let mut map = BTreeMap::new();
    let dense = |map: &mut BTreeMap<String, Tensor>,
                     name: &str,
                     rows: usize,
                     cols: usize,
                     rng: &mut SeededRng| {
        let scale = 1.0 / (rows as f64).sqrt();
        let w: Vec<f64> = (0..rows * cols).map(|_| scale * rng.normal()).collect();
        map.insert(format!("{name}.w"), Tensor::new(vec![rows, cols], w).unwrap());
        map.insert(format!("{name}.b"), Tensor::zeros(vec![1, cols]));
    };
    dense(&mut map, "venc.l1", cfg.video_dim, cfg.hidden_dim, rng);
    dense(&mut map, "venc.l2", cfg.hidden_dim, cfg.embed_dim, rng);
    dense(&mut map, "aenc.l1", cfg.audio_dim, cfg.hidden_dim, rng);
    dense(&mut map, "aenc.l2", cfg.hidden_dim, cfg.embed_dim, rng);
    map.insert("siglip.log_t".into(), Tensor::scalar(10.0f64.ln()));
    map.insert("siglip.b".into(), Tensor::scalar(-10.0));
    Parameters::from_map(map)
}

fn encode_on_tape(tape: &mut Tape, p: &ParamVars, prefix: &str, snip: Var) -> Var {
    let w1 = p.get(&format!("{prefix}.l1.w"));
    let b1 = p.get(&format!("{prefix}.l1.b"));
    let w2 = p.get(&format!("{prefix}.l2.w"));
    let b2 = p.get(&format!("{prefix}.l2.b"));
    let h = tape.matmul(snip, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.silu(h);
    let e = tape.matmul(h, w2);
    let e = tape.add_bias(e, b2);
    let pooled = tape.mean_rows(e);
    tape.l2_normalize_rows(pooled, 1e-12)
}

/// Encode one snippet with the trained encoder (plain evaluation).
pub fn embed_snippet(params: &Parameters, prefix: &str, snip: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = ParamVars::new(&mut tape, params);
    let v = tape.leaf(snip.clone());
    let e = encode_on_tape(&mut tape, &p, prefix, v);
    Ok(tape.value(e).clone())
}

fn sign_pattern(bsz: usize) -> Tensor {
    let mut z = Tensor::full(vec![bsz, bsz], -1.0);
    for i in 0..bsz {
        z.set2(i, i, 1.0);
    }
    z
}

/// Loss and gradients for one batch through the encoders and SigLIP head.
pub fn contrastive_loss_and_grads(
    params: &Parameters,
    batch: &SnippetBatch,
) -> Result<(f64, GradMap)> {
    if batch.is_empty() {
        return Err(CoreError::DegenerateBatch("empty snippet batch".into()));
    }
    let bsz = batch.len();
    let mut tape = Tape::new();
    let p = ParamVars::new(&mut tape, params);
    let mut v_rows = Vec::with_capacity(bsz);
    let mut a_rows = Vec::with_capacity(bsz);
    for pair in batch {
        let vs = tape.leaf(pair.video.clone());
        let as_ = tape.leaf(pair.audio.clone());
        v_rows.push(encode_on_tape(&mut tape, &p, "venc", vs));
        a_rows.push(encode_on_tape(&mut tape, &p, "aenc", as_));
    }
    let xv = tape.concat_rows(&v_rows);
    let xa = tape.concat_rows(&a_rows);
    let xat = tape.transpose(xa);
    let sim = tape.matmul(xv, xat);
    let log_t = p.get("siglip.log_t");
    let t = tape.exp(log_t);
    let scaled = tape.scale_by(sim, t);
    let b = p.get("siglip.b");
    let b_full = tape.broadcast_scalar(b, vec![bsz, bsz]);
    let logits = tape.sub(scaled, b_full);
    let z = tape.leaf(sign_pattern(bsz));
    let signed = tape.mul(logits, z);
    let ls = tape.log_sigmoid(signed);
    let total = tape.sum_all(ls);
    let loss = tape.scale(total, -1.0 / bsz as f64);
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(CoreError::Numeric("non-finite contrastive loss".into()));
    }
    let grads = tape.backward(loss);
    let mut out: GradMap = BTreeMap::new();
    for (name, var) in p.iter() {
        out.insert(name.clone(), grads.grad(&tape, *var));
    }
    Ok((loss_value, out))
}

/// Cut one aligned snippet pair out of a dataset clip at a random offset.
/// Video features come from the sync stream, audio features from the latents.
pub fn cut_snippet_pair(
    clip: &DatasetClip,
    cfg: &ContrastiveConfig,
    rng: &mut SeededRng,
) -> Result<SnippetPair> {
    let max_start = clip.scene.duration_s - SNIPPET_SECONDS;
    let start_s = rng.uniform_range(0.0, max_start.max(0.0));
    cut_snippet_pair_at(clip, cfg, start_s)
}

/// Cut one aligned snippet pair at a fixed start time (seconds).
pub fn cut_snippet_pair_at(
    clip: &DatasetClip,
    cfg: &ContrastiveConfig,
    start_s: f64,
) -> Result<SnippetPair> {
    let a_len = clip.latents.rows();
    let v_len = clip.cond.sync_seq.rows();
    if a_len < cfg.audio_frames || v_len < cfg.video_frames {
        return Err(CoreError::Range(format!(
            "clip too short for a {SNIPPET_SECONDS:.3} s snippet"
        )));
    }
    let start_s = start_s.clamp(0.0, (clip.scene.duration_s - SNIPPET_SECONDS).max(0.0));
    let a0 = ((start_s * LATENT_RATE_HZ).round() as usize).min(a_len - cfg.audio_frames);
    let v0 = ((start_s * SYNC_FPS).round() as usize).min(v_len - cfg.video_frames);
    let cut = |seq: &Tensor, f0: usize, n: usize| {
        let d = seq.cols();
        let mut data = Vec::with_capacity(n * d);
        for i in f0..f0 + n {
            data.extend_from_slice(seq.row(i));
        }
        Tensor::new(vec![n, d], data)
    };
    Ok(SnippetPair {
        video: cut(&clip.cond.sync_seq, v0, cfg.video_frames)?,
        audio: cut(&clip.latents, a0, cfg.audio_frames)?,
    })
}

/// Assemble one batch of aligned snippet pairs from random clips.
///
/// With `anchor_events` set, every snippet window is placed around one of
/// its clip's events, so positive pairs always carry an onset to align on
/// (all-silent windows collapse to one video embedding and make their
/// positives unlearnable).
pub fn assemble_snippet_batch(
    dataset: &[DatasetClip],
    cfg: &ContrastiveConfig,
    rng: &mut SeededRng,
) -> Result<SnippetBatch> {
    if dataset.is_empty() {
        return Err(CoreError::Config("empty dataset".into()));
    }
    if cfg.anchor_events && dataset.iter().all(|c| c.scene.events.is_empty()) {
        return Err(CoreError::Config(
            "anchor_events needs at least one clip with events".into(),
        ));
    }
    let mut batch = Vec::with_capacity(cfg.batch_size);
    while batch.len() < cfg.batch_size {
        let clip = &dataset[rng.gen_range_usize(0, dataset.len())];
        let pair = if cfg.anchor_events {
            if clip.scene.events.is_empty() {
                continue;
            }
            let ev = &clip.scene.events[rng.gen_range_usize(0, clip.scene.events.len())];
            let start = ev.time_s - rng.uniform_range(0.1, 0.9) * SNIPPET_SECONDS;
            cut_snippet_pair_at(clip, cfg, start)
        } else {
            cut_snippet_pair(clip, cfg, rng)
        };
        match pair {
            Ok(pair) => batch.push(pair),
            Err(CoreError::Range(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(batch)
}

/// Batch-wise top-1 retrieval accuracy: for each video embedding, is the
/// most similar audio embedding its own pair?
pub fn retrieval_top1(params: &Parameters, batch: &SnippetBatch) -> Result<f64> {
    let bsz = batch.len();
    let mut xv = Vec::with_capacity(bsz);
    let mut xa = Vec::with_capacity(bsz);
    for pair in batch {
        xv.push(embed_snippet(params, "venc", &pair.video)?);
        xa.push(embed_snippet(params, "aenc", &pair.audio)?);
    }
    let mut hits = 0usize;
    for i in 0..bsz {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, a) in xa.iter().enumerate() {
            let sim = xv[i].dot(a);
            if sim > best.1 {
                best = (j, sim);
            }
        }
        if best.0 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / bsz as f64)
}

/// Optimize the contrastive loss on snippet pairs cut from the dataset.
/// Returns the trained parameters and the per-step loss curve.
pub fn train_contrastive(
    dataset: &[DatasetClip],
    cfg: &ContrastiveConfig,
) -> Result<(Parameters, Vec<f64>)> {
    let root = SeededRng::new(cfg.seed);
    let mut params = init_contrastive_params(cfg, &mut root.derive(0));
    let mut adam = Adam::new(&params);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = root.derive(step as u64 + 1);
        let batch = assemble_snippet_batch(dataset, cfg, &mut rng)?;
        let (loss, grads) = contrastive_loss_and_grads(&params, &batch)?;
        adam.update(&mut params, &grads, cfg.lr);
        curve.push(loss);
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, max_rel_err};

    fn random_pairs(cfg: &ContrastiveConfig, n: usize, rng: &mut SeededRng) -> SnippetBatch {
        (0..n)
            .map(|_| SnippetPair {
                video: Tensor::new(
                    vec![cfg.video_frames, cfg.video_dim],
                    rng.normal_vec(cfg.video_frames * cfg.video_dim),
                )
                .unwrap(),
                audio: Tensor::new(
                    vec![cfg.audio_frames, cfg.audio_dim],
                    rng.normal_vec(cfg.audio_frames * cfg.audio_dim),
                )
                .unwrap(),
            })
            .collect()
    }

    fn tiny_cfg() -> ContrastiveConfig {
        ContrastiveConfig {
            video_dim: 3,
            audio_dim: 4,
            hidden_dim: 5,
            embed_dim: 4,
            video_frames: 2,
            audio_frames: 3,
            batch_size: 3,
            lr: 1e-2,
            steps: 5,
            seed: 0,
            anchor_events: false,
        }
    }

    #[test]
    fn pool_temporal_examples() {
        let one = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(pool_temporal(&one).unwrap(), one);
        let constant = Tensor::full(vec![5, 2], 1.5);
        assert_eq!(pool_temporal(&constant).unwrap(), Tensor::full(vec![1, 2], 1.5));
        let seq = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool_temporal(&seq).unwrap().data()[0], 2.0);
        assert!(pool_temporal(&Tensor::zeros(vec![0, 2])).is_err());
    }

    #[test]
    fn siglip_saturated_positive_is_zero() {
        let xv = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let xa = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        // t*sim - b = 1000*1 - 0 -> +inf, loss -> 0
        let loss = siglip_loss(&xv, &xa, 1000.0, 0.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn siglip_zero_temperature_gives_log2_terms() {
        let xv = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let xa = Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        // every logit is 0 -> every term log 2; 4 terms / B=2
        let loss = siglip_loss(&xv, &xa, 0.0, 0.0).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn siglip_matches_brute_force() {
        let mut rng = SeededRng::new(3);
        let xv = Tensor::new(vec![2, 4], rng.normal_vec(8)).unwrap();
        let xa = Tensor::new(vec![2, 4], rng.normal_vec(8)).unwrap();
        let (t, b) = (3.0, -0.5);
        let loss = siglip_loss(&xv, &xa, t, b).unwrap();
        let mut brute = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let sim: f64 = xv.row(i).iter().zip(xa.row(j)).map(|(a, c)| a * c).sum();
                let z = if i == j { 1.0 } else { -1.0 };
                let sig = 1.0 / (1.0 + (-(z * (t * sim - b))).exp());
                brute -= sig.ln();
            }
        }
        assert!((loss - brute / 2.0).abs() < 1e-12);
    }

    #[test]
    fn siglip_rejects_non_finite() {
        let xv = Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap();
        let xa = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            siglip_loss(&xv, &xa, 1.0, 0.0),
            Err(CoreError::Numeric(_))
        ));
    }

    #[test]
    fn siglip_permutation_invariant() {
        let mut rng = SeededRng::new(4);
        let xv = Tensor::new(vec![3, 2], rng.normal_vec(6)).unwrap();
        let xa = Tensor::new(vec![3, 2], rng.normal_vec(6)).unwrap();
        let perm = [2usize, 0, 1];
        let permute = |x: &Tensor| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![3, 2], data).unwrap()
        };
        let a = siglip_loss(&xv, &xa, 2.0, -1.0).unwrap();
        let b = siglip_loss(&permute(&xv), &permute(&xa), 2.0, -1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn positive_logit_increase_never_increases_loss() {
        // at B=1 the loss has only the positive term, so increasing the
        // positive similarity while everything else is fixed must be
        // non-increasing
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let sim = -2.0 + 0.04 * k as f64;
            let xv = Tensor::new(vec![1, 1], vec![sim]).unwrap();
            let xa = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
            let l = siglip_loss(&xv, &xa, 3.0, -0.5).unwrap();
            assert!(l <= prev + 1e-15, "loss rose at sim {sim}");
            prev = l;
        }
    }

    #[test]
    fn init_has_documented_temperature_and_bias() {
        let cfg = tiny_cfg();
        let params = init_contrastive_params(&cfg, &mut SeededRng::new(0));
        assert!((params.get("siglip.log_t").data()[0].exp() - 10.0).abs() < 1e-12);
        assert_eq!(params.get("siglip.b").data()[0], -10.0);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let cfg = tiny_cfg();
        let params = init_contrastive_params(&cfg, &mut SeededRng::new(1));
        let batch = random_pairs(&cfg, 1, &mut SeededRng::new(2));
        let e = embed_snippet(&params, "venc", &batch[0].video).unwrap();
        let n: f64 = e.data().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(e.cols(), cfg.embed_dim);
    }

    #[test]
    fn batch_loss_gradients_match_finite_diff() {
        let cfg = tiny_cfg();
        let params = init_contrastive_params(&cfg, &mut SeededRng::new(6));
        let batch = random_pairs(&cfg, 2, &mut SeededRng::new(7));
        let (_, grads) = contrastive_loss_and_grads(&params, &batch).unwrap();
        let analytic: Vec<f64> = params
            .names()
            .flat_map(|n| grads[n].data().to_vec())
            .collect();
        let base = params.clone();
        let flat = base.flatten();
        let mut eval = |x: &[f64]| {
            let mut p = base.clone();
            p.unflatten_into(x);
            contrastive_loss_and_grads(&p, &batch).unwrap().0
        };
        let fd = finite_diff(&mut eval, &flat, 1e-5).unwrap();
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn tape_loss_matches_plain_siglip_on_pooled_embeddings() {
        let cfg = tiny_cfg();
        let params = init_contrastive_params(&cfg, &mut SeededRng::new(8));
        let batch = random_pairs(&cfg, 3, &mut SeededRng::new(9));
        let (loss, _) = contrastive_loss_and_grads(&params, &batch).unwrap();
        let rows = |prefix: &str, pick: fn(&SnippetPair) -> &Tensor| {
            let mut data = Vec::new();
            for pair in &batch {
                data.extend_from_slice(embed_snippet(&params, prefix, pick(pair)).unwrap().data());
            }
            Tensor::new(vec![3, cfg.embed_dim], data).unwrap()
        };
        let xv = rows("venc", |p| &p.video);
        let xa = rows("aenc", |p| &p.audio);
        let t = params.get("siglip.log_t").data()[0].exp();
        let b = params.get("siglip.b").data()[0];
        let plain = siglip_loss(&xv, &xa, t, b).unwrap();
        assert!((loss - plain).abs() < 1e-10);
    }

    #[test]
    fn snippet_cut_is_aligned() {
        let synth_cfg = crate::synth::SynthConfig {
            duration_range: (3.0, 3.0),
            ..Default::default()
        };
        let dataset = crate::synth::build_dataset(&synth_cfg, 1, 5).unwrap();
        let cfg = ContrastiveConfig::default();
        let mut rng = SeededRng::new(6);
        let pair = cut_snippet_pair(&dataset[0], &cfg, &mut rng).unwrap();
        assert_eq!(pair.video.rows(), cfg.video_frames);
        assert_eq!(pair.audio.rows(), cfg.audio_frames);
        assert_eq!(pair.video.cols(), cfg.video_dim);
        assert_eq!(pair.audio.cols(), cfg.audio_dim);
    }

    #[test]
    fn training_curve_is_reproducible() {
        let synth_cfg = crate::synth::SynthConfig {
            duration_range: (2.0, 4.0),
            ..Default::default()
        };
        let dataset = crate::synth::build_dataset(&synth_cfg, 3, 11).unwrap();
        let cfg = ContrastiveConfig {
            batch_size: 4,
            steps: 3,
            ..Default::default()
        };
        let (_, c1) = train_contrastive(&dataset, &cfg).unwrap();
        let (_, c2) = train_contrastive(&dataset, &cfg).unwrap();
        assert_eq!(c1, c2);
    }
}
