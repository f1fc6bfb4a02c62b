//! Shortcut flow-matching trainer.
//!
//! Assembles batches of straight-line interpolant targets plus a fraction of
//! self-consistency targets (one step of size 2d must match two chained
//! steps of size d), excludes masked reference spans from the loss, and runs
//! Adam with an EMA shadow copy of the parameters.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{CoreError, Result};
use crate::model::{
    build_forward, forward, ConditioningBundle, MaskSpan, ModelConfig, ParamVars, Parameters,
    StepInputs,
};
use crate::rng::SeededRng;
use crate::synth::DatasetClip;
use crate::tensor::Tensor;
use crate::{LATENT_RATE_HZ, SEMANTIC_FPS, SYNC_FPS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub consistency_ratio: f64,
    pub lr: f64,
    pub ema_rate: f64,
    pub cond_dropout: f64,
    pub mask_prob: f64,
    pub mask_span_min: usize,
    pub mask_span_max: usize,
    pub n_step_levels: u32,
    /// Training crop length in latent tokens.
    pub clip_tokens: usize,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            consistency_ratio: 0.25,
            lr: 1e-4,
            ema_rate: 0.999,
            cond_dropout: 0.1,
            mask_prob: 0.25,
            mask_span_min: 1,
            mask_span_max: 88,
            n_step_levels: 7,
            clip_tokens: 43,
            steps: 2000,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.consistency_ratio) {
            return Err(CoreError::Config("consistency_ratio outside [0,1]".into()));
        }
        if self.mask_span_min == 0 || self.mask_span_min > self.mask_span_max {
            return Err(CoreError::Config("bad mask span bounds".into()));
        }
        if self.batch_size == 0 || self.clip_tokens == 0 {
            return Err(CoreError::Config("batch_size/clip_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// One assembled training item.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub x1: Tensor,
    pub x0: Tensor,
    pub cond: ConditioningBundle,
    pub mask: Option<MaskSpan>,
    /// Clean audio spliced into the mask span as network input (`span.len`
    /// rows). The span is conditioning, not a regression target, so it is a
    /// snapshot separate from `x1`; when absent, `x1`'s span rows are used.
    pub reference: Option<Tensor>,
    pub t: f64,
    pub d: f64,
    pub is_consistency: bool,
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub items: Vec<BatchItem>,
}

/// Logit-normal timestep: sigmoid of a standard normal draw, strictly
/// inside (0, 1) with median 0.5.
pub fn sample_timestep(rng: &mut SeededRng) -> f64 {
    let z = rng.normal();
    1.0 / (1.0 + (-z).exp())
}

/// Dyadic step sizes `{2^-n_levels, ..., 1/2, 1}`, uniform.
pub fn sample_step_size(rng: &mut SeededRng, n_levels: u32) -> f64 {
    assert!(n_levels >= 1);
    let level = rng.gen_range_usize(0, n_levels as usize + 1);
    0.5f64.powi(level as i32)
}

/// Truncate a (t, d) draw so the two-half-step consistency target fits:
/// keep halving d until `t + 2d <= 1`; if even the smallest level does not
/// fit, pull t back to `1 - 2d`.
pub fn truncate_for_consistency(t: f64, d: f64, n_levels: u32) -> (f64, f64) {
    let d_min = 0.5f64.powi(n_levels as i32);
    let mut d = d;
    while t + 2.0 * d > 1.0 && d > d_min {
        d *= 0.5;
    }
    if t + 2.0 * d > 1.0 {
        (1.0 - 2.0 * d, d)
    } else {
        (t, d)
    }
}

/// With probability `mask_prob`, a uniform-length, uniform-start span.
pub fn make_mask_span(rng: &mut SeededRng, t_a: usize, cfg: &TrainConfig) -> Option<MaskSpan> {
    assert!(t_a >= 1);
    if rng.uniform() >= cfg.mask_prob {
        return None;
    }
    let max_len = cfg.mask_span_max.min(t_a);
    let len = if max_len == cfg.mask_span_min {
        max_len
    } else {
        rng.gen_range_usize(cfg.mask_span_min, max_len + 1)
    };
    let start = if t_a == len { 0 } else { rng.gen_range_usize(0, t_a - len + 1) };
    Some(MaskSpan::new(start, len, t_a).unwrap())
}

/// Flow-matching interpolant with the masked span held clean:
/// `x_t = (1-t) x0 + t x1` outside the span, `x_t = x1` inside.
pub fn noise_inject(x1: &Tensor, x0: &Tensor, t: f64, mask: Option<MaskSpan>) -> Result<Tensor> {
    if x1.shape() != x0.shape() {
        return Err(CoreError::Dimension("noise_inject shape mismatch".into()));
    }
    let mut out = x1.zip(x0, |a, b| (1.0 - t) * b + t * a)?;
    if let Some(span) = mask {
        let d = x1.cols();
        for i in span.start..span.end() {
            out.row_mut(i).copy_from_slice(x1.row(i));
        }
        let _ = d;
    }
    Ok(out)
}

/// Two-half-step self-consistency target, computed without gradient:
/// `v1 = v(x_t, t, d)`, advance half a step (reference span held clean),
/// `v2 = v(x', t+d, d)`, target `(v1+v2)/2`.
pub fn self_consistency_target(
    params: &Parameters,
    cfg: &ModelConfig,
    x_t: &Tensor,
    t: f64,
    d: f64,
    cond: &ConditioningBundle,
    mask: Option<MaskSpan>,
) -> Result<Tensor> {
    if t + 2.0 * d > 1.0 + 1e-12 {
        return Err(CoreError::Schedule(format!(
            "consistency target needs t + 2d <= 1, got t={t}, d={d}"
        )));
    }
    let v1 = forward(params, cfg, x_t, StepInputs::new(t, d)?, cond, mask)?;
    let mut x_half = x_t.add(&v1.scale(d))?;
    if let Some(span) = mask {
        for i in span.start..span.end() {
            x_half.row_mut(i).copy_from_slice(x_t.row(i));
        }
    }
    let v2 = forward(params, cfg, &x_half, StepInputs::new(t + d, d)?, cond, mask)?;
    v1.add(&v2).map(|s| s.scale(0.5))
}

/// Loss components of one batch (means over contributing token positions).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub flow_matching: f64,
    pub consistency: f64,
}

pub type GradMap = BTreeMap<String, Tensor>;

/// Shortcut loss and analytic gradients for an assembled batch.
///
/// Flow-matching items regress `v(x_t, t, 0)` on `x1 - x0`; consistency
/// items regress `v(x_t, t, 2d)` on the stop-gradient two-half-step target.
/// Token positions inside each item's mask span are excluded everywhere.
pub fn shortcut_loss(
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &TrainBatch,
) -> Result<(LossParts, GradMap)> {
    let mut n_fm = 0usize;
    let mut n_sc = 0usize;
    for item in &batch.items {
        let masked = item.mask.map_or(0, |m| m.len);
        let contrib = item.x1.rows() - masked;
        if item.is_consistency {
            n_sc += contrib;
        } else {
            n_fm += contrib;
        }
    }
    let n_total = n_fm + n_sc;
    if n_total == 0 {
        return Err(CoreError::DegenerateBatch(
            "every token position is inside a mask span".into(),
        ));
    }

    let mut grads: GradMap = BTreeMap::new();
    let mut sum_fm = 0.0;
    let mut sum_sc = 0.0;
    for item in &batch.items {
        let t_a = item.x1.rows();
        let ch = item.x1.cols();
        let mut x_t = noise_inject(&item.x1, &item.x0, item.t, item.mask)?;
        if let (Some(span), Some(reference)) = (item.mask, item.reference.as_ref()) {
            if reference.rows() != span.len || reference.cols() != ch {
                return Err(CoreError::Dimension(
                    "reference snapshot does not match mask span".into(),
                ));
            }
            for (k, i) in (span.start..span.end()).enumerate() {
                x_t.row_mut(i).copy_from_slice(reference.row(k));
            }
        }
        let (d_input, target) = if item.is_consistency {
            let v_target = self_consistency_target(
                params, cfg, &x_t, item.t, item.d, &item.cond, item.mask,
            )?;
            (2.0 * item.d, v_target)
        } else {
            (0.0, item.x1.sub(&item.x0)?)
        };

        let mut tape = Tape::new();
        let pvars = ParamVars::new(&mut tape, params);
        let xv = tape.leaf(x_t);
        let out = build_forward(
            &mut tape,
            &pvars,
            cfg,
            xv,
            StepInputs::new(item.t, d_input)?,
            &item.cond,
            item.mask,
        )?;
        let tv = tape.leaf(target);
        let diff = tape.sub(out, tv);
        let sq = tape.mul(diff, diff);
        // exclusion mask: zero out span rows so they carry no loss or gradient
        let mut excl = Tensor::full(vec![t_a, ch], 1.0);
        if let Some(span) = item.mask {
            for i in span.start..span.end() {
                excl.row_mut(i).fill(0.0);
            }
        }
        let ev = tape.leaf(excl);
        let masked_sq = tape.mul(sq, ev);
        let item_sum = tape.sum_all(masked_sq);
        let loss = tape.scale(item_sum, 1.0 / n_total as f64);
        if !tape.value(loss).all_finite() {
            return Err(CoreError::Numeric("non-finite loss".into()));
        }
        let s = tape.value(item_sum).data()[0];
        if item.is_consistency {
            sum_sc += s;
        } else {
            sum_fm += s;
        }
        let g = tape.backward(loss);
        for (name, var) in pvars.iter() {
            let pg = g.grad(&tape, *var);
            match grads.get_mut(name) {
                Some(acc) => *acc = acc.add(&pg)?,
                None => {
                    grads.insert(name.clone(), pg);
                }
            }
        }
    }
    let parts = LossParts {
        total: (sum_fm + sum_sc) / n_total as f64,
        flow_matching: if n_fm > 0 { sum_fm / n_fm as f64 } else { 0.0 },
        consistency: if n_sc > 0 { sum_sc / n_sc as f64 } else { 0.0 },
    };
    Ok((parts, grads))
}

/// `ema' = rate * ema + (1 - rate) * params`, per array.
pub fn ema_update(ema: &mut Parameters, params: &Parameters, rate: f64) -> Result<()> {
    for (name, e) in ema.iter_mut() {
        let p = params.get(name);
        if p.shape() != e.shape() {
            return Err(CoreError::Checkpoint(format!(
                "ema shape mismatch for {name}"
            )));
        }
        *e = e.zip(p, |ev, pv| rate * ev + (1.0 - rate) * pv)?;
    }
    Ok(())
}

/// Adam optimizer state (β1=0.9, β2=0.999, eps=1e-8, no weight decay).
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: GradMap,
    pub v: GradMap,
    pub step: usize,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &Parameters) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
            v.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        Self { m, v, step: 0 }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &GradMap, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Crop a dataset clip to `[start_tok, start_tok + len_tok)` latent tokens,
/// with the conditioning streams cut at the matching frame indices.
pub fn crop_clip(
    clip: &DatasetClip,
    start_tok: usize,
    len_tok: usize,
) -> Result<(Tensor, ConditioningBundle)> {
    let t_a = clip.latents.rows();
    if start_tok + len_tok > t_a {
        return Err(CoreError::Range(format!(
            "crop [{start_tok}, {}) exceeds clip length {t_a}",
            start_tok + len_tok
        )));
    }
    let ch = clip.latents.cols();
    let mut lat = Vec::with_capacity(len_tok * ch);
    for i in start_tok..start_tok + len_tok {
        lat.extend_from_slice(clip.latents.row(i));
    }
    let latents = Tensor::new(vec![len_tok, ch], lat)?;

    let slice_stream = |seq: &Tensor, fps: f64| -> Result<Tensor> {
        let (n_frames, want) = {
            let want = ((len_tok as f64 * fps / LATENT_RATE_HZ).round() as usize).max(1);
            (seq.rows(), want)
        };
        let f0 = ((start_tok as f64 * fps / LATENT_RATE_HZ).round() as usize)
            .min(n_frames.saturating_sub(want));
        let d = seq.cols();
        let mut data = Vec::with_capacity(want * d);
        for i in f0..f0 + want {
            data.extend_from_slice(seq.row(i.min(n_frames - 1)));
        }
        Tensor::new(vec![want, d], data)
    };
    let cond = ConditioningBundle {
        semantic_seq: slice_stream(&clip.cond.semantic_seq, SEMANTIC_FPS)?,
        sync_seq: slice_stream(&clip.cond.sync_seq, SYNC_FPS)?,
        text_vec: clip.cond.text_vec.clone(),
        drop_semantic: false,
        drop_sync: false,
        drop_text: false,
    };
    Ok((latents, cond))
}

/// Assemble one deterministic batch for a step index.
pub fn assemble_batch(
    dataset: &[DatasetClip],
    cfg: &TrainConfig,
    step_rng: &mut SeededRng,
) -> Result<TrainBatch> {
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let clip = &dataset[step_rng.gen_range_usize(0, dataset.len())];
        let t_clip = clip.latents.rows();
        let len = cfg.clip_tokens.min(t_clip);
        let start = if t_clip == len {
            0
        } else {
            step_rng.gen_range_usize(0, t_clip - len + 1)
        };
        let (x1, mut cond) = crop_clip(clip, start, len)?;
        cond.drop_semantic = step_rng.uniform() < cfg.cond_dropout;
        cond.drop_sync = step_rng.uniform() < cfg.cond_dropout;
        cond.drop_text = step_rng.uniform() < cfg.cond_dropout;
        let x0 = Tensor::new(x1.shape().to_vec(), step_rng.normal_vec(x1.len()))?;
        let mask = make_mask_span(step_rng, len, cfg);
        let is_consistency = step_rng.uniform() < cfg.consistency_ratio;
        let (t, d) = if is_consistency {
            let t = sample_timestep(step_rng);
            let d = sample_step_size(step_rng, cfg.n_step_levels);
            truncate_for_consistency(t, d, cfg.n_step_levels)
        } else {
            (sample_timestep(step_rng), 0.0)
        };
        let reference = mask.map(|span| {
            let mut rows = Vec::with_capacity(span.len * x1.cols());
            for i in span.start..span.end() {
                rows.extend_from_slice(x1.row(i));
            }
            Tensor::new(vec![span.len, x1.cols()], rows).expect("span snapshot")
        });
        items.push(BatchItem {
            x1,
            x0,
            cond,
            mask,
            reference,
            t,
            d,
            is_consistency,
        });
    }
    Ok(TrainBatch { items })
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub loss_fm: f64,
    pub loss_sc: f64,
    pub grad_norm: f64,
}

/// Full training state (parameters, EMA shadow, optimizer, step counter).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    pub ema: Parameters,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: Parameters) -> Self {
        let ema = params.clone();
        let adam = Adam::new(&params);
        Self {
            params,
            ema,
            adam,
            step: 0,
        }
    }
}

/// Run the optimization loop from `state.step` to `cfg.steps`.
///
/// Each step derives its RNG stream from (seed, step index), so resuming
/// from a checkpoint continues the exact same trajectory. On a non-finite
/// loss the loop aborts after writing a diagnostic checkpoint.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[DatasetClip],
    state: &mut TrainState,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::Config("empty dataset".into()));
    }
    let root = SeededRng::new(cfg.seed);
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let mut step_rng = root.derive(state.step as u64 + 1);
        let mut batch = assemble_batch(dataset, cfg, &mut step_rng)?;
        if cfg.consistency_ratio == 0.0 {
            for item in &mut batch.items {
                item.is_consistency = false;
                item.d = 0.0;
            }
        }
        let res = shortcut_loss(&state.params, model_cfg, &batch);
        let (parts, grads) = match res {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = ckpt_dir {
                    let path = dir.join(format!("diagnostic-step{}.ckpt", state.step));
                    let _ = crate::checkpoint::save(&path, model_cfg, state);
                }
                return Err(e);
            }
        };
        let grad_norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        state.adam.update(&mut state.params, &grads, cfg.lr);
        ema_update(&mut state.ema, &state.params, cfg.ema_rate)?;
        state.step += 1;
        log.push(LogRow {
            step: state.step,
            loss_fm: parts.flow_matching,
            loss_sc: parts.consistency,
            grad_norm,
        });
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("step{}.ckpt", state.step));
                crate::checkpoint::save(&path, model_cfg, state)?;
            }
        }
    }
    Ok(log)
}
