//! The miniature denoiser v(x_t, t, d, c).
//!
//! Dual-stream joint-attention blocks over the audio and semantic streams,
//! followed by single-stream blocks over audio only, with adaLN
//! conditioning derived from a local conditioning tensor (global
//! conditioning summed with sequence-aligned synchronization features) and
//! step-size awareness for shortcut sampling. All blocks are identity maps
//! at initialization (zero-initialized output projections and adaLN gates).

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::nn::{sinusoidal_embedding, LN_EPS, ROPE_BASE};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::{LATENT_RATE_HZ, SEMANTIC_FPS, SYNC_FPS};

/// Transpose-conv kernel width in the learned upsampler.
pub const UPSAMPLE_KERNEL: usize = 4;
/// Transpose-conv stride in the learned upsampler.
pub const UPSAMPLE_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub n_mm_blocks: usize,
    pub n_mm_blocks_with_audio_self_attn: usize,
    pub n_single_blocks: usize,
    pub semantic_dim: usize,
    pub sync_dim: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio_dim: 64,
            model_dim: 128,
            heads: 4,
            n_mm_blocks: 2,
            n_mm_blocks_with_audio_self_attn: 1,
            n_single_blocks: 2,
            semantic_dim: 16,
            sync_dim: 8,
            text_dim: 16,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if (self.model_dim / self.heads) % 2 != 0 {
            return Err(CoreError::Config(
                "head_dim must be even for rotary embeddings".into(),
            ));
        }
        if self.n_mm_blocks_with_audio_self_attn > self.n_mm_blocks {
            return Err(CoreError::Config(format!(
                "self-attn blocks {} exceed mm blocks {}",
                self.n_mm_blocks_with_audio_self_attn, self.n_mm_blocks
            )));
        }
        if self.model_dim < 2 || self.mlp_ratio < 1 {
            return Err(CoreError::Config("model_dim/mlp_ratio too small".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Time and step-size inputs to the network. `d = 0` queries the
/// instantaneous velocity.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs {
    pub t: f64,
    pub d: f64,
}

impl StepInputs {
    pub fn new(t: f64, d: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&d) {
            return Err(CoreError::Schedule(format!("t={t}, d={d} outside [0,1]")));
        }
        Ok(Self { t, d })
    }
}

/// A contiguous token range holding clean reference audio; excluded from
/// noising and loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpan {
    pub start: usize,
    pub len: usize,
}

impl MaskSpan {
    pub fn new(start: usize, len: usize, seq_len: usize) -> Result<Self> {
        if len == 0 || start + len > seq_len {
            return Err(CoreError::Range(format!(
                "mask span [{start}, {}) invalid for length {seq_len}",
                start + len
            )));
        }
        Ok(Self { start, len })
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end()
    }
}

/// Conditioning streams for one clip: semantic sequence at 8 FPS, sync
/// sequence at 24 FPS, a global text vector, and per-signal drop flags.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub semantic_seq: Tensor,
    pub sync_seq: Tensor,
    pub text_vec: Tensor,
    pub drop_semantic: bool,
    pub drop_sync: bool,
    pub drop_text: bool,
}

impl ConditioningBundle {
    /// Fully dropped conditioning (the unconditional CFG branch).
    pub fn dropped(&self) -> Self {
        Self {
            drop_semantic: true,
            drop_sync: true,
            drop_text: true,
            ..self.clone()
        }
    }
}

/// Expected conditioning stream lengths for an audio latent length.
pub fn conditioning_lengths(t_a: usize) -> (usize, usize) {
    let sem = ((t_a as f64 * SEMANTIC_FPS / LATENT_RATE_HZ).round() as usize).max(1);
    let sync = ((t_a as f64 * SYNC_FPS / LATENT_RATE_HZ).round() as usize).max(1);
    (sem, sync)
}

fn ratio_ok(actual: usize, t_a: usize, rate: f64) -> bool {
    let expected = t_a as f64 * rate / LATENT_RATE_HZ;
    let diff = (actual as f64 - expected).abs();
    // 5% grace, plus one frame of rounding slack for short clips
    diff <= 0.05 * expected + 1.0
}

/// Flat named collection of all trainable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    map: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        self.map.insert(name, value);
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self { map }
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Concatenate all arrays in name order into one flat vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for t in self.map.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`]: write a flat vector back into the arrays.
    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.map.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut map = BTreeMap::new();
        let dense = |map: &mut BTreeMap<String, Tensor>, name: &str, rows: usize, cols: usize, rng: &mut SeededRng| {
            let std = 1.0 / (rows as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * std).collect();
            map.insert(format!("{name}.w"), Tensor::new(vec![rows, cols], data).unwrap());
            map.insert(format!("{name}.b"), Tensor::zeros(vec![1, cols]));
        };
        let zero_dense = |map: &mut BTreeMap<String, Tensor>, name: &str, rows: usize, cols: usize| {
            map.insert(format!("{name}.w"), Tensor::zeros(vec![rows, cols]));
            map.insert(format!("{name}.b"), Tensor::zeros(vec![1, cols]));
        };

        dense(&mut map, "input.audio_proj", cfg.audio_dim, d, rng);
        map.insert("input.mask_token".into(), Tensor::zeros(vec![1, cfg.audio_dim]));
        map.insert("input.unmask_token".into(), Tensor::zeros(vec![1, cfg.audio_dim]));

        dense(&mut map, "cond.sem_stream_proj", cfg.semantic_dim, d, rng);
        dense(&mut map, "cond.pooled_proj", cfg.semantic_dim, d, rng);
        dense(&mut map, "cond.text_proj", cfg.text_dim, d, rng);
        dense(&mut map, "cond.sync_proj", cfg.sync_dim, d, rng);
        dense(&mut map, "cond.step_mlp1", 2 * d, d, rng);
        dense(&mut map, "cond.step_mlp2", d, d, rng);
        for (name, dim) in [
            ("cond.null_text", cfg.text_dim),
            ("cond.null_semantic", cfg.semantic_dim),
            ("cond.null_sync", cfg.sync_dim),
        ] {
            let data: Vec<f64> = (0..dim).map(|_| rng.normal() * 0.02).collect();
            map.insert(name.into(), Tensor::new(vec![1, dim], data).unwrap());
        }

        // learned upsampler: transpose-conv kernel plus scalar gate, gate 0
        // at init so only the interpolation path is active
        let kdata: Vec<f64> = (0..UPSAMPLE_KERNEL * cfg.sync_dim * cfg.sync_dim)
            .map(|_| rng.normal() * 0.1)
            .collect();
        map.insert(
            "lenunify.kernel".into(),
            Tensor::new(vec![UPSAMPLE_KERNEL * cfg.sync_dim, cfg.sync_dim], kdata).unwrap(),
        );
        map.insert("lenunify.gate".into(), Tensor::zeros(vec![1, 1]));

        for i in 0..cfg.n_mm_blocks {
            let with_sa = i < cfg.n_mm_blocks_with_audio_self_attn;
            let p = format!("mm{i}");
            let a_mods = if with_sa { 9 } else { 6 };
            // adaLN-zero: only the modulation projections start at zero, so
            // every branch gate is 0 and the block is the identity at init.
            // The attention out projections must carry normal init: with both
            // the gate and the projection at zero, each one's gradient is
            // proportional to the other and the branch would never leave the
            // saddle.
            zero_dense(&mut map, &format!("{p}.a_ada"), d, a_mods * d);
            zero_dense(&mut map, &format!("{p}.s_ada"), d, 6 * d);
            dense(&mut map, &format!("{p}.a_qkv"), d, 3 * d, rng);
            dense(&mut map, &format!("{p}.s_qkv"), d, 3 * d, rng);
            dense(&mut map, &format!("{p}.a_out"), d, d, rng);
            dense(&mut map, &format!("{p}.s_out"), d, d, rng);
            if with_sa {
                dense(&mut map, &format!("{p}.a_sa_qkv"), d, 3 * d, rng);
                dense(&mut map, &format!("{p}.a_sa_out"), d, d, rng);
            }
            dense(&mut map, &format!("{p}.a_mlp1"), d, cfg.mlp_ratio * d, rng);
            dense(&mut map, &format!("{p}.a_mlp2"), cfg.mlp_ratio * d, d, rng);
            dense(&mut map, &format!("{p}.s_mlp1"), d, cfg.mlp_ratio * d, rng);
            dense(&mut map, &format!("{p}.s_mlp2"), cfg.mlp_ratio * d, d, rng);
        }
        for j in 0..cfg.n_single_blocks {
            let p = format!("sb{j}");
            zero_dense(&mut map, &format!("{p}.ada"), d, 6 * d);
            dense(&mut map, &format!("{p}.qkv"), d, 3 * d, rng);
            dense(&mut map, &format!("{p}.out"), d, d, rng);
            dense(&mut map, &format!("{p}.mlp1"), d, cfg.mlp_ratio * d, rng);
            dense(&mut map, &format!("{p}.mlp2"), cfg.mlp_ratio * d, d, rng);
        }
        zero_dense(&mut map, "final.ada", d, 2 * d);
        zero_dense(&mut map, "final.out", d, cfg.audio_dim);
        Ok(Self { map })
    }
}

/// Parameters lifted onto a tape as leaf variables, with usage tracking so
/// the "no orphan arrays" invariant is checkable.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
    used: RefCell<BTreeSet<String>>,
}

impl ParamVars {
    pub fn new(tape: &mut Tape, params: &Parameters) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in params.iter() {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        Self {
            vars,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        let v = *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.used.borrow_mut().insert(name.to_string());
        v
    }

    /// Names never consumed by the forward pass.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.vars
            .keys()
            .filter(|n| !used.contains(*n))
            .cloned()
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn dense(tape: &mut Tape, p: &ParamVars, name: &str, x: Var) -> Var {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let h = tape.matmul(x, w);
    tape.add_bias(h, b)
}

/// `ln(x) * (1 + scale) + shift`, all `[t, d]`.
fn modulate(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Var {
    let n = tape.layer_norm(x, LN_EPS);
    let ones = tape.leaf(Tensor::full(tape.shape(scale), 1.0));
    let sp1 = tape.add(scale, ones);
    let y = tape.mul(n, sp1);
    tape.add(y, shift)
}

fn chunk_cols(tape: &mut Tape, x: Var, n: usize) -> Vec<Var> {
    let w = tape.shape(x)[1] / n;
    (0..n).map(|i| tape.slice_cols(x, i * w, w)).collect()
}

/// Multi-head attention over already-projected q/k/v `[t, model_dim]`, with
/// rotary embeddings at the given positions applied to q and k per head.
fn mh_attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    positions: &[i64],
) -> Var {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * hd, hd);
        let kh = tape.slice_cols(k, h * hd, hd);
        let vh = tape.slice_cols(v, h * hd, hd);
        let qh = tape.rope(qh, positions, ROPE_BASE).expect("even head_dim");
        let kh = tape.rope(kh, positions, ROPE_BASE).expect("even head_dim");
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    tape.concat_cols(&head_outs)
}

/// One attention-or-MLP branch with its own modulation triple.
struct BranchMods {
    scale: Var,
    shift: Var,
    gate: Var,
}

fn gated_residual(tape: &mut Tape, h: Var, branch: Var, gate: Var) -> Var {
    let gb = tape.mul(branch, gate);
    tape.add(h, gb)
}

/// Joint-attention dual-stream block. Returns updated (audio, semantic).
#[allow(clippy::too_many_arguments)]
pub fn mmdit_block(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    audio: Var,
    semantic: Var,
    local_cond: Var,
    global_cond_rows: Var,
    audio_pos: &[i64],
    sem_pos: &[i64],
    with_audio_self_attn: bool,
) -> (Var, Var) {
    let n_a_mods = if with_audio_self_attn { 9 } else { 6 };
    let a_ada = dense(tape, p, &format!("{prefix}.a_ada"), local_cond);
    let a_chunks = chunk_cols(tape, a_ada, n_a_mods);
    let s_ada = dense(tape, p, &format!("{prefix}.s_ada"), global_cond_rows);
    let s_chunks = chunk_cols(tape, s_ada, 6);
    let a_attn = BranchMods { scale: a_chunks[0], shift: a_chunks[1], gate: a_chunks[2] };
    let a_mlp = BranchMods { scale: a_chunks[3], shift: a_chunks[4], gate: a_chunks[5] };
    let s_attn = BranchMods { scale: s_chunks[0], shift: s_chunks[1], gate: s_chunks[2] };
    let s_mlp = BranchMods { scale: s_chunks[3], shift: s_chunks[4], gate: s_chunks[5] };

    // joint attention over the concatenated streams
    let ya = modulate(tape, audio, a_attn.scale, a_attn.shift);
    let ys = modulate(tape, semantic, s_attn.scale, s_attn.shift);
    let qkv_a = dense(tape, p, &format!("{prefix}.a_qkv"), ya);
    let qkv_s = dense(tape, p, &format!("{prefix}.s_qkv"), ys);
    let [qa, ka, va_] = chunk_cols(tape, qkv_a, 3)[..] else { unreachable!() };
    let [qs, ks, vs_] = chunk_cols(tape, qkv_s, 3)[..] else { unreachable!() };
    let q = tape.concat_rows(&[qa, qs]);
    let k = tape.concat_rows(&[ka, ks]);
    let v = tape.concat_rows(&[va_, vs_]);
    let mut joint_pos = audio_pos.to_vec();
    joint_pos.extend_from_slice(sem_pos);
    let attn = mh_attention(tape, cfg, q, k, v, &joint_pos);
    let t_a = audio_pos.len();
    let t_s = sem_pos.len();
    let attn_a = tape.slice_rows(attn, 0, t_a);
    let attn_s = tape.slice_rows(attn, t_a, t_s);
    let proj_a = dense(tape, p, &format!("{prefix}.a_out"), attn_a);
    let proj_s = dense(tape, p, &format!("{prefix}.s_out"), attn_s);
    let mut audio = gated_residual(tape, audio, proj_a, a_attn.gate);
    let semantic = gated_residual(tape, semantic, proj_s, s_attn.gate);

    // optional extra self-attention over the audio stream only
    if with_audio_self_attn {
        let sa = BranchMods { scale: a_chunks[6], shift: a_chunks[7], gate: a_chunks[8] };
        let y = modulate(tape, audio, sa.scale, sa.shift);
        let qkv = dense(tape, p, &format!("{prefix}.a_sa_qkv"), y);
        let [q, k, v] = chunk_cols(tape, qkv, 3)[..] else { unreachable!() };
        let attn = mh_attention(tape, cfg, q, k, v, audio_pos);
        let proj = dense(tape, p, &format!("{prefix}.a_sa_out"), attn);
        audio = gated_residual(tape, audio, proj, sa.gate);
    }

    // per-stream MLPs
    let ya = modulate(tape, audio, a_mlp.scale, a_mlp.shift);
    let h = dense(tape, p, &format!("{prefix}.a_mlp1"), ya);
    let h = tape.silu(h);
    let h = dense(tape, p, &format!("{prefix}.a_mlp2"), h);
    let audio = gated_residual(tape, audio, h, a_mlp.gate);

    let ys = modulate(tape, semantic, s_mlp.scale, s_mlp.shift);
    let h = dense(tape, p, &format!("{prefix}.s_mlp1"), ys);
    let h = tape.silu(h);
    let h = dense(tape, p, &format!("{prefix}.s_mlp2"), h);
    let semantic = gated_residual(tape, semantic, h, s_mlp.gate);

    (audio, semantic)
}

fn single_block(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    audio: Var,
    local_cond: Var,
    audio_pos: &[i64],
) -> Var {
    let ada = dense(tape, p, &format!("{prefix}.ada"), local_cond);
    let c = chunk_cols(tape, ada, 6);
    let y = modulate(tape, audio, c[0], c[1]);
    let qkv = dense(tape, p, &format!("{prefix}.qkv"), y);
    let [q, k, v] = chunk_cols(tape, qkv, 3)[..] else { unreachable!() };
    let attn = mh_attention(tape, cfg, q, k, v, audio_pos);
    let proj = dense(tape, p, &format!("{prefix}.out"), attn);
    let audio = gated_residual(tape, audio, proj, c[2]);
    let y = modulate(tape, audio, c[3], c[4]);
    let h = dense(tape, p, &format!("{prefix}.mlp1"), y);
    let h = tape.silu(h);
    let h = dense(tape, p, &format!("{prefix}.mlp2"), h);
    gated_residual(tape, audio, h, c[5])
}

/// Length unification of the synchronization stream to the audio latent
/// length: `LayerNorm(stopgrad(cubic_interp(v_syn))) + tanh(g) * ConvT(v_syn)`.
/// Gradient reaches `v_syn` only through the transpose-conv path.
pub fn length_unify(tape: &mut Tape, p: &ParamVars, v_syn: Var, t_a: usize) -> Result<Var> {
    let t_in = tape.shape(v_syn)[0];
    if t_a < t_in {
        return Err(CoreError::Dimension(format!(
            "length_unify cannot downsample: t_a={t_a} < t_vsyn={t_in}"
        )));
    }
    // interpolation path: plain-value cubic interp behind a stop-gradient
    let interp = crate::nn::interp_cubic_rows(tape.value(v_syn), t_a);
    let interp = tape.leaf(interp);
    let interp = tape.layer_norm(interp, LN_EPS);

    let kernel = p.get("lenunify.kernel");
    let gate = p.get("lenunify.gate");
    let conv = tape.conv_transpose1d(v_syn, kernel, UPSAMPLE_KERNEL, UPSAMPLE_STRIDE);
    let conv = tape.resample_linear(conv, t_a);
    let g = tape.tanh(gate);
    let learned = tape.scale_by(conv, g);
    Ok(tape.add(interp, learned))
}

/// Add the learned mask token to positions inside the span and the unmask
/// token everywhere else.
pub fn apply_mask_tokens(tape: &mut Tape, p: &ParamVars, x: Var, mask: Option<MaskSpan>) -> Result<Var> {
    let t = tape.shape(x)[0];
    let mask_tok = p.get("input.mask_token");
    let unmask_tok = p.get("input.unmask_token");
    let field = match mask {
        None => tape.broadcast_rows(unmask_tok, t),
        Some(span) => {
            if span.end() > t {
                return Err(CoreError::Range(format!(
                    "mask span [{}, {}) out of range for length {t}",
                    span.start,
                    span.end()
                )));
            }
            let mut parts = Vec::new();
            if span.start > 0 {
                parts.push(tape.broadcast_rows(unmask_tok, span.start));
            }
            parts.push(tape.broadcast_rows(mask_tok, span.len));
            if span.end() < t {
                parts.push(tape.broadcast_rows(unmask_tok, t - span.end()));
            }
            tape.concat_rows(&parts)
        }
    };
    Ok(tape.add(x, field))
}

/// Integer rotary positions for the semantic stream, scaled onto the audio
/// latent timeline so relative offsets are comparable across streams.
fn semantic_positions(t_vs: usize) -> Vec<i64> {
    (0..t_vs)
        .map(|j| (j as f64 * LATENT_RATE_HZ / SEMANTIC_FPS).round() as i64)
        .collect()
}

/// Build the full velocity-field forward pass on a tape. Returns the output
/// variable of shape `[t_a, audio_dim]`.
pub fn build_forward(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    x_t: Var,
    step: StepInputs,
    cond: &ConditioningBundle,
    mask: Option<MaskSpan>,
) -> Result<Var> {
    let shape = tape.shape(x_t);
    if shape.len() != 2 || shape[1] != cfg.audio_dim {
        return Err(CoreError::Dimension(format!(
            "x_t shape {shape:?}, expected [t_a, {}]",
            cfg.audio_dim
        )));
    }
    let t_a = shape[0];
    let t_vs = cond.semantic_seq.rows();
    let t_vsyn = cond.sync_seq.rows();
    if cond.semantic_seq.cols() != cfg.semantic_dim
        || cond.sync_seq.cols() != cfg.sync_dim
        || cond.text_vec.len() != cfg.text_dim
    {
        return Err(CoreError::Dimension(
            "conditioning feature dims do not match the model config".into(),
        ));
    }
    if !ratio_ok(t_vs, t_a, SEMANTIC_FPS) || !ratio_ok(t_vsyn, t_a, SYNC_FPS) {
        return Err(CoreError::Dimension(format!(
            "conditioning stream lengths (sem {t_vs}, sync {t_vsyn}) inconsistent \
             with t_a={t_a} under the 5% grace rule"
        )));
    }

    // audio stream input
    let x = apply_mask_tokens(tape, p, x_t, mask)?;
    let mut audio = dense(tape, p, "input.audio_proj", x);

    // conditioning signals, dropped ones replaced by learned null embeddings
    let text = if cond.drop_text {
        p.get("cond.null_text")
    } else {
        tape.leaf(cond.text_vec.clone())
    };
    let sem_raw = if cond.drop_semantic {
        let null = p.get("cond.null_semantic");
        tape.broadcast_rows(null, t_vs)
    } else {
        tape.leaf(cond.semantic_seq.clone())
    };
    let sync_raw = if cond.drop_sync {
        let null = p.get("cond.null_sync");
        tape.broadcast_rows(null, t_vsyn)
    } else {
        tape.leaf(cond.sync_seq.clone())
    };

    // global conditioning: text + pooled semantic + time/step embedding
    let text_g = dense(tape, p, "cond.text_proj", text);
    let pooled = tape.mean_rows(sem_raw);
    let pooled_g = dense(tape, p, "cond.pooled_proj", pooled);
    let mut emb = sinusoidal_embedding(step.t, cfg.model_dim);
    emb.extend(sinusoidal_embedding(step.d, cfg.model_dim));
    let emb = tape.leaf(Tensor::new(vec![1, 2 * cfg.model_dim], emb)?);
    let h = dense(tape, p, "cond.step_mlp1", emb);
    let h = tape.silu(h);
    let step_g = dense(tape, p, "cond.step_mlp2", h);
    let global = tape.add(text_g, pooled_g);
    let global = tape.add(global, step_g);

    // local conditioning: global summed with length-unified sync features
    let unified = length_unify(tape, p, sync_raw, t_a)?;
    let sync_local = dense(tape, p, "cond.sync_proj", unified);
    let global_rows_a = tape.broadcast_rows(global, t_a);
    let local = tape.add(global_rows_a, sync_local);
    let global_rows_s = tape.broadcast_rows(global, t_vs);

    let mut semantic = dense(tape, p, "cond.sem_stream_proj", sem_raw);

    let audio_pos: Vec<i64> = (0..t_a as i64).collect();
    let sem_pos = semantic_positions(t_vs);
    for i in 0..cfg.n_mm_blocks {
        let with_sa = i < cfg.n_mm_blocks_with_audio_self_attn;
        let (a, s) = mmdit_block(
            tape,
            p,
            cfg,
            &format!("mm{i}"),
            audio,
            semantic,
            local,
            global_rows_s,
            &audio_pos,
            &sem_pos,
            with_sa,
        );
        audio = a;
        semantic = s;
    }
    for j in 0..cfg.n_single_blocks {
        audio = single_block(tape, p, cfg, &format!("sb{j}"), audio, local, &audio_pos);
    }

    let ada = dense(tape, p, "final.ada", local);
    let c = chunk_cols(tape, ada, 2);
    let y = modulate(tape, audio, c[0], c[1]);
    let out = dense(tape, p, "final.out", y);
    if !tape.value(out).all_finite() {
        return Err(CoreError::Numeric("non-finite velocity output".into()));
    }
    Ok(out)
}

/// Plain inference forward pass: velocity field of the same shape as `x_t`.
pub fn forward(
    params: &Parameters,
    cfg: &ModelConfig,
    x_t: &Tensor,
    step: StepInputs,
    cond: &ConditioningBundle,
    mask: Option<MaskSpan>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = ParamVars::new(&mut tape, params);
    let x = tape.leaf(x_t.clone());
    let out = build_forward(&mut tape, &p, cfg, x, step, cond, mask)?;
    Ok(tape.value(out).clone())
}
