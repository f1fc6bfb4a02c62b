//! Attention utilities and small neural-net building blocks operating on
//! plain tensors. The velocity network uses the tape equivalents in
//! [`crate::autodiff`]; the functions here are the standalone, directly
//! testable forms plus shared helpers (sinusoidal embeddings, cubic
//! interpolation).

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Default rotary base frequency (standard convention).
pub const ROPE_BASE: f64 = 10000.0;
/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Apply rotary position embeddings to `[t, heads, head_dim]`. Consecutive
/// feature pairs of each head are rotated by `pos * base^(-2j/head_dim)`.
pub fn rope_apply(x: &Tensor, positions: &[i64], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(CoreError::Dimension(format!(
            "rope_apply expects [t, heads, head_dim], got {shape:?}"
        )));
    }
    let (t, heads, hd) = (shape[0], shape[1], shape[2]);
    if hd % 2 != 0 {
        return Err(CoreError::Dimension(format!("odd head_dim {hd}")));
    }
    if positions.len() != t {
        return Err(CoreError::Dimension(format!(
            "positions len {} != t {}",
            positions.len(),
            t
        )));
    }
    let mut out = x.data().to_vec();
    for i in 0..t {
        for h in 0..heads {
            let off = (i * heads + h) * hd;
            for j in 0..hd / 2 {
                let theta = positions[i] as f64 * base.powf(-(2.0 * j as f64) / hd as f64);
                let (s, c) = theta.sin_cos();
                let a = out[off + 2 * j];
                let b = out[off + 2 * j + 1];
                out[off + 2 * j] = a * c - b * s;
                out[off + 2 * j + 1] = a * s + b * c;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm_rows(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * istd;
        }
    }
    Tensor::new(vec![t, d], out).unwrap()
}

/// Adaptive layer-norm modulation. `cond` rows carry `(scale, shift)` when
/// 2d wide, or `(scale, shift, gate)` when 3d wide:
/// `out[i] = norm(x[i]) * (1 + scale_i) + shift_i`, multiplied by `gate_i`
/// in the gated form.
pub fn adaln_modulate(x: &Tensor, cond: &Tensor) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if cond.rows() != t {
        return Err(CoreError::Dimension(format!(
            "adaln sequence length mismatch: x has {t} rows, cond has {}",
            cond.rows()
        )));
    }
    let gated = if cond.cols() == 2 * d {
        false
    } else if cond.cols() == 3 * d {
        true
    } else {
        return Err(CoreError::Dimension(format!(
            "adaln cond width {} is neither 2d nor 3d (d={d})",
            cond.cols()
        )));
    };
    let normed = layer_norm_rows(x);
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let crow = cond.row(i);
        for j in 0..d {
            let mut v = normed.get2(i, j) * (1.0 + crow[j]) + crow[d + j];
            if gated {
                v *= crow[2 * d + j];
            }
            out[i * d + j] = v;
        }
    }
    Tensor::new(vec![t, d], out)
}

/// Row-wise softmax on a mutable slice.
pub fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Scaled dot-product attention: `q [tq,d]`, `k [tk,d]`, `v [tk,dv]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(CoreError::Dimension(format!(
            "attention shapes q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul(&k.transpose())?.scale(scale);
    for i in 0..scores.rows() {
        softmax_inplace(scores.row_mut(i));
    }
    scores.matmul(v)
}

/// Sinusoidal embedding of a scalar in `[0,1]`: half sine, half cosine
/// features over a geometric frequency ladder.
pub fn sinusoidal_embedding(value: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 1000.0 * ROPE_BASE.powf(-(k as f64) / half as f64);
        let (s, c) = (value * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    out
}

/// Cubic (Catmull-Rom) interpolation of the row axis to `t_out` rows, with
/// clamped end conditions. Not differentiated anywhere: the learned
/// upsampler's interpolation path is behind a stop-gradient.
pub fn interp_cubic_rows(x: &Tensor, t_out: usize) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; t_out * d];
    let at = |i: i64| x.row(i.clamp(0, t as i64 - 1) as usize);
    for i in 0..t_out {
        let src = if t_out == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (t_out - 1) as f64
        };
        let i1 = src.floor() as i64;
        let f = src - i1 as f64;
        let (p0, p1, p2, p3) = (at(i1 - 1), at(i1), at(i1 + 1), at(i1 + 2));
        let (f2, f3) = (f * f, f * f * f);
        let w0 = -0.5 * f3 + f2 - 0.5 * f;
        let w1 = 1.5 * f3 - 2.5 * f2 + 1.0;
        let w2 = -1.5 * f3 + 2.0 * f2 + 0.5 * f;
        let w3 = 0.5 * f3 - 0.5 * f2;
        for j in 0..d {
            out[i * d + j] = w0 * p0[j] + w1 * p1[j] + w2 * p2[j] + w3 * p3[j];
        }
    }
    Tensor::new(vec![t_out, d], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::new(vec![1, 2, 4], rng.normal_vec(8)).unwrap();
        let y = rope_apply(&x, &[0], ROPE_BASE).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_preserves_per_head_norm() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::new(vec![5, 3, 6], rng.normal_vec(90)).unwrap();
        let y = rope_apply(&x, &[0, 1, 2, 7, 100], ROPE_BASE).unwrap();
        for i in 0..5 {
            for h in 0..3 {
                let off = (i * 3 + h) * 6;
                let nx: f64 = x.data()[off..off + 6].iter().map(|v| v * v).sum();
                let ny: f64 = y.data()[off..off + 6].iter().map(|v| v * v).sum();
                assert!((nx.sqrt() - ny.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rope_head_dim_2_matches_hand_rotation() {
        // head_dim=2, position 1: single rotation by theta = 1 * base^0 = 1 rad
        let x = Tensor::new(vec![1, 1, 2], vec![0.7, -0.3]).unwrap();
        let y = rope_apply(&x, &[1], ROPE_BASE).unwrap();
        let (s, c) = 1.0f64.sin_cos();
        assert!((y.data()[0] - (0.7 * c - (-0.3) * s)).abs() < 1e-12);
        assert!((y.data()[1] - (0.7 * s + (-0.3) * c)).abs() < 1e-12);
    }

    #[test]
    fn rope_odd_head_dim_rejected() {
        let x = Tensor::zeros(vec![1, 1, 3]);
        assert!(rope_apply(&x, &[0], ROPE_BASE).is_err());
    }

    #[test]
    fn adaln_identity_modulation() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::new(vec![4, 3], rng.normal_vec(12)).unwrap();
        let cond = Tensor::zeros(vec![4, 6]);
        let y = adaln_modulate(&x, &cond).unwrap();
        assert_eq!(y, layer_norm_rows(&x));
    }

    #[test]
    fn adaln_zero_gate_zeroes_branch() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::new(vec![2, 3], rng.normal_vec(6)).unwrap();
        let mut cond = Tensor::new(vec![2, 9], rng.normal_vec(18)).unwrap();
        for i in 0..2 {
            for j in 6..9 {
                cond.set2(i, j, 0.0);
            }
        }
        let y = adaln_modulate(&x, &cond).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaln_row_stats_closed_form() {
        // out row i = normed * (1+scale) + shift; normed has mean 0, var 1
        // => mean = shift, var = (1+scale)^2 (per-row constant scale/shift)
        let mut rng = SeededRng::new(5);
        let d = 64;
        let x = Tensor::new(vec![3, d], rng.normal_vec(3 * d)).unwrap();
        let mut cond = Tensor::zeros(vec![3, 2 * d]);
        let scales = [0.5, -0.3, 2.0];
        let shifts = [1.0, 0.0, -4.0];
        for i in 0..3 {
            for j in 0..d {
                cond.set2(i, j, scales[i]);
                cond.set2(i, d + j, shifts[i]);
            }
        }
        let y = adaln_modulate(&x, &cond).unwrap();
        for i in 0..3 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!((mean - shifts[i]).abs() < 1e-9);
            // normed variance is d/(d-0) exactly 1 under population norm (up to LN_EPS)
            assert!((var - (1.0 + scales[i]) * (1.0 + scales[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn adaln_length_mismatch_rejected() {
        let x = Tensor::zeros(vec![4, 3]);
        let cond = Tensor::zeros(vec![3, 6]);
        assert!(adaln_modulate(&x, &cond).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeededRng::new(6);
        for _ in 0..10 {
            let mut row = rng.normal_vec(7);
            softmax_inplace(&mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Tensor::new(vec![2, 3], vec![1.0, -5.0, 2.0, 0.0, 0.1, 9.0]).unwrap();
        let k = Tensor::new(vec![1, 3], vec![0.3, 0.4, -0.2]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![7.0, -3.0]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        assert_eq!(out.data(), &[7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn cubic_interp_constant_stays_constant() {
        let x = Tensor::full(vec![5, 2], 3.25);
        let y = interp_cubic_rows(&x, 13);
        assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn cubic_interp_hits_knots() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 4.0, 9.0]).unwrap();
        let y = interp_cubic_rows(&x, 5);
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[2] - 4.0).abs() < 1e-12);
        assert!((y.data()[4] - 9.0).abs() < 1e-12);
    }
}
