//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! A `Tape` records every operation of a forward pass; `backward` walks the
//! record in reverse and accumulates gradients for every leaf. Backward
//! closures capture (by clone) whatever forward values they need, which is
//! cheap at desk scale and keeps ownership simple.
//!
//! The op set is exactly what the velocity network, losses, and contrastive
//! encoders need. Gradients of everything built on this tape are validated
//! against [`finite_diff`] in tests.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf. Gradients accumulate for leaves like any other node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value).unwrap();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(ia, g.clone()), (ib, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value).unwrap();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(ia, g.clone()), (ib, g.scale(-1.0))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.zip(&bv, |x, y| x * y).unwrap();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![
                    (ia, g.zip(&bv, |x, y| x * y).unwrap()),
                    (ib, g.zip(&av, |x, y| x * y).unwrap()),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.scale(s);
        let ia = a.0;
        self.push(value, Some(Box::new(move |g| vec![(ia, g.scale(s))])))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.matmul(&bv).unwrap();
        let (ia, ib) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![
                    (ia, g.matmul(&bv.transpose()).unwrap()),
                    (ib, av.transpose().matmul(g).unwrap()),
                ]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose();
        let ia = a.0;
        self.push(value, Some(Box::new(move |g| vec![(ia, g.transpose())])))
    }

    /// Add a `[d]` or `[1,d]` vector to every row of a `[t,d]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(bv.len(), d, "bias length mismatch");
        let mut data = xv.data().to_vec();
        for i in 0..t {
            for j in 0..d {
                data[i * d + j] += bv.data()[j];
            }
        }
        let bshape = bv.shape().to_vec();
        let (ix, ib) = (x.0, b.0);
        self.push(
            Tensor::new(vec![t, d], data).unwrap(),
            Some(Box::new(move |g| {
                let mut gb = vec![0.0; d];
                for i in 0..t {
                    for j in 0..d {
                        gb[j] += g.data()[i * d + j];
                    }
                }
                vec![
                    (ix, g.clone()),
                    (ib, Tensor::new(bshape.clone(), gb).unwrap()),
                ]
            })),
        )
    }

    /// Broadcast a `[d]` or `[1,d]` vector into `t` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, t: usize) -> Var {
        let vv = &self.nodes[v.0].value;
        let d = vv.len();
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t {
            data.extend_from_slice(vv.data());
        }
        let vshape = vv.shape().to_vec();
        let iv = v.0;
        self.push(
            Tensor::new(vec![t, d], data).unwrap(),
            Some(Box::new(move |g| {
                let mut gv = vec![0.0; d];
                for i in 0..t {
                    for j in 0..d {
                        gv[j] += g.data()[i * d + j];
                    }
                }
                vec![(iv, Tensor::new(vshape.clone(), gv).unwrap())]
            })),
        )
    }

    /// Multiply every element of `x` by a scalar-shaped variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let sv = self.nodes[s.0].value.data()[0];
        let sshape = self.nodes[s.0].value.shape().to_vec();
        let value = xv.scale(sv);
        let (ix, is) = (x.0, s.0);
        self.push(
            value,
            Some(Box::new(move |g| {
                let gs = g.dot(&xv);
                vec![
                    (ix, g.scale(sv)),
                    (is, Tensor::new(sshape.clone(), vec![gs]).unwrap()),
                ]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::new();
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols(), d);
            row_counts.push(pv.rows());
            data.extend_from_slice(pv.data());
        }
        let total: usize = row_counts.iter().sum();
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            Tensor::new(vec![total, d], data).unwrap(),
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                let mut r0 = 0;
                for (&i, &rc) in idx.iter().zip(&row_counts) {
                    let part = &g.data()[r0 * d..(r0 + rc) * d];
                    out.push((i, Tensor::new(vec![rc, d], part.to_vec()).unwrap()));
                    r0 += rc;
                }
                out
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (t, d) = (xv.rows(), xv.cols());
        assert!(start + len <= t);
        let data = xv.data()[start * d..(start + len) * d].to_vec();
        let ix = x.0;
        self.push(
            Tensor::new(vec![len, d], data).unwrap(),
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; t * d];
                gx[start * d..(start + len) * d].copy_from_slice(g.data());
                vec![(ix, Tensor::new(vec![t, d], gx).unwrap())]
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (t, d) = (xv.rows(), xv.cols());
        assert!(start + len <= d);
        let mut data = Vec::with_capacity(t * len);
        for i in 0..t {
            data.extend_from_slice(&xv.data()[i * d + start..i * d + start + len]);
        }
        let ix = x.0;
        self.push(
            Tensor::new(vec![t, len], data).unwrap(),
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; t * d];
                for i in 0..t {
                    gx[i * d + start..i * d + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![(ix, Tensor::new(vec![t, d], gx).unwrap())]
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let t = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.cols())
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; t * total];
        let mut c0 = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), t);
            for i in 0..t {
                data[i * total + c0..i * total + c0 + w].copy_from_slice(pv.row(i));
            }
            c0 += w;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            Tensor::new(vec![t, total], data).unwrap(),
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                let mut c0 = 0;
                for (&i, &w) in idx.iter().zip(&widths) {
                    let mut part = vec![0.0; t * w];
                    for r in 0..t {
                        part[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + c0..r * total + c0 + w]);
                    }
                    out.push((i, Tensor::new(vec![t, w], part).unwrap()));
                    c0 += w;
                }
                out
            })),
        )
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let (t, d) = (xv.rows(), xv.cols());
        let mut y = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        for i in 0..t {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                y[i * d + j] = (row[j] - mean) * istd;
            }
        }
        let yv = Tensor::new(vec![t, d], y).unwrap();
        let y_cap = yv.clone();
        let ix = x.0;
        self.push(
            yv,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; t * d];
                for i in 0..t {
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let yrow = y_cap.row(i);
                    let mg = grow.iter().sum::<f64>() / d as f64;
                    let mgy = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        gx[i * d + j] = inv_std[i] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
                vec![(ix, Tensor::new(vec![t, d], gx).unwrap())]
            })),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (t, d) = (xv.rows(), xv.cols());
        let mut y = vec![0.0; t * d];
        for i in 0..t {
            let row = xv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                y[i * d + j] = e;
                s += e;
            }
            for j in 0..d {
                y[i * d + j] /= s;
            }
        }
        let yv = Tensor::new(vec![t, d], y).unwrap();
        let y_cap = yv.clone();
        let ix = x.0;
        self.push(
            yv,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; t * d];
                for i in 0..t {
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let yrow = y_cap.row(i);
                    let dot: f64 = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[i * d + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(ix, Tensor::new(vec![t, d], gx).unwrap())]
            })),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let value = xv.map(|v| v / (1.0 + (-v).exp()));
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                let gx = g
                    .zip(&xv, |go, v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        go * (s + v * s * (1.0 - s))
                    })
                    .unwrap();
                vec![(ix, gx)]
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(f64::tanh);
        let y_cap = value.clone();
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(ix, g.zip(&y_cap, |go, y| go * (1.0 - y * y)).unwrap())]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let y_cap = value.clone();
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(ix, g.zip(&y_cap, |go, y| go * y * (1.0 - y)).unwrap())]
            })),
        )
    }

    /// log(sigmoid(x)), numerically stable.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let value = xv.map(|v| if v >= 0.0 { -((-v).exp()).ln_1p() } else { v - v.exp().ln_1p() });
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                // d/dx log sigmoid = 1 - sigmoid(x) = sigmoid(-x)
                let gx = g
                    .zip(&xv, |go, v| go / (1.0 + v.exp()))
                    .unwrap();
                vec![(ix, gx)]
            })),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(f64::exp);
        let y_cap = value.clone();
        let ix = x.0;
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(ix, g.zip(&y_cap, |go, y| go * y).unwrap())]
            })),
        )
    }

    /// Broadcast a scalar var to a full tensor of `shape`.
    pub fn broadcast_scalar(&mut self, s: Var, shape: Vec<usize>) -> Var {
        let sv = self.nodes[s.0].value.data()[0];
        let sshape = self.nodes[s.0].value.shape().to_vec();
        let is = s.0;
        self.push(
            Tensor::full(shape, sv),
            Some(Box::new(move |g| {
                vec![(is, Tensor::new(sshape.clone(), vec![g.sum()]).unwrap())]
            })),
        )
    }

    /// Normalize each row to unit L2 norm: y_i = x_i / sqrt(||x_i||^2 + eps).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let (t, d) = (xv.rows(), xv.cols());
        let norms: Vec<f64> = (0..t)
            .map(|i| (xv.row(i).iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let mut out = xv.clone();
        for i in 0..t {
            for v in out.row_mut(i) {
                *v /= norms[i];
            }
        }
        let ix = x.0;
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = Tensor::zeros(vec![t, d]);
                for i in 0..t {
                    let r = norms[i];
                    let dot: f64 = xv
                        .row(i)
                        .iter()
                        .zip(g.row(i))
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in 0..d {
                        let v = g.row(i)[j] / r - xv.row(i)[j] * dot / (r * r * r);
                        gx.set2(i, j, v);
                    }
                }
                vec![(ix, gx)]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let s = xv.sum();
        let n: usize = shape.iter().product();
        let ix = x.0;
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g| {
                let gv = g.data()[0];
                vec![(ix, Tensor::new(shape.clone(), vec![gv; n]).unwrap())]
            })),
        )
    }

    /// Mean over rows: `[t,d] -> [1,d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (t, d) = (xv.rows(), xv.cols());
        let mut m = vec![0.0; d];
        for i in 0..t {
            for j in 0..d {
                m[j] += xv.data()[i * d + j];
            }
        }
        for v in m.iter_mut() {
            *v /= t as f64;
        }
        let ix = x.0;
        self.push(
            Tensor::new(vec![1, d], m).unwrap(),
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; t * d];
                for i in 0..t {
                    for j in 0..d {
                        gx[i * d + j] = g.data()[j] / t as f64;
                    }
                }
                vec![(ix, Tensor::new(vec![t, d], gx).unwrap())]
            })),
        )
    }

    /// Apply rotary position embedding to a `[t, d]` tensor (d even):
    /// consecutive feature pairs (2j, 2j+1) of row i are rotated by
    /// `positions[i] * base^(-2j/d)`. A pure rotation, so the backward pass
    /// rotates the gradient by the negative angles.
    pub fn rope(&mut self, x: Var, positions: &[i64], base: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (t, d) = (xv.rows(), xv.cols());
        if d % 2 != 0 {
            return Err(CoreError::Dimension(format!(
                "rope needs an even feature dim, got {d}"
            )));
        }
        if positions.len() != t {
            return Err(CoreError::Dimension(format!(
                "rope positions len {} != rows {}",
                positions.len(),
                t
            )));
        }
        let pairs = d / 2;
        let mut cos = vec![0.0; t * pairs];
        let mut sin = vec![0.0; t * pairs];
        for i in 0..t {
            for j in 0..pairs {
                let theta = positions[i] as f64 * base.powf(-(2.0 * j as f64) / d as f64);
                cos[i * pairs + j] = theta.cos();
                sin[i * pairs + j] = theta.sin();
            }
        }
        let rotate = move |src: &[f64], cos: &[f64], sin: &[f64], flip: bool| {
            let mut out = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..pairs {
                    let (c, mut s) = (cos[i * pairs + j], sin[i * pairs + j]);
                    if flip {
                        s = -s;
                    }
                    let a = src[i * d + 2 * j];
                    let b = src[i * d + 2 * j + 1];
                    out[i * d + 2 * j] = a * c - b * s;
                    out[i * d + 2 * j + 1] = a * s + b * c;
                }
            }
            out
        };
        let value = Tensor::new(vec![t, d], rotate(xv.data(), &cos, &sin, false)).unwrap();
        let ix = x.0;
        Ok(self.push(
            value,
            Some(Box::new(move |g| {
                let gx = rotate(g.data(), &cos, &sin, true);
                vec![(ix, Tensor::new(vec![t, d], gx).unwrap())]
            })),
        ))
    }

    /// 1-D transposed convolution over the row (time) axis.
    /// `x: [t, cin]`, `kernel: [k, cin, cout]` stored row-major as `[k*cin, cout]`,
    /// output `[(t-1)*stride + k, cout]`.
    pub fn conv_transpose1d(&mut self, x: Var, kernel: Var, k: usize, stride: usize) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let kv = self.nodes[kernel.0].value.clone();
        let (t, cin) = (xv.rows(), xv.cols());
        let cout = kv.cols();
        assert_eq!(kv.rows(), k * cin, "kernel rows must be k*cin");
        let t_out = (t - 1) * stride + k;
        let mut out = vec![0.0; t_out * cout];
        for i in 0..t {
            for u in 0..k {
                let oi = i * stride + u;
                for c in 0..cin {
                    let xval = xv.data()[i * cin + c];
                    if xval == 0.0 {
                        continue;
                    }
                    let krow = kv.row(u * cin + c);
                    for o in 0..cout {
                        out[oi * cout + o] += xval * krow[o];
                    }
                }
            }
        }
        let (ix, ik) = (x.0, kernel.0);
        self.push(
            Tensor::new(vec![t_out, cout], out).unwrap(),
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; t * cin];
                let mut gk = vec![0.0; k * cin * cout];
                for i in 0..t {
                    for u in 0..k {
                        let oi = i * stride + u;
                        let grow = &g.data()[oi * cout..(oi + 1) * cout];
                        for c in 0..cin {
                            let krow = kv.row(u * cin + c);
                            let mut acc = 0.0;
                            for o in 0..cout {
                                acc += grow[o] * krow[o];
                                gk[(u * cin + c) * cout + o] += xv.data()[i * cin + c] * grow[o];
                            }
                            gx[i * cin + c] += acc;
                        }
                    }
                }
                vec![
                    (ix, Tensor::new(vec![t, cin], gx).unwrap()),
                    (ik, Tensor::new(vec![k * cin, cout], gk).unwrap()),
                ]
            })),
        )
    }

    /// Linear resampling of the row (time) axis to `t_out` rows. A fixed
    /// sparse linear map; the backward pass scatters through its transpose.
    pub fn resample_linear(&mut self, x: Var, t_out: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (t, d) = (xv.rows(), xv.cols());
        assert!(t >= 1 && t_out >= 1);
        let mut lo_idx = vec![0usize; t_out];
        let mut frac = vec![0.0; t_out];
        for i in 0..t_out {
            let src = if t_out == 1 {
                0.0
            } else {
                i as f64 * (t - 1) as f64 / (t_out - 1) as f64
            };
            let lo = (src.floor() as usize).min(t.saturating_sub(2).max(0));
            lo_idx[i] = lo;
            frac[i] = if t == 1 { 0.0 } else { src - lo as f64 };
        }
        let mut out = vec![0.0; t_out * d];
        for i in 0..t_out {
            let lo = lo_idx[i];
            let hi = (lo + 1).min(t - 1);
            let f = frac[i];
            for j in 0..d {
                out[i * d + j] = (1.0 - f) * xv.data()[lo * d + j] + f * xv.data()[hi * d + j];
            }
        }
        let ix = x.0;
        self.push(
            Tensor::new(vec![t_out, d], out).unwrap(),
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; t * d];
                for i in 0..t_out {
                    let lo = lo_idx[i];
                    let hi = (lo + 1).min(t - 1);
                    let f = frac[i];
                    for j in 0..d {
                        gx[lo * d + j] += (1.0 - f) * g.data()[i * d + j];
                        gx[hi * d + j] += f * g.data()[i * d + j];
                    }
                }
                vec![(ix, Tensor::new(vec![t, d], gx).unwrap())]
            })),
        )
    }

    /// Accumulate gradients from `loss` (must be scalar-shaped) back to every
    /// reachable node. Returns one gradient slot per node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )
        .unwrap());
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].backward {
                for (pi, pg) in back(&g) {
                    match &mut grads[pi] {
                        Some(acc) => *acc = acc.add(&pg).unwrap(),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zeros if the loss does not depend on it.
    pub fn grad(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }
}

/// Central-difference gradient estimate of a scalar function of a flat
/// parameter vector. The test oracle for every analytic gradient in the
/// engine.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    assert!(eps > 0.0);
    let mut grad = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = f(&work);
        work[i] = orig - eps;
        let fm = f(&work);
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max relative error between analytic and reference gradients, with an
/// absolute floor so near-zero coordinates do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / r.abs().max(a.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
