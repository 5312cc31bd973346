//! Tape-based reverse-mode autodiff over dense f64 matrices.
//!
//! Every value in a computation is a matrix (scalars are 1x1, vectors 1xN).
//! Operations compute their forward value immediately and push a backward
//! closure onto the tape. Nodes whose subtree contains no trainable leaf are
//! marked as not needing gradients and their backward work is skipped.

use crate::error::{Error, Result};
use crate::numkernel::store::ParamStore;
use ndarray::{s, Array1, Array2, Axis};
use std::sync::Arc;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn = Box<dyn Fn(&Array2<f64>, &mut [Array2<f64>])>;

/// Masking mode for row-wise softmax.
#[derive(Clone, Debug)]
pub enum SoftmaxMask {
    /// Every column participates.
    Full,
    /// Row `i` attends to columns `0..=i`.
    Causal,
    /// Row `i` attends to columns `0..limits[i]`.
    Limits(Vec<usize>),
}

/// A single-use computation tape.
pub struct Graph {
    values: Vec<Arc<Array2<f64>>>,
    needs: Vec<bool>,
    tape: Vec<(usize, BackFn)>,
    bindings: Vec<(usize, String)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            needs: Vec::new(),
            tape: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Array2<f64>> {
        self.values[id.0].clone()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0][[0, 0]]
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    fn push(&mut self, value: Arc<Array2<f64>>, needs: bool, back: Option<BackFn>) -> NodeId {
        let id = self.values.len();
        self.values.push(value);
        self.needs.push(needs);
        if needs {
            if let Some(b) = back {
                self.tape.push((id, b));
            }
        }
        NodeId(id)
    }

    /// Pushes a custom operation. The closure receives the output gradient and
    /// the full gradient buffer; it must accumulate (`+=`) into its parents'
    /// entries only when they need gradients.
    pub fn push_op(&mut self, value: Array2<f64>, needs: bool, back: BackFn) -> NodeId {
        self.push(Arc::new(value), needs, Some(back))
    }

    /// Leaf with no gradient flow.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Arc::new(value), false, None)
    }

    /// Leaf bound to a parameter-store entry. Gradients accumulate into the
    /// store when [`Graph::backward`] is called; frozen entries receive none.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let entry = store
            .entry(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let needs = !entry.frozen;
        let id = self.push(entry.values.clone(), needs, None);
        if needs {
            self.bindings.push((id.0, name.to_string()));
        }
        Ok(id)
    }

    /// Runs reverse-mode accumulation from a scalar loss node and adds the
    /// resulting leaf gradients into the store (`grad +=`).
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward_raw(loss)?;
        for (idx, name) in &self.bindings {
            if grads[*idx].len() > 0 {
                store.accumulate_grad(name, &grads[*idx])?;
            }
        }
        Ok(())
    }

    /// Reverse pass returning per-node gradient buffers (empty 0x0 arrays for
    /// nodes that need none).
    pub fn backward_raw(&mut self, loss: NodeId) -> Result<Vec<Array2<f64>>> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Shape(
                "backward seed must be a 1x1 scalar node".into(),
            ));
        }
        let mut grads: Vec<Array2<f64>> = self
            .values
            .iter()
            .zip(&self.needs)
            .map(|(v, &n)| {
                if n {
                    Array2::zeros(v.dim())
                } else {
                    Array2::zeros((0, 0))
                }
            })
            .collect();
        if !self.needs[loss.0] {
            return Ok(grads); // loss does not depend on any trainable leaf
        }
        grads[loss.0][[0, 0]] = 1.0;
        for (out, back) in self.tape.iter().rev() {
            let gout = std::mem::replace(&mut grads[*out], Array2::zeros((0, 0)));
            if gout.len() > 0 {
                back(&gout, &mut grads);
            }
            grads[*out] = gout;
        }
        Ok(grads)
    }

    // ----- elementwise and linear ops -------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let out = av.dot(&*bv);
        let needs = self.needs[a.0] || self.needs[b.0];
        let (an, bn) = (self.needs[a.0], self.needs[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push_if(out, needs, move |g, grads| {
            if an {
                grads[ai] += &g.dot(&bv.t());
            }
            if bn {
                grads[bi] += &av.t().dot(g);
            }
        })
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dims");
        let out = av.dot(&bv.t());
        let needs = self.needs[a.0] || self.needs[b.0];
        let (an, bn) = (self.needs[a.0], self.needs[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push_if(out, needs, move |g, grads| {
            if an {
                grads[ai] += &g.dot(&*bv);
            }
            if bn {
                grads[bi] += &g.t().dot(&*av);
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(av.dim(), bv.dim(), "add shapes");
        let out = &*av + &*bv;
        let needs = self.needs[a.0] || self.needs[b.0];
        let (an, bn) = (self.needs[a.0], self.needs[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push_if(out, needs, move |g, grads| {
            if an {
                grads[ai] += g;
            }
            if bn {
                grads[bi] += g;
            }
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(av.dim(), bv.dim(), "sub shapes");
        let out = &*av - &*bv;
        let needs = self.needs[a.0] || self.needs[b.0];
        let (an, bn) = (self.needs[a.0], self.needs[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push_if(out, needs, move |g, grads| {
            if an {
                grads[ai] += g;
            }
            if bn {
                grads[bi] -= g;
            }
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(av.dim(), bv.dim(), "mul shapes");
        let out = &*av * &*bv;
        let needs = self.needs[a.0] || self.needs[b.0];
        let (an, bn) = (self.needs[a.0], self.needs[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push_if(out, needs, move |g, grads| {
            if an {
                grads[ai] += &(g * &*bv);
            }
            if bn {
                grads[bi] += &(g * &*av);
            }
        })
    }

    /// Adds a 1xN row vector to every row of an MxN matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.values[a.0].clone(), self.values[row.0].clone());
        assert_eq!(rv.nrows(), 1, "add_row expects 1xN row");
        assert_eq!(av.ncols(), rv.ncols(), "add_row widths");
        let out = &*av + &rv.row(0);
        let needs = self.needs[a.0] || self.needs[row.0];
        let (an, rn) = (self.needs[a.0], self.needs[row.0]);
        let (ai, ri) = (a.0, row.0);
        self.push_if(out, needs, move |g, grads| {
            if an {
                grads[ai] += g;
            }
            if rn {
                let colsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                grads[ri] += &colsum;
            }
        })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = self.values[a.0].clone();
        let out = av.mapv(|x| x * c);
        let needs = self.needs[a.0];
        let ai = a.0;
        self.push_if(out, needs, move |g, grads| {
            grads[ai].scaled_add(c, g);
        })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = self.values[a.0].clone();
        let out = av.mapv(|x| x + c);
        let needs = self.needs[a.0];
        let ai = a.0;
        self.push_if(out, needs, move |g, grads| {
            grads[ai] += g;
        })
    }

    /// Multiplies every element of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: NodeId, sc: NodeId) -> NodeId {
        let (av, sv) = (self.values[a.0].clone(), self.values[sc.0].clone());
        assert_eq!(sv.len(), 1, "scale_by expects a 1x1 scalar node");
        let s = sv[[0, 0]];
        let out = av.mapv(|x| x * s);
        let needs = self.needs[a.0] || self.needs[sc.0];
        let (an, sn) = (self.needs[a.0], self.needs[sc.0]);
        let (ai, si) = (a.0, sc.0);
        self.push_if(out, needs, move |g, grads| {
            if an {
                grads[ai].scaled_add(s, g);
            }
            if sn {
                grads[si][[0, 0]] += (g * &*av).sum();
            }
        })
    }

    /// 1x1 node holding `1 / a` for a 1x1 input.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let av = self.values[a.0].clone();
        assert_eq!(av.len(), 1, "recip expects a 1x1 scalar node");
        let x = av[[0, 0]];
        let out = Array2::from_elem((1, 1), 1.0 / x);
        let needs = self.needs[a.0];
        let ai = a.0;
        self.push_if(out, needs, move |g, grads| {
            grads[ai][[0, 0]] -= g[[0, 0]] / (x * x);
        })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.values[a.0].clone();
        let out = av.mapv(gelu_tanh);
        let needs = self.needs[a.0];
        let ai = a.0;
        self.push_if(out, needs, move |g, grads| {
            let mut d = av.mapv(gelu_tanh_deriv);
            d *= g;
            grads[ai] += &d;
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let av = self.values[a.0].clone();
        let out = Arc::new(av.mapv(stable_sigmoid));
        let needs = self.needs[a.0];
        let ai = a.0;
        let y = out.clone();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Array2<f64>]| {
                let mut d = y.mapv(|v| v * (1.0 - v));
                d *= g;
                grads[ai] += &d;
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Row-wise softmax under a mask; masked-out entries are exactly zero.
    pub fn softmax_rows(&mut self, a: NodeId, mask: SoftmaxMask) -> NodeId {
        let av = self.values[a.0].clone();
        let (m, n) = av.dim();
        let limits = resolve_limits(&mask, m, n);
        let mut out = Array2::zeros((m, n));
        for i in 0..m {
            let lim = limits[i];
            if lim == 0 {
                continue;
            }
            let row = av.slice(s![i, ..lim]);
            let mx = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut ex: Array1<f64> = row.mapv(|v| (v - mx).exp());
            let sum = ex.sum();
            ex /= sum;
            out.slice_mut(s![i, ..lim]).assign(&ex);
        }
        let out = Arc::new(out);
        let needs = self.needs[a.0];
        let ai = a.0;
        let y = out.clone();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Array2<f64>]| {
                for i in 0..m {
                    let lim = limits[i];
                    if lim == 0 {
                        continue;
                    }
                    let dot = (0..lim).map(|j| y[[i, j]] * g[[i, j]]).sum::<f64>();
                    let mut dst = grads[ai].slice_mut(s![i, ..lim]);
                    for j in 0..lim {
                        dst[j] += y[[i, j]] * (g[[i, j]] - dot);
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.values[a.0].clone();
        let (m, n) = av.dim();
        let mut out = Array2::zeros((m, n));
        for i in 0..m {
            let row = av.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = row.mapv(|v| (v - mx).exp()).sum().ln() + mx;
            out.row_mut(i).assign(&row.mapv(|v| v - lse));
        }
        let out = Arc::new(out);
        let needs = self.needs[a.0];
        let ai = a.0;
        let y = out.clone();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Array2<f64>]| {
                for i in 0..m {
                    let gsum = g.row(i).sum();
                    let mut dst = grads[ai].row_mut(i);
                    for j in 0..n {
                        dst[j] += g[[i, j]] - y[[i, j]].exp() * gsum;
                    }
                }
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Per-row layer normalization with learned gain and bias (both 1xN).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.values[x.0].clone();
        let gv = self.values[gain.0].clone();
        let bv = self.values[bias.0].clone();
        let (m, n) = xv.dim();
        assert_eq!(gv.dim(), (1, n), "layer_norm gain shape");
        assert_eq!(bv.dim(), (1, n), "layer_norm bias shape");
        let mut xhat = Array2::zeros((m, n));
        let mut inv_sigma = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma.push(inv);
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mu) * inv));
        }
        let mut out = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                out[[i, j]] = xhat[[i, j]] * gv[[0, j]] + bv[[0, j]];
            }
        }
        let xhat = Arc::new(xhat);
        let needs = self.needs[x.0] || self.needs[gain.0] || self.needs[bias.0];
        let (xn, gn, bn) = (self.needs[x.0], self.needs[gain.0], self.needs[bias.0]);
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        self.push_if(out, needs, move |g, grads| {
            if gn {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += g[[i, j]] * xhat[[i, j]];
                    }
                    grads[gi][[0, j]] += acc;
                }
            }
            if bn {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += g[[i, j]];
                    }
                    grads[bi][[0, j]] += acc;
                }
            }
            if xn {
                for i in 0..m {
                    let mut mean_gy = 0.0;
                    let mut mean_gyx = 0.0;
                    for j in 0..n {
                        let gy = g[[i, j]] * gv[[0, j]];
                        mean_gy += gy;
                        mean_gyx += gy * xhat[[i, j]];
                    }
                    mean_gy /= n as f64;
                    mean_gyx /= n as f64;
                    let inv = inv_sigma[i];
                    let mut dst = grads[xi].row_mut(i);
                    for j in 0..n {
                        let gy = g[[i, j]] * gv[[0, j]];
                        dst[j] += (gy - mean_gy - xhat[[i, j]] * mean_gyx) * inv;
                    }
                }
            }
        })
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, len: usize) -> NodeId {
        let xv = self.values[x.0].clone();
        let out = xv.slice(s![.., c0..c0 + len]).to_owned();
        let needs = self.needs[x.0];
        let xi = x.0;
        self.push_if(out, needs, move |g, grads| {
            let mut dst = grads[xi].slice_mut(s![.., c0..c0 + len]);
            dst += g;
        })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.values[parts[0].0].nrows();
        let total: usize = parts.iter().map(|p| self.values[p.0].ncols()).sum();
        let mut out = Array2::zeros((m, total));
        let mut spans = Vec::with_capacity(parts.len());
        let mut c = 0;
        for p in parts {
            let pv = self.values[p.0].clone();
            assert_eq!(pv.nrows(), m, "concat_cols row mismatch");
            out.slice_mut(s![.., c..c + pv.ncols()]).assign(&*pv);
            spans.push((p.0, c, pv.ncols(), self.needs[p.0]));
            c += pv.ncols();
        }
        let needs = parts.iter().any(|p| self.needs[p.0]);
        self.push_if(out, needs, move |g, grads| {
            for &(pi, c0, w, pn) in &spans {
                if pn {
                    grads[pi] += &g.slice(s![.., c0..c0 + w]);
                }
            }
        })
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, len: usize) -> NodeId {
        let xv = self.values[x.0].clone();
        let out = xv.slice(s![r0..r0 + len, ..]).to_owned();
        let needs = self.needs[x.0];
        let xi = x.0;
        self.push_if(out, needs, move |g, grads| {
            let mut dst = grads[xi].slice_mut(s![r0..r0 + len, ..]);
            dst += g;
        })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.values[parts[0].0].ncols();
        let total: usize = parts.iter().map(|p| self.values[p.0].nrows()).sum();
        let mut out = Array2::zeros((total, n));
        let mut spans = Vec::with_capacity(parts.len());
        let mut r = 0;
        for p in parts {
            let pv = self.values[p.0].clone();
            assert_eq!(pv.ncols(), n, "concat_rows col mismatch");
            out.slice_mut(s![r..r + pv.nrows(), ..]).assign(&*pv);
            spans.push((p.0, r, pv.nrows(), self.needs[p.0]));
            r += pv.nrows();
        }
        let needs = parts.iter().any(|p| self.needs[p.0]);
        self.push_if(out, needs, move |g, grads| {
            for &(pi, r0, h, pn) in &spans {
                if pn {
                    grads[pi] += &g.slice(s![r0..r0 + h, ..]);
                }
            }
        })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let av = self.values[a.0].clone();
        let out = Array2::from_elem((1, 1), av.sum());
        let needs = self.needs[a.0];
        let ai = a.0;
        self.push_if(out, needs, move |g, grads| {
            let s = g[[0, 0]];
            grads[ai].mapv_inplace(move |v| v + s);
        })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.values[a.0].clone();
        let n = av.len() as f64;
        let out = Array2::from_elem((1, 1), av.sum() / n);
        let needs = self.needs[a.0];
        let ai = a.0;
        self.push_if(out, needs, move |g, grads| {
            let s = g[[0, 0]] / n;
            grads[ai].mapv_inplace(move |v| v + s);
        })
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs_all(&mut self, a: NodeId) -> NodeId {
        let av = self.values[a.0].clone();
        let out = av.mapv(f64::abs);
        let needs = self.needs[a.0];
        let ai = a.0;
        self.push_if(out, needs, move |g, grads| {
            let mut d = av.mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            d *= g;
            grads[ai] += &d;
        })
    }

    /// Gathers rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.values[table.0].clone();
        let n = tv.ncols();
        let mut out = Array2::zeros((ids.len(), n));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(id));
        }
        let needs = self.needs[table.0];
        let ti = table.0;
        let ids = ids.to_vec();
        self.push_if(out, needs, move |g, grads| {
            for (i, &id) in ids.iter().enumerate() {
                let mut dst = grads[ti].row_mut(id);
                dst += &g.row(i);
            }
        })
    }

    /// `w @ x` where `w` is a constant matrix (not a node).
    pub fn linmap(&mut self, w: Array2<f64>, x: NodeId) -> NodeId {
        let xv = self.values[x.0].clone();
        assert_eq!(w.ncols(), xv.nrows(), "linmap inner dims");
        let out = w.dot(&*xv);
        let needs = self.needs[x.0];
        let xi = x.0;
        self.push_if(out, needs, move |g, grads| {
            grads[xi] += &w.t().dot(g);
        })
    }

    /// Unrolls sliding windows for a strided 1-D convolution.
    ///
    /// Input is TxC (time-major); output row `o` concatenates the `kernel`
    /// input frames starting at `o*stride - pad`, zero-filled outside the
    /// valid range. Output is `ceil(T/stride) x (kernel*C)`.
    pub fn im2col(&mut self, x: NodeId, stride: usize, kernel: usize, pad: usize) -> NodeId {
        let xv = self.values[x.0].clone();
        let (t, c) = xv.dim();
        let t_out = t.div_ceil(stride);
        let mut out = Array2::zeros((t_out, kernel * c));
        for o in 0..t_out {
            for k in 0..kernel {
                let src = (o * stride + k) as i64 - pad as i64;
                if src >= 0 && (src as usize) < t {
                    out.slice_mut(s![o, k * c..(k + 1) * c])
                        .assign(&xv.row(src as usize));
                }
            }
        }
        let needs = self.needs[x.0];
        let xi = x.0;
        self.push_if(out, needs, move |g, grads| {
            for o in 0..t_out {
                for k in 0..kernel {
                    let src = (o * stride + k) as i64 - pad as i64;
                    if src >= 0 && (src as usize) < t {
                        let mut dst = grads[xi].row_mut(src as usize);
                        dst += &g.slice(s![o, k * c..(k + 1) * c]);
                    }
                }
            }
        })
    }

    /// Negative mean log-probability of the picked (row, column) entries.
    pub fn nll_pick_mean(&mut self, logp: NodeId, picks: &[(usize, usize)]) -> NodeId {
        assert!(!picks.is_empty(), "nll_pick_mean needs at least one pick");
        let lv = self.values[logp.0].clone();
        let n = picks.len() as f64;
        let total: f64 = picks.iter().map(|&(r, c)| lv[[r, c]]).sum();
        let out = Array2::from_elem((1, 1), -total / n);
        let needs = self.needs[logp.0];
        let li = logp.0;
        let picks = picks.to_vec();
        self.push_if(out, needs, move |g, grads| {
            let s = g[[0, 0]] / n;
            for &(r, c) in &picks {
                grads[li][[r, c]] -= s;
            }
        })
    }

    fn push_if<F>(&mut self, value: Array2<f64>, needs: bool, back: F) -> NodeId
    where
        F: Fn(&Array2<f64>, &mut [Array2<f64>]) + 'static,
    {
        let back: Option<BackFn> = needs.then(|| Box::new(back) as BackFn);
        self.push(Arc::new(value), needs, back)
    }
}

fn resolve_limits(mask: &SoftmaxMask, m: usize, n: usize) -> Vec<usize> {
    match mask {
        SoftmaxMask::Full => vec![n; m],
        SoftmaxMask::Causal => (0..m).map(|i| (i + 1).min(n)).collect(),
        SoftmaxMask::Limits(l) => {
            assert_eq!(l.len(), m, "softmax limits length");
            l.iter().map(|&v| v.min(n)).collect()
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::grad_check;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar readout that mixes all entries with fixed pseudo-random weights
    /// so no gradient component cancels by symmetry.
    fn readout(g: &mut Graph, x: NodeId) -> NodeId {
        let (r, c) = g.value(x).dim();
        let w = Array2::from_shape_fn((r, c), |(i, j)| ((i * 31 + j * 17 + 3) as f64 * 0.61).sin());
        let wn = g.constant(w);
        let prod = g.mul(x, wn);
        g.sum_all(prod)
    }

    #[test]
    fn every_op_passes_central_difference_checks() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.register("a", random_matrix(&mut rng, 4, 3)).unwrap();
            store.register("b", random_matrix(&mut rng, 3, 5)).unwrap();
            store.register("c", random_matrix(&mut rng, 4, 5)).unwrap();
            store.register("row", random_matrix(&mut rng, 1, 5)).unwrap();
            store.register("gain", random_matrix(&mut rng, 1, 5)).unwrap();
            store.register("bias", random_matrix(&mut rng, 1, 5)).unwrap();
            store.register("table", random_matrix(&mut rng, 6, 5)).unwrap();

            let report = grad_check(
                |g, s| {
                    let a = g.param(s, "a")?;
                    let b = g.param(s, "b")?;
                    let c = g.param(s, "c")?;
                    let row = g.param(s, "row")?;
                    let gain = g.param(s, "gain")?;
                    let bias = g.param(s, "bias")?;
                    let table = g.param(s, "table")?;

                    let mut pieces = Vec::new();

                    let mm = g.matmul(a, b); // 4x5
                    let mm = g.add_row(mm, row);
                    let mm = g.gelu(mm);
                    pieces.push(readout(g, mm));

                    let nt = g.matmul_nt(c, b); // 4x3 = c @ b^T
                    let nt = g.sigmoid(nt);
                    pieces.push(readout(g, nt));

                    let sum = g.add(mm, c);
                    let dif = g.sub(sum, c);
                    let prd = g.mul(dif, c);
                    let scl = g.scale(prd, 0.7);
                    let shf = g.add_scalar(scl, 0.3);
                    pieces.push(readout(g, shf));

                    let sm_full = g.softmax_rows(c, SoftmaxMask::Full);
                    pieces.push(readout(g, sm_full));
                    let sm_causal = g.softmax_rows(c, SoftmaxMask::Causal);
                    pieces.push(readout(g, sm_causal));
                    let sm_lim = g.softmax_rows(c, SoftmaxMask::Limits(vec![2, 5, 1, 3]));
                    pieces.push(readout(g, sm_lim));
                    let lsm = g.log_softmax_rows(c);
                    pieces.push(readout(g, lsm));

                    let ln = g.layer_norm(c, gain, bias, 1e-5);
                    pieces.push(readout(g, ln));

                    let sc = g.slice_cols(c, 1, 3);
                    let sr = g.slice_rows(c, 1, 2);
                    let cc = g.concat_cols(&[sc, sc]);
                    let cr = g.concat_rows(&[sr, sr]);
                    pieces.push(readout(g, cc));
                    pieces.push(readout(g, cr));

                    // keep abs away from its kink and recip away from zero,
                    // where central differences are invalid by construction
                    let shifted_pos = g.add_scalar(c, 5.0);
                    let shifted_neg = g.add_scalar(c, -5.0);
                    let a_pos = g.abs_all(shifted_pos);
                    let a_neg = g.abs_all(shifted_neg);
                    let s_all = g.sum_all(c);
                    let m_all = g.mean_all(c);
                    let s_off = g.add_scalar(s_all, 25.0);
                    let rc = g.recip(s_off);
                    let mixed = g.add(a_pos, a_neg);
                    let sb = g.scale_by(mixed, rc);
                    pieces.push(readout(g, sb));
                    pieces.push(m_all);

                    let gr = g.gather_rows(table, &[0, 3, 5, 3]);
                    pieces.push(readout(g, gr));

                    let w = Array2::from_shape_fn((2, 4), |(i, j)| ((i + 2 * j) as f64 * 0.41).cos());
                    let lm = g.linmap(w, c);
                    pieces.push(readout(g, lm));

                    let cols = g.im2col(c, 2, 3, 1);
                    pieces.push(readout(g, cols));

                    let picks = vec![(0usize, 2usize), (1, 4), (3, 0)];
                    let lp = g.log_softmax_rows(c);
                    pieces.push(g.nll_pick_mean(lp, &picks));

                    let mut total = pieces[0];
                    for p in &pieces[1..] {
                        total = g.add(total, *p);
                    }
                    Ok(total)
                },
                &mut store,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn constants_and_frozen_params_produce_no_tape_work() {
        let mut store = ParamStore::new();
        store.register("frozen.w", array![[1.0, 2.0]]).unwrap();
        store.freeze_prefix("frozen.");
        let mut g = Graph::new();
        let w = g.param(&store, "frozen.w").unwrap();
        let c = g.constant(array![[3.0, 4.0]]);
        let s = g.mul(w, c);
        let loss = g.sum_all(s);
        assert!(!g.needs_grad(loss));
        let grads = g.backward_raw(loss).unwrap();
        assert!(grads.iter().all(|a| a.len() == 0));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_columns() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 5.0, 2.0], [0.5, 0.5, 0.5]]);
        let y = g.softmax_rows(x, SoftmaxMask::Limits(vec![2, 3]));
        let v = g.value(y);
        assert_eq!(v[[0, 2]], 0.0);
        let row0: f64 = v.row(0).sum();
        let row1: f64 = v.row(1).sum();
        assert!((row0 - 1.0).abs() < 1e-12);
        assert!((row1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_into_store_and_adds_up() {
        let mut store = ParamStore::new();
        store.register("w", array![[2.0]]).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, "w").unwrap();
            let sq = g.mul(w, w);
            let loss = g.sum_all(sq);
            g.backward(loss, &mut store).unwrap();
        }
        // two backward passes accumulate 2 * (2w) = 8
        assert_eq!(store.grad("w").unwrap()[[0, 0]], 8.0);
    }
}
