//! Reverse-mode differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so building a tape per
//! utterance is cheap. [`Tape::backward`] walks the record in reverse and
//! returns gradients for every parameter that took part.

mod params;

use std::borrow::Cow;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

pub use params::{ParamGrads, ParamId, ParamStore};

use crate::compress::CompressionPlan;
use crate::ctc;
use crate::real::Real;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddConst {
        a: Var,
    },
    Scale {
        a: Var,
        by: S,
    },
    MulConst {
        a: Var,
        mask: Array2<S>,
    },
    Relu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<S>,
        rstd: Vec<S>,
    },
    LogSoftmax {
        a: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<S>>,
    },
    Gather {
        src: Var,
        idx: Arc<Vec<Option<usize>>>,
        per_row: usize,
    },
    Reshape {
        a: Var,
    },
    Compress {
        states: Var,
        log_probs: Var,
        plan: Arc<CompressionPlan>,
        weights: Vec<S>,
    },
    Ctc {
        log_probs: Var,
        grad: Array2<S>,
    },
    CrossEntropy {
        logits: Var,
        grad: Array2<S>,
    },
}

struct Node<'p, S: Real> {
    value: Cow<'p, Array2<S>>,
    op: Op<S>,
}

/// Record of one forward pass.
pub struct Tape<'p, S: Real> {
    nodes: Vec<Node<'p, S>>,
    params: Option<&'p ParamStore<S>>,
    param_vars: Vec<Option<Var>>,
}

/// Leaf gradients produced by [`Tape::backward`]; intermediate gradients are
/// dropped as soon as they have been propagated.
pub struct Gradients<S> {
    grads: Vec<Option<Array2<S>>>,
    param_vars: Vec<Option<Var>>,
}

impl<S: Real> Gradients<S> {
    pub fn of(&self, v: Var) -> Option<&Array2<S>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, zero for parameters that were not used.
    pub fn params(&self, store: &ParamStore<S>) -> ParamGrads<S> {
        let mut out = ParamGrads::zeros_for(store);
        self.add_params_into(&mut out);
        out
    }

    pub fn add_params_into(&self, out: &mut ParamGrads<S>) {
        for (i, var) in self.param_vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| self.grads[v.0].as_ref()) {
                out.values[i] += g;
            }
        }
    }
}

fn accumulate<S: Real>(slot: &mut Option<Array2<S>>, g: Array2<S>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn accumulate_view<S: Real>(slot: &mut Option<Array2<S>>, g: ArrayView2<S>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

fn softmax_rows_inplace<S: Real>(m: &mut Array2<S>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut total = S::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            total += e;
            e
        });
        row.mapv_inplace(|v| v / total);
    }
}

impl<'p, S: Real> Default for Tape<'p, S> {
    fn default() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
        }
    }
}

impl<'p, S: Real> Tape<'p, S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(params: &'p ParamStore<S>) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            params: Some(params),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of array elements held by the tape.
    pub fn elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.value, Cow::Owned(_)))
            .map(|n| n.value.len())
            .sum()
    }

    pub fn value(&self, v: Var) -> &Array2<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A differentiable input owned by the tape.
    pub fn leaf(&mut self, value: Array2<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter leaf, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x W + b` with `x: n x i`, `W: i x o`, `b: 1 x o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut y = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            y += self.value(b);
        }
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a, b })
    }

    /// Adds a constant of the same shape; no gradient flows into it.
    pub fn add_const(&mut self, a: Var, c: &Array2<S>) -> Var {
        let y = self.value(a) + c;
        self.push(y, Op::AddConst { a })
    }

    pub fn scale(&mut self, a: Var, by: S) -> Var {
        let y = self.value(a).mapv(|v| v * by);
        self.push(y, Op::Scale { a, by })
    }

    /// Elementwise product with a constant.
    pub fn mul_const(&mut self, a: Var, mask: Array2<S>) -> Var {
        let y = self.value(a) * &mask;
        self.push(y, Op::MulConst { a, mask })
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask = Array2::from_shape_simple_fn(self.value(a).raw_dim(), || {
            if rng.random::<f64>() < p {
                S::zero()
            } else {
                keep
            }
        });
        self.mul_const(a, mask)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v.max(S::zero()));
        self.push(y, Op::Relu { a })
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = S::of(xv.ncols() as f64);
        let mut xhat = xv.to_owned();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let r = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let y = &xhat * self.value(gain) + self.value(bias);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let y = ctc::log_softmax_rows(self.value(a).view());
        self.push(y, Op::LogSoftmax { a })
    }

    /// Multi-head scaled dot-product attention over `n x d` projections.
    ///
    /// `bias` (`n_q x n_k`) is added to every head's logits; `-inf` entries
    /// mask keys out. Every row must keep at least one finite entry.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, bias: Option<&Array2<S>>) -> Var {
        let (nq, d) = self.shape(q);
        let nk = self.shape(k).0;
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((nq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            p.mapv_inplace(|x| x * scale);
            if let Some(b) = bias {
                debug_assert_eq!(b.dim(), (nq, nk));
                p += b;
            }
            softmax_rows_inplace(&mut p);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Builds `n_out x (per_row * c)` by concatenating `per_row` source rows
    /// per output row; `None` contributes a zero block.
    pub fn gather_rows(&mut self, src: Var, idx: Arc<Vec<Option<usize>>>, per_row: usize) -> Var {
        assert_eq!(idx.len() % per_row, 0);
        let sv = self.value(src);
        let c = sv.ncols();
        let rows = idx.len() / per_row;
        let mut out = Array2::zeros((rows, per_row * c));
        for r in 0..rows {
            for j in 0..per_row {
                if let Some(i) = idx[r * per_row + j] {
                    out.slice_mut(s![r, j * c..(j + 1) * c]).assign(&sv.row(i));
                }
            }
        }
        self.push(out, Op::Gather { src, idx, per_row })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        let data: Vec<S> = v.iter().copied().collect();
        let y = Array2::from_shape_vec((rows, cols), data).expect("reshape size mismatch");
        self.push(y, Op::Reshape { a })
    }

    /// Pools `states` according to a fixed plan; weights are computed from
    /// `log_probs` and differentiated unless the plan detaches them.
    pub fn compress(&mut self, states: Var, log_probs: Var, plan: Arc<CompressionPlan>) -> Var {
        let weights = plan.weights(self.value(log_probs).view());
        let y = plan.pool(self.value(states).view(), &weights);
        self.push(
            y,
            Op::Compress {
                states,
                log_probs,
                plan,
                weights,
            },
        )
    }

    /// CTC loss of `target` under `log_probs`. Returns `None` when the target
    /// is infeasible; nothing is recorded in that case.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize], blank: usize) -> crate::Result<Option<Var>> {
        let out = ctc::ctc_loss(self.value(log_probs).view(), target, blank)?;
        if !out.feasible {
            return Ok(None);
        }
        let value = Array2::from_elem((1, 1), S::of(out.loss));
        Ok(Some(self.push(
            value,
            Op::Ctc {
                log_probs,
                grad: out.grad_log_probs,
            },
        )))
    }

    /// Summed label-smoothed cross entropy of `targets` under `logits`.
    ///
    /// The smoothed target puts `1 - eps + eps / V` on the gold class and
    /// `eps / V` elsewhere.
    pub fn label_smoothed_ce(&mut self, logits: Var, targets: &[usize], eps: f64) -> Var {
        let lv = self.value(logits);
        let (n, classes) = lv.dim();
        assert_eq!(n, targets.len(), "one target per logit row");
        let lp = ctc::log_softmax_rows(lv.view());
        let off = eps / classes as f64;
        let on = 1.0 - eps + off;
        let mut total = 0.0f64;
        let mut grad = lp.mapv(|v| v.exp());
        for (u, &y) in targets.iter().enumerate() {
            let row = lp.row(u);
            let sum_lp: f64 = row.iter().map(|v| v.as_f64()).sum();
            total -= (on - off) * row[y].as_f64() + off * sum_lp;
            let mut g = grad.row_mut(u);
            g.mapv_inplace(|p| p - S::of(off));
            g[y] -= S::of(on - off);
        }
        self.push(
            Array2::from_elem((1, 1), S::of(total)),
            Op::CrossEntropy { logits, grad },
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients<S> {
        let mut grads: Vec<Option<Array2<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::from_elem(self.value(output).raw_dim(), S::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let gx = g.dot(&self.value(*w).t());
                    let gw = self.value(*x).t().dot(&g);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MatMul { a, b } => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add { a, b } => {
                    if a == b {
                        accumulate(&mut grads[a.0], g.mapv(|v| v + v));
                    } else {
                        accumulate_view(&mut grads[b.0], g.view());
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddConst { a } => accumulate(&mut grads[a.0], g),
                Op::Scale { a, by } => {
                    let by = *by;
                    accumulate(&mut grads[a.0], g.mapv(|v| v * by));
                }
                Op::MulConst { a, mask } => accumulate(&mut grads[a.0], g * mask),
                Op::Relu { a } => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x <= S::zero() {
                                *gv = S::zero();
                            }
                        });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gamma = self.value(*gain);
                    accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(
                        &mut grads[gain.0],
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let n = S::of(g.ncols() as f64);
                    let mut dxhat = &g * gamma;
                    for (r, (mut row, xh)) in dxhat.outer_iter_mut().zip(xhat.outer_iter()).enumerate() {
                        let mean = row.sum() / n;
                        let mean_x = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<S>() / n;
                        let rs = rstd[r];
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|d, &xv| *d = rs * (*d - mean - xv * mean_x));
                    }
                    accumulate(&mut grads[x.0], dxhat);
                }
                Op::LogSoftmax { a } => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut row, yr) in ga.outer_iter_mut().zip(y.outer_iter()) {
                        let total = row.sum();
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|gv, &lp| *gv -= lp.exp() * total);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = S::one() / S::of(dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let mut ds = go.dot(&vv.slice(cols).t());
                        for (mut row, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dot = row.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<S>();
                            Zip::from(&mut row)
                                .and(&pr)
                                .for_each(|dsv, &pv| *dsv = pv * (*dsv - dot) * scale);
                        }
                        gq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::Gather { src, idx, per_row } => {
                    let sv = self.value(*src);
                    let c = sv.ncols();
                    let mut gs = Array2::zeros(sv.raw_dim());
                    for r in 0..g.nrows() {
                        for j in 0..*per_row {
                            if let Some(i) = idx[r * per_row + j] {
                                let mut dst = gs.row_mut(i);
                                dst += &g.slice(s![r, j * c..(j + 1) * c]);
                            }
                        }
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::Reshape { a } => {
                    let dim = self.value(*a).raw_dim();
                    let data: Vec<S> = g.iter().copied().collect();
                    accumulate(
                        &mut grads[a.0],
                        Array2::from_shape_vec(dim, data).expect("reshape"),
                    );
                }
                Op::Compress {
                    states,
                    log_probs,
                    plan,
                    weights,
                } => {
                    let (gs, glp) = plan.backward(
                        self.value(*states).view(),
                        self.value(*log_probs).view(),
                        weights,
                        g.view(),
                    );
                    accumulate(&mut grads[states.0], gs);
                    accumulate(&mut grads[log_probs.0], glp);
                }
                Op::Ctc { log_probs, grad } => {
                    let up = g[[0, 0]];
                    accumulate(&mut grads[log_probs.0], grad.mapv(|v| v * up));
                }
                Op::CrossEntropy { logits, grad } => {
                    let up = g[[0, 0]];
                    accumulate(&mut grads[logits.0], grad.mapv(|v| v * up));
                }
            }
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
