//! A tape-based reverse-mode differentiation engine.
//!
//! Operations are recorded in creation order, so reverse index order is a
//! valid topological order for the backward sweep. Ops are coarse (a whole
//! convolution or LSTM layer per node) and carry the caches their backward
//! pass needs.

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::loss::{idl_backward, idl_forward, IdlCache};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct LstmCache<T> {
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
    /// Post-activation gates `(i, f, g, o)`, laid out `[B, T, 4H]`.
    gates: Vec<T>,
    /// Cell state `[B, T, H]`.
    cell: Vec<T>,
    tanh_cell: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    Transpose12 {
        x: Var,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        cache: Box<LstmCache<T>>,
    },
    LastStep {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Rows {
        x: Var,
        start: usize,
    },
    IdlLoss {
        f: Var,
        f_hat: Var,
        cache: Box<IdlCache<T>>,
    },
    Bce {
        p: Var,
        targets: Vec<T>,
    },
    SumSquares {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the tracked leaves after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    /// `None` when `var` is not a tracked leaf or received no gradient.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const BN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "leaf shape {shape:?}"
        );
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`, tracked when `t.requires_grad` is set.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Var {
        self.leaf(shape, value, false)
    }

    fn dims<const N: usize>(&self, v: Var, what: &str) -> [usize; N] {
        let s = self.shape(v);
        assert_eq!(s.len(), N, "{what}: expected rank {N}, got shape {s:?}");
        let mut out = [0; N];
        out.copy_from_slice(s);
        out
    }

    /// 1-D convolution: `x [B, Cin, T]`, `w [Cout, Cin, K]`, `b [Cout]`, zero padding `pad`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let [batch, cin, steps] = self.dims(x, "conv1d input");
        let [cout, wcin, k] = self.dims(w, "conv1d weight");
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        assert_eq!(self.shape(b), &[cout], "conv1d bias");
        assert!(steps + 2 * pad >= k, "conv1d input shorter than kernel");
        let t_out = steps + 2 * pad - k + 1;
        let ck = cin * k;
        let xv = self.value(x);
        let mut cols = vec![T::zero(); batch * t_out * ck];
        for bi in 0..batch {
            for t in 0..t_out {
                let col = &mut cols[(bi * t_out + t) * ck..(bi * t_out + t + 1) * ck];
                for c in 0..cin {
                    for kk in 0..k {
                        let src = t + kk;
                        if src >= pad && src - pad < steps {
                            col[c * k + kk] = xv[(bi * cin + c) * steps + src - pad];
                        }
                    }
                }
            }
        }
        let (wv, bv) = (self.value(w), self.value(b));
        let mut out = vec![T::zero(); batch * cout * t_out];
        for bi in 0..batch {
            let o = &mut out[bi * cout * t_out..(bi + 1) * cout * t_out];
            for (co, row) in o.chunks_mut(t_out).enumerate() {
                row.fill(bv[co]);
            }
            gemm_nt(
                cout,
                t_out,
                ck,
                wv,
                &cols[bi * t_out * ck..(bi + 1) * t_out * ck],
                o,
            );
        }
        self.push(
            vec![batch, cout, t_out],
            out,
            Op::Conv1d { x, w, b, pad, cols },
            &[x, w, b],
        )
    }

    /// Batch normalization over `(B, T)` per channel of `x [B, C, T]` using
    /// the batch statistics. Returns the output and the batch mean and biased
    /// variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<T>, Vec<T>) {
        let [batch, ch, steps] = self.dims(x, "batch norm input");
        let n = T::from_usize(batch * steps).unwrap();
        let xv = self.value(x);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for c in 0..ch {
            let mut s = T::zero();
            for bi in 0..batch {
                s += xv[(bi * ch + c) * steps..(bi * ch + c + 1) * steps]
                    .iter()
                    .copied()
                    .sum();
            }
            let m = s / n;
            let mut v = T::zero();
            for bi in 0..batch {
                for &e in &xv[(bi * ch + c) * steps..(bi * ch + c + 1) * steps] {
                    v += (e - m) * (e - m);
                }
            }
            mean[c] = m;
            var[c] = v / n;
        }
        let out = self.normalize(x, gamma, beta, &mean, &var, true);
        (out, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Var {
        self.normalize(x, gamma, beta, mean, var, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        batch_stats: bool,
    ) -> Var {
        let [batch, ch, steps] = self.dims(x, "batch norm input");
        assert_eq!(self.shape(gamma), &[ch]);
        assert_eq!(self.shape(beta), &[ch]);
        let eps = T::lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let off = (bi * ch + c) * steps;
                for t in 0..steps {
                    let h = (xv[off + t] - mean[c]) * inv_std[c];
                    xhat[off + t] = h;
                    out[off + t] = gv[c] * h + bv[c];
                }
            }
        }
        let shape = vec![batch, ch, steps];
        self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, &[x])
    }

    /// Max pooling over time of `x [B, C, T]` with window and stride `k`.
    pub fn max_pool1d(&mut self, x: Var, k: usize) -> Var {
        let [batch, ch, steps] = self.dims(x, "max pool input");
        assert!(k >= 1 && steps >= k, "max pool window {k} vs {steps} steps");
        let t_out = (steps - k) / k + 1;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * ch * t_out);
        let mut argmax = Vec::with_capacity(batch * ch * t_out);
        for row in 0..batch * ch {
            for t in 0..t_out {
                let base = row * steps + t * k;
                let mut best = base;
                for i in base + 1..base + k {
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        self.push(
            vec![batch, ch, t_out],
            out,
            Op::MaxPool1d { x, argmax },
            &[x],
        )
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        assert_eq!(mask.len(), self.value(x).len(), "mask size");
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Mask { x, mask }, &[x])
    }

    /// `[B, C, T] -> [B, T, C]`.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let [batch, ch, steps] = self.dims(x, "transpose input");
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..batch {
            for c in 0..ch {
                for t in 0..steps {
                    out[(bi * steps + t) * ch + c] = xv[(bi * ch + c) * steps + t];
                }
            }
        }
        self.push(vec![batch, steps, ch], out, Op::Transpose12 { x }, &[x])
    }

    /// One LSTM layer over `x [B, T, I]` from zero state. Gate rows of
    /// `w_ih [4H, I]`, `w_hh [4H, H]` and `b [4H]` are ordered input, forget,
    /// cell, output. Returns every hidden state, `[B, T, H]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Var {
        let [batch, steps, input] = self.dims(x, "lstm input");
        let [g4, wi] = self.dims(w_ih, "lstm w_ih");
        assert_eq!(wi, input, "lstm input width");
        assert_eq!(g4 % 4, 0);
        let hidden = g4 / 4;
        assert_eq!(self.shape(w_hh), &[g4, hidden], "lstm w_hh");
        assert_eq!(self.shape(b), &[g4], "lstm bias");
        let (xv, wih, whh, bv) = (
            self.value(x),
            self.value(w_ih),
            self.value(w_hh),
            self.value(b),
        );

        let rows = batch * steps;
        let mut pre = vec![T::zero(); rows * g4];
        for r in 0..rows {
            pre[r * g4..(r + 1) * g4].copy_from_slice(bv);
        }
        gemm_nt(rows, g4, input, xv, wih, &mut pre);

        let mut gates = vec![T::zero(); rows * g4];
        let mut cell = vec![T::zero(); rows * hidden];
        let mut tanh_cell = vec![T::zero(); rows * hidden];
        let mut out = vec![T::zero(); rows * hidden];
        let mut h_prev = vec![T::zero(); batch * hidden];
        let mut c_prev = vec![T::zero(); batch * hidden];
        let mut rec = vec![T::zero(); batch * g4];
        for t in 0..steps {
            rec.fill(T::zero());
            if t > 0 {
                gemm_nt(batch, g4, hidden, &h_prev, whh, &mut rec);
            }
            for bi in 0..batch {
                let r = bi * steps + t;
                let z = &pre[r * g4..(r + 1) * g4];
                let zr = &rec[bi * g4..(bi + 1) * g4];
                let gt = &mut gates[r * g4..(r + 1) * g4];
                for j in 0..hidden {
                    let i_g = sigmoid(z[j] + zr[j]);
                    let f_g = sigmoid(z[hidden + j] + zr[hidden + j]);
                    let c_g = (z[2 * hidden + j] + zr[2 * hidden + j]).tanh();
                    let o_g = sigmoid(z[3 * hidden + j] + zr[3 * hidden + j]);
                    gt[j] = i_g;
                    gt[hidden + j] = f_g;
                    gt[2 * hidden + j] = c_g;
                    gt[3 * hidden + j] = o_g;
                    let c = f_g * c_prev[bi * hidden + j] + i_g * c_g;
                    let tc = c.tanh();
                    cell[r * hidden + j] = c;
                    tanh_cell[r * hidden + j] = tc;
                    out[r * hidden + j] = o_g * tc;
                }
                h_prev[bi * hidden..(bi + 1) * hidden]
                    .copy_from_slice(&out[r * hidden..(r + 1) * hidden]);
                c_prev[bi * hidden..(bi + 1) * hidden]
                    .copy_from_slice(&cell[r * hidden..(r + 1) * hidden]);
            }
        }
        let cache = Box::new(LstmCache {
            batch,
            steps,
            input,
            hidden,
            gates,
            cell,
            tanh_cell,
        });
        self.push(
            vec![batch, steps, hidden],
            out,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache,
            },
            &[x, w_ih, w_hh, b],
        )
    }

    /// `[B, T, H] -> [B, H]`, the final time step.
    pub fn last_step(&mut self, x: Var) -> Var {
        let [batch, steps, hidden] = self.dims(x, "last step input");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * hidden);
        for bi in 0..batch {
            let r = bi * steps + steps - 1;
            out.extend_from_slice(&xv[r * hidden..(r + 1) * hidden]);
        }
        self.push(vec![batch, hidden], out, Op::LastStep { x }, &[x])
    }

    /// `x [B, I] · wᵀ + b` with `w [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let [batch, input] = self.dims(x, "linear input");
        let [o, wi] = self.dims(w, "linear weight");
        assert_eq!(wi, input, "linear width");
        assert_eq!(self.shape(b), &[o]);
        let mut out = Vec::with_capacity(batch * o);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b));
        }
        gemm_nt(batch, o, input, self.value(x), self.value(w), &mut out);
        self.push(vec![batch, o], out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid { x }, &[x])
    }

    /// Scales each row of `x [N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let [n, d] = self.dims(x, "normalize input");
        let xv = self.value(x);
        let tiny = T::lit(1e-12);
        let norms: Vec<T> = (0..n)
            .map(|i| {
                let r = &xv[i * d..(i + 1) * d];
                dot(r, r).sqrt().max(tiny)
            })
            .collect();
        let out = (0..n * d).map(|k| xv[k] / norms[k / d]).collect();
        self.push(vec![n, d], out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Rows `[start, start + len)` of `x [N, D]`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [n, d] = self.dims(x, "rows input");
        assert!(start + len <= n, "rows {start}+{len} of {n}");
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        self.push(vec![len, d], out, Op::Rows { x, start }, &[x])
    }

    /// Instance-discrimination loss of originals `f [n, d]` against augmented
    /// copies `f_hat [n, d]`; see [`crate::loss`].
    pub fn idl_loss(&mut self, f: Var, f_hat: Var, tau: f64) -> Var {
        let [n, d] = self.dims(f, "idl originals");
        assert_eq!(self.shape(f_hat), &[n, d], "idl augmented shape");
        let cache = idl_forward(self.value(f), self.value(f_hat), n, d, T::lit(tau));
        let loss = cache.loss;
        self.push(
            vec![],
            vec![loss],
            Op::IdlLoss {
                f,
                f_hat,
                cache: Box::new(cache),
            },
            &[f, f_hat],
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: &[T]) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "bce target count");
        let eps = T::lit(1e-7);
        let n = T::from_usize(pv.len()).unwrap();
        let mut total = T::zero();
        for (&pi, &y) in pv.iter().zip(targets) {
            let pc = pi.max(eps).min(T::one() - eps);
            total += y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        }
        self.push(
            vec![],
            vec![-total / n],
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            &[p],
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = dot(xv, xv);
        self.push(vec![], vec![s], Op::SumSquares { x }, &[x])
    }

    /// `Σ x·weights`; reduces any tensor to a scalar with a fixed projection.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Var {
        assert_eq!(weights.len(), self.value(x).len());
        let s = dot(self.value(x), &weights);
        self.push(vec![], vec![s], Op::WeightedSum { x, weights }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. The tape cannot be differentiated
    /// twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaves });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut leaves, i);
        }
        // release op caches, keep values readable
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut [Option<Vec<T>>],
        idx: usize,
    ) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contrib)
                    .for_each(|(a, &c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => leaves[idx] = Some(g),
            Op::Conv1d { x, w, b, pad, cols } => {
                let [batch, cin, steps] = shape3(&nodes[x.0].shape);
                let [cout, _, k] = shape3(&nodes[w.0].shape);
                let t_out = node.shape[2];
                let ck = cin * k;
                let mut dw = vec![T::zero(); cout * ck];
                let mut db = vec![T::zero(); cout];
                let mut dx = vec![T::zero(); batch * cin * steps];
                let mut dcol = vec![T::zero(); t_out * ck];
                let wv = val(*w);
                for bi in 0..batch {
                    let gy = &g[bi * cout * t_out..(bi + 1) * cout * t_out];
                    let col = &cols[bi * t_out * ck..(bi + 1) * t_out * ck];
                    gemm_nn(cout, ck, t_out, gy, col, &mut dw);
                    for (co, row) in gy.chunks(t_out).enumerate() {
                        db[co] += row.iter().copied().sum();
                    }
                    dcol.fill(T::zero());
                    gemm_tn(t_out, ck, cout, gy, wv, &mut dcol);
                    for t in 0..t_out {
                        for c in 0..cin {
                            for kk in 0..k {
                                let src = t + kk;
                                if src >= *pad && src - pad < steps {
                                    dx[(bi * cin + c) * steps + src - pad] +=
                                        dcol[t * ck + c * k + kk];
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [batch, ch, steps] = shape3(&node.shape);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let off = (bi * ch + c) * steps;
                        for t in 0..steps {
                            dgamma[c] += g[off + t] * xhat[off + t];
                            dbeta[c] += g[off + t];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                let n = T::from_usize(batch * steps).unwrap();
                for bi in 0..batch {
                    for c in 0..ch {
                        let off = (bi * ch + c) * steps;
                        let scale = gv[c] * inv_std[c];
                        for t in 0..steps {
                            dx[off + t] = if *batch_stats {
                                scale / n * (n * g[off + t] - dbeta[c] - xhat[off + t] * dgamma[c])
                            } else {
                                scale * g[off + t]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Relu { x } => {
                let dx = val(*x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::MaxPool1d { x, argmax } => {
                let mut dx = vec![T::zero(); nodes[x.0].value.len()];
                for (&src, &gi) in argmax.iter().zip(&g) {
                    dx[src] += gi;
                }
                acc(*x, dx);
            }
            Op::Mask { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::Transpose12 { x } => {
                let [batch, ch, steps] = shape3(&nodes[x.0].shape);
                let mut dx = vec![T::zero(); g.len()];
                for bi in 0..batch {
                    for c in 0..ch {
                        for t in 0..steps {
                            dx[(bi * ch + c) * steps + t] = g[(bi * steps + t) * ch + c];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache,
            } => {
                let (dx, dwih, dwhh, db) =
                    lstm_backward(cache, &g, val(*x), val(*w_ih), val(*w_hh), &node.value);
                acc(*x, dx);
                acc(*w_ih, dwih);
                acc(*w_hh, dwhh);
                acc(*b, db);
            }
            Op::LastStep { x } => {
                let [batch, steps, hidden] = shape3(&nodes[x.0].shape);
                let mut dx = vec![T::zero(); batch * steps * hidden];
                for bi in 0..batch {
                    let r = bi * steps + steps - 1;
                    dx[r * hidden..(r + 1) * hidden]
                        .copy_from_slice(&g[bi * hidden..(bi + 1) * hidden]);
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let [batch, input] = shape2(&nodes[x.0].shape);
                let o = node.shape[1];
                let mut dx = vec![T::zero(); batch * input];
                gemm_nn(batch, input, o, &g, val(*w), &mut dx);
                let mut dw = vec![T::zero(); o * input];
                gemm_tn(o, input, batch, &g, val(*x), &mut dw);
                let mut db = vec![T::zero(); o];
                for row in g.chunks(o) {
                    axpy(T::one(), row, &mut db);
                }
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .iter()
                    .zip(&g)
                    .map(|(&y, &gi)| gi * y * (T::one() - y))
                    .collect();
                acc(*x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let [n, d] = shape2(&node.shape);
                let y = &node.value;
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yi = &y[i * d..(i + 1) * d];
                    let gi = &g[i * d..(i + 1) * d];
                    let proj = dot(yi, gi);
                    for k in 0..d {
                        dx[i * d + k] = (gi[k] - yi[k] * proj) / norms[i];
                    }
                }
                acc(*x, dx);
            }
            Op::Rows { x, start } => {
                let [_, d] = shape2(&nodes[x.0].shape);
                let mut dx = vec![T::zero(); nodes[x.0].value.len()];
                dx[start * d..start * d + g.len()].copy_from_slice(&g);
                acc(*x, dx);
            }
            Op::IdlLoss { f, f_hat, cache } => {
                let [n, d] = shape2(&nodes[f.0].shape);
                let (df, dfh) = idl_backward(cache, val(*f), val(*f_hat), n, d, g[0]);
                acc(*f, df);
                acc(*f_hat, dfh);
            }
            Op::Bce { p, targets } => {
                let eps = T::lit(1e-7);
                let n = T::from_usize(targets.len()).unwrap();
                let dp = val(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&pi, &y)| {
                        let pc = pi.max(eps).min(T::one() - eps);
                        -g[0] * (y / pc - (T::one() - y) / (T::one() - pc)) / n
                    })
                    .collect();
                acc(*p, dp);
            }
            Op::SumSquares { x } => {
                let two = T::lit(2.0);
                acc(*x, val(*x).iter().map(|&v| two * v * g[0]).collect());
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.iter().map(|&w| w * g[0]).collect());
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn shape3(s: &[usize]) -> [usize; 3] {
    [s[0], s[1], s[2]]
}

fn shape2(s: &[usize]) -> [usize; 2] {
    [s[0], s[1]]
}

/// Backpropagation through time for one LSTM layer.
fn lstm_backward<T: Scalar>(
    c: &LstmCache<T>,
    g: &[T],
    x: &[T],
    w_ih: &[T],
    w_hh: &[T],
    h: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let (batch, steps, hidden) = (c.batch, c.steps, c.hidden);
    let g4 = 4 * hidden;
    let rows = batch * steps;
    let one = T::one();
    let mut dz_all = vec![T::zero(); rows * g4];
    let mut dz_t = vec![T::zero(); batch * g4];
    let mut dh_next = vec![T::zero(); batch * hidden];
    let mut dc_next = vec![T::zero(); batch * hidden];
    for t in (0..steps).rev() {
        for bi in 0..batch {
            let r = bi * steps + t;
            let gates = &c.gates[r * g4..(r + 1) * g4];
            let dz = &mut dz_t[bi * g4..(bi + 1) * g4];
            for j in 0..hidden {
                let (ig, fg, cg, og) = (
                    gates[j],
                    gates[hidden + j],
                    gates[2 * hidden + j],
                    gates[3 * hidden + j],
                );
                let tc = c.tanh_cell[r * hidden + j];
                let c_prev = if t > 0 {
                    c.cell[(r - 1) * hidden + j]
                } else {
                    T::zero()
                };
                let dh = g[r * hidden + j] + dh_next[bi * hidden + j];
                let d_o = dh * tc;
                let dc = dh * og * (one - tc * tc) + dc_next[bi * hidden + j];
                dz[j] = dc * cg * ig * (one - ig);
                dz[hidden + j] = dc * c_prev * fg * (one - fg);
                dz[2 * hidden + j] = dc * ig * (one - cg * cg);
                dz[3 * hidden + j] = d_o * og * (one - og);
                dc_next[bi * hidden + j] = dc * fg;
            }
            dz_all[r * g4..(r + 1) * g4].copy_from_slice(dz);
        }
        dh_next.fill(T::zero());
        if t > 0 {
            gemm_nn(batch, hidden, g4, &dz_t, w_hh, &mut dh_next);
        }
    }
    // h_{t-1} for every (b, t) row, zero at t = 0
    let mut h_prev = vec![T::zero(); rows * hidden];
    for bi in 0..batch {
        for t in 1..steps {
            let r = bi * steps + t;
            h_prev[r * hidden..(r + 1) * hidden].copy_from_slice(&h[(r - 1) * hidden..r * hidden]);
        }
    }
    let mut dw_hh = vec![T::zero(); g4 * hidden];
    gemm_tn(g4, hidden, rows, &dz_all, &h_prev, &mut dw_hh);
    let mut dw_ih = vec![T::zero(); g4 * c.input];
    gemm_tn(g4, c.input, rows, &dz_all, x, &mut dw_ih);
    let mut db = vec![T::zero(); g4];
    for row in dz_all.chunks(g4) {
        axpy(one, row, &mut db);
    }
    let mut dx = vec![T::zero(); rows * c.input];
    gemm_nn(rows, c.input, g4, &dz_all, w_ih, &mut dx);
    (dx, dw_ih, dw_hh, db)
}
