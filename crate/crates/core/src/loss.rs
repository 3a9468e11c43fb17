//! Instance-discrimination loss over a batch of embeddings and their
//! augmented copies.
//!
//! With originals `f_1..f_n`, augmented copies `f̂_1..f̂_n` and temperature
//! `τ`:
//!
//! ```text
//! P(x_i | x̂_i) = exp(<f_i, f̂_i>/τ) / Σ_k exp(<f_k, f̂_i>/τ)
//! P(x_i | x_j) = exp(<f_i, f_j>/τ) / Σ_k exp(<f_k, f_j>/τ)
//! L = -(1/n) [ Σ_i log P(x_i|x̂_i) + Σ_i Σ_{j≠i} log(1 - P(x_i|x_j)) ]
//! ```
//!
//! Both denominators run over the original embeddings only.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::nn::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use crate::nn::Scalar;
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 10.0;
/// Floor applied to `1 - P(x_i|x_j)` before the logarithm.
pub const ONE_MINUS_P_FLOOR: f64 = 1e-12;
const UNIT_NORM_TOL: f64 = 1e-6;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Inner-product similarity of two embeddings.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "similarity of {}-d and {}-d vectors",
            a.len(),
            b.len()
        )));
    }
    Ok(dot(a, b))
}

/// A validated batch: `n ≥ 2` unit-norm rows in each of `f` and `f_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    f: Vec<f64>,
    f_hat: Vec<f64>,
    n: usize,
    dim: usize,
    tau: f64,
}

impl BatchEmbeddings {
    pub fn new(f: Vec<f64>, f_hat: Vec<f64>, dim: usize, tau: f64) -> Result<Self> {
        if dim == 0 || f.len() % dim != 0 || f.len() != f_hat.len() {
            return Err(Error::shape(format!(
                "batch of {} and {} values with dim {dim}",
                f.len(),
                f_hat.len()
            )));
        }
        let n = f.len() / dim;
        if n < 2 {
            return Err(Error::invalid(format!(
                "batch needs at least 2 instances, got {n}"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        for (which, m) in [("original", &f), ("augmented", &f_hat)] {
            for (i, row) in m.chunks(dim).enumerate() {
                let norm = dot(row, row).sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::invalid(format!(
                        "{which} embedding {i} has norm {norm}"
                    )));
                }
            }
        }
        Ok(Self {
            f,
            f_hat,
            n,
            dim,
            tau,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn original(&self, i: usize) -> &[f64] {
        &self.f[i * self.dim..(i + 1) * self.dim]
    }

    pub fn augmented(&self, i: usize) -> &[f64] {
        &self.f_hat[i * self.dim..(i + 1) * self.dim]
    }

    pub fn originals(&self) -> &[f64] {
        &self.f
    }

    pub fn augmenteds(&self) -> &[f64] {
        &self.f_hat
    }
}

fn softmax_entry(logits: impl Iterator<Item = f64>, target: usize) -> f64 {
    let logits: Vec<f64> = logits.collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    (logits[target] - max).exp() / z
}

/// Probability that augmented instance `i` is recognized as original `i`.
pub fn prob_aug(batch: &BatchEmbeddings, i: usize) -> f64 {
    prob_of_original_given(batch, i, batch.augmented(i))
}

/// Probability that the augmented copy of `j` is recognized as original `i`.
pub fn prob_aug_cross(batch: &BatchEmbeddings, i: usize, j: usize) -> f64 {
    prob_of_original_given(batch, i, batch.augmented(j))
}

fn prob_of_original_given(batch: &BatchEmbeddings, i: usize, query: &[f64]) -> f64 {
    let tau = batch.tau;
    softmax_entry((0..batch.n).map(|k| dot(batch.original(k), query) / tau), i)
}

/// Probability that instance `j` is recognized as a different instance `i`.
pub fn prob_inst(batch: &BatchEmbeddings, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(Error::invalid(format!(
            "prob_inst needs distinct instances, got {i} twice"
        )));
    }
    Ok(prob_of_original_given(batch, i, batch.original(j)))
}

/// Loss value of a validated batch.
pub fn idl_loss(batch: &BatchEmbeddings) -> f64 {
    idl_forward(&batch.f, &batch.f_hat, batch.n, batch.dim, batch.tau).loss
}

/// Mean `<f_i, f̂_i>` and mean `<f_i, f_j>` over `i ≠ j`.
pub fn alignment_stats(f: &[f64], f_hat: &[f64], dim: usize) -> (f64, f64) {
    let n = f.len() / dim;
    let row = |m: &[f64], i: usize| -> Vec<f64> { m[i * dim..(i + 1) * dim].to_vec() };
    let mut pos = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        pos += dot(&row(f, i), &row(f_hat, i));
        for j in 0..n {
            if j != i {
                cross += dot(&row(f, i), &row(f, j));
            }
        }
    }
    (pos / n as f64, cross / (n * (n - 1)).max(1) as f64)
}

/// Forward state kept for the backward pass.
pub(crate) struct IdlCache<T> {
    pub loss: T,
    n: usize,
    tau: T,
    /// `sa[i*n + k] = P(x_k | x̂_i)`
    sa: Vec<T>,
    /// `sg[j*n + i] = P(x_i | x_j)`
    sg: Vec<T>,
}

fn softmax_rows<T: Scalar>(m: &mut [T], n: usize) {
    for row in m.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
}

pub(crate) fn idl_forward<T: Scalar>(
    f: &[T],
    f_hat: &[T],
    n: usize,
    d: usize,
    tau: T,
) -> IdlCache<T> {
    // a[i][k] = <f̂_i, f_k>/τ and g[j][k] = <f_j, f_k>/τ
    let mut a = vec![T::zero(); n * n];
    gemm_nt(n, n, d, f_hat, f, &mut a);
    let mut g = vec![T::zero(); n * n];
    gemm_nt(n, n, d, f, f, &mut g);
    for v in a.iter_mut().chain(g.iter_mut()) {
        *v = *v / tau;
    }
    let mut total = T::zero();
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += row[i] - lse;
    }
    let mut sa = a;
    softmax_rows(&mut sa, n);
    let mut sg = g;
    softmax_rows(&mut sg, n);
    let floor = T::lit(ONE_MINUS_P_FLOOR);
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let q = T::one() - sg[j * n + i];
            if q < floor && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "instance probability saturated at 1; clamping 1-P at {ONE_MINUS_P_FLOOR}"
                );
            }
            total += q.max(floor).ln();
        }
    }
    let n_t = T::from_usize(n).unwrap();
    IdlCache {
        loss: -total / n_t,
        n,
        tau,
        sa,
        sg,
    }
}

/// Gradients of `upstream · L` with respect to `f` and `f_hat`.
pub(crate) fn idl_backward<T: Scalar>(
    c: &IdlCache<T>,
    f: &[T],
    f_hat: &[T],
    n: usize,
    d: usize,
    upstream: T,
) -> (Vec<T>, Vec<T>) {
    debug_assert_eq!(n, c.n);
    let scale = -upstream / T::from_usize(n).unwrap();
    let floor = T::lit(ONE_MINUS_P_FLOOR);
    let mut da = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let delta = if i == k { T::one() } else { T::zero() };
            da[i * n + k] = scale * (delta - c.sa[i * n + k]);
        }
    }
    let mut dg = vec![T::zero(); n * n];
    let mut coef = vec![T::zero(); n];
    for j in 0..n {
        let row = &c.sg[j * n..(j + 1) * n];
        let mut s = T::zero();
        for i in 0..n {
            let q = T::one() - row[i];
            coef[i] = if i == j || q < floor {
                T::zero()
            } else {
                -T::one() / q
            };
            s += coef[i] * row[i];
        }
        for k in 0..n {
            dg[j * n + k] = scale * (coef[k] * row[k] - row[k] * s);
        }
    }
    for v in da.iter_mut().chain(dg.iter_mut()) {
        *v = *v / c.tau;
    }
    let mut df_hat = vec![T::zero(); n * d];
    gemm_nn(n, d, n, &da, f, &mut df_hat);
    let mut df = vec![T::zero(); n * d];
    gemm_tn(n, d, n, &da, f_hat, &mut df);
    // (dG + dGᵀ) · F
    let mut sym = dg.clone();
    for j in 0..n {
        for k in 0..n {
            sym[j * n + k] += dg[k * n + j];
        }
    }
    gemm_nn(n, d, n, &sym, f, &mut df);
    (df, df_hat)
}
