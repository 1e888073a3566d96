//! Independent reference implementations.
//!
//! Everything here is written as the most literal loop over the defining
//! sums, shares no code with the kernels it checks, and runs in `f64`.
//! Tests and `verify` compare the fast paths against these.

use crate::error::Result;
use crate::numcore::{Mat, Real, Tape, Tensor, Var};

/// A scalar function of several tensors, evaluable at any precision.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_err: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Relative error with the denominator floored at 1% of the tensor's
/// largest numeric gradient, so entries that are numerically zero are
/// judged on the tensor's own scale.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| (nan_inf((a - n).abs() / a.abs().max(n.abs()).max(floor)), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Analytic gradients from an `f32` tape against central finite
/// differences evaluated on an `f64` tape.
pub fn grad_check<O: Objective>(obj: &O, inputs: &[Tensor<f32>], h: f64) -> Result<GradCheck> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = obj.eval(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let base: Vec<Tensor<f64>> = inputs.iter().map(|t| t.convert()).collect();
    let eval64 = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = obj.eval(&mut t, &vs)?;
        Ok(t.value(out).data()[0])
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut xs = base.clone();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let fp = eval64(&xs)?;
            xs[i].data_mut()[j] = x0 - h;
            let fm = eval64(&xs)?;
            g.push((fp - fm) / (2.0 * h));
        }
        numeric.push(g);
    }

    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let (e, j) = grad_rel_err(a, n);
        if e > max_rel_err {
            max_rel_err = e;
            worst = (i, j);
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}

/// Elementwise relative discrepancy of `got` against `want`, with the
/// denominator floored at 1% of `want`'s largest magnitude so that entries
/// which are nearly zero are judged on the tensor's own scale.
pub fn rel_diff<A: Real, B: Real>(got: &Mat<A>, want: &Mat<B>) -> f64 {
    assert_eq!(got.data().len(), want.data().len(), "rel_diff size mismatch");
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    let floor = (1e-2 * scale).max(1e-30);
    got.data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| nan_inf((a.f64() - b.f64()).abs() / b.f64().abs().max(floor)))
        .fold(0.0, f64::max)
}

/// NaN compares false everywhere, so discrepancy reductions map it to +inf.
fn nan_inf(x: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else {
        x
    }
}

/// Triple-loop matrix product.
pub fn matmul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.at(i, p) * b.at(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Softmax attention evaluated token by token: row `i` is
/// `Σ_{t allowed} exp(q_i·k_t·scale) v_t / Σ_{t allowed} exp(q_i·k_t·scale)`.
pub fn masked_attention(
    q: &Mat<f64>,
    k: &Mat<f64>,
    v: &Mat<f64>,
    scale: f64,
    allowed: impl Fn(usize, usize) -> bool,
) -> Mat<f64> {
    let l = q.rows();
    let mut out = Mat::zeros(l, v.cols());
    for i in 0..l {
        let ts: Vec<usize> = (0..k.rows()).filter(|&t| allowed(i, t)).collect();
        let scores: Vec<f64> = ts
            .iter()
            .map(|&t| (0..q.cols()).map(|c| q.at(i, c) * k.at(t, c)).sum::<f64>() * scale)
            .collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        for (wi, &t) in w.iter().zip(&ts) {
            for c in 0..v.cols() {
                out.set(i, c, out.at(i, c) + wi / z * v.at(t, c));
            }
        }
    }
    out
}

/// Causal softmax attention, token by token.
pub fn causal_attention(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>, scale: f64) -> Mat<f64> {
    masked_attention(q, k, v, scale, |i, t| t <= i)
}

/// Sliding-window attention with meta tokens, token by token.
pub fn swa_attention(
    q: &Mat<f64>,
    k: &Mat<f64>,
    v: &Mat<f64>,
    scale: f64,
    window: usize,
    meta: usize,
) -> Mat<f64> {
    masked_attention(q, k, v, scale, |i, t| {
        t <= i && (t < meta || t + window > i)
    })
}

/// Gated linear attention evaluated from its defining double sum:
///
/// `ŷ_i = φq_iᵀ Σ_{t≤i} (Π_{l=t+1..i} Γ_l) ⊙ φk_t v_tᵀ` divided (optionally)
/// by the same sum with `v_t` replaced by 1.
///
/// `gamma` is `[L, 1]` (scalar gates) or `[L, F]` (one gate per feature).
pub fn gla_double_sum(
    phi_q: &Mat<f64>,
    phi_k: &Mat<f64>,
    v: &Mat<f64>,
    gamma: &Mat<f64>,
    normalize: bool,
) -> Mat<f64> {
    let l = phi_q.rows();
    let f = phi_q.cols();
    let g = |t: usize, c: usize| {
        if gamma.cols() == 1 {
            gamma.at(t, 0)
        } else {
            gamma.at(t, c)
        }
    };
    let mut out = Mat::zeros(l, v.cols());
    for i in 0..l {
        let mut num = vec![0.0; v.cols()];
        let mut den = 0.0;
        for t in 0..=i {
            let mut w = 0.0;
            for c in 0..f {
                let mut decay = 1.0;
                for s in t + 1..=i {
                    decay *= g(s, c);
                }
                w += phi_q.at(i, c) * decay * phi_k.at(t, c);
            }
            for (n, c) in num.iter_mut().zip(0..) {
                *n += w * v.at(t, c);
            }
            den += w;
        }
        for (c, n) in num.into_iter().enumerate() {
            out.set(i, c, if normalize { n / den } else { n });
        }
    }
    out
}

/// Feature-wise softmax, the literal definition.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Widen a matrix for the oracles.
pub fn wide<T: Real>(m: &Mat<T>) -> Mat<f64> {
    m.convert()
}
