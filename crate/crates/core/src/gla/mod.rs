//! Gated linear attention.
//!
//! Three algorithms compute the same map
//!
//! `y_i = φq_iᵀ Σ_{t≤i} (Π_{t<s≤i} γ_s) φk_t v_tᵀ`, optionally divided by the
//! same sum with `v_t` replaced by 1:
//!
//! * [`gla_recurrent`] carries the state `S` token by token,
//! * [`gla_parallel`] forms the masked `L × L` matrix after folding the
//!   cumulative gates into the features (only safe while they do not
//!   underflow),
//! * [`gla_chunkwise`] folds gates into the features relative to the start
//!   of each chunk, so exponents stay bounded for any length, and carries a
//!   decayed state between chunks.
//!
//! Gates are passed as per-step logs, either `[L, 1]` (one gate per position,
//! shared by every feature) or `[L, F]` (one per feature). The normalizer is
//! computed by appending a ones column to `v`, so every algorithm treats it
//! as just another value channel.

mod diff;
mod state;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{Mat, Real};

pub use diff::gla_tape;
pub use state::{gla_step, RecurrentState};

pub const DEFAULT_CHUNK: usize = 64;
/// The parallel form refuses cumulative log-gates below this.
pub const PARALLEL_LOG_FLOOR: f64 = -60.0;
/// Largest log-gate drop allowed inside one chunk; `exp(40)` is far from
/// `f32` overflow even after multiplying by a feature value.
pub const MAX_CHUNK_SPAN: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Recurrent,
    Parallel,
    Chunkwise,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Recurrent, Algo::Parallel, Algo::Chunkwise];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Recurrent => "recurrent",
            Algo::Parallel => "parallel",
            Algo::Chunkwise => "chunkwise",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Algo::Recurrent),
            "parallel" => Ok(Algo::Parallel),
            "chunkwise" => Ok(Algo::Chunkwise),
            other => Err(Error::Config(format!(
                "unknown gla algorithm {other:?} (expected recurrent, parallel, chunkwise)"
            ))),
        }
    }
}

/// Chunk boundaries for the chunkwise algorithm.
///
/// Chunks hold at most `chunk_size` positions and are cut early whenever the
/// log-gate drop inside a chunk would exceed [`MAX_CHUNK_SPAN`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    /// `(start, len)` of each chunk.
    pub chunks: Vec<(usize, usize)>,
    /// Cumulative log-gate (max over features) just before each chunk.
    pub boundary_log_c: Vec<f64>,
}

impl ChunkPlan {
    pub fn new<T: Real>(log_gamma: &Mat<T>, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        let (l, g) = (log_gamma.rows(), log_gamma.cols());
        let mut chunks = Vec::new();
        let mut boundary_log_c = Vec::new();
        let mut total = vec![0.0f64; g];
        let mut span = vec![0.0f64; g];
        let mut start = 0;
        for t in 0..l {
            let row = log_gamma.row(t);
            let len = t - start;
            let over = row
                .iter()
                .zip(&span)
                .any(|(lg, s)| s - lg.f64() > MAX_CHUNK_SPAN);
            if len > 0 && (len == chunk_size || over) {
                chunks.push((start, len));
                start = t;
                span.iter_mut().for_each(|s| *s = 0.0);
            }
            if t == start {
                boundary_log_c.push(total.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            for ((s, tot), lg) in span.iter_mut().zip(total.iter_mut()).zip(row) {
                *s -= lg.f64();
                *tot += lg.f64();
            }
        }
        if l > start {
            chunks.push((start, l - start));
        }
        if l == 0 {
            boundary_log_c.clear();
        }
        Ok(Self {
            chunk_size,
            chunks,
            boundary_log_c,
        })
    }
}

fn check_inputs<T: Real>(phi_q: &Mat<T>, phi_k: &Mat<T>, v: &Mat<T>, log_gamma: &Mat<T>) -> Result<()> {
    let l = phi_q.rows();
    if phi_k.rows() != l || v.rows() != l || log_gamma.rows() != l {
        return shape_err(format!(
            "gla inputs disagree on length: φq {l}, φk {}, v {}, gates {}",
            phi_k.rows(),
            v.rows(),
            log_gamma.rows()
        ));
    }
    if phi_k.cols() != phi_q.cols() {
        return shape_err("φq and φk widths differ");
    }
    if log_gamma.cols() != 1 && log_gamma.cols() != phi_q.cols() {
        return shape_err(format!(
            "gates must be [L, 1] or [L, {}], got [L, {}]",
            phi_q.cols(),
            log_gamma.cols()
        ));
    }
    if log_gamma.data().iter().any(|&g| g > T::zero() || !g.is_finite()) {
        return Err(Error::Domain("log gates must be finite and ≤ 0".into()));
    }
    Ok(())
}

/// Splits `[L, dv+1]` numerator-plus-denominator rows into the output.
fn finish<T: Real>(raw: &Mat<T>, normalize: bool) -> Result<Mat<T>> {
    let dv = raw.cols() - 1;
    let mut out = Mat::zeros(raw.rows(), dv);
    for i in 0..raw.rows() {
        let row = raw.row(i);
        if normalize {
            let den = row[dv];
            if den.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::DegenerateNormalizer { position: i });
            }
            for c in 0..dv {
                out.set(i, c, row[c] / den);
            }
        } else {
            out.row_mut(i).copy_from_slice(&row[..dv]);
        }
    }
    Ok(out)
}

/// Token-by-token recurrence. Returns the outputs and the final state.
pub fn gla_recurrent<T: Real>(
    phi_q: &Mat<T>,
    phi_k: &Mat<T>,
    v: &Mat<T>,
    log_gamma: &Mat<T>,
    normalize: bool,
) -> Result<(Mat<T>, RecurrentState<T>)> {
    check_inputs(phi_q, phi_k, v, log_gamma)?;
    let mut state = RecurrentState::new(phi_q.cols(), v.cols());
    let mut out = Mat::zeros(phi_q.rows(), v.cols());
    for t in 0..phi_q.rows() {
        let y = gla_step(
            &mut state,
            phi_q.row(t),
            phi_k.row(t),
            v.row(t),
            log_gamma.row(t),
            normalize,
        )?;
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok((out, state))
}

/// Masked matrix form `((φq ⊙ C)(φk / C)ᵀ ⊙ M) v` with `C = exp(log_c)`.
///
/// Fails with a precision error once `log_c` drops below
/// [`PARALLEL_LOG_FLOOR`], where `1/C` is no longer representable.
pub fn gla_parallel<T: Real>(
    phi_q: &Mat<T>,
    phi_k: &Mat<T>,
    v: &Mat<T>,
    log_gamma: &Mat<T>,
    normalize: bool,
) -> Result<Mat<T>> {
    check_inputs(phi_q, phi_k, v, log_gamma)?;
    let log_c = crate::featgate::cumulative_sum(log_gamma);
    let lowest = log_c.data().iter().fold(0.0f64, |m, v| m.min(v.f64()));
    if lowest < PARALLEL_LOG_FLOOR {
        return Err(Error::Precision(format!(
            "cumulative log-gate reaches {lowest:.1} (< {PARALLEL_LOG_FLOOR}); use the chunkwise algorithm"
        )));
    }
    let (l, f) = (phi_q.rows(), phi_q.cols());
    let g = |t: usize, c: usize| log_c.at(t, if log_c.cols() == 1 { 0 } else { c }).f64();
    let qc = Mat::from_fn(l, f, |t, c| T::of(phi_q.at(t, c).f64() * g(t, c).exp()));
    let kc = Mat::from_fn(l, f, |t, c| T::of(phi_k.at(t, c).f64() * (-g(t, c)).exp()));
    let mut a = qc.matmul_nt(&kc);
    for i in 0..l {
        a.row_mut(i)[i + 1..].iter_mut().for_each(|x| *x = T::zero());
    }
    finish(&a.matmul(&v.with_ones_col()), normalize)
}

/// Chunkwise form with per-chunk re-anchored gates and a carried state.
pub fn gla_chunkwise<T: Real>(
    phi_q: &Mat<T>,
    phi_k: &Mat<T>,
    v: &Mat<T>,
    log_gamma: &Mat<T>,
    chunk_size: usize,
    normalize: bool,
) -> Result<Mat<T>> {
    check_inputs(phi_q, phi_k, v, log_gamma)?;
    let plan = ChunkPlan::new(log_gamma, chunk_size)?;
    gla_chunkwise_planned(phi_q, phi_k, v, log_gamma, &plan, normalize)
}

pub fn gla_chunkwise_planned<T: Real>(
    phi_q: &Mat<T>,
    phi_k: &Mat<T>,
    v: &Mat<T>,
    log_gamma: &Mat<T>,
    plan: &ChunkPlan,
    normalize: bool,
) -> Result<Mat<T>> {
    check_inputs(phi_q, phi_k, v, log_gamma)?;
    let (l, f) = (phi_q.rows(), phi_q.cols());
    let vv = v.with_ones_col();
    let dv1 = vv.cols();
    let gcols = log_gamma.cols();
    let mut state = Mat::<T>::zeros(f, dv1);
    let mut raw = Mat::<T>::zeros(l, dv1);
    let mut first = true;
    for &(start, n) in &plan.chunks {
        // a[i] = Σ_{start ≤ s ≤ i} log γ_s, relative to the chunk boundary
        let mut a = vec![0.0f64; n * gcols];
        let mut acc = vec![0.0f64; gcols];
        for i in 0..n {
            for (c, s) in acc.iter_mut().enumerate() {
                *s += log_gamma.at(start + i, c).f64();
                a[i * gcols + c] = *s;
            }
        }
        let ga = |i: usize, c: usize| a[i * gcols + if gcols == 1 { 0 } else { c }];
        let qt = Mat::from_fn(n, f, |i, c| T::of(phi_q.at(start + i, c).f64() * ga(i, c).exp()));
        let kt = Mat::from_fn(n, f, |i, c| T::of(phi_k.at(start + i, c).f64() * (-ga(i, c)).exp()));
        let vc = vv.slice_rows(start, n);
        let mut att = qt.matmul_nt(&kt);
        for i in 0..n {
            att.row_mut(i)[i + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        let mut y = att.matmul(&vc);
        if !first {
            let inter = qt.matmul(&state);
            for (o, x) in y.data_mut().iter_mut().zip(inter.data()) {
                *o = *o + *x;
            }
        }
        for i in 0..n {
            raw.row_mut(start + i).copy_from_slice(y.row(i));
        }
        // S ← diag(e^{a_last}) S + (φk ⊙ e^{a_last − a})ᵀ v
        let last = n - 1;
        let kd = Mat::from_fn(n, f, |i, c| {
            T::of(phi_k.at(start + i, c).f64() * (ga(last, c) - ga(i, c)).exp())
        });
        let upd = kd.matmul_tn(&vc);
        for c in 0..f {
            let decay = T::of(ga(last, c).exp());
            for (s, u) in state.row_mut(c).iter_mut().zip(upd.row(c)) {
                *s = *s * decay + *u;
            }
        }
        first = false;
    }
    finish(&raw, normalize)
}

/// Runs the selected algorithm on one head.
pub fn gla_forward<T: Real>(
    algo: Algo,
    phi_q: &Mat<T>,
    phi_k: &Mat<T>,
    v: &Mat<T>,
    log_gamma: &Mat<T>,
    chunk_size: usize,
    normalize: bool,
) -> Result<Mat<T>> {
    match algo {
        Algo::Recurrent => Ok(gla_recurrent(phi_q, phi_k, v, log_gamma, normalize)?.0),
        Algo::Parallel => gla_parallel(phi_q, phi_k, v, log_gamma, normalize),
        Algo::Chunkwise => gla_chunkwise(phi_q, phi_k, v, log_gamma, chunk_size, normalize),
    }
}

#[cfg(test)]
mod tests;
