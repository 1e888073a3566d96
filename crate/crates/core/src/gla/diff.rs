//! The three algorithms built from tape primitives, for training.

use crate::error::{shape_err, Error, Result};
use crate::numcore::{Real, Tape, Tensor, Var};

use super::{Algo, ChunkPlan, PARALLEL_LOG_FLOOR};

/// Differentiable gated linear attention for one head.
///
/// `log_gamma` is `[L, 1]` or `[L, F]`; chunk boundaries are chosen from
/// its current values and are not differentiated through.
pub fn gla_tape<T: Real>(
    tape: &mut Tape<T>,
    algo: Algo,
    phi_q: Var,
    phi_k: Var,
    v: Var,
    log_gamma: Var,
    chunk_size: usize,
    normalize: bool,
) -> Result<Var> {
    let (l, f) = tape.shape(phi_q);
    let (gl, gc) = tape.shape(log_gamma);
    if tape.shape(phi_k) != (l, f) || tape.shape(v).0 != l || gl != l || (gc != 1 && gc != f) {
        return shape_err("gla_tape input shapes disagree");
    }
    let ones = tape.constant(Tensor::full(&[l, 1], T::one()));
    let vv = tape.concat_cols(&[v, ones])?;
    let raw = match algo {
        Algo::Parallel => parallel(tape, phi_q, phi_k, vv, log_gamma)?,
        Algo::Chunkwise => {
            let plan = ChunkPlan::new(&tape.value(log_gamma).to_mat::<T>(), chunk_size)?;
            chunkwise(tape, phi_q, phi_k, vv, log_gamma, &plan)?
        }
        Algo::Recurrent => {
            let plan = ChunkPlan {
                chunk_size: 1,
                chunks: (0..l).map(|t| (t, 1)).collect(),
                boundary_log_c: Vec::new(),
            };
            chunkwise(tape, phi_q, phi_k, vv, log_gamma, &plan)?
        }
    };
    let dv = tape.shape(v).1;
    let num = tape.slice_cols(raw, 0, dv)?;
    if !normalize {
        return Ok(num);
    }
    let den = tape.slice_cols(raw, dv, 1)?;
    if let Some(pos) = tape
        .value(den)
        .data()
        .iter()
        .position(|&d| d.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater))
    {
        return Err(Error::DegenerateNormalizer { position: pos });
    }
    tape.div(num, den)
}

fn parallel<T: Real>(tape: &mut Tape<T>, phi_q: Var, phi_k: Var, vv: Var, log_gamma: Var) -> Result<Var> {
    let log_c = tape.cumsum_rows(log_gamma)?;
    let lowest = tape.value(log_c).data().iter().fold(0.0f64, |m, v| m.min(v.f64()));
    if lowest < PARALLEL_LOG_FLOOR {
        return Err(Error::Precision(format!(
            "cumulative log-gate reaches {lowest:.1} (< {PARALLEL_LOG_FLOOR}); use the chunkwise algorithm"
        )));
    }
    let c = tape.exp(log_c)?;
    let neg = tape.neg(log_c)?;
    let inv_c = tape.exp(neg)?;
    let qc = tape.mul(phi_q, c)?;
    let kc = tape.mul(phi_k, inv_c)?;
    let scores = tape.matmul_nt(qc, kc)?;
    let masked = tape.tril(scores)?;
    tape.matmul(masked, vv)
}

fn chunkwise<T: Real>(
    tape: &mut Tape<T>,
    phi_q: Var,
    phi_k: Var,
    vv: Var,
    log_gamma: Var,
    plan: &ChunkPlan,
) -> Result<Var> {
    let mut state: Option<Var> = None;
    let mut outs = Vec::with_capacity(plan.chunks.len());
    for &(start, n) in &plan.chunks {
        let q = tape.slice_rows(phi_q, start, n)?;
        let k = tape.slice_rows(phi_k, start, n)?;
        let vc = tape.slice_rows(vv, start, n)?;
        let lg = tape.slice_rows(log_gamma, start, n)?;
        let a = tape.cumsum_rows(lg)?;
        let ea = tape.exp(a)?;
        let na = tape.neg(a)?;
        let ena = tape.exp(na)?;
        let qt = tape.mul(q, ea)?;
        let kt = tape.mul(k, ena)?;
        let scores = tape.matmul_nt(qt, kt)?;
        let masked = tape.tril(scores)?;
        let mut y = tape.matmul(masked, vc)?;
        if let Some(s) = state {
            let inter = tape.matmul(qt, s)?;
            y = tape.add(y, inter)?;
        }
        outs.push(y);
        // S ← diag(e^{a_last}) S + (φk ⊙ e^{a_last − a})ᵀ v
        let a_last = tape.slice_rows(a, n - 1, 1)?;
        let rel = tape.sub(a, a_last)?;
        let nrel = tape.neg(rel)?;
        let w = tape.exp(nrel)?;
        let kd = tape.mul(k, w)?;
        let upd = tape.matmul_tn(kd, vc)?;
        state = Some(match state {
            None => upd,
            Some(s) => {
                let e = tape.exp(a_last)?;
                let col = tape.transpose(e)?;
                let decayed = tape.mul(s, col)?;
                tape.add(decayed, upd)?
            }
        });
    }
    tape.concat_rows(&outs)
}
