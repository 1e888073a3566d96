use crate::error::{shape_err, Error, Result};
use crate::numcore::{Real, Tape, Var};

use super::layer::{hybrid_heads, lname};
use super::params::Bound;
use super::teacher::TeacherRecord;
use super::Model;

/// Mean next-token negative log-likelihood; `targets[i]` is the token
/// following row `i` of `logits`.
pub fn lm_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if tape.shape(logits).0 != targets.len() {
        return shape_err(format!(
            "{} logit rows for {} targets",
            tape.shape(logits).0,
            targets.len()
        ));
    }
    let w = vec![T::one(); targets.len()];
    tape.cross_entropy(logits, targets, &w)
}

/// `(1/N) Σ_l ‖Y_l − (Ŷgate_l + α·Ŷswa_l)‖_F²` over the `N` linearized
/// layers, with the student's branches reading the teacher's projections.
pub fn stage1_mse_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &Model,
    b: &Bound,
    records: &[TeacherRecord],
) -> Result<Var> {
    let cfg = &student.cfg;
    if records.len() != cfg.n_layers {
        return Err(Error::ConfigMismatch(format!(
            "{} teacher records for {} layers",
            records.len(),
            cfg.n_layers
        )));
    }
    let layers: Vec<usize> = (0..cfg.n_layers).filter(|&l| !cfg.is_retained(l)).collect();
    if layers.is_empty() {
        return Err(Error::Contract("every layer is retained; nothing to approximate".into()));
    }
    let mut total: Option<Var> = None;
    for &l in &layers {
        let r = &records[l];
        let h = tape.constant(r.h.convert());
        let q = tape.constant(r.q.convert());
        let k = tape.constant(r.k.convert());
        let v = tape.constant(r.v.convert());
        let y = tape.constant(r.y.convert());
        let mut approx = hybrid_heads(tape, cfg, b, l, h, q, k, v)?;
        let mut y = y;
        if cfg.mse_post_wo {
            let wo = b.get(&lname(l, "wo"))?;
            approx = tape.matmul(approx, wo)?;
            y = tape.matmul(y, wo)?;
        }
        let diff = tape.sub(y, approx)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.expect("at least one layer");
    tape.scale(total, T::of(1.0 / layers.len() as f64))
}
