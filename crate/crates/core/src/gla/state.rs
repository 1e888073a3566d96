use crate::error::{shape_err, Error, Result};
use crate::numcore::{dense::count_muls, Mat, Real};

/// Per-head decode state: `s = Σ (Π γ) φk vᵀ`, `z = Σ (Π γ) φk`.
///
/// Its size depends only on the feature and value widths, never on how many
/// tokens have been absorbed.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub s: Mat<T>,
    pub z: Vec<T>,
    pub step: usize,
}

impl<T: Real> RecurrentState<T> {
    pub fn new(features: usize, dv: usize) -> Self {
        Self {
            s: Mat::zeros(features, dv),
            z: vec![T::zero(); features],
            step: 0,
        }
    }

    /// Floats held: `F·d_v + F + 1` (the step counter counts as one).
    pub fn float_count(&self) -> usize {
        self.s.data().len() + self.z.len() + 1
    }
}

/// Absorbs one token and returns its output row.
///
/// `log_gamma_t` has one entry (shared by all features) or one per feature.
pub fn gla_step<T: Real>(
    state: &mut RecurrentState<T>,
    phi_q_t: &[T],
    phi_k_t: &[T],
    v_t: &[T],
    log_gamma_t: &[T],
    normalize: bool,
) -> Result<Vec<T>> {
    let (f, dv) = (state.s.rows(), state.s.cols());
    if phi_q_t.len() != f || phi_k_t.len() != f || v_t.len() != dv {
        return shape_err(format!(
            "step expects φ width {f} and value width {dv}, got {}, {}, {}",
            phi_q_t.len(),
            phi_k_t.len(),
            v_t.len()
        ));
    }
    if log_gamma_t.len() != 1 && log_gamma_t.len() != f {
        return shape_err(format!("step gate width {} (want 1 or {f})", log_gamma_t.len()));
    }
    count_muls((3 * f * dv + 3 * f) as u64);
    for c in 0..f {
        let lg = log_gamma_t[if log_gamma_t.len() == 1 { 0 } else { c }];
        let g = lg.exp();
        let k = phi_k_t[c];
        for (s, &x) in state.s.row_mut(c).iter_mut().zip(v_t) {
            *s = *s * g + k * x;
        }
        state.z[c] = state.z[c] * g + k;
    }
    state.step += 1;
    let mut y = vec![0.0f64; dv];
    for c in 0..f {
        let q = phi_q_t[c].f64();
        if q == 0.0 {
            continue;
        }
        for (o, &s) in y.iter_mut().zip(state.s.row(c)) {
            *o += q * s.f64();
        }
    }
    if normalize {
        let den: f64 = phi_q_t.iter().zip(&state.z).map(|(q, z)| q.f64() * z.f64()).sum();
        if den <= 0.0 || !den.is_finite() {
            return Err(Error::DegenerateNormalizer {
                position: state.step - 1,
            });
        }
        y.iter_mut().for_each(|o| *o /= den);
    }
    Ok(y.into_iter().map(T::of).collect())
}
