//! Reference softmax attention with rotary position embedding.
//!
//! This is the teacher's attention and the yardstick for the sliding-window
//! branch. It favours clarity: scores are computed row by row over the
//! visible keys only, with `f64` accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{band, dense::count_muls, dense::dot, rope_tables, rotate_pairs, Mat, Real};

pub use crate::model::teacher::{teacher_forward_collect, TeacherRecord};

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub max_position: usize,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            base: DEFAULT_ROPE_BASE,
            max_position: 1 << 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be even, got {}",
                self.head_dim
            )));
        }
        if self.base.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("rope base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }
}

/// Rotates channel pairs `(2j, 2j+1)` of row `r` by `positions[r]·base^(-2j/d)`.
pub fn rope_transform<T: Real>(x: &Mat<T>, positions: &[usize], cfg: &RopeConfig) -> Result<Mat<T>> {
    cfg.validate()?;
    if x.cols() != cfg.head_dim {
        return shape_err(format!("rope input width {} != head_dim {}", x.cols(), cfg.head_dim));
    }
    if positions.len() != x.rows() {
        return shape_err(format!("{} positions for {} rows", positions.len(), x.rows()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p > cfg.max_position) {
        return Err(Error::Config(format!("position {p} beyond max_position")));
    }
    let (cos, sin) = rope_tables::<T>(positions, cfg.head_dim, cfg.base);
    let mut out = Mat::zeros(x.rows(), x.cols());
    rotate_pairs(x.data(), out.data_mut(), &cos, &sin, cfg.head_dim, false);
    Ok(out)
}

/// Softmax attention where query `i` sees keys `band(i, window, meta)`.
///
/// `window = usize::MAX, meta = 0` is ordinary causal attention.
pub fn banded_softmax_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    scale: f64,
    window: usize,
    meta: usize,
) -> Result<Mat<T>> {
    check_qkv(q, k, v)?;
    if window == 0 {
        return Err(Error::Config("attention window must be at least 1".into()));
    }
    let (l, dv) = (q.rows(), v.cols());
    let mut out = Mat::zeros(l, dv);
    let mut scores = Vec::new();
    let mut acc = vec![0.0f64; dv];
    for i in 0..l {
        scores.clear();
        for t in band(i, window, meta) {
            scores.push(dot(q.row(i), k.row(t)) * scale);
        }
        count_muls((scores.len() * (q.cols() + dv)) as u64);
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (s, t) in scores.iter().zip(band(i, window, meta)) {
            let p = s / z;
            for (a, &x) in acc.iter_mut().zip(v.row(t)) {
                *a += p * x.f64();
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = T::of(*a);
        }
    }
    Ok(out)
}

/// Causal softmax attention `softmax(q kᵀ·scale ⊙ M) v`.
pub fn causal_softmax_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    scale: f64,
) -> Result<Mat<T>> {
    banded_softmax_attention(q, k, v, scale, usize::MAX, 0)
}

/// The full `[L, L]` causal attention weight matrix (zeros above the diagonal).
pub fn causal_attention_weights<T: Real>(q: &Mat<T>, k: &Mat<T>, scale: f64) -> Result<Mat<f64>> {
    if q.cols() != k.cols() || q.rows() != k.rows() {
        return shape_err("attention weights need matching q and k");
    }
    let l = q.rows();
    let mut w = Mat::zeros(l, l);
    for i in 0..l {
        let s: Vec<f64> = (0..=i).map(|t| dot(q.row(i), k.row(t)) * scale).collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
        for (t, x) in s.iter().enumerate() {
            w.set(i, t, (x - mx).exp() / z);
        }
    }
    Ok(w)
}

pub(crate) fn check_qkv<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>) -> Result<()> {
    if q.cols() != k.cols() || q.rows() != k.rows() || k.rows() != v.rows() || q.rows() == 0 {
        return shape_err(format!(
            "attention shapes q[{},{}] k[{},{}] v[{},{}]",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numcore::Tensor;
    use crate::oracle;

    fn randm(r: usize, c: usize, seed: u64) -> Mat<f64> {
        Tensor::randn(&[r, c], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).to_mat()
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let x = randm(3, 8, 1);
        let y = rope_transform(&x, &[0, 0, 0], &RopeConfig::new(8)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_two_dims_rotates_by_position() {
        let x = Mat::from_vec(1, 2, vec![1.0f64, 0.0]);
        let y = rope_transform(&x, &[1], &RopeConfig::new(2)).unwrap();
        assert_eq!(y.data(), &[1f64.cos(), 1f64.sin()]);
    }

    #[test]
    fn rope_rejects_odd_width() {
        let x = Mat::<f32>::zeros(1, 3);
        assert!(matches!(
            rope_transform(&x, &[0], &RopeConfig::new(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rope_preserves_row_norms() {
        let x = randm(5, 16, 2).convert::<f32>();
        let y = rope_transform(&x, &[0, 5, 17, 300, 9999], &RopeConfig::new(16)).unwrap();
        for i in 0..5 {
            let nx: f64 = x.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((nx - ny).abs() / nx < 1e-5);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_offset() {
        let cfg = RopeConfig::new(16);
        let q = randm(1, 16, 3).convert::<f32>();
        let k = randm(1, 16, 4).convert::<f32>();
        let score = |i: usize, j: usize| {
            let a = rope_transform(&q, &[i], &cfg).unwrap();
            let b = rope_transform(&k, &[j], &cfg).unwrap();
            dot(a.row(0), b.row(0))
        };
        for delta in [1, 7, 100] {
            let (s0, s1) = (score(3, 11), score(3 + delta, 11 + delta));
            assert!((s0 - s1).abs() < 1e-5, "delta {delta}: {s0} vs {s1}");
        }
    }

    #[test]
    fn single_token_attention_returns_value() {
        let (q, k, v) = (randm(1, 4, 5), randm(1, 4, 6), randm(1, 4, 7));
        let y = causal_softmax_attention(&q, &k, &v, 0.5).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = randm(5, 4, 8);
        let k = Mat::from_fn(5, 4, |_, j| j as f64 * 0.3);
        let v = randm(5, 3, 9);
        let y = causal_softmax_attention(&q, &k, &v, 0.5).unwrap();
        for i in 0..5 {
            for c in 0..3 {
                let mean = (0..=i).map(|t| v.at(t, c)).sum::<f64>() / (i + 1) as f64;
                assert!((y.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_per_token_oracle() {
        let (q, k, v) = (randm(7, 4, 10), randm(7, 4, 11), randm(7, 4, 12));
        let got = causal_softmax_attention(&q.convert::<f32>(), &k.convert(), &v.convert(), 0.5)
            .unwrap();
        let want = oracle::causal_attention(&q, &k, &v, 0.5);
        assert!(got.convert::<f64>().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn later_tokens_never_change_earlier_rows() {
        let (q, k, mut v) = (randm(9, 4, 13), randm(9, 4, 14), randm(9, 4, 15));
        let before = causal_softmax_attention(&q, &k, &v, 0.5).unwrap();
        for c in 0..4 {
            v.set(6, c, 100.0);
            v.set(8, c, -3.0);
        }
        let after = causal_softmax_attention(&q, &k, &v, 0.5).unwrap();
        assert_eq!(before.slice_rows(0, 6), after.slice_rows(0, 6));
    }

    #[test]
    fn weights_are_row_stochastic() {
        let (q, k) = (randm(12, 4, 16), randm(12, 4, 17));
        let w = causal_attention_weights(&q, &k, 0.5).unwrap();
        for i in 0..12 {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
