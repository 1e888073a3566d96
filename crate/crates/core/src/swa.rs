//! Sliding-window softmax attention with pinned meta tokens.
//!
//! Query `i` sees the first `m` positions and the `w` most recent positions
//! up to and including itself. No rotary embedding is applied here.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{band, dense::count_muls, dense::dot, Mat, Real, Tensor};
use crate::refattn::banded_softmax_attention;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwaConfig {
    pub window: usize,
    pub meta_tokens: usize,
}

impl Default for SwaConfig {
    fn default() -> Self {
        Self {
            window: 128,
            meta_tokens: 4,
        }
    }
}

impl SwaConfig {
    pub fn new(window: usize, meta_tokens: usize) -> Self {
        Self {
            window,
            meta_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("swa.window must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether query `i` may attend to key `t`.
    pub fn allows(&self, i: usize, t: usize) -> bool {
        t <= i && (t < self.meta_tokens || t + self.window > i)
    }
}

/// Additive mask: `0` where attention is allowed, `-inf` elsewhere.
pub fn build_swa_mask(l: usize, cfg: &SwaConfig) -> Tensor {
    let mut m = Tensor::full(&[l, l], f32::NEG_INFINITY);
    for i in 0..l {
        for t in 0..l {
            if cfg.allows(i, t) {
                m.set(i, t, 0.0);
            }
        }
    }
    m
}

/// Batch sliding-window attention, evaluated over the allowed band only.
pub fn swa_forward<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, cfg: &SwaConfig) -> Result<Mat<T>> {
    cfg.validate()?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    banded_softmax_attention(q, k, v, scale, cfg.window, cfg.meta_tokens)
}

/// Fixed-capacity key/value cache for streaming decode: `m` pinned meta
/// slots plus a ring of `w` slots, allocated up front.
#[derive(Clone, Debug)]
pub struct SwaCache<T> {
    cfg: SwaConfig,
    d: usize,
    dv: usize,
    keys: Vec<T>,
    values: Vec<T>,
    /// Position held by each slot.
    held: Vec<Option<usize>>,
    step: usize,
}

impl<T: Real> SwaCache<T> {
    pub fn new(cfg: SwaConfig, d: usize, dv: usize) -> Result<Self> {
        cfg.validate()?;
        let slots = cfg.window + cfg.meta_tokens;
        Ok(Self {
            cfg,
            d,
            dv,
            keys: vec![T::zero(); slots * d],
            values: vec![T::zero(); slots * dv],
            held: vec![None; slots],
            step: 0,
        })
    }

    fn slot(&self, t: usize) -> usize {
        let m = self.cfg.meta_tokens;
        if t < m {
            t
        } else {
            m + (t - m) % self.cfg.window
        }
    }

    /// Floats allocated for keys and values: `(d + d_v)·(w + m)`.
    pub fn float_count(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// Positions currently cached, ascending.
    pub fn positions(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.held.iter().flatten().copied().collect();
        p.sort_unstable();
        p
    }

    pub fn len(&self) -> usize {
        self.held.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Inserts token `t` and returns its attention output over the cache.
    pub fn step_token(&mut self, t: usize, q: &[T], k: &[T], v: &[T], scale: f64) -> Result<Vec<T>> {
        if t != self.step {
            return Err(Error::Contract(format!(
                "swa cache expected position {}, got {t}",
                self.step
            )));
        }
        if q.len() != self.d || k.len() != self.d || v.len() != self.dv {
            return shape_err("swa cache step width mismatch");
        }
        let s = self.slot(t);
        self.keys[s * self.d..(s + 1) * self.d].copy_from_slice(k);
        self.values[s * self.dv..(s + 1) * self.dv].copy_from_slice(v);
        self.held[s] = Some(t);
        self.step += 1;

        let visible: Vec<usize> = band(t, self.cfg.window, self.cfg.meta_tokens).collect();
        let mut scores: Vec<f64> = visible
            .iter()
            .map(|&p| {
                let s = self.slot(p);
                dot(q, &self.keys[s * self.d..(s + 1) * self.d]) * scale
            })
            .collect();
        count_muls((visible.len() * (self.d + self.dv)) as u64);
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in scores.iter_mut() {
            *x = (*x - mx).exp();
            z += *x;
        }
        let mut acc = vec![0.0f64; self.dv];
        for (x, &p) in scores.iter().zip(&visible) {
            debug_assert_eq!(self.held[self.slot(p)], Some(p));
            let s = self.slot(p);
            let w = x / z;
            for (a, &val) in acc.iter_mut().zip(&self.values[s * self.dv..(s + 1) * self.dv]) {
                *a += w * val.f64();
            }
        }
        Ok(acc.into_iter().map(T::of).collect())
    }
}
