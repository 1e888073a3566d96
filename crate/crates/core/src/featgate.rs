//! Hedgehog feature maps and the four gate parameterizations.
//!
//! Gates are produced directly in log space (`log σ(z) = -softplus(-z)`),
//! which is what every attention kernel consumes, and clamped at
//! `log GAMMA_MIN` so a single gate can never zero the state.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{Mat, Real, Tape, Tensor, Var};

/// Smallest gate value the kernels will see.
pub const GAMMA_MIN: f64 = 1e-6;
/// Inner width of the low-rank gate.
pub const LOW_RANK: usize = 16;
pub const GATE_INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Exp,
    Softmax,
}

/// `φ(x) = [act(xW) ⊕ act(-xW)]`, output width `2f`.
#[derive(Clone, Debug)]
pub struct HedgehogMap {
    pub w: Tensor,
    pub activation: Activation,
}

impl HedgehogMap {
    /// `W ~ N(0, 1/d)` so that `xW` has unit scale for unit-scale `x`.
    pub fn init<R: Rng + ?Sized>(d: usize, f: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[d, f], 1.0 / (d as f32).sqrt(), rng),
            activation,
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.w.cols()
    }

    pub fn apply<T: Real>(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let mut tape = Tape::<T>::new();
        let xv = tape.constant(Tensor::from_mat(x));
        let wv = tape.constant(self.w.convert());
        let y = hedgehog(&mut tape, xv, wv, self.activation)?;
        Ok(tape.value(y).to_mat())
    }
}

pub fn hedgehog_apply<T: Real>(map: &HedgehogMap, x: &Mat<T>) -> Result<Mat<T>> {
    map.apply(x)
}

/// Differentiable feature map on a tape.
pub fn hedgehog<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, act: Activation) -> Result<Var> {
    let (_, d) = tape.shape(x);
    if tape.shape(w).0 != d {
        return shape_err(format!(
            "feature map expects width {}, got {d}",
            tape.shape(w).0
        ));
    }
    let pos = tape.matmul(x, w)?;
    let neg = tape.neg(pos)?;
    let (a, b) = match act {
        Activation::Exp => (tape.exp(pos)?, tape.exp(neg)?),
        Activation::Softmax => (tape.softmax_rows(pos, None)?, tape.softmax_rows(neg, None)?),
    };
    tape.concat_cols(&[a, b])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateVariant {
    #[serde(rename = "scalar")]
    ScalarSigmoid,
    #[serde(rename = "mamba2")]
    Mamba2,
    #[serde(rename = "low_rank")]
    LowRank,
    #[serde(rename = "pooling")]
    Pooling,
}

impl GateVariant {
    pub const ALL: [GateVariant; 4] = [
        GateVariant::ScalarSigmoid,
        GateVariant::Mamba2,
        GateVariant::LowRank,
        GateVariant::Pooling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::ScalarSigmoid => "scalar",
            GateVariant::Mamba2 => "mamba2",
            GateVariant::LowRank => "low_rank",
            GateVariant::Pooling => "pooling",
        }
    }

    /// Parameter names and shapes for a layer of width `d` with `heads`
    /// heads of `f` gate features each.
    pub fn param_shapes(self, d: usize, heads: usize, f: usize) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            GateVariant::ScalarSigmoid => vec![("w", vec![d, 1])],
            GateVariant::Mamba2 => vec![("w", vec![d, 1]), ("a", vec![1, 1])],
            GateVariant::LowRank => vec![("w1", vec![d, LOW_RANK]), ("w2", vec![LOW_RANK, heads * f])],
            GateVariant::Pooling => vec![],
        }
    }

    pub fn param_count(self, d: usize, heads: usize, f: usize) -> usize {
        self.param_shapes(d, heads, f)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Gate weights `~ N(0, 0.02²)`, mamba2's `a = 0`.
    pub fn init_params<R: Rng + ?Sized>(
        self,
        d: usize,
        heads: usize,
        f: usize,
        rng: &mut R,
    ) -> Vec<(&'static str, Tensor)> {
        self.param_shapes(d, heads, f)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name == "a" {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, GATE_INIT_STD, rng)
                };
                (name, t)
            })
            .collect()
    }

    /// Whether the gate has one value per feature rather than per position.
    pub fn is_vector(self) -> bool {
        matches!(self, GateVariant::LowRank)
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" | "scalar_sigmoid" => Ok(GateVariant::ScalarSigmoid),
            "mamba2" => Ok(GateVariant::Mamba2),
            "low_rank" | "lowrank" => Ok(GateVariant::LowRank),
            "pooling" => Ok(GateVariant::Pooling),
            other => Err(Error::Config(format!(
                "unknown gate variant {other:?} (expected scalar, mamba2, low_rank, pooling)"
            ))),
        }
    }
}

/// Gate parameters of one layer bound to a tape, in `param_shapes` order.
#[derive(Clone, Debug)]
pub struct GateVars {
    pub variant: GateVariant,
    pub params: Vec<Var>,
}

/// Inputs a gate may read.
#[derive(Clone, Copy, Debug)]
pub struct GateInput {
    /// Layer input `[L, d]` (learnable variants).
    pub x: Option<Var>,
    /// This head's keys `[L, d_head]` (pooling variant).
    pub k: Option<Var>,
    pub head: usize,
    /// Per-head gate features for vector gates.
    pub f: usize,
}

/// Per-step log gates: `[L, 1]` for scalar variants, `[L, 2f]` for vector
/// gates (the `f` gate values tiled over both feature-map halves).
pub fn log_gates<T: Real>(tape: &mut Tape<T>, gate: &GateVars, input: GateInput) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| Error::Contract(format!("{} gate needs {what}", gate.variant)))
    };
    let raw = match gate.variant {
        GateVariant::ScalarSigmoid => {
            let z = tape.matmul(need(input.x, "x")?, gate.params[0])?;
            log_sigmoid(tape, z)?
        }
        GateVariant::Mamba2 => {
            let z = tape.matmul(need(input.x, "x")?, gate.params[0])?;
            let sp = tape.softplus(z)?;
            let ea = tape.exp(gate.params[1])?;
            let prod = tape.mul(sp, ea)?;
            tape.neg(prod)?
        }
        GateVariant::LowRank => {
            let h = tape.matmul(need(input.x, "x")?, gate.params[0])?;
            let z = tape.matmul(h, gate.params[1])?;
            let zh = tape.slice_cols(z, input.head * input.f, input.f)?;
            let g = log_sigmoid(tape, zh)?;
            tape.concat_cols(&[g, g])?
        }
        GateVariant::Pooling => {
            let k = need(input.k, "k")?;
            let dk = tape.shape(k).1;
            let pooled = tape.mean_pool_cols(k, dk)?;
            log_sigmoid(tape, pooled)?
        }
    };
    tape.clamp_min(raw, T::of(GAMMA_MIN.ln()))
}

fn log_sigmoid<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let nz = tape.neg(z)?;
    let sp = tape.softplus(nz)?;
    tape.neg(sp)
}

#[derive(Clone, Debug)]
pub struct GateValues<T> {
    pub gamma: Mat<T>,
    pub log_c: Mat<T>,
}

/// Evaluates a gate outside of training. `params` are in `param_shapes` order.
pub fn gate_values<T: Real>(
    variant: GateVariant,
    params: &[Tensor],
    x: Option<&Mat<T>>,
    k: Option<&Mat<T>>,
    head: usize,
    f: usize,
) -> Result<GateValues<T>> {
    let mut tape = Tape::<T>::new();
    let vars = params.iter().map(|p| tape.constant(p.convert())).collect();
    let gate = GateVars {
        variant,
        params: vars,
    };
    let input = GateInput {
        x: x.map(|m| tape.constant(Tensor::from_mat(m))),
        k: k.map(|m| tape.constant(Tensor::from_mat(m))),
        head,
        f,
    };
    let lg = log_gates(&mut tape, &gate, input)?;
    let log_gamma = tape.value(lg).to_mat::<T>();
    let gamma = log_gamma.map(|v| v.exp());
    let log_c = cumulative_sum(&log_gamma);
    Ok(GateValues { gamma, log_c })
}

/// `log_c[t] = Σ_{j≤t} log γ[j]`, accumulated in `f64`.
pub fn cumulative_log_gates<T: Real>(gamma: &Mat<T>) -> Result<Mat<T>> {
    if gamma.data().iter().any(|&g| g <= T::zero() || g.is_nan()) {
        return Err(Error::Domain("gate values must be positive".into()));
    }
    if gamma.data().iter().any(|&g| g > T::one()) {
        return Err(Error::Domain("gate values must not exceed 1".into()));
    }
    Ok(cumulative_sum(&gamma.map(|g| g.ln())))
}

pub(crate) fn cumulative_sum<T: Real>(x: &Mat<T>) -> Mat<T> {
    let mut acc = vec![0.0f64; x.cols()];
    Mat::from_fn(x.rows(), x.cols(), |i, j| {
        acc[j] += x.at(i, j).f64();
        T::of(acc[j])
    })
}
