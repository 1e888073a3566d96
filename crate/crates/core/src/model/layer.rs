//! Transformer blocks and the attention mixers that plug into them.

use crate::error::{Error, Result};
use crate::featgate::{hedgehog, log_gates, GateInput, GateVariant, GateVars};
use crate::gla::{gla_tape, Algo};
use crate::numcore::{Real, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::params::Bound;

pub(crate) const NORM_EPS: f64 = 1e-5;

pub fn lname(layer: usize, leaf: &str) -> String {
    format!("layers.{layer}.{leaf}")
}

/// `x·W + s·(x·A)·B`; without an adapter just `x·W`.
pub fn lora_apply<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    adapter: Option<(Var, Var)>,
    scale: T,
) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match adapter {
        None => Ok(base),
        Some((a, b)) => {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let scaled = tape.scale(xab, scale)?;
            tape.add(base, scaled)
        }
    }
}

/// Produces the pre-output-projection attention result `[L, d_model]` of
/// one layer from the normalized input `h` and projections `q, k, v`.
pub trait Mixer<T: Real> {
    fn mix(
        &mut self,
        tape: &mut Tape<T>,
        b: &Bound,
        layer: usize,
        h: Var,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var>;
}

/// Everything a block computed on the way, for teacher supervision.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub h: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub attn: Var,
}

/// Pre-norm block: attention (through `mixer`) then a SiLU MLP, both residual.
pub fn block<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    layer: usize,
    x: Var,
    mixer: &mut dyn Mixer<T>,
) -> Result<(Var, BlockTrace)> {
    let p = |leaf: &str| b.get(&lname(layer, leaf));
    let h = tape.rms_norm(x, p("norm1")?, NORM_EPS)?;
    let scale = T::of(cfg.lora.scale() as f64);
    let adapter = |m: &str| -> Option<(Var, Var)> {
        Some((
            b.opt(&lname(layer, &format!("lora_{m}_a")))?,
            b.opt(&lname(layer, &format!("lora_{m}_b")))?,
        ))
    };
    let q = lora_apply(tape, h, p("wq")?, adapter("q"), scale)?;
    let k = lora_apply(tape, h, p("wk")?, adapter("k"), scale)?;
    let v = lora_apply(tape, h, p("wv")?, adapter("v"), scale)?;
    let attn = mixer.mix(tape, b, layer, h, q, k, v)?;
    let o = tape.matmul(attn, p("wo")?)?;
    let x = tape.add(x, o)?;
    let h2 = tape.rms_norm(x, p("norm2")?, NORM_EPS)?;
    let up = tape.matmul(h2, p("w1")?)?;
    let act = tape.silu(up)?;
    let down = tape.matmul(act, p("w2")?)?;
    let out = tape.add(x, down)?;
    Ok((out, BlockTrace { h, q, k, v, attn }))
}

/// Causal softmax attention with rotary embedding on every head.
pub fn softmax_heads<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    positions: &[usize],
) -> Result<Var> {
    let hd = cfg.head_dim;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, head * hd, hd)?;
        let kh = tape.slice_cols(k, head * hd, hd)?;
        let vh = tape.slice_cols(v, head * hd, hd)?;
        let qr = tape.rope(qh, positions, cfg.rope_base)?;
        let kr = tape.rope(kh, positions, cfg.rope_base)?;
        heads.push(tape.attention(qr, kr, vh, scale, usize::MAX, 0)?);
    }
    tape.concat_cols(&heads)
}

/// Gate parameters of a layer in `param_shapes` order.
pub fn gate_vars(cfg: &ModelConfig, b: &Bound, layer: usize) -> Result<GateVars> {
    let variant = cfg.gate.variant;
    let params = variant
        .param_shapes(cfg.d_model, cfg.n_heads, cfg.feature_dim)
        .iter()
        .map(|(name, _)| b.get(&lname(layer, &format!("gate.{name}"))))
        .collect::<Result<_>>()?;
    Ok(GateVars { variant, params })
}

/// Per-head feature maps and log gates of a linearized layer.
pub struct HeadInputs {
    pub phi_q: Var,
    pub phi_k: Var,
    pub log_gamma: Var,
}

pub fn head_inputs<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    layer: usize,
    head: usize,
    h: Var,
    qh: Var,
    kh: Var,
    shared_gate: &mut Option<Var>,
) -> Result<HeadInputs> {
    let phi_q = hedgehog(tape, qh, b.get(&lname(layer, "fq"))?, cfg.activation)?;
    let phi_k = hedgehog(tape, kh, b.get(&lname(layer, "fk"))?, cfg.activation)?;
    let l = tape.shape(qh).0;
    let log_gamma = if cfg.no_gate {
        tape.constant(Tensor::zeros(&[l, 1]))
    } else {
        let variant = cfg.gate.variant;
        let per_head = variant.is_vector() || variant == GateVariant::Pooling;
        match *shared_gate {
            Some(g) if !per_head => g,
            _ => {
                let gv = gate_vars(cfg, b, layer)?;
                let input = GateInput {
                    x: Some(h),
                    k: Some(kh),
                    head,
                    f: cfg.feature_dim,
                };
                let g = log_gates(tape, &gv, input)?;
                if !per_head {
                    *shared_gate = Some(g);
                }
                g
            }
        }
    };
    Ok(HeadInputs {
        phi_q,
        phi_k,
        log_gamma,
    })
}

/// `y_head = gla(φq(q), φk(k), v, γ) + α_head · swa(q, k, v)` for every head,
/// concatenated. No rotary embedding.
pub fn hybrid_heads<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    b: &Bound,
    layer: usize,
    h: Var,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let hd = cfg.head_dim;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let alpha = b.get(&lname(layer, "alpha"))?;
    let mut shared_gate = None;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, head * hd, hd)?;
        let kh = tape.slice_cols(k, head * hd, hd)?;
        let vh = tape.slice_cols(v, head * hd, hd)?;
        let hi = head_inputs(tape, cfg, b, layer, head, h, qh, kh, &mut shared_gate)?;
        let g = &cfg.gla;
        let mut y = match gla_tape(tape, g.algo, hi.phi_q, hi.phi_k, vh, hi.log_gamma, g.chunk_size, g.normalize) {
            Err(Error::Precision(_)) if g.algo == Algo::Parallel => gla_tape(
                tape,
                Algo::Chunkwise,
                hi.phi_q,
                hi.phi_k,
                vh,
                hi.log_gamma,
                g.chunk_size,
                g.normalize,
            )?,
            other => other?,
        };
        if !cfg.no_swa {
            let s = tape.attention(qh, kh, vh, scale, cfg.swa.window, cfg.swa.meta_tokens)?;
            let a = tape.slice_cols(alpha, head, 1)?;
            let sa = tape.mul(s, a)?;
            y = tape.add(y, sa)?;
        }
        heads.push(y);
    }
    tape.concat_cols(&heads)
}

/// Batched mixer for a whole sequence: teacher layers (and retained student
/// layers) use softmax attention, the rest the hybrid.
pub struct SequenceMixer<'a> {
    pub cfg: &'a ModelConfig,
    pub student: bool,
    pub positions: Vec<usize>,
}

impl<T: Real> Mixer<T> for SequenceMixer<'_> {
    fn mix(
        &mut self,
        tape: &mut Tape<T>,
        b: &Bound,
        layer: usize,
        h: Var,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        if !self.student || self.cfg.is_retained(layer) {
            softmax_heads(tape, self.cfg, q, k, v, &self.positions)
        } else {
            hybrid_heads(tape, self.cfg, b, layer, h, q, k, v)
        }
    }
}
