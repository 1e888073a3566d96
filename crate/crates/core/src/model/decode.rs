//! Token-by-token generation.
//!
//! Linearized layers keep one [`RecurrentState`] and one [`SwaCache`] per
//! head, so their memory is fixed; retained softmax layers keep a growing
//! key/value cache.

use crate::error::{Error, Result};
use crate::gla::{gla_step, RecurrentState};
use crate::numcore::{dense::dot, rope_tables, rotate_pairs, Tape, Tensor, Var};
use crate::swa::SwaCache;

use super::layer::{self, head_inputs, lname, Mixer};
use super::params::Bound;
use super::Model;

#[derive(Clone)]
enum LayerState {
    /// Rotated keys and values of every past token, per head.
    Full { keys: Vec<Vec<f32>>, values: Vec<Vec<f32>> },
    Linear { heads: Vec<(RecurrentState<f32>, SwaCache<f32>)> },
}

impl LayerState {
    fn float_count(&self) -> usize {
        match self {
            LayerState::Full { keys, values } => {
                keys.iter().chain(values).map(Vec::len).sum()
            }
            LayerState::Linear { heads } => heads
                .iter()
                .map(|(s, c)| s.float_count() + c.float_count())
                .sum(),
        }
    }
}

/// Streaming inference over one sequence.
pub struct DecodeSession<'m> {
    model: &'m Model,
    tape: Tape<f32>,
    bound: Bound,
    base_len: usize,
    layers: Vec<LayerState>,
    pos: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let cfg = &model.cfg;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_| false);
        let base_len = tape.len();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            if !model.student || cfg.is_retained(l) {
                layers.push(LayerState::Full {
                    keys: vec![Vec::new(); cfg.n_heads],
                    values: vec![Vec::new(); cfg.n_heads],
                });
            } else {
                let f2 = 2 * cfg.feature_dim;
                let heads = (0..cfg.n_heads)
                    .map(|_| {
                        Ok((
                            RecurrentState::new(f2, cfg.head_dim),
                            SwaCache::new(cfg.swa, cfg.head_dim, cfg.head_dim)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                layers.push(LayerState::Linear { heads });
            }
        }
        Ok(Self {
            model,
            tape,
            bound,
            base_len,
            layers,
            pos: 0,
        })
    }

    /// Independent copy of this session's state at the current position.
    pub fn fork(&self) -> Result<Self> {
        let mut s = Self::new(self.model)?;
        s.layers = self.layers.clone();
        s.pos = self.pos;
        Ok(s)
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Floats of per-sequence state (parameters excluded).
    pub fn float_count(&self) -> usize {
        self.layers.iter().map(LayerState::float_count).sum()
    }

    /// Consumes `token` and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f32>> {
        let model = self.model;
        model.check_tokens(&[token])?;
        self.tape.truncate(self.base_len);
        let tape = &mut self.tape;
        let b = &self.bound;
        let mut mixer = DecodeMixer {
            model,
            layers: &mut self.layers,
            pos: self.pos,
        };
        let mut x = tape.gather_rows(b.get("embed")?, &[token])?;
        for l in 0..model.cfg.n_layers {
            x = layer::block(tape, &model.cfg, b, l, x, &mut mixer)?.0;
        }
        let h = tape.rms_norm(x, b.get("norm_f")?, layer::NORM_EPS)?;
        let logits = tape.matmul(h, b.get("head")?)?;
        self.pos += 1;
        Ok(tape.value(logits).data().to_vec())
    }
}

struct DecodeMixer<'a> {
    model: &'a Model,
    layers: &'a mut [LayerState],
    pos: usize,
}

impl Mixer<f32> for DecodeMixer<'_> {
    fn mix(
        &mut self,
        tape: &mut Tape<f32>,
        b: &Bound,
        layer: usize,
        h: Var,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let cfg = &self.model.cfg;
        let hd = cfg.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0f32; cfg.n_heads * hd];
        match &mut self.layers[layer] {
            LayerState::Full { keys, values } => {
                let (cos, sin) = rope_tables::<f32>(&[self.pos], hd, cfg.rope_base);
                for head in 0..cfg.n_heads {
                    let cols = head * hd..(head + 1) * hd;
                    let mut qr = vec![0.0; hd];
                    let mut kr = vec![0.0; hd];
                    rotate_pairs(&tape.value(q).data()[cols.clone()], &mut qr, &cos, &sin, hd, false);
                    rotate_pairs(&tape.value(k).data()[cols.clone()], &mut kr, &cos, &sin, hd, false);
                    keys[head].extend_from_slice(&kr);
                    values[head].extend_from_slice(&tape.value(v).data()[cols.clone()]);
                    attend(&qr, &keys[head], &values[head], scale, &mut out[cols]);
                }
            }
            LayerState::Linear { heads } => {
                let alpha = tape.value(b.get(&lname(layer, "alpha"))?).data().to_vec();
                let mut shared = None;
                for (head, (state, cache)) in heads.iter_mut().enumerate() {
                    let qh = tape.slice_cols(q, head * hd, hd)?;
                    let kh = tape.slice_cols(k, head * hd, hd)?;
                    let hi = head_inputs(tape, cfg, b, layer, head, h, qh, kh, &mut shared)?;
                    let vh = &tape.value(v).data()[head * hd..(head + 1) * hd];
                    let mut y = gla_step(
                        state,
                        tape.value(hi.phi_q).data(),
                        tape.value(hi.phi_k).data(),
                        vh,
                        tape.value(hi.log_gamma).data(),
                        cfg.gla.normalize,
                    )?;
                    if !cfg.no_swa {
                        let s = cache.step_token(
                            self.pos,
                            tape.value(qh).data(),
                            tape.value(kh).data(),
                            vh,
                            scale,
                        )?;
                        for (a, s) in y.iter_mut().zip(s) {
                            *a += alpha[head] * s;
                        }
                    }
                    out[head * hd..(head + 1) * hd].copy_from_slice(&y);
                }
            }
        }
        Ok(tape.constant(Tensor::new(vec![1, cfg.n_heads * hd], out)?))
    }
}

/// Softmax attention of one query over all cached keys.
fn attend(q: &[f32], keys: &[f32], values: &[f32], scale: f64, out: &mut [f32]) {
    let d = q.len();
    let scores: Vec<f64> = keys.chunks(d).map(|k| dot(q, k) * scale).collect();
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut acc = vec![0.0f64; out.len()];
    for (wi, vrow) in w.iter().zip(values.chunks(out.len())) {
        for (a, &x) in acc.iter_mut().zip(vrow) {
            *a += wi / z * x as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

/// One decode step on an existing session.
pub fn student_decode_step(session: &mut DecodeSession<'_>, token: usize) -> Result<Vec<f32>> {
    session.step(token)
}

/// Index of the largest entry (first on ties).
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Feeds `prompt` and then generates `n` tokens greedily.
pub fn greedy_decode(model: &Model, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("greedy decode needs a prompt".into()));
    }
    let mut s = DecodeSession::new(model)?;
    let mut logits = Vec::new();
    for &t in prompt {
        logits = s.step(t)?;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = argmax(&logits);
        out.push(t);
        if i + 1 < n {
            logits = s.step(t)?;
        }
    }
    Ok(out)
}
