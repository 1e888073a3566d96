//! Teacher transformer and linearized student.
//!
//! Parameters live in a flat [`ParamStore`] keyed by dotted names
//! (`layers.3.wq`, `layers.3.gate.w`, ...). A forward pass binds them to a
//! tape, so the same code serves training (`f32`), finite-difference checks
//! (`f64`) and inference.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod layer;
pub mod loss;
pub mod params;
pub mod teacher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featgate::HedgehogMap;
use crate::numcore::{Mat, Real, Tape, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{
    GateConfig, GlaConfig, LoraConfig, ModelConfig, BOS, DEFAULT_VOCAB, MAX_META_TOKENS, META_BASE, PAD,
};
pub use decode::{argmax, greedy_decode, student_decode_step, DecodeSession};
pub use layer::{hybrid_heads, lname, lora_apply, Mixer, SequenceMixer};
pub use loss::{lm_loss, stage1_mse_loss};
pub use params::{Bound, ParamGroup, ParamStore};
pub use teacher::{teacher_forward_collect, TeacherRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// Whether non-retained layers run the linearized hybrid attention.
    pub student: bool,
}

impl Model {
    /// Randomly initialized softmax-attention transformer.
    pub fn init_teacher(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let std_d = 1.0 / (d as f32).sqrt();
        let depth = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        let mut p = ParamStore::new();
        p.insert("embed", Tensor::randn(&[cfg.vocab, d], 1.0, &mut rng));
        for l in 0..cfg.n_layers {
            p.insert(lname(l, "norm1"), Tensor::full(&[1, d], 1.0));
            for w in ["wq", "wk", "wv"] {
                p.insert(lname(l, w), Tensor::randn(&[d, d], std_d, &mut rng));
            }
            p.insert(lname(l, "wo"), Tensor::randn(&[d, d], std_d * depth, &mut rng));
            p.insert(lname(l, "norm2"), Tensor::full(&[1, d], 1.0));
            p.insert(lname(l, "w1"), Tensor::randn(&[d, cfg.d_ff], std_d, &mut rng));
            let std_ff = 1.0 / (cfg.d_ff as f32).sqrt();
            p.insert(lname(l, "w2"), Tensor::randn(&[cfg.d_ff, d], std_ff * depth, &mut rng));
        }
        p.insert("norm_f", Tensor::full(&[1, d], 1.0));
        p.insert("head", Tensor::randn(&[d, cfg.vocab], std_d, &mut rng));
        Ok(Self {
            cfg,
            params: p,
            student: false,
        })
    }

    /// Student sharing this model's weights, with fresh feature maps,
    /// gates and mixing scalars on every non-retained layer. `cfg` may
    /// change student-only settings but must keep the architecture.
    pub fn to_student(&self, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_same_arch(&self.cfg, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.params.clone();
        params.remove_where(|n| ParamGroup::of(n) != ParamGroup::Base);
        for l in (0..cfg.n_layers).filter(|&l| !cfg.is_retained(l)) {
            for m in ["fq", "fk"] {
                let map = HedgehogMap::init(cfg.head_dim, cfg.feature_dim, cfg.activation, &mut rng);
                params.insert(lname(l, m), map.w);
            }
            for (name, t) in
                cfg.gate
                    .variant
                    .init_params(cfg.d_model, cfg.n_heads, cfg.feature_dim, &mut rng)
            {
                params.insert(lname(l, &format!("gate.{name}")), t);
            }
            let alpha = if cfg.no_swa { 0.0 } else { 1.0 };
            params.insert(lname(l, "alpha"), Tensor::full(&[1, cfg.n_heads], alpha));
        }
        Ok(Self {
            cfg,
            params,
            student: true,
        })
    }

    /// Adds rank-`r` adapters to `W_Q`, `W_K`, `W_V` of every layer;
    /// `B = 0` so the model's outputs are unchanged.
    pub fn add_lora(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (self.cfg.d_model, self.cfg.lora.rank);
        for l in 0..self.cfg.n_layers {
            for m in ["q", "k", "v"] {
                let a = Tensor::randn(&[d, r], 1.0 / (d as f32).sqrt(), &mut rng);
                self.params.insert(lname(l, &format!("lora_{m}_a")), a);
                self.params.insert(lname(l, &format!("lora_{m}_b")), Tensor::zeros(&[r, d]));
            }
        }
    }

    pub fn has_lora(&self) -> bool {
        self.params.iter().any(|(n, _)| ParamGroup::of(n) == ParamGroup::Lora)
    }

    /// Folds adapters into the base projections and removes them.
    pub fn merge_lora(&mut self) -> Result<()> {
        let s = self.cfg.lora.scale();
        for l in 0..self.cfg.n_layers {
            for m in ["q", "k", "v"] {
                let (an, bn) = (lname(l, &format!("lora_{m}_a")), lname(l, &format!("lora_{m}_b")));
                let (Some(a), Some(b)) = (self.params.get(&an), self.params.get(&bn)) else {
                    continue;
                };
                let delta = a.to_mat::<f32>().matmul(&b.to_mat());
                let wn = lname(l, &format!("w{m}"));
                let w = self.params.require(&wn)?;
                let mut merged = w.clone();
                for (x, dlt) in merged.data_mut().iter_mut().zip(delta.data()) {
                    *x += s * dlt;
                }
                self.params.insert(wn, merged);
            }
        }
        self.params.remove_where(|n| ParamGroup::of(n) == ParamGroup::Lora);
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        match tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab,
            }),
            None => Ok(()),
        }
    }

    /// Next-token logits `[L, vocab]` for every position.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let mut mixer = SequenceMixer {
            cfg: &self.cfg,
            student: self.student,
            positions: (0..tokens.len()).collect(),
        };
        let mut x = tape.gather_rows(b.get("embed")?, tokens)?;
        for l in 0..self.cfg.n_layers {
            x = layer::block(tape, &self.cfg, b, l, x, &mut mixer)?.0;
        }
        let h = tape.rms_norm(x, b.get("norm_f")?, layer::NORM_EPS)?;
        tape.matmul(h, b.get("head")?)
    }

    /// Inference-only logits.
    pub fn logits(&self, tokens: &[usize]) -> Result<Mat<f32>> {
        let mut tape = Tape::<f32>::new();
        let b = self.params.bind(&mut tape, |_| false);
        let y = self.forward(&mut tape, &b, tokens)?;
        Ok(tape.value(y).to_mat())
    }

    /// Floats held by the parameters.
    pub fn float_count(&self) -> usize {
        self.params.float_count()
    }
}

fn check_same_arch(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    let fields = [
        ("vocab", a.vocab, b.vocab),
        ("d_model", a.d_model, b.d_model),
        ("n_heads", a.n_heads, b.n_heads),
        ("n_layers", a.n_layers, b.n_layers),
        ("head_dim", a.head_dim, b.head_dim),
        ("d_ff", a.d_ff, b.d_ff),
    ];
    for (name, x, y) in fields {
        if x != y {
            return Err(Error::ConfigMismatch(format!("{name}: {x} vs {y}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
