//! Self-check suite behind `lizard verify`: every fast path against its
//! literal oracle, plus the contracts the rest of the crate relies on.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featgate::{gate_values, GateVariant};
use crate::gla::{gla_chunkwise, gla_parallel, gla_recurrent, gla_tape, Algo};
use crate::model::{argmax, lm_loss, Bound, DecodeSession, Model, ModelConfig, ParamGroup, ParamStore};
use crate::numcore::{Mat, Real, Tape, Tensor, Var};
use crate::oracle::{self, grad_check, rel_diff, Objective};
use crate::refattn::causal_softmax_attention;
use crate::swa::{build_swa_mask, swa_forward, SwaCache, SwaConfig};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<String>;

pub const CHECKS: [(&str, Check); 7] = [
    ("gla-three-way", gla_three_way),
    ("gla-long-sequence-stability", gla_stability),
    ("swa-reductions", swa_reductions),
    ("decode-constant-memory", decode_constant_memory),
    ("gradients", gradients),
    ("checkpoint-round-trip", checkpoint_round_trip),
    ("bench-cross-check", bench_cross_check),
];

/// Runs every check, reporting each as it finishes. A check that returns
/// an error or panics counts as failed.
pub fn run_all(mut report: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match std::panic::catch_unwind(check) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(e)) => (false, e.to_string()),
                Err(_) => (false, "panicked".into()),
            };
            let o = CheckOutcome {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            };
            report(&o);
            o
        })
        .collect()
}

fn fail<T>(msg: String) -> Result<T> {
    Err(Error::Contract(msg))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        fail(msg())
    }
}

struct GlaCase {
    phi_q: Mat<f64>,
    phi_k: Mat<f64>,
    v: Mat<f64>,
    log_gamma: Mat<f64>,
}

/// Random positive features and gates produced by `variant` from random
/// inputs, so every gate shape is exercised.
fn gla_case(l: usize, variant: GateVariant, rng: &mut ChaCha8Rng) -> Result<GlaCase> {
    let (d, hd, f, dv) = (8, 4, 3, 4);
    let feats = 2 * f;
    let pos = |rng: &mut ChaCha8Rng| Mat::from_fn(l, feats, |_, _| rng.random_range(0.05..1.0));
    let phi_q = pos(rng);
    let phi_k = pos(rng);
    let v = Tensor::randn(&[l, dv], 1.0, rng).to_mat();
    let x = Tensor::randn(&[l, d], 1.0, rng).to_mat::<f64>();
    let k = Tensor::randn(&[l, hd], 1.0, rng).to_mat::<f64>();
    let params: Vec<Tensor> = variant
        .param_shapes(d, 2, f)
        .into_iter()
        .map(|(_, s)| Tensor::randn(&s, 0.5, rng))
        .collect();
    let g = gate_values(variant, &params, Some(&x), Some(&k), 1, f)?;
    let mut log_gamma = g.gamma.map(f64::ln);
    // keep the cumulative decay inside the parallel form's valid range
    let total = log_gamma.rows() as f64 * log_gamma.data().iter().fold(0.0f64, |m, &v| m.min(v));
    if total < -40.0 {
        log_gamma = log_gamma.map(|v| v * 40.0 / -total);
    }
    Ok(GlaCase {
        phi_q,
        phi_k,
        v,
        log_gamma,
    })
}

fn three_forms<T: Real>(c: &GlaCase, chunk: usize) -> Result<[Mat<T>; 3]> {
    let (q, k, v, lg) = (c.phi_q.convert(), c.phi_k.convert(), c.v.convert(), c.log_gamma.convert());
    Ok([
        gla_recurrent(&q, &k, &v, &lg, true)?.0,
        gla_parallel(&q, &k, &v, &lg, true)?,
        gla_chunkwise(&q, &k, &v, &lg, chunk, true)?,
    ])
}

fn gla_three_way() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for case in 0..200 {
        let l = rng.random_range(1..=64);
        let chunk = [1, 3, 16, l][case % 4];
        let variant = GateVariant::ALL[(case / 4) % 4];
        let c = gla_case(l, variant, &mut rng)?;
        let want = oracle::gla_double_sum(&c.phi_q, &c.phi_k, &c.v, &c.log_gamma.map(f64::exp), true);
        let [r32, p32, c32] = three_forms::<f32>(&c, chunk)?;
        let [r64, p64, c64] = three_forms::<f64>(&c, chunk)?;
        let e32 = rel_diff(&p32, &r32).max(rel_diff(&c32, &r32)).max(rel_diff(&r32, &want));
        let e64 = rel_diff(&p64, &r64).max(rel_diff(&c64, &r64)).max(rel_diff(&r64, &want));
        worst32 = worst32.max(e32);
        worst64 = worst64.max(e64);
        ensure(e32 <= 1e-4 && e64 <= 1e-9, || {
            format!("case {case} (L={l}, B={chunk}, {variant}): f32 {e32:.2e}, f64 {e64:.2e}")
        })?;
    }
    Ok(format!("200 cases, worst f32 {worst32:.2e}, f64 {worst64:.2e}"))
}

fn gla_stability() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let l = 512;
    let pos = |rng: &mut ChaCha8Rng| Mat::from_fn(l, 8, |_, _| rng.random_range(0.05f64..1.0));
    let (q, k) = (pos(&mut rng), pos(&mut rng));
    let v = Tensor::randn(&[l, 4], 1.0, &mut rng).to_mat::<f64>();
    let lg = Mat::from_fn(l, 1, |_, _| rng.random_range(0.45f64..0.55).ln());
    let want = gla_recurrent(&q, &k, &v, &lg, true)?.0;
    let (q32, k32, v32, lg32) = (q.convert::<f32>(), k.convert(), v.convert(), lg.convert());
    let tripped = matches!(gla_parallel(&q32, &k32, &v32, &lg32, true), Err(Error::Precision(_)));
    ensure(tripped, || "parallel form did not refuse L=512 with gates near 0.5".into())?;
    let y = gla_chunkwise(&q32, &k32, &v32, &lg32, 64, true)?;
    let e = rel_diff(&y, &want);
    ensure(y.all_finite() && e <= 1e-3, || format!("chunkwise error {e:.2e}"))?;
    Ok(format!("guard tripped; chunkwise vs f64 recurrent {e:.2e}"))
}

fn swa_reductions() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (l, d) = (24, 8);
    let r = |rng: &mut ChaCha8Rng| Tensor::randn(&[l, d], 1.0, rng).to_mat::<f64>();
    let (q, k, v) = (r(&mut rng), r(&mut rng), r(&mut rng));
    let wide = swa_forward(&q, &k, &v, &SwaConfig::new(l, 0))?;
    let full = causal_softmax_attention(&q, &k, &v, 1.0 / (d as f64).sqrt())?;
    let e_full = wide.max_abs_diff(&full);
    ensure(e_full <= 1e-6, || format!("wide window differs from causal attention by {e_full:.2e}"))?;

    let mask = build_swa_mask(6, &SwaConfig::new(3, 2));
    for i in 0..6 {
        for t in 0..6 {
            let open = t <= i && (t < 2 || i - t < 3);
            ensure((mask.at(i, t) == 0.0) == open, || format!("mask cell ({i},{t}) wrong"))?;
        }
    }

    let cfg = SwaConfig::new(5, 2);
    let n = 64;
    let r = |rng: &mut ChaCha8Rng| Tensor::randn(&[n, d], 1.0, rng).to_mat::<f32>();
    let (q, k, v) = (r(&mut rng), r(&mut rng), r(&mut rng));
    let batch = swa_forward(&q, &k, &v, &cfg)?;
    let mut cache = SwaCache::new(cfg, d, d)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut e_stream = 0.0f64;
    for t in 0..n {
        let y = cache.step_token(t, q.row(t), k.row(t), v.row(t), scale)?;
        for (a, b) in y.iter().zip(batch.row(t)) {
            e_stream = e_stream.max((a - b).abs() as f64);
        }
    }
    ensure(e_stream <= 1e-5, || format!("streaming differs from batch by {e_stream:.2e}"))?;
    Ok(format!("wide {e_full:.1e}, mask ok, streaming {e_stream:.1e}"))
}

fn tiny_student(seed: u64) -> Result<Model> {
    let cfg = ModelConfig::tiny();
    Model::init_teacher(cfg.clone(), seed)?.to_student(cfg, seed + 1)
}

fn decode_constant_memory() -> Result<String> {
    let s = tiny_student(4)?;
    let swa = s.cfg.swa;
    let horizon = 10 * (swa.window + swa.meta_tokens);
    let mut session = DecodeSession::new(&s)?;
    let mut logits = session.step(crate::model::BOS)?;
    let first = session.float_count();
    let mut tokens = vec![crate::model::BOS];
    while session.position() < horizon.max(64) {
        let t = argmax(&logits);
        tokens.push(t);
        logits = session.step(t)?;
        if session.position() == horizon {
            let now = session.float_count();
            ensure(now == first, || format!("float count {first} at step 1, {now} at step {horizon}"))?;
        }
    }
    let batch = s.logits(&tokens[..64])?;
    for (i, w) in tokens[1..64].iter().enumerate() {
        let b = argmax(batch.row(i));
        ensure(b == *w, || format!("greedy step {i}: streamed {w}, batched {b}"))?;
    }
    Ok(format!("{first} floats held constant over {horizon} steps; 64 greedy tokens match"))
}

struct GlaObjective;

impl Objective for GlaObjective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let q = tape.exp(v[0])?;
        let k = tape.exp(v[1])?;
        let z = tape.neg(v[3])?;
        let sp = tape.softplus(z)?;
        let lg = tape.neg(sp)?;
        let y = gla_tape(tape, Algo::Chunkwise, q, k, v[2], lg, 4, true)?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    }
}

struct LmObjective<'a> {
    model: &'a Model,
    names: Vec<String>,
    tokens: Vec<usize>,
}

impl Objective for LmObjective<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let b = bind_overriding(tape, &self.model.params, &self.names, inputs);
        let n = self.tokens.len() - 1;
        let logits = self.model.forward(tape, &b, &self.tokens[..n])?;
        lm_loss(tape, logits, &self.tokens[1..])
    }
}

fn bind_overriding<T: Real>(tape: &mut Tape<T>, store: &ParamStore, names: &[String], inputs: &[Var]) -> Bound {
    let mut vars: Vec<(String, Var)> = store
        .iter()
        .filter(|(n, _)| !names.iter().any(|m| m == n))
        .map(|(n, t)| (n.to_string(), tape.constant(t.convert())))
        .collect();
    vars.extend(names.iter().cloned().zip(inputs.iter().copied()));
    Bound::from_vars(vars, false)
}

fn gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // 11 tokens over chunks of 4 crosses two chunk boundaries
    let inputs: Vec<Tensor> = [[11, 3], [11, 3], [11, 2], [11, 1]]
        .iter()
        .map(|s| Tensor::randn(s, 0.7, &mut rng))
        .collect();
    let g = grad_check(&GlaObjective, &inputs, 1e-5)?;
    ensure(g.max_rel_err <= 1e-3, || format!("chunkwise GLA gradient error {:.2e}", g.max_rel_err))?;
    let mut worst = g.max_rel_err;

    for variant in GateVariant::ALL {
        let mut cfg = ModelConfig::tiny();
        cfg.gate.variant = variant;
        let t = Model::init_teacher(cfg.clone(), 6)?;
        let mut s = t.to_student(cfg, 7)?;
        s.add_lora(8);
        // move adapters and gates off their initial values
        for n in s.params.names() {
            if ParamGroup::of(&n) != ParamGroup::Base {
                for x in s.params.get_mut(&n).expect("listed").data_mut() {
                    *x += rng.random_range(-0.3f32..0.3);
                }
            }
        }
        let names: Vec<String> = s
            .params
            .names()
            .into_iter()
            .filter(|n| n.starts_with("layers.0.") && ParamGroup::of(n) != ParamGroup::Base)
            .collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| s.params.get(n).expect("listed").clone()).collect();
        let tokens = (0..9).map(|_| rng.random_range(0..s.cfg.vocab)).collect();
        let obj = LmObjective {
            model: &s,
            names,
            tokens,
        };
        let g = grad_check(&obj, &inputs, 1e-4)?;
        ensure(g.max_rel_err <= 1e-3, || {
            format!("{variant} student gradient error {:.2e}", g.max_rel_err)
        })?;
        worst = worst.max(g.max_rel_err);
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn checkpoint_round_trip() -> Result<String> {
    let mut s = tiny_student(9)?;
    s.add_lora(10);
    let bytes = crate::model::encode_checkpoint(&s)?;
    let back = crate::model::decode_checkpoint(&bytes)?;
    ensure(back == s, || "decoded checkpoint differs".into())?;
    ensure(crate::model::decode_checkpoint(&bytes[..bytes.len() - 1]).is_err(), || {
        "truncated checkpoint accepted".into()
    })?;
    Ok(format!("{} bytes", bytes.len()))
}

fn bench_cross_check() -> Result<String> {
    let cfg = crate::bench::KernelBenchConfig {
        lengths: vec![256],
        chunk_sizes: vec![16, 64],
        features: 16,
        head_dim: 16,
        timing: crate::bench::Timing { warmups: 0, trials: 1 },
        ..Default::default()
    };
    let r = crate::bench::bench_kernel(&cfg)?;
    Ok(format!("contestants agree within {:.2e}", r.max_rel_diff[0].1))
}
