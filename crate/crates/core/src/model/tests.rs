use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::featgate::{gate_values, hedgehog_apply, GateVariant, HedgehogMap};
use crate::gla::Algo;
use crate::numcore::Mat;
use crate::oracle::{self, grad_check, rel_diff, Objective};
use crate::refattn::{rope_transform, RopeConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

fn teacher(cfg: &ModelConfig, seed: u64) -> Model {
    Model::init_teacher(cfg.clone(), seed).unwrap()
}

/// Student whose approximation parameters are randomized away from their
/// initial values so the checks exercise every path.
fn student(cfg: &ModelConfig, seed: u64) -> Model {
    let t = teacher(cfg, seed);
    let mut s = t.to_student(cfg.clone(), seed + 1).unwrap();
    let mut r = rng(seed + 2);
    let names = s.params.names();
    for n in names {
        if ParamGroup::of(&n) == ParamGroup::Approx && n.contains(".gate.") {
            let t = s.params.get_mut(&n).unwrap();
            for x in t.data_mut() {
                *x = r.random_range(-0.5..0.5);
            }
        }
    }
    s
}

fn bind_with<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore,
    names: &[String],
    inputs: &[Var],
) -> Bound {
    let mut vars: Vec<(String, Var)> = store
        .iter()
        .filter(|(n, _)| !names.iter().any(|m| m == n))
        .map(|(n, t)| (n.to_string(), tape.constant(t.convert())))
        .collect();
    vars.extend(names.iter().cloned().zip(inputs.iter().copied()));
    Bound::from_vars(vars, false)
}

// ---- LoRA ----

#[test]
fn lora_zero_b_is_identity() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::randn(&[5, 6], 1.0, &mut rng(1)));
    let w = tape.constant(Tensor::randn(&[6, 6], 1.0, &mut rng(2)));
    let a = tape.constant(Tensor::randn(&[6, 2], 1.0, &mut rng(3)));
    let b = tape.constant(Tensor::zeros(&[2, 6]));
    let plain = tape.matmul(x, w).unwrap();
    let adapted = lora_apply(&mut tape, x, w, Some((a, b)), 2.0).unwrap();
    assert_eq!(tape.value(plain), tape.value(adapted));
}

#[test]
fn lora_two_by_two() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let a = tape.constant(Tensor::eye(2));
    let b = tape.constant(Tensor::from_rows(&[&[0.5, 0.0], &[1.0, -1.0]]).unwrap());
    let y = lora_apply(&mut tape, x, w, Some((a, b)), 2.0).unwrap();
    // 2 · [1, 2] · B = 2 · [2.5, -2]
    assert_eq!(tape.value(y).data(), &[5.0, -4.0]);
}

#[test]
fn lora_matches_expanded_matrix() {
    let (xm, wm, am, bm) = (
        Tensor::<f32>::randn(&[7, 8], 1.0, &mut rng(4)),
        Tensor::<f32>::randn(&[8, 8], 1.0, &mut rng(5)),
        Tensor::<f32>::randn(&[8, 3], 1.0, &mut rng(6)),
        Tensor::<f32>::randn(&[3, 8], 1.0, &mut rng(7)),
    );
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = [&xm, &wm, &am, &bm].iter().map(|t| tape.constant(t.convert())).collect();
    let y = lora_apply(&mut tape, vars[0], vars[1], Some((vars[2], vars[3])), 16.0 / 3.0).unwrap();
    let ab = oracle::matmul(&am.to_mat(), &bm.to_mat());
    let w = wm.to_mat::<f64>();
    let expanded = Mat::from_fn(8, 8, |i, j| w.at(i, j) + 16.0 / 3.0 * ab.at(i, j));
    let want = oracle::matmul(&xm.to_mat(), &expanded);
    assert!(rel_diff(&tape.value(y).to_mat::<f64>(), &want) < 1e-6);
}

#[test]
fn lora_gradients_reach_only_adapters() {
    let cfg = ModelConfig::tiny();
    let mut s = student(&cfg, 10);
    s.add_lora(11);
    let mut tape = Tape::<f32>::new();
    let b = s.params.bind(&mut tape, |n| ParamGroup::of(n) == ParamGroup::Lora);
    let toks = tokens(9, cfg.vocab, 12);
    let logits = s.forward(&mut tape, &b, &toks[..8]).unwrap();
    let loss = lm_loss(&mut tape, logits, &toks[1..]).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(b.trainable().len(), 6 * cfg.n_layers);
    // A gets no gradient while B = 0; B does.
    let bgrad = tape.grad(b.get("layers.0.lora_q_b").unwrap()).unwrap();
    assert!(bgrad.iter().any(|g| *g != 0.0));
    let wq = b.get("layers.0.wq").unwrap();
    assert!(tape.grad(wq).is_none());
}

#[test]
fn lora_init_leaves_logits_bitwise_equal() {
    let cfg = ModelConfig::tiny();
    let s = student(&cfg, 13);
    let toks = tokens(11, cfg.vocab, 14);
    let before = s.logits(&toks).unwrap();
    let mut adapted = s.clone();
    adapted.add_lora(15);
    assert_eq!(before, adapted.logits(&toks).unwrap());
}

#[test]
fn merged_lora_matches_adapted_model() {
    let cfg = ModelConfig::tiny();
    let mut s = student(&cfg, 16);
    s.add_lora(17);
    let mut r = rng(18);
    for n in s.params.names() {
        if n.ends_with("_b") && ParamGroup::of(&n) == ParamGroup::Lora {
            *s.params.get_mut(&n).unwrap() = Tensor::randn(&[cfg.lora.rank, cfg.d_model], 0.1, &mut r);
        }
    }
    let toks = tokens(10, cfg.vocab, 19);
    let adapted = s.logits(&toks).unwrap();
    let mut merged = s.clone();
    merged.merge_lora().unwrap();
    assert!(!merged.has_lora());
    assert!(rel_diff(&merged.logits(&toks).unwrap(), &adapted) < 1e-4);
}

// ---- LM loss ----

#[test]
fn lm_loss_uniform_logits() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(&[4, 256]));
    let loss = lm_loss(&mut tape, l, &[0, 17, 200, 255]).unwrap();
    assert!((tape.value(loss).data()[0] - 256f64.ln()).abs() < 1e-12);
}

#[test]
fn lm_loss_confident_margin() {
    // (V−1)·e^−20 < 1e-8 needs a small vocabulary.
    let mut logits = Tensor::<f64>::zeros(&[3, 4]);
    for (i, t) in [2usize, 0, 3].iter().enumerate() {
        logits.set(i, *t, 20.0);
    }
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits);
    let loss = lm_loss(&mut tape, l, &[2, 0, 3]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-8);
}

#[test]
fn lm_loss_matches_log_softmax_oracle() {
    let logits = Tensor::<f32>::randn(&[16, 30], 2.0, &mut rng(20)).convert::<f64>();
    let targets = tokens(16, 30, 21);
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits.clone());
    let loss = lm_loss(&mut tape, l, &targets).unwrap();
    let mut want = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let p = oracle::softmax(logits.row(i));
        want -= p[t].ln();
    }
    want /= 16.0;
    assert!((tape.value(loss).data()[0] - want).abs() < 1e-6);
}

#[test]
fn lm_loss_rejects_bad_targets() {
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(Tensor::zeros(&[2, 5]));
    assert!(lm_loss(&mut tape, l, &[1]).is_err());
    assert!(lm_loss(&mut tape, l, &[1, 5]).is_err());
}

// ---- teacher records ----

#[test]
fn teacher_records_recompute_attention() {
    let cfg = ModelConfig::tiny();
    let t = teacher(&cfg, 22);
    let toks = tokens(12, cfg.vocab, 23);
    let recs = teacher_forward_collect(&t, &toks).unwrap();
    assert_eq!(recs.len(), cfg.n_layers);
    assert_eq!(recs, teacher_forward_collect(&t, &toks).unwrap());
    let hd = cfg.head_dim;
    let rope = RopeConfig {
        base: cfg.rope_base,
        ..RopeConfig::new(hd)
    };
    let pos: Vec<usize> = (0..12).collect();
    for r in &recs {
        let (q, k, v) = (r.q.to_mat::<f64>(), r.k.to_mat::<f64>(), r.v.to_mat::<f64>());
        for h in 0..cfg.n_heads {
            let qr = rope_transform(&q.slice_cols(h * hd, hd), &pos, &rope).unwrap();
            let kr = rope_transform(&k.slice_cols(h * hd, hd), &pos, &rope).unwrap();
            let want = oracle::causal_attention(&qr, &kr, &v.slice_cols(h * hd, hd), 1.0 / (hd as f64).sqrt());
            let got = r.y.to_mat::<f64>().slice_cols(h * hd, hd);
            assert!(rel_diff(&got, &want) < 1e-5);
        }
    }
}

#[test]
fn teacher_records_reject_layer_mismatch_and_students() {
    let cfg = ModelConfig::tiny();
    let mut t = teacher(&cfg, 24);
    assert!(matches!(
        teacher_forward_collect(&t.to_student(cfg.clone(), 1).unwrap(), &[1, 2]),
        Err(Error::Contract(_))
    ));
    t.cfg.n_layers = 1;
    assert!(matches!(
        teacher_forward_collect(&t, &[1, 2]),
        Err(Error::ConfigMismatch(_))
    ));
    t.cfg.n_layers = 3;
    assert!(matches!(
        teacher_forward_collect(&t, &[1, 2]),
        Err(Error::ConfigMismatch(_))
    ));
}

// ---- hybrid layers ----

#[test]
fn fully_retained_student_equals_teacher() {
    let mut cfg = ModelConfig::tiny();
    let t = teacher(&cfg, 25);
    cfg.retain_full = (0..cfg.n_layers).collect();
    let s = t.to_student(cfg, 26).unwrap();
    let toks = tokens(10, s.cfg.vocab, 27);
    assert_eq!(t.logits(&toks).unwrap(), s.logits(&toks).unwrap());
}

/// Runs `hybrid_heads` of layer 0 on f64 copies of `recs[0]`.
fn hybrid_of(s: &Model, rec: &TeacherRecord) -> Mat<f64> {
    let mut tape = Tape::<f64>::new();
    let b = s.params.bind(&mut tape, |_| false);
    let [h, q, k, v] = [&rec.h, &rec.q, &rec.k, &rec.v].map(|t| tape.constant(t.convert()));
    let y = hybrid_heads(&mut tape, &s.cfg, &b, 0, h, q, k, v).unwrap();
    tape.value(y).to_mat()
}

#[test]
fn zero_alpha_unit_gates_is_plain_linear_attention() {
    let mut cfg = ModelConfig::tiny();
    cfg.no_gate = true;
    cfg.no_swa = true;
    let s = student(&cfg, 28);
    let toks = tokens(14, cfg.vocab, 29);
    let t = teacher(&cfg, 28);
    let rec = &teacher_forward_collect(&t, &toks).unwrap()[0];
    let got = hybrid_of(&s, rec);
    let hd = cfg.head_dim;
    let ones = Mat::from_fn(14, 1, |_, _| 1.0);
    for h in 0..cfg.n_heads {
        let map = |m: &str| HedgehogMap {
            w: s.params.get(&lname(0, m)).unwrap().clone(),
            activation: cfg.activation,
        };
        let q = rec.q.to_mat::<f64>().slice_cols(h * hd, hd);
        let k = rec.k.to_mat::<f64>().slice_cols(h * hd, hd);
        let v = rec.v.to_mat::<f64>().slice_cols(h * hd, hd);
        let pq = hedgehog_apply(&map("fq"), &q).unwrap();
        let pk = hedgehog_apply(&map("fk"), &k).unwrap();
        let want = oracle::gla_double_sum(&pq, &pk, &v, &ones, true);
        assert!(rel_diff(&got.slice_cols(h * hd, hd), &want) < 1e-9);
    }
}

#[test]
fn hybrid_agrees_across_algorithms() {
    for variant in GateVariant::ALL {
        let mut cfg = ModelConfig::tiny();
        cfg.gate.variant = variant;
        cfg.gla.chunk_size = 5;
        let t = teacher(&cfg, 30);
        let toks = tokens(48, cfg.vocab, 31);
        let rec = teacher_forward_collect(&t, &toks).unwrap().remove(0);
        let outs: Vec<Mat<f64>> = Algo::ALL
            .iter()
            .map(|&algo| {
                let mut c = cfg.clone();
                c.gla.algo = algo;
                let s = student(&c, 30);
                let mut tape = Tape::<f32>::new();
                let b = s.params.bind(&mut tape, |_| false);
                let [h, q, k, v] = [&rec.h, &rec.q, &rec.k, &rec.v].map(|t| tape.constant(t.clone()));
                let y = hybrid_heads(&mut tape, &s.cfg, &b, 0, h, q, k, v).unwrap();
                tape.value(y).to_mat()
            })
            .collect();
        assert!(rel_diff(&outs[1], &outs[0]) < 1e-4, "{variant} parallel");
        assert!(rel_diff(&outs[2], &outs[0]) < 1e-4, "{variant} chunkwise");
    }
}

// ---- stage-1 loss ----

#[test]
fn stage1_loss_zero_when_student_matches() {
    let cfg = ModelConfig::tiny();
    let t = teacher(&cfg, 32);
    let s = student(&cfg, 32);
    let toks = tokens(9, cfg.vocab, 33);
    let mut recs = teacher_forward_collect(&t, &toks).unwrap();
    for (l, r) in recs.iter_mut().enumerate() {
        let mut tape = Tape::<f32>::new();
        let b = s.params.bind(&mut tape, |_| false);
        let [h, q, k, v] = [&r.h, &r.q, &r.k, &r.v].map(|x| tape.constant(x.clone()));
        let y = hybrid_heads(&mut tape, &cfg, &b, l, h, q, k, v).unwrap();
        r.y = tape.value(y).clone();
    }
    let mut tape = Tape::<f32>::new();
    let b = s.params.bind(&mut tape, |_| false);
    let loss = stage1_mse_loss(&mut tape, &s, &b, &recs).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
}

#[test]
fn stage1_loss_with_zero_targets_is_output_energy() {
    let cfg = ModelConfig::tiny();
    let t = teacher(&cfg, 34);
    let s = student(&cfg, 34);
    let toks = tokens(9, cfg.vocab, 35);
    let mut recs = teacher_forward_collect(&t, &toks).unwrap();
    let mut energy = 0.0;
    for (l, r) in recs.iter_mut().enumerate() {
        r.y = Tensor::zeros(r.y.shape());
        let z = {
            let mut tape = Tape::<f64>::new();
            let b = s.params.bind(&mut tape, |_| false);
            let [h, q, k, v] = [&r.h, &r.q, &r.k, &r.v].map(|x| tape.constant(x.convert()));
            let y = hybrid_heads(&mut tape, &cfg, &b, l, h, q, k, v).unwrap();
            tape.value(y).clone()
        };
        energy += z.data().iter().map(|x| x * x).sum::<f64>();
    }
    let mut tape = Tape::<f64>::new();
    let b = s.params.bind(&mut tape, |_| false);
    let loss = stage1_mse_loss(&mut tape, &s, &b, &recs).unwrap();
    let want = energy / cfg.n_layers as f64;
    assert!((tape.value(loss).data()[0] - want).abs() <= 1e-9 * want);
}

/// Stage-1 loss from the literal definitions: Hedgehog maps, the gate's
/// values, the double-sum and per-token window oracles.
fn stage1_oracle(s: &Model, recs: &[TeacherRecord]) -> f64 {
    let cfg = &s.cfg;
    let hd = cfg.head_dim;
    let mut total = 0.0;
    let layers: Vec<usize> = (0..cfg.n_layers).filter(|&l| !cfg.is_retained(l)).collect();
    for &l in &layers {
        let r = &recs[l];
        let p = |m: &str| s.params.get(&lname(l, m)).unwrap().clone();
        let map = |m: &str| HedgehogMap {
            w: p(m),
            activation: cfg.activation,
        };
        let gate_params: Vec<Tensor> = cfg
            .gate
            .variant
            .param_shapes(cfg.d_model, cfg.n_heads, cfg.feature_dim)
            .iter()
            .map(|(n, _)| p(&format!("gate.{n}")))
            .collect();
        let alpha = p("alpha");
        let hm = r.h.to_mat::<f64>();
        for head in 0..cfg.n_heads {
            let q = r.q.to_mat::<f64>().slice_cols(head * hd, hd);
            let k = r.k.to_mat::<f64>().slice_cols(head * hd, hd);
            let v = r.v.to_mat::<f64>().slice_cols(head * hd, hd);
            let pq = hedgehog_apply(&map("fq"), &q).unwrap();
            let pk = hedgehog_apply(&map("fk"), &k).unwrap();
            let g = gate_values(cfg.gate.variant, &gate_params, Some(&hm), Some(&k), head, cfg.feature_dim)
                .unwrap();
            let lin = oracle::gla_double_sum(&pq, &pk, &v, &g.gamma, cfg.gla.normalize);
            let win = oracle::swa_attention(&q, &k, &v, 1.0 / (hd as f64).sqrt(), cfg.swa.window, cfg.swa.meta_tokens);
            let y = r.y.to_mat::<f64>().slice_cols(head * hd, hd);
            let a = alpha.data()[head] as f64;
            for i in 0..y.rows() {
                for c in 0..hd {
                    let e = y.at(i, c) - (lin.at(i, c) + a * win.at(i, c));
                    total += e * e;
                }
            }
        }
    }
    total / layers.len() as f64
}

#[test]
fn stage1_loss_matches_summation_oracle() {
    for variant in GateVariant::ALL {
        let mut cfg = ModelConfig::tiny();
        cfg.gate.variant = variant;
        let t = teacher(&cfg, 36);
        let s = student(&cfg, 36);
        let toks = tokens(13, cfg.vocab, 37);
        let recs = teacher_forward_collect(&t, &toks).unwrap();
        let mut tape = Tape::<f64>::new();
        let b = s.params.bind(&mut tape, |_| false);
        let loss = stage1_mse_loss(&mut tape, &s, &b, &recs).unwrap();
        let got = tape.value(loss).data()[0];
        let want = stage1_oracle(&s, &recs);
        assert!((got - want).abs() <= 1e-6 * want.max(1.0), "{variant}: {got} vs {want}");
    }
}

#[test]
fn stage1_loss_skips_retained_layers_and_checks_counts() {
    let mut cfg = ModelConfig::tiny();
    cfg.retain_full = vec![1];
    let t = teacher(&cfg, 38);
    let s = student(&cfg, 38);
    let recs = teacher_forward_collect(&t, &tokens(8, cfg.vocab, 39)).unwrap();
    let mut tape = Tape::<f64>::new();
    let b = s.params.bind(&mut tape, |_| false);
    let loss = stage1_mse_loss(&mut tape, &s, &b, &recs).unwrap();
    let want = stage1_oracle(&s, &recs);
    assert!((tape.value(loss).data()[0] - want).abs() <= 1e-6 * want.max(1.0));
    assert!(matches!(
        stage1_mse_loss(&mut tape, &s, &b, &recs[..1]),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn stage1_gradients_reach_only_approximation_params() {
    let cfg = ModelConfig::tiny();
    let t = teacher(&cfg, 40);
    let s = student(&cfg, 40);
    let recs = teacher_forward_collect(&t, &tokens(8, cfg.vocab, 41)).unwrap();
    let mut tape = Tape::<f32>::new();
    let b = s.params.bind(&mut tape, |n| ParamGroup::of(n) == ParamGroup::Approx);
    let loss = stage1_mse_loss(&mut tape, &s, &b, &recs).unwrap();
    tape.backward(loss).unwrap();
    for (name, v) in b.trainable() {
        let g = tape.grad(*v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|x| *x != 0.0), "{name} gradient is zero");
    }
    assert!(tape.grad(b.get("layers.0.wq").unwrap()).is_none());
}

// ---- finite-difference checks of every trainable module ----

struct Stage1Obj<'a> {
    student: &'a Model,
    recs: &'a [TeacherRecord],
    names: Vec<String>,
}

impl Objective for Stage1Obj<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let b = bind_with(tape, &self.student.params, &self.names, inputs);
        stage1_mse_loss(tape, self.student, &b, self.recs)
    }
}

struct LmObj<'a> {
    model: &'a Model,
    tokens: &'a [usize],
    names: Vec<String>,
}

impl Objective for LmObj<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let b = bind_with(tape, &self.model.params, &self.names, inputs);
        let n = self.tokens.len() - 1;
        let logits = self.model.forward(tape, &b, &self.tokens[..n])?;
        lm_loss(tape, logits, &self.tokens[1..])
    }
}

fn inputs_of(m: &Model, names: &[String]) -> Vec<Tensor> {
    names.iter().map(|n| m.params.get(n).unwrap().clone()).collect()
}

#[test]
fn stage1_gradients_match_finite_differences() {
    for variant in GateVariant::ALL {
        let mut cfg = ModelConfig::tiny();
        cfg.gate.variant = variant;
        let t = teacher(&cfg, 42);
        let s = student(&cfg, 42);
        let recs = teacher_forward_collect(&t, &tokens(7, cfg.vocab, 43)).unwrap();
        let names: Vec<String> = s
            .params
            .names()
            .into_iter()
            .filter(|n| n.starts_with("layers.0.") && ParamGroup::of(n) == ParamGroup::Approx)
            .collect();
        let obj = Stage1Obj {
            student: &s,
            recs: &recs,
            names: names.clone(),
        };
        let gc = grad_check(&obj, &inputs_of(&s, &names), 1e-4).unwrap();
        assert!(gc.max_rel_err < 1e-3, "{variant}: {} at {:?} ({})", gc.max_rel_err, gc.worst, names[gc.worst.0]);
    }
}

#[test]
fn student_lm_gradients_match_finite_differences() {
    let mut cfg = ModelConfig::tiny();
    cfg.retain_full = vec![1];
    let mut s = student(&cfg, 44);
    s.add_lora(45);
    let mut r = rng(46);
    for n in s.params.names() {
        if n.ends_with("_b") && ParamGroup::of(&n) == ParamGroup::Lora {
            *s.params.get_mut(&n).unwrap() = Tensor::randn(&[cfg.lora.rank, cfg.d_model], 0.2, &mut r);
        }
    }
    let toks = tokens(8, cfg.vocab, 47);
    let names: Vec<String> = [
        "layers.0.lora_q_a",
        "layers.0.lora_k_b",
        "layers.1.lora_v_a",
        "layers.0.fq",
        "layers.0.fk",
        "layers.0.alpha",
        "layers.0.gate.w",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let obj = LmObj {
        model: &s,
        tokens: &toks,
        names: names.clone(),
    };
    let gc = grad_check(&obj, &inputs_of(&s, &names), 1e-4).unwrap();
    assert!(gc.max_rel_err < 1e-3, "{} at {:?} ({})", gc.max_rel_err, gc.worst, names[gc.worst.0]);
}

#[test]
fn teacher_lm_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let t = teacher(&cfg, 48);
    let toks = tokens(8, cfg.vocab, 49);
    let names: Vec<String> = ["layers.1.wq", "layers.0.wo", "layers.0.w1", "layers.1.norm2", "norm_f"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let obj = LmObj {
        model: &t,
        tokens: &toks,
        names: names.clone(),
    };
    let gc = grad_check(&obj, &inputs_of(&t, &names), 1e-4).unwrap();
    assert!(gc.max_rel_err < 1e-3, "{} at {:?} ({})", gc.max_rel_err, gc.worst, names[gc.worst.0]);
}

// ---- decode ----

fn decode_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::tiny();
    cfg.retain_full = vec![1];
    student(&cfg, seed)
}

#[test]
fn greedy_decode_matches_batched_argmax() {
    for variant in GateVariant::ALL {
        let mut m = decode_model(50);
        m.cfg.gate.variant = variant;
        let m = m.to_student(m.cfg.clone(), 51).unwrap();
        let prompt = [BOS, 72, 105];
        let gen = greedy_decode(&m, &prompt, 61).unwrap();
        let seq: Vec<usize> = prompt.iter().copied().chain(gen.iter().copied()).collect();
        assert_eq!(seq.len(), 64);
        let batch = m.logits(&seq[..63]).unwrap();
        for i in prompt.len() - 1..63 {
            assert_eq!(argmax(batch.row(i)), seq[i + 1], "{variant} position {i}");
        }
    }
}

#[test]
fn decode_logits_track_batch_forward() {
    let m = decode_model(52);
    let toks = tokens(30, m.cfg.vocab, 53);
    let batch = m.logits(&toks).unwrap();
    let mut s = DecodeSession::new(&m).unwrap();
    let mut stream = Mat::zeros(30, m.cfg.vocab);
    for (i, &t) in toks.iter().enumerate() {
        stream.row_mut(i).copy_from_slice(&student_decode_step(&mut s, t).unwrap());
    }
    assert!(rel_diff(&stream, &batch) < 1e-4);
}

#[test]
fn decode_state_is_constant_for_linear_layers() {
    let mut cfg = ModelConfig::tiny();
    cfg.retain_full = vec![];
    let m = student(&cfg, 54);
    let wm = cfg.swa.window + cfg.swa.meta_tokens;
    let (f2, dv, d) = (2 * cfg.feature_dim, cfg.head_dim, cfg.head_dim);
    let per_head = (f2 * dv + f2 + 1) + 2 * d * wm;
    let mut s = DecodeSession::new(&m).unwrap();
    s.step(BOS).unwrap();
    let first = s.float_count();
    assert_eq!(first, per_head * cfg.n_heads * cfg.n_layers);
    for i in 1..10 * wm {
        s.step(i % 256).unwrap();
    }
    assert_eq!(s.float_count(), first);
}

#[test]
fn retained_layer_cache_grows_linearly() {
    let m = decode_model(55);
    let cfg = &m.cfg;
    let mut s = DecodeSession::new(&m).unwrap();
    let mut counts = Vec::new();
    for i in 0..20 {
        s.step(i).unwrap();
        counts.push(s.float_count());
    }
    let per_token = 2 * cfg.d_model;
    for w in counts.windows(2) {
        assert_eq!(w[1] - w[0], per_token);
    }
}

#[test]
fn decode_rejects_unknown_tokens() {
    let m = decode_model(56);
    let mut s = DecodeSession::new(&m).unwrap();
    assert!(matches!(
        s.step(m.cfg.vocab),
        Err(Error::TokenOutOfRange { .. })
    ));
}

// ---- checkpoints ----

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut s = decode_model(57);
    s.add_lora(58);
    let bytes = encode_checkpoint(&s).unwrap();
    assert_eq!(&bytes[..4], b"LZRD");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, s);
    for (n, t) in s.params.iter() {
        let b = back.params.get(n).unwrap();
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lzrd");
    save_checkpoint(&s, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), s);
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let t = teacher(&ModelConfig::tiny(), 59);
    let bytes = encode_checkpoint(&t).unwrap();
    for cut in [0, 3, 7, 11, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
            "cut at {cut}"
        );
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint(&extra), Err(Error::CorruptCheckpoint(_))));
}

/// Rewrites the JSON header of an encoded checkpoint.
fn edit_header(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    f(&mut header);
    let h = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&bytes[12 + hlen..]);
    out
}

#[test]
fn altered_layer_count_is_config_mismatch() {
    let t = teacher(&ModelConfig::tiny(), 60);
    let bytes = encode_checkpoint(&t).unwrap();
    for n in [1, 3] {
        let edited = edit_header(&bytes, |h| h["config"]["n_layers"] = n.into());
        assert!(matches!(decode_checkpoint(&edited), Err(Error::ConfigMismatch(_))));
    }
}

#[test]
fn altered_shapes_are_corrupt() {
    let t = teacher(&ModelConfig::tiny(), 61);
    let bytes = encode_checkpoint(&t).unwrap();
    let edited = edit_header(&bytes, |h| h["tensors"][0]["name"] = "layers.0.bogus".into());
    assert!(matches!(decode_checkpoint(&edited), Err(Error::CorruptCheckpoint(_))));
    let edited = edit_header(&bytes, |h| h["config"]["d_ff"] = 20.into());
    assert!(matches!(decode_checkpoint(&edited), Err(Error::CorruptCheckpoint(_))));
    let edited = edit_header(&bytes, |h| h["tensors"][0]["dtype"] = "f16".into());
    assert!(matches!(decode_checkpoint(&edited), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn student_keeps_teacher_base_weights() {
    let cfg = ModelConfig::tiny();
    let t = teacher(&cfg, 62);
    let s = t.to_student(cfg, 63).unwrap();
    assert_eq!(t.params.group_hash(ParamGroup::Base), s.params.group_hash(ParamGroup::Base));
    let mut other = ModelConfig::tiny();
    other.n_layers = 3;
    assert!(matches!(t.to_student(other, 1), Err(Error::ConfigMismatch(_))));
}
