use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{Tape, Tensor, Var};
use crate::oracle::{self, grad_check, rel_diff, Objective};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Case {
    q: Mat<f64>,
    k: Mat<f64>,
    v: Mat<f64>,
    lg: Mat<f64>,
}

fn case(l: usize, f: usize, dv: usize, vector_gates: bool, lo: f32, seed: u64) -> Case {
    let mut r = rng(seed);
    let q = Tensor::uniform(&[l, f], 0.05, 1.0, &mut r).to_mat();
    let k = Tensor::uniform(&[l, f], 0.05, 1.0, &mut r).to_mat();
    let v = Tensor::randn(&[l, dv], 1.0, &mut r).to_mat();
    let g = Tensor::uniform(&[l, if vector_gates { f } else { 1 }], lo, 1.0, &mut r);
    let lg = g.to_mat::<f64>().map(f64::ln);
    Case { q, k, v, lg }
}

impl Case {
    fn at<T: Real>(&self) -> (Mat<T>, Mat<T>, Mat<T>, Mat<T>) {
        (self.q.convert(), self.k.convert(), self.v.convert(), self.lg.convert())
    }
}

#[test]
fn single_token_returns_value() {
    let c = case(1, 4, 3, false, 0.5, 1);
    let (y, _) = gla_recurrent(&c.q, &c.k, &c.v, &c.lg, true).unwrap();
    assert!(y.max_abs_diff(&c.v) < 1e-15);
}

#[test]
fn unit_gates_reduce_to_linear_attention() {
    let mut c = case(12, 4, 3, false, 0.5, 2);
    c.lg = Mat::zeros(12, 1);
    let (q, k, v, lg) = c.at::<f32>();
    let (y, _) = gla_recurrent(&q, &k, &v, &lg, true).unwrap();
    // cumulative-sum oracle
    let mut want = Mat::zeros(12, 3);
    let mut s = Mat::<f64>::zeros(4, 3);
    let mut z = [0.0f64; 4];
    for t in 0..12 {
        for a in 0..4 {
            z[a] += c.k.at(t, a);
            for b in 0..3 {
                s.set(a, b, s.at(a, b) + c.k.at(t, a) * c.v.at(t, b));
            }
        }
        let den: f64 = (0..4).map(|a| c.q.at(t, a) * z[a]).sum();
        for b in 0..3 {
            let num: f64 = (0..4).map(|a| c.q.at(t, a) * s.at(a, b)).sum();
            want.set(t, b, num / den);
        }
    }
    assert!(rel_diff(&y, &want) < 1e-5);
}

#[test]
fn recurrent_matches_parallel() {
    for seed in 0..4 {
        let c = case(16, 6, 5, seed % 2 == 1, 0.4, 10 + seed);
        let (q, k, v, lg) = c.at::<f32>();
        let (a, _) = gla_recurrent(&q, &k, &v, &lg, true).unwrap();
        let b = gla_parallel(&q, &k, &v, &lg, true).unwrap();
        assert!(rel_diff(&a, &b) < 1e-4);
        let c24 = case(24, 6, 5, false, 0.4, 20 + seed);
        let (q, k, v, lg) = c24.at::<f32>();
        let a = gla_recurrent(&q, &k, &v, &lg, true).unwrap().0;
        let b = gla_parallel(&q, &k, &v, &lg, true).unwrap();
        assert!(rel_diff(&a, &b) < 1e-4);
    }
}

#[test]
fn hand_computed_two_token_case() {
    let q = Mat::from_vec(2, 1, vec![0.7f64, 1.3]);
    let k = Mat::from_vec(2, 1, vec![0.9, 0.4]);
    let v = Mat::from_vec(2, 1, vec![2.0, -1.0]);
    let lg = Mat::from_vec(2, 1, vec![0.0, 0.5f64.ln()]);
    let y = gla_parallel(&q, &k, &v, &lg, false).unwrap();
    let want = 1.3 * (0.5 * 0.9 * 2.0 + 0.4 * -1.0);
    assert!((y.at(1, 0) - want).abs() < 1e-12);
    for algo in Algo::ALL {
        let y = gla_forward(algo, &q, &k, &v, &lg, 1, false).unwrap();
        assert!((y.at(1, 0) - want).abs() < 1e-12, "{algo}");
    }
}

#[test]
fn matches_double_sum_oracle() {
    for vector in [false, true] {
        let c = case(20, 4, 3, vector, 0.3, 30);
        let gamma = c.lg.map(f64::exp);
        for normalize in [false, true] {
            let want = oracle::gla_double_sum(&c.q, &c.k, &c.v, &gamma, normalize);
            for algo in Algo::ALL {
                let got = gla_forward(algo, &c.q, &c.k, &c.v, &c.lg, 7, normalize).unwrap();
                assert!(rel_diff(&got, &want) < 1e-10, "{algo} vector={vector}");
            }
        }
    }
}

#[test]
fn chunk_extremes_match_other_forms() {
    let c = case(30, 6, 4, false, 0.5, 40);
    let (q, k, v, lg) = c.at::<f32>();
    let par = gla_parallel(&q, &k, &v, &lg, true).unwrap();
    let rec = gla_recurrent(&q, &k, &v, &lg, true).unwrap().0;
    assert!(rel_diff(&gla_chunkwise(&q, &k, &v, &lg, 30, true).unwrap(), &par) < 1e-5);
    assert!(rel_diff(&gla_chunkwise(&q, &k, &v, &lg, 1, true).unwrap(), &rec) < 1e-5);
}

#[test]
fn long_aggressive_gates_stay_finite_in_chunkwise() {
    let l = 512;
    let mut c = case(l, 8, 4, false, 0.5, 50);
    let mut r = rng(51);
    c.lg = Tensor::uniform(&[l, 1], 0.45, 0.55, &mut r).to_mat::<f64>().map(f64::ln);
    let (q, k, v, lg) = c.at::<f32>();
    let err = gla_parallel(&q, &k, &v, &lg, true).unwrap_err();
    assert!(matches!(err, Error::Precision(_)));
    let y = gla_chunkwise(&q, &k, &v, &lg, DEFAULT_CHUNK, true).unwrap();
    assert!(y.all_finite());
    let want = gla_recurrent(&c.q, &c.k, &c.v, &c.lg, true).unwrap().0;
    assert!(rel_diff(&y, &want) < 1e-3);
}

#[test]
fn plan_cuts_chunks_before_large_spans() {
    let lg = Mat::<f64>::full(200, 1, 0.5f64.ln());
    let plan = ChunkPlan::new(&lg, 64).unwrap();
    let covered: usize = plan.chunks.iter().map(|c| c.1).sum();
    assert_eq!(covered, 200);
    for &(_, n) in &plan.chunks {
        assert!(n as f64 * 0.5f64.ln().abs() <= MAX_CHUNK_SPAN + 1.0);
    }
    let mild = Mat::<f64>::full(200, 1, 0.99f64.ln());
    let plan = ChunkPlan::new(&mild, 64).unwrap();
    assert_eq!(plan.chunks, vec![(0, 64), (64, 64), (128, 64), (192, 8)]);
    assert_eq!(plan.boundary_log_c.len(), 4);
    assert!((plan.boundary_log_c[1] - 64.0 * 0.99f64.ln()).abs() < 1e-9);
}

#[test]
fn streaming_steps_match_recurrent() {
    let c = case(40, 6, 4, true, 0.6, 60);
    let (q, k, v, lg) = c.at::<f32>();
    let (full, fin) = gla_recurrent(&q, &k, &v, &lg, true).unwrap();
    let mut st = RecurrentState::new(6, 4);
    let before = st.float_count();
    assert_eq!(before, 6 * 4 + 6 + 1);
    for t in 0..40 {
        let y = gla_step(&mut st, q.row(t), k.row(t), v.row(t), lg.row(t), true).unwrap();
        assert_eq!(st.float_count(), before);
        for (a, b) in y.iter().zip(full.row(t)) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
    assert_eq!(st, fin);
}

#[test]
fn constant_values_are_a_fixed_point() {
    let l = 25;
    let c = case(l, 5, 3, false, 0.5, 70);
    let lg = Mat::full(l, 1, 0.7f64.ln());
    let v = Mat::from_fn(l, 3, |_, j| [0.25, -1.5, 3.0][j]);
    for algo in Algo::ALL {
        let y = gla_forward(algo, &c.q, &c.k, &v, &lg, 4, true).unwrap();
        assert!(y.max_abs_diff(&v) < 1e-12, "{algo}");
    }
}

#[test]
fn future_inputs_do_not_leak() {
    let c = case(20, 4, 3, true, 0.5, 80);
    let mut d = Case {
        q: c.q.clone(),
        k: c.k.clone(),
        v: c.v.clone(),
        lg: c.lg.clone(),
    };
    for t in 12..20 {
        d.k.row_mut(t).iter_mut().for_each(|x| *x = 3.0);
        d.v.row_mut(t).iter_mut().for_each(|x| *x = -9.0);
        d.lg.row_mut(t).iter_mut().for_each(|x| *x = -0.01);
    }
    for algo in Algo::ALL {
        let a = gla_forward(algo, &c.q, &c.k, &c.v, &c.lg, 5, true).unwrap();
        let b = gla_forward(algo, &d.q, &d.k, &d.v, &d.lg, 5, true).unwrap();
        assert_eq!(a.slice_rows(0, 12), b.slice_rows(0, 12), "{algo}");
    }
}

#[test]
fn rejects_bad_gates() {
    let c = case(4, 3, 2, false, 0.5, 90);
    let pos = Mat::full(4, 1, 0.1);
    assert!(matches!(gla_parallel(&c.q, &c.k, &c.v, &pos, true), Err(Error::Domain(_))));
    let wrong = Mat::zeros(4, 2);
    assert!(matches!(gla_parallel(&c.q, &c.k, &c.v, &wrong, true), Err(Error::Shape(_))));
}

#[test]
fn tape_forms_match_kernels() {
    for (vector, seed) in [(false, 100), (true, 101)] {
        let c = case(19, 6, 4, vector, 0.4, seed);
        let (q, k, v, lg) = c.at::<f32>();
        for algo in Algo::ALL {
            for normalize in [false, true] {
                let want = gla_forward(algo, &q, &k, &v, &lg, 5, normalize).unwrap();
                let mut t = Tape::<f32>::new();
                let vars: Vec<_> = [&q, &k, &v, &lg]
                    .iter()
                    .map(|m| t.constant(Tensor::from_mat(m)))
                    .collect();
                let y = gla_tape(&mut t, algo, vars[0], vars[1], vars[2], vars[3], 5, normalize).unwrap();
                assert!(rel_diff(&t.value(y).to_mat::<f32>(), &want) < 1e-5, "{algo}");
            }
        }
    }
}

struct GlaObjective {
    algo: Algo,
    chunk: usize,
}

impl Objective for GlaObjective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        // features and gates are derived from unconstrained inputs, as in the model
        let q = tape.exp(v[0])?;
        let k = tape.exp(v[1])?;
        let z = tape.neg(v[3])?;
        let sp = tape.softplus(z)?;
        let lg = tape.neg(sp)?;
        let y = gla_tape(tape, self.algo, q, k, v[2], lg, self.chunk, true)?;
        let w = tape.constant(Tensor::new(
            vec![tape.shape(y).0, tape.shape(y).1],
            (0..tape.value(y).numel()).map(|i| T::of(((i * 37) % 11) as f64 / 11.0 - 0.5)).collect(),
        )?);
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }
}

#[test]
fn gradients_match_finite_differences_across_chunk_boundaries() {
    let mut r = rng(110);
    for gate_cols in [1, 6] {
        let inputs = vec![
            Tensor::randn(&[7, 6], 0.5, &mut r),
            Tensor::randn(&[7, 6], 0.5, &mut r),
            Tensor::randn(&[7, 3], 1.0, &mut r),
            Tensor::randn(&[7, gate_cols], 1.0, &mut r),
        ];
        let mut grads = Vec::new();
        for algo in Algo::ALL {
            let rep = grad_check(&GlaObjective { algo, chunk: 3 }, &inputs, 1e-3).unwrap();
            assert!(rep.max_rel_err < 1e-3, "{algo}: {} at {:?}", rep.max_rel_err, rep.worst);
            grads.push(rep.analytic);
        }
        for other in &grads[1..] {
            for (a, b) in other.iter().zip(&grads[0]) {
                let (e, _) = oracle::grad_rel_err(a, b);
                assert!(e < 1e-3);
            }
        }
    }
}

fn three_way<T: Real>(c: &Case, chunk: usize) -> f64 {
    let (q, k, v, lg) = c.at::<T>();
    let rec = gla_recurrent(&q, &k, &v, &lg, true).unwrap().0;
    let par = gla_parallel(&q, &k, &v, &lg, true).unwrap();
    let chk = gla_chunkwise(&q, &k, &v, &lg, chunk, true).unwrap();
    rel_diff(&par, &rec).max(rel_diff(&chk, &rec)).max(rel_diff(&chk, &par))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn three_algorithms_agree(
        l in 1usize..=64,
        bsel in 0usize..4,
        vector in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let chunk = [1, 3, 16, l][bsel];
        let c = case(l, 8, 4, vector, 0.5, seed);
        prop_assert!(three_way::<f32>(&c, chunk) < 1e-4);
        prop_assert!(three_way::<f64>(&c, chunk) < 1e-9);
    }

    #[test]
    fn state_size_never_changes(steps in 1usize..50, seed in any::<u64>()) {
        let c = case(steps, 4, 3, false, 0.2, seed);
        let mut st = RecurrentState::new(4, 3);
        for t in 0..steps {
            gla_step(&mut st, c.q.row(t), c.k.row(t), c.v.row(t), c.lg.row(t), true).unwrap();
            prop_assert_eq!(st.float_count(), 4 * 3 + 4 + 1);
            prop_assert!(st.z.iter().all(|&z| z > 0.0));
        }
    }
}
