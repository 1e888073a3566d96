//! Kernel and generation benchmarks.
//!
//! Memory is reported as counted live floats rather than process RSS, so
//! the numbers are exact and comparable across machines. No timing is
//! reported for a kernel unless its output first matched the reference in
//! the same run.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gla::{gla_chunkwise, gla_parallel, gla_recurrent, PARALLEL_LOG_FLOOR};
use crate::model::{argmax, DecodeSession, Model, BOS};
use crate::numcore::{mul_count, reset_mul_count, Mat, Tensor};
use crate::oracle::{self, rel_diff};
use crate::refattn::causal_softmax_attention;

pub const CSV_COLUMNS: [&str; 8] = [
    "kind",
    "L",
    "batch",
    "ms_median",
    "ms_p10",
    "ms_p90",
    "peak_floats",
    "tok_per_s",
];

/// Agreement required between contestants before anything is timed.
pub const CROSS_CHECK_TOL: f64 = 1e-3;

/// One benchmark measurement. Timing fields are empty when the
/// configuration was recorded but not run (a softmax length past the
/// memory budget).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kind: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub batch: usize,
    pub ms_median: Option<f64>,
    pub ms_p10: Option<f64>,
    pub ms_p90: Option<f64>,
    pub peak_floats: u64,
    pub tok_per_s: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    pub warmups: usize,
    pub trials: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self { warmups: 2, trials: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(samples_ms: &[f64]) -> Result<Stats> {
    if samples_ms.is_empty() || samples_ms.iter().any(|x| !x.is_finite()) {
        return Err(Error::BenchInvalid("no finite timing samples".into()));
    }
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Stats {
        median: quantile(&s, 0.5),
        p10: quantile(&s, 0.1),
        p90: quantile(&s, 0.9),
    })
}

/// Runs `f` `warmups` times untimed, then `trials` times on a monotonic clock.
pub fn measure(timing: Timing, mut f: impl FnMut() -> Result<()>) -> Result<Stats> {
    if timing.trials == 0 {
        return Err(Error::Config("bench needs at least one trial".into()));
    }
    for _ in 0..timing.warmups {
        f()?;
    }
    let mut ms = Vec::with_capacity(timing.trials);
    for _ in 0..timing.trials {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    summarize(&ms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelBenchConfig {
    pub lengths: Vec<usize>,
    pub chunk_sizes: Vec<usize>,
    /// Feature width `F` of the GLA inputs.
    pub features: usize,
    /// Head width (query/key width for softmax, value width for both).
    pub head_dim: usize,
    pub timing: Timing,
    pub seed: u64,
    /// Skip softmax and parallel GLA beyond this length.
    pub quadratic_max_len: usize,
}

impl Default for KernelBenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 2048, 4096, 8192],
            chunk_sizes: vec![64],
            features: 64,
            head_dim: 64,
            timing: Timing::default(),
            seed: 0,
            quadratic_max_len: 8192,
        }
    }
}

/// Multiplications performed by one forward call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulCount {
    pub kind: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub muls: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub records: Vec<BenchRecord>,
    pub muls: Vec<MulCount>,
    /// Largest cross-check discrepancy per length.
    pub max_rel_diff: Vec<(usize, f64)>,
}

struct KernelInputs {
    phi_q: Mat<f32>,
    phi_k: Mat<f32>,
    q: Mat<f32>,
    k: Mat<f32>,
    v: Mat<f32>,
    log_gamma: Mat<f32>,
}

fn kernel_inputs(l: usize, cfg: &KernelBenchConfig) -> KernelInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ l as u64);
    let (f, d) = (cfg.features, cfg.head_dim);
    let pos = |rng: &mut ChaCha8Rng| Mat::from_fn(l, f, |_, _| rng.random_range(0.05f32..1.0));
    let phi_q = pos(&mut rng);
    let phi_k = pos(&mut rng);
    let scale = 1.0 / (d as f32).sqrt();
    let q = Tensor::randn(&[l, d], scale, &mut rng).to_mat();
    let k = Tensor::randn(&[l, d], 1.0, &mut rng).to_mat();
    let v = Tensor::randn(&[l, d], 1.0, &mut rng).to_mat();
    // gates close to 1 so the parallel form stays within its guard
    let log_gamma = Mat::from_fn(l, 1, |_, _| {
        let z: f32 = rng.random_range(5.0..9.0);
        -(-z).exp().ln_1p()
    });
    KernelInputs {
        phi_q,
        phi_k,
        q,
        k,
        v,
        log_gamma,
    }
}

/// Live floats: inputs and output of a GLA call plus its largest scratch.
fn gla_floats(l: usize, f: usize, dv: usize, scratch: usize) -> u64 {
    (2 * l * f + l * dv + l + l * dv + scratch) as u64
}

fn record(kind: &str, l: usize, stats: Stats, peak: u64) -> BenchRecord {
    BenchRecord {
        kind: kind.to_string(),
        l,
        batch: 1,
        ms_median: Some(stats.median),
        ms_p10: Some(stats.p10),
        ms_p90: Some(stats.p90),
        peak_floats: peak,
        tok_per_s: Some(l as f64 / (stats.median / 1e3)),
    }
}

/// Times parallel GLA, chunkwise GLA (per chunk size) and causal softmax
/// attention on identical seeded inputs for every length.
pub fn bench_kernel(cfg: &KernelBenchConfig) -> Result<KernelReport> {
    let mut report = KernelReport::default();
    let (f, d) = (cfg.features, cfg.head_dim);
    for &l in &cfg.lengths {
        let x = kernel_inputs(l, cfg);
        // cross-check first: every GLA contestant against the recurrent form
        let (reference, _) = gla_recurrent(&x.phi_q, &x.phi_k, &x.v, &x.log_gamma, true)?;
        let mut worst = 0.0f64;
        for &b in &cfg.chunk_sizes {
            reset_mul_count();
            let y = gla_chunkwise(&x.phi_q, &x.phi_k, &x.v, &x.log_gamma, b, true)?;
            report.muls.push(MulCount {
                kind: format!("gla-chunkwise/{b}"),
                l,
                muls: mul_count(),
            });
            worst = worst.max(rel_diff(&y, &reference));
        }
        let quadratic = l <= cfg.quadratic_max_len;
        let parallel_ok = quadratic && {
            let lowest: f64 = x.log_gamma.data().iter().map(|&g| g as f64).sum();
            lowest >= PARALLEL_LOG_FLOOR
        };
        if parallel_ok {
            reset_mul_count();
            let y = gla_parallel(&x.phi_q, &x.phi_k, &x.v, &x.log_gamma, true)?;
            report.muls.push(MulCount {
                kind: "gla-parallel".into(),
                l,
                muls: mul_count(),
            });
            worst = worst.max(rel_diff(&y, &reference));
        }
        let scale = 1.0 / (d as f64).sqrt();
        if quadratic {
            reset_mul_count();
            let y = causal_softmax_attention(&x.q, &x.k, &x.v, scale)?;
            report.muls.push(MulCount {
                kind: "softmax".into(),
                l,
                muls: mul_count(),
            });
            // rows depend only on their prefix, so a short prefix can be
            // checked against the literal oracle
            let n = l.min(128);
            let want = oracle::causal_attention(
                &x.q.slice_rows(0, n).convert(),
                &x.k.slice_rows(0, n).convert(),
                &x.v.slice_rows(0, n).convert(),
                scale,
            );
            worst = worst.max(rel_diff(&y.slice_rows(0, n), &want));
        }
        if !(worst <= CROSS_CHECK_TOL) {
            return Err(Error::BenchInvalid(format!(
                "contestants disagree at L={l}: relative difference {worst:.3e}"
            )));
        }
        report.max_rel_diff.push((l, worst));

        for &b in &cfg.chunk_sizes {
            let s = measure(cfg.timing, || {
                gla_chunkwise(&x.phi_q, &x.phi_k, &x.v, &x.log_gamma, b, true).map(drop)
            })?;
            let scratch = b * b + f * (d + 1) + 2 * b * f;
            report.records.push(record(&format!("gla-chunkwise/{b}"), l, s, gla_floats(l, f, d, scratch)));
        }
        if parallel_ok {
            let s = measure(cfg.timing, || gla_parallel(&x.phi_q, &x.phi_k, &x.v, &x.log_gamma, true).map(drop))?;
            report.records.push(record("gla-parallel", l, s, gla_floats(l, f, d, l * l + 2 * l * f)));
        }
        if quadratic {
            let s = measure(cfg.timing, || causal_softmax_attention(&x.q, &x.k, &x.v, scale).map(drop))?;
            report.records.push(record("softmax", l, s, (4 * l * d + l) as u64));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateBenchConfig {
    pub lengths: Vec<usize>,
    /// Tokens timed per trial at the end of each length.
    pub block: usize,
    pub timing: Timing,
    /// Softmax sessions whose cache would exceed this many floats are
    /// recorded without running.
    pub softmax_float_budget: u64,
}

impl Default for GenerateBenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 4096, 32768],
            block: 16,
            timing: Timing::default(),
            softmax_float_budget: 1 << 22,
        }
    }
}

/// Greedy generation up to each length; the last `block` tokens are timed
/// in forked sessions so every trial starts from the same state.
pub fn bench_generate(kind: &str, model: &Model, cfg: &GenerateBenchConfig) -> Result<Vec<BenchRecord>> {
    let mut lengths = cfg.lengths.clone();
    lengths.sort_unstable();
    let mut out = Vec::with_capacity(lengths.len());
    let mut session = DecodeSession::new(model)?;
    let mut logits = session.step(BOS)?;
    let mut peak = session.float_count() as u64;
    let per_token_growth = if model.student {
        let retained = (0..model.cfg.n_layers).filter(|&l| model.cfg.is_retained(l)).count();
        2 * model.cfg.d_model * retained
    } else {
        2 * model.cfg.d_model * model.cfg.n_layers
    } as u64;
    for &l in &lengths {
        let prefix = l.saturating_sub(cfg.block).max(1);
        let projected = session.float_count() as u64 + per_token_growth * (l as u64 - session.position() as u64);
        if per_token_growth > 0 && projected > cfg.softmax_float_budget {
            out.push(BenchRecord {
                kind: kind.into(),
                l,
                batch: 1,
                ms_median: None,
                ms_p10: None,
                ms_p90: None,
                peak_floats: projected,
                tok_per_s: None,
            });
            continue;
        }
        while session.position() < prefix {
            logits = session.step(argmax(&logits))?;
            peak = peak.max(session.float_count() as u64);
        }
        let block = l - session.position();
        let start_logits = logits.clone();
        let mut end_peak = peak;
        let stats = measure(cfg.timing, || {
            let mut s = session.fork()?;
            let mut lg = start_logits.clone();
            for _ in 0..block {
                lg = s.step(argmax(&lg))?;
            }
            end_peak = end_peak.max(s.float_count() as u64);
            Ok(())
        })?;
        let per_token = |ms: f64| ms / block.max(1) as f64;
        out.push(BenchRecord {
            kind: kind.into(),
            l,
            batch: 1,
            ms_median: Some(per_token(stats.median)),
            ms_p10: Some(per_token(stats.p10)),
            ms_p90: Some(per_token(stats.p90)),
            peak_floats: end_peak,
            tok_per_s: Some(1e3 / per_token(stats.median)),
        });
    }
    Ok(out)
}

/// CSV text with the fixed column order; header only for no records.
pub fn records_to_csv(records: &[BenchRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::Parse(format!("unexpected bench header {header:?}")));
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<BenchRecord>, _>>()
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

#[derive(Serialize)]
struct Summary<'a, C: Serialize> {
    config: &'a C,
    timing: Option<Timing>,
    records: &'a [BenchRecord],
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

/// Writes `<stem>.csv` and `<stem>.json` (records plus config snapshot).
pub fn emit_metrics<C: Serialize>(
    records: &[BenchRecord],
    dir: &Path,
    stem: &str,
    config: &C,
    timing: Option<Timing>,
    extra: Option<serde_json::Value>,
) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.csv")), records_to_csv(records)?)?;
    let summary = Summary {
        config,
        timing,
        records,
        extra,
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

/// Coefficient of determination of a least-squares polynomial fit of the
/// given degree (1 or 2).
pub fn poly_fit_r2(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let n = xs.len();
    let m = degree + 1;
    // normal equations, solved by Gaussian elimination
    let mut a = vec![vec![0.0f64; m + 1]; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let pw: Vec<f64> = (0..m).map(|p| x.powi(p as i32)).collect();
        for i in 0..m {
            for j in 0..m {
                a[i][j] += pw[i] * pw[j];
            }
            a[i][m] += pw[i] * y;
        }
    }
    for c in 0..m {
        let p = (c..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..m {
            if r != c && a[c][c] != 0.0 {
                let f = a[r][c] / a[c][c];
                for k in c..=m {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let pred: f64 = coef.iter().enumerate().map(|(p, c)| c * x.powi(p as i32)).sum();
        ss_res += (y - pred).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}
