//! Subcommand bodies. Each returns the completed run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::json;

use lizard::bench::{self, poly_fit_r2, BenchRecord};
use lizard::gla::Algo;
use lizard::model::{load_checkpoint, save_checkpoint, Model};
use lizard::pipeline::run::{self, grid_cells, parse_axis, Datasets};
use lizard::pipeline::{load_datasets, RunConfig, Task, Trace, TraceRow};
use lizard::verify;
use lizard::{Error, Result};

use crate::rundir::RunDir;
use crate::Common;

pub fn apply_overrides(cfg: &mut RunConfig, c: &Common) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = &c.algo {
        cfg.model.gla.algo = match a.as_str() {
            "recurrent" => Algo::Recurrent,
            "parallel" => Algo::Parallel,
            _ => Algo::Chunkwise,
        };
    }
    if let Some(b) = c.chunk_size {
        cfg.model.gla.chunk_size = b;
        cfg.kernel_bench.chunk_sizes = vec![b];
    }
    if let Some(w) = c.window {
        cfg.model.swa.window = w;
    }
    if let Some(m) = c.meta {
        cfg.model.swa.meta_tokens = m;
    }
    if let Some(g) = &c.gate {
        cfg.model.gate.variant = g.parse()?;
    }
    if let Some(r) = &c.retain_full {
        cfg.model.set_retain(r)?;
    }
    if let Some(r) = c.lora_rank {
        cfg.model.lora.rank = r;
    }
    cfg.stage2_options.lora &= !c.no_lora;
    cfg.no_approx |= c.no_approx;
    cfg.model.no_swa |= c.no_swa;
    cfg.model.no_gate |= c.no_gate;
    if let Some(p) = &c.teacher {
        cfg.checkpoints.teacher = Some(p.clone());
    }
    if let Some(p) = &c.student {
        cfg.checkpoints.student = Some(p.clone());
    }
    if let Some(n) = c.steps {
        for t in [&mut cfg.teacher, &mut cfg.stage1, &mut cfg.stage2] {
            t.steps = Some(n);
        }
    }
    cfg.validate()
}

fn open_run(cfg: &RunConfig, c: &Common, command: &str) -> Result<RunDir> {
    let root = match &c.out {
        Some(p) => p.clone(),
        None => cfg.out.join(format!("{command}-{}", &cfg.content_hash()?[..12])),
    };
    RunDir::create(&root, cfg)
}

/// Prints roughly twenty progress lines per stage.
fn reporter(stage: &'static str, total: usize) -> impl FnMut(&TraceRow) {
    let every = (total / 20).max(1);
    move |r: &TraceRow| {
        if r.step % every == 0 || r.step + 1 == total {
            eprintln!(
                "[{stage}] step {:>5}/{total} lr {:.2e} loss {:.4} grad {:.3}",
                r.step + 1,
                r.lr,
                r.loss,
                r.grad_norm
            );
        }
    }
}

fn steps(t: &lizard::pipeline::TrainConfig, data: &Datasets) -> usize {
    t.total_steps(data.train.len())
}

fn write_trace(rd: &RunDir, name: &str, trace: &Trace) -> Result<()> {
    rd.write(name, trace.to_csv()?.as_bytes())
}

/// The configured teacher checkpoint, or a freshly pretrained teacher
/// saved into the run directory.
fn obtain_teacher(cfg: &RunConfig, data: &Datasets, rd: &RunDir) -> Result<Model> {
    if let Some(p) = &cfg.checkpoints.teacher {
        let t = load_checkpoint(p)?;
        if t.student {
            return Err(Error::Contract(format!("{} is a student checkpoint", p.display())));
        }
        return Ok(t);
    }
    let mut progress = reporter("teacher", steps(&cfg.teacher, data));
    let t = run::pretrain_teacher(cfg, data, Some(&mut progress))?;
    write_trace(rd, "teacher_trace.csv", &t.trace)?;
    save_checkpoint(&t.model, &rd.path("teacher.lzrd"))?;
    rd.write_json("teacher_metrics.json", &json!({ "eval_lm_loss": t.eval_loss }))?;
    Ok(t.model)
}

fn stage1(cfg: &RunConfig, teacher: &Model, data: &Datasets, rd: &RunDir) -> Result<Model> {
    let mut progress = reporter("stage1", steps(&cfg.stage1, data));
    let d = run::distill(cfg, teacher, data, Some(&mut progress))?;
    if let Some(t) = &d.trace {
        write_trace(rd, "stage1_trace.csv", t)?;
    }
    let frozen = d.base_hash_before == d.base_hash_after;
    rd.write_json(
        "stage1_metrics.json",
        &json!({
            "skipped": d.trace.is_none(),
            "eval_mse_before": d.mse_before,
            "eval_mse_after": d.mse_after,
            "base_hash": d.base_hash_after,
            "base_frozen": frozen,
        }),
    )?;
    if !frozen {
        return Err(Error::Contract("stage 1 modified base weights".into()));
    }
    save_checkpoint(&d.student, &rd.path("student_stage1.lzrd"))?;
    Ok(d.student)
}

fn passkey_artifacts(cfg: &RunConfig, model: &Model, rd: &RunDir) -> Result<serde_json::Value> {
    let grid = run::passkey_grid(cfg, model)?;
    rd.write("passkey_grid.csv", grid.to_csv()?.as_bytes())?;
    let by_len: serde_json::Map<String, serde_json::Value> = grid
        .lengths
        .iter()
        .map(|&l| (l.to_string(), json!(grid.length_accuracy(l))))
        .collect();
    Ok(json!({ "overall": grid.overall_accuracy(), "by_length": by_len }))
}

pub fn pretrain_teacher(cfg: &RunConfig, c: &Common) -> Result<PathBuf> {
    let rd = open_run(cfg, c, "pretrain-teacher")?;
    let data = load_datasets(cfg)?;
    let no_ckpt = RunConfig {
        checkpoints: Default::default(),
        ..cfg.clone()
    };
    let t = obtain_teacher(&no_ckpt, &data, &rd)?;
    if cfg.data.task == Task::Passkey {
        let acc = passkey_artifacts(cfg, &t, &rd)?;
        rd.write_json("passkey_metrics.json", &acc)?;
    }
    rd.finish(cfg)
}

pub fn distill(cfg: &RunConfig, c: &Common) -> Result<PathBuf> {
    let rd = open_run(cfg, c, "distill")?;
    let data = load_datasets(cfg)?;
    let teacher = obtain_teacher(cfg, &data, &rd)?;
    stage1(cfg, &teacher, &data, &rd)?;
    rd.finish(cfg)
}

pub fn finetune(cfg: &RunConfig, c: &Common) -> Result<PathBuf> {
    let rd = open_run(cfg, c, "finetune")?;
    let data = load_datasets(cfg)?;
    let student = match &cfg.checkpoints.student {
        Some(p) => {
            let s = load_checkpoint(p)?;
            if !s.student {
                return Err(Error::Contract(format!("{} is not a student checkpoint", p.display())));
            }
            s
        }
        None => {
            let teacher = obtain_teacher(cfg, &data, &rd)?;
            stage1(cfg, &teacher, &data, &rd)?
        }
    };
    let mut progress = reporter("stage2", steps(&cfg.stage2, &data));
    let f = run::finetune(cfg, student, &data, Some(&mut progress))?;
    write_trace(&rd, "stage2_trace.csv", &f.trace)?;
    save_checkpoint(&f.student, &rd.path("student.lzrd"))?;
    let passkey = match cfg.data.task {
        Task::Passkey => passkey_artifacts(cfg, &f.student, &rd)?,
        Task::Corpus => serde_json::Value::Null,
    };
    rd.write_json(
        "stage2_metrics.json",
        &json!({
            "eval_lm_loss_before": f.lm_before,
            "eval_lm_loss_after": f.lm_after,
            "eval_perplexity": f.lm_after.exp(),
            "passkey": passkey,
        }),
    )?;
    rd.finish(cfg)
}

pub fn eval_passkey(cfg: &RunConfig, c: &Common, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| cfg.checkpoints.student.clone())
        .or_else(|| cfg.checkpoints.teacher.clone())
        .ok_or_else(|| Error::Config("eval-passkey needs --checkpoint or a configured checkpoint".into()))?;
    let rd = open_run(cfg, c, "eval-passkey")?;
    let model = load_checkpoint(&path)?;
    let acc = passkey_artifacts(cfg, &model, &rd)?;
    rd.write_json(
        "passkey_metrics.json",
        &json!({ "checkpoint": path, "student": model.student, "accuracy": acc }),
    )?;
    rd.finish(cfg)
}

/// Time ratio of each length to the previous one, per kind.
fn time_ratios(records: &[BenchRecord]) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    let mut kinds: Vec<&str> = records.iter().map(|r| r.kind.as_str()).collect();
    kinds.dedup();
    for kind in kinds {
        let rows: Vec<&BenchRecord> = records.iter().filter(|r| r.kind == kind && r.ms_median.is_some()).collect();
        let ratios: Vec<_> = rows
            .windows(2)
            .map(|w| json!({ "from": w[0].l, "to": w[1].l, "ratio": w[1].ms_median.unwrap() / w[0].ms_median.unwrap() }))
            .collect();
        out.insert(kind.to_string(), json!(ratios));
    }
    serde_json::Value::Object(out)
}

pub fn bench_kernel(cfg: &RunConfig, c: &Common, lengths: &[usize]) -> Result<PathBuf> {
    let mut kc = cfg.kernel_bench.clone();
    kc.seed ^= cfg.seed;
    if !lengths.is_empty() {
        kc.lengths = lengths.to_vec();
    }
    let rd = open_run(cfg, c, "bench-kernel")?;
    let report = bench::bench_kernel(&kc)?;
    let mut fits = serde_json::Map::new();
    let mut kinds: Vec<&str> = report.muls.iter().map(|m| m.kind.as_str()).collect();
    kinds.sort_unstable();
    kinds.dedup();
    for kind in kinds {
        let (xs, ys): (Vec<f64>, Vec<f64>) = report
            .muls
            .iter()
            .filter(|m| m.kind == kind)
            .map(|m| (m.l as f64, m.muls as f64))
            .unzip();
        if xs.len() >= 3 {
            fits.insert(
                kind.into(),
                json!({ "r2_linear": poly_fit_r2(&xs, &ys, 1), "r2_quadratic": poly_fit_r2(&xs, &ys, 2) }),
            );
        }
    }
    let extra = json!({
        "mul_counts": report.muls,
        "mul_fits": fits,
        "time_ratios": time_ratios(&report.records),
        "cross_check_max_rel_diff": report.max_rel_diff,
    });
    bench::emit_metrics(&report.records, rd.root(), "kernel", &kc, Some(kc.timing), Some(extra))?;
    rd.finish(cfg)
}

pub fn bench_generate(cfg: &RunConfig, c: &Common, lengths: &[usize]) -> Result<PathBuf> {
    let mut gc = cfg.generate_bench.clone();
    if !lengths.is_empty() {
        gc.lengths = lengths.to_vec();
    }
    let rd = open_run(cfg, c, "bench-generate")?;
    // decode cost does not depend on trained weights, so untrained models
    // stand in when no checkpoints are configured
    let teacher = match &cfg.checkpoints.teacher {
        Some(p) => load_checkpoint(p)?,
        None => Model::init_teacher(cfg.model.clone(), cfg.seed)?,
    };
    let student = match &cfg.checkpoints.student {
        Some(p) => load_checkpoint(p)?,
        None => teacher.to_student(cfg.model.clone(), cfg.seed)?,
    };
    let mut records = bench::bench_generate("lizard", &student, &gc)?;
    records.extend(bench::bench_generate("softmax", &teacher, &gc)?);
    let floats = |kind: &str| -> Vec<u64> { records.iter().filter(|r| r.kind == kind).map(|r| r.peak_floats).collect() };
    let lz = floats("lizard");
    let extra = json!({
        "lizard_constant_floats": lz.windows(2).all(|w| w[0] == w[1]),
        "softmax_peak_floats": floats("softmax"),
    });
    bench::emit_metrics(&records, rd.root(), "generate", &gc, Some(gc.timing), Some(extra))?;
    rd.finish(cfg)
}

pub fn sweep(cfg: &RunConfig, c: &Common, grid: &[String]) -> Result<PathBuf> {
    let axes = grid.iter().map(|g| parse_axis(g)).collect::<Result<Vec<_>>>()?;
    let cells = grid_cells(&axes);
    // reject bad keys and values before any training
    for cell in &cells {
        let mut probe = cfg.clone();
        for (k, v) in cell {
            run::apply_setting(&mut probe, k, v)?;
        }
        probe.validate()?;
    }
    let rd = open_run(cfg, c, "sweep")?;
    let data = load_datasets(cfg)?;
    let teacher = obtain_teacher(cfg, &data, &rd)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let row = run::run_cell(cfg, &teacher, &data, cell)?;
        eprintln!(
            "[sweep] {}/{} {}: stage1 mse {:.4} lm loss {:.4}{}",
            i + 1,
            cells.len(),
            row.cell,
            row.stage1_mse,
            row.lm_loss,
            row.passkey_acc.map(|a| format!(" passkey {a:.3}")).unwrap_or_default()
        );
        rows.push(row);
        // rewrite after every cell so partial sweeps leave usable data
        rd.write("sweep.csv", run::sweep_to_csv(&rows)?.as_bytes())?;
    }
    rd.write_json("sweep.json", &json!({ "grid": grid, "rows": rows }))?;
    rd.finish(cfg)
}

pub fn verify(c: &Common) -> ExitCode {
    let outcomes = verify::run_all(|o| {
        println!(
            "{} {:<28} {:>7.2}s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        );
    });
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if let Some(out) = &c.out {
        let rows: Vec<_> = outcomes
            .iter()
            .map(|o| json!({ "name": o.name, "passed": o.passed, "seconds": o.seconds, "detail": o.detail }))
            .collect();
        let write = std::fs::create_dir_all(out)
            .and_then(|_| std::fs::write(out.join("verify.json"), serde_json::to_vec_pretty(&rows).unwrap_or_default()));
        if let Err(e) = write {
            eprintln!("error: writing verify.json: {e}");
            return ExitCode::from(1);
        }
    }
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
