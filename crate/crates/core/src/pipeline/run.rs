//! End-to-end runs driven by a [`RunConfig`]: data loading, teacher
//! pretraining, the two distillation stages and ablation sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};
use crate::swa::SwaConfig;

use super::config::{RunConfig, Task};
use super::data::{corpus_samples, Sample, BUILTIN_CORPUS};
use super::eval::{evaluate_passkey, grid_from_examples, PasskeyGrid};
use super::passkey::{generate_passkey_dataset, read_jsonl, PasskeyExample};
use super::train::{
    eval_lm_loss, eval_stage1_loss, train_stage1, train_stage2, train_teacher, Progress, Trace,
};

/// Seed offsets so that data, initialization and shuffling never share a stream.
const EVAL_DATA_SEED: u64 = 0x5EED_0001;
const STUDENT_SEED: u64 = 0x5EED_0002;
const PASSKEY_EVAL_SEED: u64 = 0x5EED_0003;

pub struct Datasets {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Training and held-out samples. Corpus windows are drawn from disjoint
/// byte ranges: the first 90% of the text trains, the rest evaluates.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let d = &cfg.data;
    match d.task {
        Task::Corpus => {
            let text = match &d.corpus_path {
                Some(p) => std::fs::read(p)?,
                None => BUILTIN_CORPUS.as_bytes().to_vec(),
            };
            let split = text.len() * 9 / 10;
            Ok(Datasets {
                train: corpus_samples(&text[..split], d.n_train, d.seq_len, cfg.seed)?,
                eval: corpus_samples(&text[split..], d.n_eval, d.seq_len, cfg.seed ^ EVAL_DATA_SEED)?,
            })
        }
        Task::Passkey => {
            let load = |path: &Option<std::path::PathBuf>, n: usize, seed: u64| match path {
                Some(p) => read_jsonl(std::io::BufReader::new(std::fs::File::open(p)?)),
                None => generate_passkey_dataset(n, d.seq_len, seed),
            };
            let train = load(&d.train_path, d.n_train, cfg.seed)?;
            let eval = load(&d.eval_path, d.n_eval, cfg.seed ^ EVAL_DATA_SEED)?;
            Ok(Datasets {
                train: train.iter().map(PasskeyExample::to_sample).collect(),
                eval: eval.iter().map(PasskeyExample::to_sample).collect(),
            })
        }
    }
}

pub struct TeacherRun {
    pub model: Model,
    pub trace: Trace,
    pub eval_loss: f64,
}

pub fn pretrain_teacher(cfg: &RunConfig, data: &Datasets, progress: Progress<'_>) -> Result<TeacherRun> {
    let mut model = Model::init_teacher(cfg.model.clone(), cfg.seed)?;
    let trace = train_teacher(&mut model, &data.train, &cfg.teacher, cfg.seed, progress)?;
    let eval_loss = eval_lm_loss(&model, &data.eval)?;
    Ok(TeacherRun {
        model,
        trace,
        eval_loss,
    })
}

pub struct DistillRun {
    pub student: Model,
    /// `None` when stage 1 was skipped.
    pub trace: Option<Trace>,
    pub mse_before: f64,
    pub mse_after: f64,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

/// Stage 1: builds the student from `teacher` with the run's student
/// settings and trains its attention approximation.
pub fn distill(cfg: &RunConfig, teacher: &Model, data: &Datasets, progress: Progress<'_>) -> Result<DistillRun> {
    if teacher.student {
        return Err(Error::Contract("distillation needs a teacher checkpoint".into()));
    }
    let mut student = teacher.to_student(cfg.model.clone(), cfg.seed ^ STUDENT_SEED)?;
    let base_hash_before = student.params.group_hash(ParamGroup::Base);
    let mse_before = eval_stage1_loss(teacher, &student, &data.eval)?;
    let trace = if cfg.no_approx {
        None
    } else {
        Some(train_stage1(teacher, &mut student, &data.train, &cfg.stage1, cfg.seed, progress)?)
    };
    let mse_after = eval_stage1_loss(teacher, &student, &data.eval)?;
    Ok(DistillRun {
        base_hash_after: student.params.group_hash(ParamGroup::Base),
        student,
        trace,
        mse_before,
        mse_after,
        base_hash_before,
    })
}

pub struct FinetuneRun {
    pub student: Model,
    pub trace: Trace,
    pub lm_before: f64,
    pub lm_after: f64,
}

/// Stage 2: next-token fine-tuning.
pub fn finetune(cfg: &RunConfig, mut student: Model, data: &Datasets, progress: Progress<'_>) -> Result<FinetuneRun> {
    let lm_before = eval_lm_loss(&student, &data.eval)?;
    let trace = train_stage2(
        &mut student,
        &data.train,
        &cfg.stage2,
        cfg.stage2_options,
        cfg.seed,
        progress,
    )?;
    let lm_after = eval_lm_loss(&student, &data.eval)?;
    Ok(FinetuneRun {
        student,
        trace,
        lm_before,
        lm_after,
    })
}

/// Passkey accuracy grid: the configured eval file when given, otherwise a
/// fresh depth grid over `eval_lengths`.
pub fn passkey_grid(cfg: &RunConfig, model: &Model) -> Result<PasskeyGrid> {
    match &cfg.data.eval_path {
        Some(p) => {
            let examples = read_jsonl(std::io::BufReader::new(std::fs::File::open(p)?))?;
            grid_from_examples(model, &examples)
        }
        None => evaluate_passkey(
            model,
            &cfg.data.eval_lengths,
            cfg.data.per_cell,
            cfg.seed ^ PASSKEY_EVAL_SEED,
        ),
    }
}

/// Applies one `key=value` setting. Keys: `w`/`window`, `m`/`meta`,
/// `gate`, `rank`, `chunk`, `retain`, `ablation`
/// (`none|no-swa|no-gate|no-approx|no-lora`).
pub fn apply_setting(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let num = || {
        value
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))
    };
    match key {
        "w" | "window" => cfg.model.swa.window = num()?,
        "m" | "meta" => cfg.model.swa.meta_tokens = num()?,
        "rank" => cfg.model.lora.rank = num()?,
        "chunk" => cfg.model.gla.chunk_size = num()?,
        "gate" => cfg.model.gate.variant = value.parse()?,
        "retain" => cfg.model.set_retain(value)?,
        "ablation" => match value {
            "none" => {}
            "no-swa" => cfg.model.no_swa = true,
            "no-gate" => cfg.model.no_gate = true,
            "no-approx" => cfg.no_approx = true,
            "no-lora" => cfg.stage2_options.lora = false,
            _ => return Err(Error::Config(format!("unknown ablation {value:?}"))),
        },
        _ => return Err(Error::Config(format!("unknown sweep key {key:?}"))),
    }
    Ok(())
}

/// A sweep axis: `key` and the values it takes.
pub type Axis = (String, Vec<String>);

/// Parses `key=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (k, vs) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis {spec:?} is not key=v1,v2")))?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
    if k.is_empty() || values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("grid axis {spec:?} has empty parts")));
    }
    Ok((k.trim().to_string(), values))
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_cells(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |cells, (k, vs)| {
        cells
            .iter()
            .flat_map(|c| {
                vs.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

/// One sweep result; every cell produces the same columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub window: usize,
    pub meta: usize,
    pub gate: String,
    pub lora_rank: usize,
    pub no_swa: bool,
    pub no_gate: bool,
    pub no_approx: bool,
    pub no_lora: bool,
    pub stage1_mse_before: f64,
    pub stage1_mse: f64,
    pub lm_loss_before: f64,
    pub lm_loss: f64,
    /// Mean passkey accuracy over the grid; empty for corpus runs.
    pub passkey_acc: Option<f64>,
    pub seconds: f64,
}

/// Distills and fine-tunes one cell from a shared teacher.
pub fn run_cell(base: &RunConfig, teacher: &Model, data: &Datasets, cell: &[(String, String)]) -> Result<SweepRow> {
    let start = Instant::now();
    let mut cfg = base.clone();
    for (k, v) in cell {
        apply_setting(&mut cfg, k, v)?;
    }
    cfg.model.validate()?;
    let d = distill(&cfg, teacher, data, None)?;
    let f = finetune(&cfg, d.student, data, None)?;
    let passkey_acc = match cfg.data.task {
        Task::Passkey => Some(passkey_grid(&cfg, &f.student)?.overall_accuracy()),
        Task::Corpus => None,
    };
    let SwaConfig { window, meta_tokens } = cfg.model.swa;
    Ok(SweepRow {
        cell: cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "),
        window,
        meta: meta_tokens,
        gate: cfg.model.gate.variant.name().into(),
        lora_rank: cfg.model.lora.rank,
        no_swa: cfg.model.no_swa,
        no_gate: cfg.model.no_gate,
        no_approx: cfg.no_approx,
        no_lora: !cfg.stage2_options.lora,
        stage1_mse_before: d.mse_before,
        stage1_mse: d.mse_after,
        lm_loss_before: f.lm_before,
        lm_loss: f.lm_after,
        passkey_acc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featgate::GateVariant;

    #[test]
    fn table_grid_has_twelve_cells() {
        let axes = [parse_axis("w=32,64,128,256").unwrap(), parse_axis("m=2,4,6").unwrap()];
        let cells = grid_cells(&axes);
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0], vec![("w".into(), "32".into()), ("m".into(), "2".into())]);
        assert_eq!(cells[11], vec![("w".into(), "256".into()), ("m".into(), "6".into())]);
        assert_eq!(grid_cells(&[]), vec![Vec::<(String, String)>::new()]);
    }

    #[test]
    fn settings_apply_and_reject() {
        let mut c = RunConfig::default();
        for (k, v) in [("w", "32"), ("m", "6"), ("gate", "pooling"), ("rank", "4"), ("ablation", "no-lora")] {
            apply_setting(&mut c, k, v).unwrap();
        }
        assert_eq!(c.model.swa, SwaConfig::new(32, 6));
        assert_eq!(c.model.gate.variant, GateVariant::Pooling);
        assert_eq!(c.model.lora.rank, 4);
        assert!(!c.stage2_options.lora);
        assert!(apply_setting(&mut c, "w", "wide").is_err());
        assert!(apply_setting(&mut c, "depth", "3").is_err());
        assert!(apply_setting(&mut c, "ablation", "no-ffn").is_err());
        assert!(parse_axis("w").is_err());
        assert!(parse_axis("w=1,,2").is_err());
    }

    #[test]
    fn corpus_split_is_disjoint_and_deterministic() {
        let mut c = RunConfig::default();
        c.data.n_train = 20;
        c.data.n_eval = 5;
        let a = load_datasets(&c).unwrap();
        let b = load_datasets(&c).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval.len(), 5);
        let text = BUILTIN_CORPUS.as_bytes();
        let split = text.len() * 9 / 10;
        let head = &text[..split];
        for s in &a.eval {
            let body: Vec<u8> = s.tokens[1..].iter().map(|&t| t as u8).collect();
            assert!(!head.windows(body.len()).any(|w| w == body.as_slice()));
        }
    }

    #[test]
    fn sweep_csv_has_one_row_per_cell() {
        let rows = vec![
            SweepRow {
                cell: "w=32 m=2".into(),
                window: 32,
                meta: 2,
                gate: "scalar".into(),
                lora_rank: 8,
                no_swa: false,
                no_gate: false,
                no_approx: false,
                no_lora: false,
                stage1_mse_before: 2.0,
                stage1_mse: 1.0,
                lm_loss_before: 3.0,
                lm_loss: 2.5,
                passkey_acc: None,
                seconds: 0.5,
            };
            3
        ];
        let text = sweep_to_csv(&rows).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("cell,window,meta,gate,"));
    }
}
