//! Training loops for the teacher and both distillation stages.
//!
//! Each batch item runs forward and backward on its own tape; item
//! gradients are summed in batch order, so results do not depend on how
//! many lanes computed them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{lm_loss, stage1_mse_loss, teacher_forward_collect, Bound, Model, ParamGroup};
use crate::numcore::{Tape, Var};

use super::data::{frame, Sample};
use super::optim::{lr_schedule, AdamW, TrainConfig};

/// One row of a loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Mean loss over the last `n` rows.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.rows.len());
        (k > 0).then(|| self.rows[self.rows.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64)
    }

    /// CSV with header `step,lr,loss,grad_norm`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["step", "lr", "loss", "grad_norm"]).map_err(csv_err)?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != ["step", "lr", "loss", "grad_norm"] {
            return Err(Error::Parse(format!("unexpected trace header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>().map_err(csv_err)?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Worker lanes: `LIZARD_THREADS` if set, else the machine's parallelism.
pub fn lanes() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("LIZARD_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(hw, |n| n.min(hw.max(1)).max(1))
}

/// Loss of one sample on a tape whose parameters are bound in `b`.
pub type ItemLoss<'a> = dyn Fn(&Model, &mut Tape<f32>, &Bound, &Sample) -> Result<Var> + Sync + 'a;

struct ItemResult {
    loss: f64,
    grads: Vec<Vec<f32>>,
}

fn item_grads(
    model: &Model,
    names: &[String],
    trainable: &(dyn Fn(&str) -> bool + Sync),
    loss_fn: &ItemLoss<'_>,
    sample: &Sample,
) -> Result<ItemResult> {
    let mut tape = Tape::<f32>::new();
    let b = model.params.bind(&mut tape, trainable);
    let loss = loss_fn(model, &mut tape, &b, sample)?;
    let value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let grads = names
        .iter()
        .map(|n| {
            let v = b.get(n)?;
            Ok(match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
        })
        .collect::<Result<_>>()?;
    Ok(ItemResult { loss: value, grads })
}

/// Mean loss and mean gradients of `batch`, fanned out over lanes.
fn batch_grads(
    model: &Model,
    names: &[String],
    trainable: &(dyn Fn(&str) -> bool + Sync),
    loss_fn: &ItemLoss<'_>,
    batch: &[&Sample],
) -> Result<(f64, Vec<Vec<f32>>)> {
    let lanes = lanes().min(batch.len()).max(1);
    let results: Vec<Result<ItemResult>> = if lanes == 1 {
        batch.iter().map(|s| item_grads(model, names, trainable, loss_fn, s)).collect()
    } else {
        let per = batch.len().div_ceil(lanes);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(per)
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|s| item_grads(model, names, trainable, loss_fn, s))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training lane panicked"))
                .collect()
        })
    };
    let mut loss = 0.0;
    let mut acc: Vec<Vec<f32>> = Vec::new();
    for r in results {
        let r = r?;
        loss += r.loss;
        if acc.is_empty() {
            acc = r.grads;
        } else {
            for (a, g) in acc.iter_mut().zip(&r.grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss / batch.len() as f64, acc))
}

/// Sample indices for `steps` batches: a fresh seeded permutation per epoch.
fn batch_order(n: usize, batch: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps * batch);
    while out.len() < steps * batch {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        out.extend(perm);
    }
    out.truncate(steps * batch);
    out
}

/// Progress callback, invoked after every step.
pub type Progress<'a> = Option<&'a mut dyn FnMut(&TraceRow)>;

/// Generic optimization loop over `samples`.
pub fn train_loop(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    loss_fn: &ItemLoss<'_>,
    mut progress: Progress<'_>,
) -> Result<Trace> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let names: Vec<String> = model.params.names().into_iter().filter(|n| trainable(n)).collect();
    if names.is_empty() {
        return Err(Error::Contract(format!("{}: nothing to train", cfg.stage)));
    }
    let steps = cfg.total_steps(samples.len());
    let order = batch_order(samples.len(), cfg.batch, steps, seed);
    let mut opt = AdamW::new();
    let mut trace = Trace::default();
    for step in 0..steps {
        let batch: Vec<&Sample> = order[step * cfg.batch..(step + 1) * cfg.batch]
            .iter()
            .map(|&i| &samples[i])
            .collect();
        let (loss, grads) = batch_grads(model, &names, trainable, loss_fn, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = lr_schedule(step, steps, cfg);
        let named: Vec<(String, Vec<f32>)> = names.iter().cloned().zip(grads).collect();
        let stats = opt.step(&mut model.params, &named, lr, cfg)?;
        let row = TraceRow {
            step,
            lr,
            loss,
            grad_norm: stats.grad_norm,
        };
        if let Some(p) = progress.as_deref_mut() {
            p(&row);
        }
        trace.rows.push(row);
    }
    Ok(trace)
}

/// Next-token loss of one sample with meta tokens prepended.
pub fn sample_lm_loss(
    model: &Model,
    tape: &mut Tape<f32>,
    b: &Bound,
    sample: &Sample,
    answer_weight: f32,
) -> Result<Var> {
    let f = frame(&model.cfg.meta_ids(), sample, answer_weight)?;
    let logits = model.forward(tape, b, &f.input)?;
    if f.weights.iter().all(|&w| w == 1.0) {
        return lm_loss(tape, logits, &f.targets);
    }
    tape.cross_entropy(logits, &f.targets, &f.weights)
}

/// Language-model pretraining of every base parameter.
pub fn train_teacher(
    teacher: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<Trace> {
    if teacher.student {
        return Err(Error::Contract("train_teacher needs a teacher model".into()));
    }
    let aw = cfg.answer_weight;
    let loss = move |m: &Model, t: &mut Tape<f32>, b: &Bound, s: &Sample| sample_lm_loss(m, t, b, s, aw);
    train_loop(teacher, samples, cfg, seed, &|_| true, &loss, progress)
}

/// Stage 1: fit feature maps, gates and mixing scalars to the teacher's
/// attention outputs with the backbone frozen.
pub fn train_stage1(
    teacher: &Model,
    student: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<Trace> {
    if !student.student || teacher.student {
        return Err(Error::Contract("stage 1 needs a teacher and a student".into()));
    }
    let meta = student.cfg.meta_ids();
    let loss = move |m: &Model, t: &mut Tape<f32>, b: &Bound, s: &Sample| -> Result<Var> {
        let f = frame(&meta, s, 1.0)?;
        let recs = teacher_forward_collect(teacher, &f.input)?;
        stage1_mse_loss(t, m, b, &recs)
    };
    let trainable = |n: &str| ParamGroup::of(n) == ParamGroup::Approx;
    train_loop(student, samples, cfg, seed, &trainable, &loss, progress)
}

/// What stage 2 updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Options {
    /// Train low-rank adapters; otherwise the base weights themselves.
    pub lora: bool,
    /// Keep the stage-1 modules fixed.
    pub freeze_approx: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            lora: true,
            freeze_approx: false,
        }
    }
}

/// Stage 2: next-token fine-tuning of the student.
pub fn train_stage2(
    student: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    opts: Stage2Options,
    seed: u64,
    progress: Progress<'_>,
) -> Result<Trace> {
    if !student.student {
        return Err(Error::Contract("stage 2 needs a student model".into()));
    }
    if opts.lora && !student.has_lora() {
        student.add_lora(seed ^ 0x5151);
    }
    let trainable = move |n: &str| match ParamGroup::of(n) {
        ParamGroup::Lora => opts.lora,
        ParamGroup::Base => !opts.lora,
        ParamGroup::Approx => !opts.freeze_approx,
    };
    let aw = cfg.answer_weight;
    let loss = move |m: &Model, t: &mut Tape<f32>, b: &Bound, s: &Sample| sample_lm_loss(m, t, b, s, aw);
    train_loop(student, samples, cfg, seed, &trainable, &loss, progress)
}

/// Mean next-token loss over `samples` (all targets weighted equally
/// except meta and BOS).
pub fn eval_lm_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::<f32>::new();
        let b = model.params.bind(&mut tape, |_| false);
        let l = sample_lm_loss(model, &mut tape, &b, s, 1.0)?;
        total += tape.value(l).data()[0] as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mean stage-1 loss over `samples` without updating anything.
pub fn eval_stage1_loss(teacher: &Model, student: &Model, samples: &[Sample]) -> Result<f64> {
    let meta = student.cfg.meta_ids();
    let mut total = 0.0;
    for s in samples {
        let f = frame(&meta, s, 1.0)?;
        let recs = teacher_forward_collect(teacher, &f.input)?;
        let mut tape = Tape::<f32>::new();
        let b = student.params.bind(&mut tape, |_| false);
        let l = stage1_mse_loss(&mut tape, student, &b, &recs)?;
        total += tape.value(l).data()[0] as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}
