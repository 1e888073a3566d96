//! Passkey retrieval scoring over a (sequence length × depth decile) grid.
//!
//! An answer counts only if every passkey token is reproduced. Scoring runs
//! the whole sequence once and checks the argmax at each answer position;
//! greedy decoding produces the answer exactly when all those argmaxes are
//! right, so the two judgments coincide.

use crate::error::Result;
use crate::model::{argmax, Model};

use super::data::frame;
use super::passkey::{depth_grid, PasskeyExample};
use super::train::{csv_err, lanes};

/// Anything that predicts the next token at every position.
pub trait Predictor: Sync {
    /// Argmax next token for each position of `input`.
    fn predict(&self, input: &[usize]) -> Result<Vec<usize>>;
    fn meta_ids(&self) -> Vec<usize>;
}

impl Predictor for Model {
    fn predict(&self, input: &[usize]) -> Result<Vec<usize>> {
        let logits = self.logits(input)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    fn meta_ids(&self) -> Vec<usize> {
        self.cfg.meta_ids()
    }
}

/// Whether `p` reproduces the whole passkey.
pub fn passkey_correct<P: Predictor + ?Sized>(p: &P, ex: &PasskeyExample) -> Result<bool> {
    let meta = p.meta_ids();
    let f = frame(&meta, &ex.to_sample(), 1.0)?;
    let pred = p.predict(&f.input)?;
    let [s, l] = ex.answer_span;
    let first = meta.len() + s - 1;
    Ok((first..first + l).all(|j| pred[j] == f.targets[j]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PasskeyGrid {
    pub lengths: Vec<usize>,
    /// `[length][decile]` counts.
    pub correct: Vec<[usize; 10]>,
    pub total: Vec<[usize; 10]>,
}

impl PasskeyGrid {
    pub fn accuracy(&self, li: usize, decile: usize) -> f64 {
        let t = self.total[li][decile];
        if t == 0 {
            0.0
        } else {
            self.correct[li][decile] as f64 / t as f64
        }
    }

    /// Accuracy over all deciles at `length`.
    pub fn length_accuracy(&self, length: usize) -> Option<f64> {
        let li = self.lengths.iter().position(|&l| l == length)?;
        let c: usize = self.correct[li].iter().sum();
        let t: usize = self.total[li].iter().sum();
        Some(if t == 0 { 0.0 } else { c as f64 / t as f64 })
    }

    /// Accuracy over every cell.
    pub fn overall_accuracy(&self) -> f64 {
        let c: usize = self.correct.iter().flatten().sum();
        let t: usize = self.total.iter().flatten().sum();
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    /// CSV `length,decile,correct,total,accuracy`, one row per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["length", "decile", "correct", "total", "accuracy"]).map_err(csv_err)?;
        for (li, &len) in self.lengths.iter().enumerate() {
            for d in 0..10 {
                w.write_record([
                    len.to_string(),
                    d.to_string(),
                    self.correct[li][d].to_string(),
                    self.total[li][d].to_string(),
                    format!("{:.4}", self.accuracy(li, d)),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scores `examples` in parallel lanes; results keep input order.
pub fn score_examples<P: Predictor + ?Sized>(p: &P, examples: &[PasskeyExample]) -> Result<Vec<bool>> {
    let lanes = lanes().min(examples.len()).max(1);
    if lanes == 1 {
        return examples.iter().map(|e| passkey_correct(p, e)).collect();
    }
    let per = examples.len().div_ceil(lanes);
    std::thread::scope(|scope| {
        let hs: Vec<_> = examples
            .chunks(per)
            .map(|c| scope.spawn(move || c.iter().map(|e| passkey_correct(p, e)).collect::<Vec<_>>()))
            .collect();
        hs.into_iter()
            .flat_map(|h| h.join().expect("eval lane panicked"))
            .collect()
    })
}

/// Accuracy grid with `per_cell` fresh examples per (length, decile).
pub fn evaluate_passkey<P: Predictor + ?Sized>(
    p: &P,
    lengths: &[usize],
    per_cell: usize,
    seed: u64,
) -> Result<PasskeyGrid> {
    let mut examples = Vec::new();
    for &len in lengths {
        examples.extend(depth_grid(len, per_cell, seed)?);
    }
    grid_from_examples(p, &examples)
}

/// Scores a fixed example set, grouped by sequence length and depth decile.
pub fn grid_from_examples<P: Predictor + ?Sized>(p: &P, examples: &[PasskeyExample]) -> Result<PasskeyGrid> {
    let mut lengths: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut grid = PasskeyGrid {
        correct: vec![[0; 10]; lengths.len()],
        total: vec![[0; 10]; lengths.len()],
        lengths,
    };
    for (ex, ok) in examples.iter().zip(score_examples(p, examples)?) {
        let li = grid.lengths.binary_search(&ex.tokens.len()).expect("length collected above");
        let d = ex.decile();
        grid.total[li][d] += 1;
        grid.correct[li][d] += ok as usize;
    }
    Ok(grid)
}
