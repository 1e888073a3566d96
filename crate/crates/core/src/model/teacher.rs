use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor};

use super::layer::{self, lname, SequenceMixer};
use super::Model;

/// What one teacher attention layer saw and produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRecord {
    /// Normalized layer input `[L, d_model]` (gates read this).
    pub h: Tensor,
    /// Projections before rotary embedding, all heads side by side.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Attention output before `W_O`, heads side by side.
    pub y: Tensor,
}

/// Runs the frozen teacher over `tokens` and records every attention layer.
pub fn teacher_forward_collect(teacher: &Model, tokens: &[usize]) -> Result<Vec<TeacherRecord>> {
    if teacher.student {
        return Err(Error::Contract("teacher records need a teacher model".into()));
    }
    let n = teacher.cfg.n_layers;
    if teacher.params.contains(&lname(n, "wq")) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has more than the configured {n} layers"
        )));
    }
    teacher.check_tokens(tokens)?;
    let mut tape = Tape::<f32>::new();
    let b = teacher.params.bind(&mut tape, |_| false);
    let mut mixer = SequenceMixer {
        cfg: &teacher.cfg,
        student: false,
        positions: (0..tokens.len()).collect(),
    };
    let mut x = tape.gather_rows(b.get("embed")?, tokens)?;
    let mut records = Vec::with_capacity(n);
    for l in 0..n {
        let (next, tr) = layer::block(&mut tape, &teacher.cfg, &b, l, x, &mut mixer)?;
        records.push(TeacherRecord {
            h: tape.value(tr.h).clone(),
            q: tape.value(tr.q).clone(),
            k: tape.value(tr.k).clone(),
            v: tape.value(tr.v).clone(),
            y: tape.value(tr.attn).clone(),
        });
        x = next;
    }
    Ok(records)
}
