//! Synthetic passkey-retrieval data.
//!
//! Each sequence plants five records `# NAME p1 … pn` in filler prose and
//! ends with the query `? NAME` followed by that record's passkey. Passkey
//! tokens are drawn without replacement from the non-ASCII byte range, so
//! they never collide with filler or with each other.

use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BOS;

use super::data::Sample;

pub const N_KEYS: usize = 5;
pub const MIN_KEY_LEN: usize = 5;
pub const MAX_KEY_LEN: usize = 8;
pub const RECORD_MARK: usize = b'#' as usize;
pub const QUERY_MARK: usize = b'?' as usize;
/// Passkey tokens come from `128..256`.
const KEY_TOKENS: std::ops::Range<usize> = 128..256;
/// Filler must leave at least this many tokens around the records.
const MIN_FILLER: usize = 8;

/// Filler sentences: lowercase, so key names (uppercase letters) and the
/// `#`/`?` markers never occur in filler.
pub const FILLER: [&str; 12] = [
    "the grass is green. ",
    "the sky is blue. ",
    "the sun is yellow. ",
    "here we go. ",
    "there and back again. ",
    "the river runs to the sea. ",
    "a bird sings in the tall tree. ",
    "the road winds over the hill. ",
    "rain falls on the quiet town. ",
    "the old mill turns all day. ",
    "snow lies deep in the valley. ",
    "a ship sails past the harbor. ",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyEntry {
    /// Single-letter key name.
    pub name: String,
    /// `[start, len]` of the passkey tokens.
    pub span: [usize; 2],
    /// Index of the record's `#` marker.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasskeyMeta {
    pub keys: Vec<KeyEntry>,
    pub query: String,
    /// Relative position of the queried record within the haystack, in `[0, 1]`.
    pub depth: f64,
}

/// One dataset line: `{tokens, answer_span: [start, len], meta}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasskeyExample {
    pub tokens: Vec<u32>,
    pub answer_span: [usize; 2],
    pub meta: PasskeyMeta,
}

impl PasskeyExample {
    pub fn to_sample(&self) -> Sample {
        Sample {
            tokens: self.tokens.iter().map(|&t| t as usize).collect(),
            answer: Some((self.answer_span[0], self.answer_span[1])),
        }
    }

    pub fn answer(&self) -> &[u32] {
        let [s, l] = self.answer_span;
        &self.tokens[s..s + l]
    }

    /// Depth decile `0..10` of the queried record.
    pub fn decile(&self) -> usize {
        ((self.meta.depth * 10.0) as usize).min(9)
    }

    /// Structural checks applied to parsed lines.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parse(m));
        let n = self.tokens.len();
        let [s, l] = self.answer_span;
        if s == 0 || l == 0 || s.checked_add(l) != Some(n) {
            return bad(format!("answer span [{s}, {l}] must end the {n}-token sequence"));
        }
        if self.tokens[0] as usize != BOS {
            return bad("sequence must start with BOS".into());
        }
        if self.meta.keys.len() != N_KEYS {
            return bad(format!("{} keys, want {N_KEYS}", self.meta.keys.len()));
        }
        let mut spans: Vec<[usize; 2]> = Vec::with_capacity(N_KEYS);
        for k in &self.meta.keys {
            let [ks, kl] = k.span;
            if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&kl) || ks.checked_add(kl).is_none_or(|e| e > s) {
                return bad(format!("key {} span [{ks}, {kl}] invalid", k.name));
            }
            if k.position.checked_add(2) != Some(ks) {
                return bad(format!("key {} record is not `# NAME passkey`", k.name));
            }
            spans.push([k.position, kl + 2]);
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0][0] + w[0][1] > w[1][0]) {
            return bad("key records overlap".into());
        }
        let q = self
            .meta
            .keys
            .iter()
            .find(|k| k.name == self.meta.query)
            .ok_or_else(|| Error::Parse(format!("query {:?} names no key", self.meta.query)))?;
        let [qs, ql] = q.span;
        if ql != l || self.tokens[qs..qs + ql] != self.tokens[s..s + l] {
            return bad("answer differs from the queried passkey".into());
        }
        if !(0.0..=1.0).contains(&self.meta.depth) {
            return bad(format!("depth {} outside [0, 1]", self.meta.depth));
        }
        Ok(())
    }
}

/// Shortest sequence that always fits five records and some filler.
pub fn min_seq_len() -> usize {
    1 + 2 + MAX_KEY_LEN + N_KEYS * (2 + MAX_KEY_LEN) + MIN_FILLER
}

fn filler_stream(rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(len + 64);
    while out.len() < len {
        let s = FILLER.choose(rng).expect("non-empty pool");
        out.extend(s.bytes().map(u32::from));
    }
    out.truncate(len);
    out
}

/// Starts of records with lengths `lens` laid out in order inside
/// `[0, region)` with random gaps.
fn scatter(rng: &mut ChaCha8Rng, region: usize, lens: &[usize]) -> Vec<usize> {
    let free = region - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..lens.len()).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut used = 0;
    cuts.iter()
        .zip(lens)
        .map(|(&c, &l)| {
            let s = c + used;
            used += l;
            s
        })
        .collect()
}

/// One example of exactly `seq_len` tokens. With `depth = Some(d)` the
/// queried record starts at fraction `d` of the haystack.
pub fn generate_example(seq_len: usize, depth: Option<f64>, rng: &mut ChaCha8Rng) -> Result<PasskeyExample> {
    if seq_len < min_seq_len() {
        return Err(Error::Infeasible(format!(
            "passkey sequences need at least {} tokens, got {seq_len}",
            min_seq_len()
        )));
    }
    let lens: Vec<usize> = (0..N_KEYS).map(|_| rng.random_range(MIN_KEY_LEN..=MAX_KEY_LEN)).collect();
    let mut pool: Vec<usize> = KEY_TOKENS.collect();
    pool.shuffle(rng);
    let mut letters: Vec<u8> = (b'A'..=b'Z').collect();
    letters.shuffle(rng);
    let q = rng.random_range(0..N_KEYS);

    let body = seq_len - 3 - lens[q];
    let rec: Vec<usize> = lens.iter().map(|l| l + 2).collect();
    let qpos_max = body - rec[q];
    let depth = depth.unwrap_or_else(|| rng.random::<f64>()).clamp(0.0, 1.0);
    let qpos = ((depth * qpos_max as f64).round() as usize).min(qpos_max);

    // Distribute the other records to the left or right of the query record.
    let others: Vec<usize> = (0..N_KEYS).filter(|&i| i != q).collect();
    let (left_cap, right_cap) = (qpos, body - qpos - rec[q]);
    let mut side = vec![false; N_KEYS];
    let mut placed = false;
    for _ in 0..200 {
        let mut l = 0;
        let mut r = 0;
        for &i in &others {
            side[i] = rng.random_bool(0.5);
            if side[i] {
                r += rec[i];
            } else {
                l += rec[i];
            }
        }
        if l <= left_cap && r <= right_cap {
            placed = true;
            break;
        }
    }
    if !placed {
        // Depth near an edge: everything fits on the roomier side.
        let go_right = right_cap >= left_cap;
        for &i in &others {
            side[i] = go_right;
        }
    }
    let mut left: Vec<usize> = others.iter().copied().filter(|&i| !side[i]).collect();
    let mut right: Vec<usize> = others.iter().copied().filter(|&i| side[i]).collect();
    left.shuffle(rng);
    right.shuffle(rng);
    let left_lens: Vec<usize> = left.iter().map(|&i| rec[i]).collect();
    let right_lens: Vec<usize> = right.iter().map(|&i| rec[i]).collect();
    if left_lens.iter().sum::<usize>() > left_cap || right_lens.iter().sum::<usize>() > right_cap {
        return Err(Error::Infeasible(format!("cannot place records at depth {depth}")));
    }
    let mut starts = vec![0; N_KEYS];
    for (&i, s) in left.iter().zip(scatter(rng, left_cap, &left_lens)) {
        starts[i] = s;
    }
    let base = qpos + rec[q];
    for (&i, s) in right.iter().zip(scatter(rng, right_cap, &right_lens)) {
        starts[i] = base + s;
    }
    starts[q] = qpos;

    let mut tokens: Vec<u32> = Vec::with_capacity(seq_len);
    tokens.push(BOS as u32);
    let mut hay = filler_stream(rng, body);
    let mut next_key = 0;
    let mut keys = Vec::with_capacity(N_KEYS);
    for i in 0..N_KEYS {
        let s = starts[i];
        let pk = &pool[next_key..next_key + lens[i]];
        next_key += lens[i];
        hay[s] = RECORD_MARK as u32;
        hay[s + 1] = u32::from(letters[i]);
        for (dst, &t) in hay[s + 2..s + 2 + lens[i]].iter_mut().zip(pk) {
            *dst = t as u32;
        }
        keys.push(KeyEntry {
            name: (letters[i] as char).to_string(),
            span: [1 + s + 2, lens[i]],
            position: 1 + s,
        });
    }
    tokens.extend_from_slice(&hay);
    tokens.push(QUERY_MARK as u32);
    tokens.push(u32::from(letters[q]));
    let [ks, kl] = keys[q].span;
    let answer: Vec<u32> = tokens[ks..ks + kl].to_vec();
    let answer_start = tokens.len();
    tokens.extend_from_slice(&answer);
    debug_assert_eq!(tokens.len(), seq_len);
    let ex = PasskeyExample {
        tokens,
        answer_span: [answer_start, kl],
        meta: PasskeyMeta {
            keys,
            query: (letters[q] as char).to_string(),
            depth: if qpos_max == 0 { 0.0 } else { qpos as f64 / qpos_max as f64 },
        },
    };
    debug_assert!(ex.validate().is_ok());
    Ok(ex)
}

/// Per-example generator seeded from `(seed, index)`, so examples can be
/// produced in any order.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

pub fn generate_passkey_dataset(n: usize, seq_len: usize, seed: u64) -> Result<Vec<PasskeyExample>> {
    (0..n)
        .map(|i| generate_example(seq_len, None, &mut example_rng(seed, i as u64)))
        .collect()
}

/// `per_cell` examples for each depth decile at length `seq_len`, in
/// decile order.
pub fn depth_grid(seq_len: usize, per_cell: usize, seed: u64) -> Result<Vec<PasskeyExample>> {
    let mut out = Vec::with_capacity(10 * per_cell);
    for d in 0..10 {
        for i in 0..per_cell {
            let mut rng = example_rng(seed ^ (seq_len as u64).rotate_left(32), (d * per_cell + i) as u64);
            // keep clear of the decile edges so position rounding cannot
            // move the record into a neighbouring cell
            let depth = (d as f64 + rng.random_range(0.15..0.85)) / 10.0;
            out.push(generate_example(seq_len, Some(depth), &mut rng)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[PasskeyExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses and validates one JSONL line.
pub fn parse_jsonl_line(line: &str) -> Result<PasskeyExample> {
    let ex: PasskeyExample =
        serde_json::from_str(line).map_err(|e| Error::Parse(format!("passkey line: {e}")))?;
    ex.validate()?;
    Ok(ex)
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PasskeyExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_jsonl_line(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
