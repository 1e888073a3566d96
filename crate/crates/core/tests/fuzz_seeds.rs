//! The checked-in fuzz seed corpora parse, and survive the same round
//! trips the fuzz targets assert.

use std::fs;
use std::path::PathBuf;

use lizard::bench::{records_from_csv, records_to_csv};
use lizard::model::{decode_checkpoint, encode_checkpoint, DEFAULT_VOCAB};
use lizard::pipeline::{byte_tokenize, detokenize, read_jsonl, RunConfig, Trace};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds_round_trip() {
    for (name, bytes) in seeds("checkpoint") {
        let model = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode_checkpoint(&model).unwrap(), bytes, "{name}");
    }
}

#[test]
fn dataset_seeds_parse() {
    for (name, bytes) in seeds("dataset_jsonl") {
        let examples = read_jsonl(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!examples.is_empty(), "{name}");
    }
}

#[test]
fn config_seeds_validate() {
    for (name, bytes) in seeds("config") {
        let text = String::from_utf8(bytes).unwrap();
        let cfg = if name.ends_with(".json") {
            RunConfig::from_json(&text)
        } else {
            RunConfig::from_toml(&text)
        }
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        let back = RunConfig::from_json(&cfg.snapshot().unwrap()).unwrap();
        assert_eq!(back.snapshot().unwrap(), cfg.snapshot().unwrap(), "{name}");
    }
}

#[test]
fn csv_seeds_parse() {
    for (name, bytes) in seeds("csv") {
        let text = String::from_utf8(bytes).unwrap();
        let parsed = if name.starts_with("trace") {
            Trace::from_csv(&text).map(|t| t.rows.len())
        } else {
            records_from_csv(&text).and_then(|r| records_from_csv(&records_to_csv(&r)?)).map(|r| r.len())
        };
        assert!(parsed.unwrap_or_else(|e| panic!("{name}: {e}")) > 0, "{name}");
    }
}

#[test]
fn detokenize_seeds_round_trip() {
    for (name, bytes) in seeds("detokenize") {
        assert_eq!(detokenize(&byte_tokenize(&bytes), DEFAULT_VOCAB).unwrap(), bytes, "{name}");
    }
}
