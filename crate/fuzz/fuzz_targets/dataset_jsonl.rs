#![no_main]

use libfuzzer_sys::fuzz_target;
use lizard::pipeline::{parse_jsonl_line, read_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(ex) = parse_jsonl_line(line) {
            let [s, l] = ex.answer_span;
            assert_eq!(s + l, ex.tokens.len());
        }
    }
    let _ = read_jsonl(data);
});
