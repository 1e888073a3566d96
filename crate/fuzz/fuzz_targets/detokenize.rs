#![no_main]

use libfuzzer_sys::fuzz_target;
use lizard::model::DEFAULT_VOCAB;
use lizard::pipeline::{byte_tokenize, detokenize};

fuzz_target!(|data: &[u8]| {
    // bytes round-trip exactly
    assert_eq!(detokenize(&byte_tokenize(data), DEFAULT_VOCAB).unwrap(), data);
    // arbitrary id streams either decode or report an out-of-range id
    let ids: Vec<usize> = data.chunks(2).map(|c| c.iter().fold(0usize, |a, &b| a * 256 + b as usize)).collect();
    if let Ok(text) = detokenize(&ids, DEFAULT_VOCAB) {
        assert!(text.len() <= ids.len());
    }
});
