#![no_main]

use libfuzzer_sys::fuzz_target;
use lizard::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        // anything accepted must re-encode to a checkpoint that decodes identically
        let bytes = encode_checkpoint(&model).expect("accepted checkpoint re-encodes");
        assert_eq!(decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes"), model);
    }
});
