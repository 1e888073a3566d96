#![no_main]

use libfuzzer_sys::fuzz_target;
use lizard::bench::{records_from_csv, records_to_csv};
use lizard::pipeline::Trace;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(trace) = Trace::from_csv(text) {
        let _ = trace.to_csv();
    }
    if let Ok(records) = records_from_csv(text) {
        let again = records_from_csv(&records_to_csv(&records).expect("writes")).expect("reparses");
        assert_eq!(again.len(), records.len());
    }
});
