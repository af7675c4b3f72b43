//! Experiment-spec JSON decoding and validation must never panic on any
//! input; running the experiment is out of scope for a parse fuzzer.

#![no_main]

use libfuzzer_sys::fuzz_target;
use scpanel::mc::ExperimentSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = serde_json::from_slice::<ExperimentSpec>(data) {
        let _ = spec.validate();
    }
});
