//! Solver-config JSON decoding and validation must never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use scpanel::solver::SolverConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<SolverConfig>(data) {
        let _ = cfg.validate();
    }
});
