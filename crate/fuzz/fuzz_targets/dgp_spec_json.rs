//! Design-spec JSON decoding must never panic, and any spec that survives
//! validation and simulation must honor the treated-block contract:
//! outcomes equal the counterfactual plus tau exactly on treated cells.

#![no_main]

use libfuzzer_sys::fuzz_target;
use scpanel::dgp::{self, DgpSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<DgpSpec>(data) else { return };
    if spec.validate().is_err() {
        return;
    }
    let p = spec.pattern.clone();
    // Keep the per-input work bounded; giant panels add nothing here.
    if p.n_units() * p.n_periods() > 4096 || spec.r > 8 {
        return;
    }
    if let Ok((panel, draw)) = dgp::simulate(&spec) {
        let y0 = dgp::counterfactual_outcomes(&spec, &draw).expect("draw matches the spec");
        for i in 0..p.n_units() {
            for t in 0..p.n_periods() {
                let shift = if p.is_treated(i, t) { spec.tau } else { 0.0 };
                assert!(
                    (panel.outcomes()[(i, t)] - y0[(i, t)] - shift).abs() <= 1e-9,
                    "treatment contract violated at ({i}, {t})"
                );
            }
        }
    }
});
