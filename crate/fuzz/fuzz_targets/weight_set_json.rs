//! Weight-file JSON decoding must never panic, validation must reject
//! non-finite content gracefully, and valid sets must round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use scpanel::WeightSet;

fuzz_target!(|data: &[u8]| {
    let Ok(ws) = serde_json::from_slice::<WeightSet>(data) else { return };
    if ws.validate().is_ok() {
        let text = serde_json::to_string(&ws).expect("valid weight sets serialize");
        let again: WeightSet = serde_json::from_str(&text).expect("round trip parses");
        assert_eq!(again, ws);
    }
});
