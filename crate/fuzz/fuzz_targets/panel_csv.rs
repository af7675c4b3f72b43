//! The first four bytes pick a treatment pattern, the rest is fed to the
//! panel CSV parser. Parsed panels must survive a bit-exact round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use scpanel::{Panel, TreatmentPattern};

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let dim = |b: u8| 1 + (b as usize) % 8;
    let Ok(pattern) = TreatmentPattern::new(dim(data[0]), dim(data[1]), dim(data[2]), dim(data[3]))
    else {
        return;
    };
    if let Ok(panel) = Panel::from_csv_reader(&data[4..], pattern.clone()) {
        let mut buf = Vec::new();
        panel.to_csv_writer(&mut buf).expect("a parsed panel serializes");
        let again = Panel::from_csv_reader(buf.as_slice(), pattern).expect("round trip parses");
        assert_eq!(again.outcomes(), panel.outcomes());
        assert_eq!(again.unit_ids(), panel.unit_ids());
        assert_eq!(again.period_ids(), panel.period_ids());
    }
});
