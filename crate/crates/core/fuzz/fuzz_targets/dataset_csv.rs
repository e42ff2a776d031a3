#![no_main]

use fedsim::experiments::{parse_labeled_csv, parse_real_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = parse_labeled_csv(data, Some(10)) {
        assert_eq!(d.features.rows(), d.labels.len());
        assert!(d.labels.iter().all(|&y| y < 10));
    }
    if let Ok(m) = parse_real_csv(data, None) {
        assert!(m.as_slice().iter().all(|x| x.is_finite()));
    }
});
