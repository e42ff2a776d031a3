#![no_main]

use fedsim::aggregation::{AggregationInput, AggregatorKind, DEFAULT_MWU_ITERS};
use fedsim::experiments::parse_real_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(m) = parse_real_csv(data, None) else {
        return;
    };
    if m.rows() > 64 || m.cols() > 64 {
        return;
    }
    let updates: Vec<Vec<f64>> = m.iter_rows().map(<[f64]>::to_vec).collect();
    let Ok(input) = AggregationInput::new(&updates, None, 0.1) else {
        return;
    };
    for rule in AggregatorKind::ALL {
        if let Ok(v) = rule.aggregate(&input, DEFAULT_MWU_ITERS) {
            assert_eq!(v.len(), m.cols());
        }
    }
});
