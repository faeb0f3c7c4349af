#![no_main]

use libfuzzer_sys::fuzz_target;
use viewchange::tensor::FlowField;

fuzz_target!(|data: &[u8]| {
    if let Ok(flow) = FlowField::from_flo_bytes(data) {
        let bytes = flow.to_flo_bytes();
        let again = FlowField::from_flo_bytes(&bytes).expect("re-encoded flow parses");
        assert_eq!(again.to_flo_bytes(), bytes);
    }
});
