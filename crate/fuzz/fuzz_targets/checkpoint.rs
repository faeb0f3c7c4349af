#![no_main]

use libfuzzer_sys::fuzz_target;
use viewchange::nn::{checkpoint_from_bytes, checkpoint_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok((cfg, params)) = checkpoint_from_bytes(data) {
        let bytes = checkpoint_to_bytes(&params, &cfg).expect("loaded checkpoint re-encodes");
        assert!(checkpoint_from_bytes(&bytes).is_ok());
    }
});
