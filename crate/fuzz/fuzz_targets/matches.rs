#![no_main]

use libfuzzer_sys::fuzz_target;
use viewchange::matcher::MatchSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = MatchSet::from_text(text) {
        let again = MatchSet::from_text(&set.to_text()).expect("re-encoded matches parse");
        assert_eq!(again.to_text(), set.to_text());
    }
});
