#![no_main]

use libfuzzer_sys::fuzz_target;
use viewchange::datasets::FoldPlan;

fuzz_target!(|data: &[u8]| {
    let Some((&k, text)) = data.split_first() else { return };
    if let Ok(plan) = FoldPlan::from_csv(text, k as usize) {
        let again = FoldPlan::from_csv(plan.to_csv().expect("plan serializes").as_bytes(), k as usize).expect("re-encoded plan parses");
        assert_eq!(again, plan);
    }
});
