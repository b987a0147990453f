mod common;

use common::{gradcheck, random_case, ALL_OPS};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(192))]

    #[test]
    fn analytic_gradients_match_central_differences(op in 0..ALL_OPS.len(), seed in any::<u64>()) {
        let case = random_case(ALL_OPS[op], seed);
        let worst = gradcheck(&case, seed, 1e-4, 1e-6).unwrap();
        prop_assert!(worst.is_none(), "{}", worst.unwrap_or_default());
    }
}

#[test]
fn every_op_is_covered() {
    for (i, op) in ALL_OPS.iter().enumerate() {
        let case = random_case(op, i as u64);
        assert!(gradcheck(&case, 0, 1e-4, 1e-6).unwrap().is_none(), "{op}");
    }
}
