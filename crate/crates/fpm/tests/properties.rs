//! Randomized invariants over wide input ranges.

use proptest::prelude::*;

use fpm::field::wrap_phase;
use fpm::reconstruct::{batch_digest, make_schedule};

proptest! {
    #[test]
    fn wrapped_phase_stays_in_range(a in -1e6f64..1e6) {
        let w = wrap_phase(a);
        prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
        // Wrapping preserves the angle modulo 2 pi.
        let diff = (a - w) / (2.0 * std::f64::consts::PI);
        prop_assert!((diff - diff.round()).abs() < 1e-6);
    }

    #[test]
    fn schedule_partitions_for_any_shape(
        n in 1usize..60,
        b in 1usize..60,
        epochs in 1usize..6,
        seed in 0u64..1000,
    ) {
        prop_assume!(b <= n);
        let s = make_schedule(n, b, epochs, seed).unwrap();
        for epoch in &s.per_epoch {
            let mut seen = vec![false; n];
            for batch in epoch {
                prop_assert!(batch.len() <= b);
                for &i in batch {
                    prop_assert!(!seen[i], "index {i} drawn twice in one epoch");
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn digest_ignores_batch_order(mut batch in proptest::collection::vec(0usize..500, 1..20)) {
        let d1 = batch_digest(&batch);
        batch.reverse();
        prop_assert_eq!(d1, batch_digest(&batch));
        batch.sort_unstable();
        prop_assert_eq!(d1, batch_digest(&batch));
    }
}
