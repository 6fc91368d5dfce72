//! Analytic vs central finite-difference gradients of the joint loss with
//! respect to every parameter tensor, through the full context path.

mod common;

use common::{all_micro_variants, grad_check};

#[test]
fn every_variant_matches_finite_differences() {
    for (seed, (label, config, size)) in all_micro_variants().into_iter().enumerate() {
        let s = grad_check(config, seed as u64 + 1, size);
        println!("{label}: {} entries, worst relative error {:.2e} at {}", s.checked, s.worst_rel, s.worst_at);
        assert!(s.failures.is_empty(), "{label}: {:#?}", s.failures);
    }
}
