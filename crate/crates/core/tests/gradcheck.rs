mod common;

use common::gradcheck::{check, full_objective_case, op_cases, Report, TOLERANCE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[test]
fn every_op_matches_finite_differences() {
    let mut per_op: BTreeMap<&str, Report> = BTreeMap::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for case in op_cases(seed) {
            let r = check(&case.inputs, &*case.build, 24, &mut rng)
                .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", case.name));
            assert!(
                r.max_rel < TOLERANCE,
                "{} seed {seed}: relative error {}",
                case.name,
                r.max_rel
            );
            per_op.entry(case.name).or_default().merge(r);
        }
    }
    for (name, r) in &per_op {
        println!("{name:>26}: {} coords, max rel {:.2e}", r.checked, r.max_rel);
    }
}

#[test]
fn joint_objective_matches_finite_differences() {
    let mut total = Report::default();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = full_objective_case(seed).unwrap();
        let r = check(&case.inputs, &*case.build, 3, &mut rng).unwrap();
        assert!(r.max_rel < TOLERANCE, "seed {seed}: relative error {}", r.max_rel);
        total.merge(r);
    }
    println!("loss_all: {} coords, max rel {:.2e}", total.checked, total.max_rel);
}
