mod common;

use common::{instance, oracle_errors, ORACLE_QUANTITIES};

#[test]
fn alignment_and_losses_match_naive_loops_on_20_seeds() {
    for seed in 0..20 {
        let inst = instance(seed);
        for (name, err) in ORACLE_QUANTITIES.iter().zip(oracle_errors(&inst)) {
            assert!(err <= 1e-10, "seed {seed}: {name} differs by {err:e}");
        }
    }
}

#[test]
fn masked_columns_carry_no_attention() {
    let inst = instance(3);
    let w = common::attention_weights(&inst.x_local, &inst.v_local, &inst.keep);
    for row in &w {
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (j, &p) in row.iter().enumerate() {
            assert!(inst.keep[j] || p == 0.0);
        }
    }
}
