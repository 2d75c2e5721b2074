//! Deterministic fixtures shared by the kernel benches.

use prm_core::admm::{hard_prune, StructuredBudget};
use prm_core::{build_lenet5, LayerGraph, Tensor};

/// Uniform values in [-1, 1) from a fixed LCG, so benches need no RNG crate.
pub fn tensor(dims: &[usize], seed: u64) -> Tensor {
    let n = dims.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(dims.to_vec(), data).expect("fixture dims")
}

/// LeNet-5 hard-pruned to roughly the tier-1 budgets.
pub fn pruned_lenet() -> LayerGraph {
    let mut g = build_lenet5();
    g.init_weights(1);
    let budgets = [
        ("conv1", Some(8), None),
        ("conv2", Some(16), None),
        ("fc1", Some(25), Some(200)),
    ]
    .map(|(layer, filters, columns)| StructuredBudget {
        layer: layer.into(),
        filters,
        columns,
    });
    hard_prune(&mut g, &budgets).expect("budgets fit lenet5");
    g
}
