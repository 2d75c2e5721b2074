//! Exhaustive-search oracle for the structured projection.

use prm_core::admm::{project_structured, StructuredBudget};
use prm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub w: Tensor,
    pub rows: usize,
    pub cols: usize,
}

/// 500 random matrices of size up to 6x8.
pub fn corpus() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..500)
        .map(|_| {
            let rows = rng.gen_range(1..=6);
            let cols = rng.gen_range(1..=8);
            let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Case {
                w: Tensor::new(vec![rows, cols], data).unwrap(),
                rows,
                cols,
            }
        })
        .collect()
}

fn subsets(n: usize, k: usize) -> Vec<Vec<bool>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn kept_energy(w: &Tensor, cols: usize, rows_kept: &[bool], cols_kept: &[bool]) -> f64 {
    let mut e = 0.0;
    for (r, &rk) in rows_kept.iter().enumerate() {
        for (c, &ck) in cols_kept.iter().enumerate() {
            if rk && ck {
                e += w.data()[r * cols + c].powi(2);
            }
        }
    }
    e
}

fn support(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|v| *v != 0.0).collect()
}

fn masked(w: &Tensor, cols: usize, rows_kept: &[bool], cols_kept: &[bool]) -> Vec<bool> {
    (0..w.len())
        .map(|i| rows_kept[i / cols] && cols_kept[i % cols])
        .collect()
}

fn budget(filters: Option<usize>, columns: Option<usize>) -> StructuredBudget {
    StructuredBudget {
        layer: "w".into(),
        filters,
        columns,
    }
}

#[test]
pub fn single_constraint_matches_exhaustive_argmin() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n, case) in corpus().iter().enumerate() {
        let (rows, cols) = (case.rows, case.cols);
        let all_rows = vec![true; rows];
        let all_cols = vec![true; cols];

        let kr = rng.gen_range(1..=rows);
        let best = subsets(rows, kr)
            .into_iter()
            .max_by(|a, b| {
                kept_energy(&case.w, cols, a, &all_cols).total_cmp(&kept_energy(&case.w, cols, b, &all_cols))
            })
            .unwrap();
        let p = project_structured(&case.w, &budget(Some(kr), None)).unwrap();
        assert_eq!(
            support(&p),
            masked(&case.w, cols, &best, &all_cols),
            "case {n}: rows k={kr}"
        );

        let kc = rng.gen_range(1..=cols);
        let best = subsets(cols, kc)
            .into_iter()
            .max_by(|a, b| {
                kept_energy(&case.w, cols, &all_rows, a).total_cmp(&kept_energy(&case.w, cols, &all_rows, b))
            })
            .unwrap();
        let p = project_structured(&case.w, &budget(None, Some(kc))).unwrap();
        assert_eq!(
            support(&p),
            masked(&case.w, cols, &all_rows, &best),
            "case {n}: cols k={kc}"
        );
        // kept entries are copied exactly
        for (a, b) in p.data().iter().zip(case.w.data()) {
            assert!(*a == 0.0 || a == b);
        }
    }
}

/// Relative Frobenius gap `(|W - P_seq| - |W - P*|) / |W - P*|` of the
/// sequential rows-then-columns projection against the exhaustive joint
/// optimum, over the corpus. Returns (mean, max).
pub fn joint_gap() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut gaps = Vec::new();
    for case in corpus() {
        let (rows, cols) = (case.rows, case.cols);
        let kr = rng.gen_range(1..=rows);
        let kc = rng.gen_range(1..=cols);
        let total = case.w.sq_norm();
        let mut best = 0.0f64;
        for rk in subsets(rows, kr) {
            for ck in subsets(cols, kc) {
                best = best.max(kept_energy(&case.w, cols, &rk, &ck));
            }
        }
        let p = project_structured(&case.w, &budget(Some(kr), Some(kc))).unwrap();
        let mut diff = case.w.clone();
        diff.axpy(-1.0, &p);
        let seq = diff.norm();
        let opt = (total - best).max(0.0).sqrt();
        assert!(seq + 1e-12 >= opt, "heuristic beat the exhaustive optimum");
        gaps.push(if opt > 1e-12 { (seq - opt) / opt } else { 0.0 });
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    (mean, gaps.iter().cloned().fold(0.0, f64::max))
}

#[test]
pub fn combined_constraint_gap_is_small() {
    let (mean, max) = joint_gap();
    println!(
        "sequential projection gap: mean {:.3}%, max {:.3}%",
        mean * 100.0,
        max * 100.0
    );
    assert!(mean <= 0.05, "mean gap {mean}");
}
