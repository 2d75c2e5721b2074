use proptest::prelude::*;

use prm_core::admm::{dual_update, project_structured, StructuredBudget};
use prm_core::checkpoint::{from_bytes, to_bytes, Checkpoint, Dtype};
use prm_core::data::Dataset;
use prm_core::graph::{build_tiny_resnet_for, GraphBuilder};
use prm_core::metrics::{compression_stats, evaluate_sharded, BaselineCounts};
use prm_core::purify::{
    compact, emptiness_ratio, importance_score, propagate_unused_paths, purify, ThresholdSet, Thresholds,
};
use prm_core::tensor::{im2col_lower, raise_lowered};
use prm_core::{LayerGraph, Tensor};

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn budget(filters: Option<usize>, columns: Option<usize>) -> StructuredBudget {
    StructuredBudget {
        layer: "w".into(),
        filters,
        columns,
    }
}

fn live_rows(t: &Tensor) -> usize {
    let (r, c) = t.lowered_shape();
    (0..r)
        .filter(|&i| t.data()[i * c..(i + 1) * c].iter().any(|v| *v != 0.0))
        .count()
}

fn live_cols(t: &Tensor) -> usize {
    let (r, c) = t.lowered_shape();
    (0..c).filter(|&j| (0..r).any(|i| t.data()[i * c + j] != 0.0)).count()
}

/// conv(1->4) -> relu -> conv(4->5) -> flatten -> fc(->6) -> relu -> fc(->3)
fn chain(seed: u64) -> LayerGraph {
    let mut b = GraphBuilder::new(&[1, 7, 7]);
    let c1 = b.conv("c1", 0, 4, 3, 3).unwrap();
    let r1 = b.relu("r1", c1).unwrap();
    let c2 = b.conv("c2", r1, 5, 2, 2).unwrap();
    let fl = b.flatten("fl", c2).unwrap();
    let f1 = b.fc("f1", fl, 6).unwrap();
    let r2 = b.relu("r2", f1).unwrap();
    let f2 = b.fc("f2", r2, 3).unwrap();
    let mut g = b.finish_with_output(f2).unwrap();
    g.init_weights(seed);
    g
}

/// Zeroes a random selection of filters and channel groups, keeping at
/// least one live path.
fn damage(g: &mut LayerGraph, kills: &[(usize, usize, bool)]) {
    for &(layer, index, is_row) in kills {
        let ids = g.weighted_ids();
        let id = ids[layer % (ids.len() - 1)];
        let map = g.channel_column_map(id).unwrap();
        if is_row {
            let m = index % g.node(id).filters();
            if m == 0 {
                continue;
            }
            g.weights_mut(id).lowered_row_mut(m).fill(0.0);
            g.bias_mut(id).data_mut()[m] = 0.0;
        } else {
            let j = index % map.channels;
            if j == 0 {
                continue;
            }
            let (rows, cols) = g.node(id).weights().lowered_shape();
            let grp = map.group(j);
            let w = g.weights_mut(id);
            for r in 0..rows {
                w.data_mut()[r * cols + grp.start..r * cols + grp.end].fill(0.0);
            }
        }
    }
}

fn probe_input(g: &LayerGraph, n: usize) -> Tensor {
    let mut dims = vec![n];
    dims.extend_from_slice(g.input_dims());
    let len: usize = dims.iter().product();
    Tensor::new(dims, (0..len).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect()).unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.dims() == b.dims()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(1.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn lowering_round_trips(f in 1usize..5, c in 1usize..4, kh in 1usize..4, kw in 1usize..4, seed in 0u64..1000) {
        let n = f * c * kh * kw;
        let data: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).sin()).collect();
        let w = Tensor::new(vec![f, c, kh, kw], data).unwrap();
        let m = im2col_lower(&w).unwrap();
        prop_assert_eq!(m.dims(), &[f, c * kh * kw]);
        prop_assert_eq!(raise_lowered(&m, w.dims()).unwrap(), w);
    }

    #[test]
    fn projection_is_feasible_idempotent_and_copies(w in matrix(6, 8), fr in 0.0f64..1.0, fc in 0.0f64..1.0) {
        let (r, c) = w.lowered_shape();
        let kr = 1 + (fr * (r - 1) as f64) as usize;
        let kc = 1 + (fc * (c - 1) as f64) as usize;
        let b = budget(Some(kr), Some(kc));
        let p = project_structured(&w, &b).unwrap();
        prop_assert!(live_rows(&p) <= kr);
        prop_assert!(live_cols(&p) <= kc);
        prop_assert_eq!(&project_structured(&p, &b).unwrap(), &p);
        for (a, o) in p.data().iter().zip(w.data()) {
            prop_assert!(*a == 0.0 || a == o);
        }
    }

    #[test]
    fn row_projection_beats_any_feasible_support(w in matrix(6, 8), k in 1usize..6, pick in prop::collection::vec(any::<bool>(), 6)) {
        let (r, c) = w.lowered_shape();
        let k = k.min(r);
        let p = project_structured(&w, &budget(Some(k), None)).unwrap();
        let mut q = w.clone();
        let mut kept = 0;
        for (i, &keep) in pick.iter().take(r).enumerate() {
            if keep && kept < k {
                kept += 1;
            } else {
                q.data_mut()[i * c..(i + 1) * c].fill(0.0);
            }
        }
        let mut dp = w.clone();
        dp.axpy(-1.0, &p);
        let mut dq = w.clone();
        dq.axpy(-1.0, &q);
        prop_assert!(dp.sq_norm() <= dq.sq_norm() + 1e-12);
    }

    #[test]
    fn projection_commutes_with_row_permutation(w in matrix(6, 5), k in 1usize..6, rot in 0usize..6) {
        let (r, c) = w.lowered_shape();
        let rot = rot % r;
        let perm = |t: &Tensor| {
            let mut d = Vec::with_capacity(t.len());
            for i in 0..r {
                let src = (i + rot) % r;
                d.extend_from_slice(&t.data()[src * c..(src + 1) * c]);
            }
            Tensor::new(vec![r, c], d).unwrap()
        };
        let b = budget(Some(k.min(r)), None);
        let a = project_structured(&perm(&w), &b).unwrap();
        let e = perm(&project_structured(&w, &b).unwrap());
        // distinct norms almost surely; ties would break by index
        let norms: Vec<f64> = (0..r).map(|i| w.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum()).collect();
        let distinct = norms.iter().enumerate().all(|(i, a)| norms.iter().skip(i + 1).all(|b| a != b));
        prop_assume!(distinct);
        prop_assert_eq!(a, e);
    }

    #[test]
    fn dual_update_accumulates(w in matrix(3, 4), seed in 0u64..100) {
        let y = Tensor::new(w.dims().to_vec(), w.data().iter().map(|v| v * 0.5 + seed as f64 * 1e-3).collect()).unwrap();
        let mut u = Tensor::zeros(w.dims());
        let r1 = dual_update(&mut u, &w, &y);
        let r2 = dual_update(&mut u, &w, &y);
        prop_assert_eq!(r1, r2);
        let mut d = w.clone();
        d.axpy(-1.0, &y);
        let once = d.clone();
        d.axpy(1.0, &once);
        prop_assert!(close(&u, &d, 1e-12));
    }

    #[test]
    fn eta_and_sigma_bounds(norms in prop::collection::vec(0.0f64..4.0, 1..30), th1 in 0.0f64..2.0, th1b in 0.0f64..2.0) {
        let eta = emptiness_ratio(&norms, th1).unwrap();
        prop_assert!((0.0..=1.0).contains(&eta));
        let (lo, hi) = if th1 < th1b { (th1, th1b) } else { (th1b, th1) };
        prop_assert!(emptiness_ratio(&norms, hi).unwrap() <= emptiness_ratio(&norms, lo).unwrap());
        let sigma = importance_score(&norms).unwrap();
        prop_assert!(sigma >= 0.0);
        let doubled: Vec<f64> = norms.iter().map(|v| 2.0 * v).collect();
        prop_assert!((importance_score(&doubled).unwrap() - 2.0 * sigma).abs() <= 1e-12 * sigma.max(1.0));
    }

    #[test]
    fn path_removal_preserves_function(seed in 0u64..500, kills in prop::collection::vec((0usize..8, 0usize..64, any::<bool>()), 0..6)) {
        let mut g = chain(seed);
        damage(&mut g, &kills);
        let x = probe_input(&g, 3);
        let before = g.forward(&x).unwrap();
        let (pruned, log) = propagate_unused_paths(&g).unwrap();
        prop_assert!(close(&pruned.forward(&x).unwrap(), &before, 1e-12));
        // a second pass finds nothing new
        let (again, log2) = propagate_unused_paths(&pruned).unwrap();
        prop_assert_eq!(&again, &pruned);
        prop_assert!(log2.entries.iter().all(|e| e.nnz_before == e.nnz_after));
        prop_assert!(log.entries.len() >= log2.entries.len());
        let small = compact(&pruned).unwrap();
        prop_assert!(close(&small.forward(&x).unwrap(), &before, 1e-12));
        prop_assert!(small.prunable_weights() <= g.prunable_weights());
    }

    #[test]
    fn zero_thresholds_equal_path_removal(seed in 0u64..500, kills in prop::collection::vec((0usize..8, 0usize..64, any::<bool>()), 0..6)) {
        let mut g = chain(seed);
        damage(&mut g, &kills);
        let (a, la) = propagate_unused_paths(&g).unwrap();
        let (b, lb) = purify(&g, &ThresholdSet::default()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(la, lb);
    }

    #[test]
    fn thresholds_only_add_pruning(seed in 0u64..500, th4 in 0.0f64..0.3, th3 in 0.0f64..0.02) {
        let g = chain(seed);
        let t = ThresholdSet::uniform(Thresholds { th1: 0.0, th2: 1.0, th3, th4 });
        let Ok((p, _)) = purify(&g, &t) else { return Ok(()) };
        let (z, _) = propagate_unused_paths(&g).unwrap();
        for id in g.weighted_ids() {
            for (a, b) in p.node(id).weights().data().iter().zip(z.node(id).weights().data()) {
                prop_assert!(*b != 0.0 || *a == 0.0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, resnet in any::<bool>()) {
        let mut g = if resnet { build_tiny_resnet_for(&[3, 10, 10], 4).unwrap() } else { chain(seed) };
        g.init_weights(seed);
        let mut ck = Checkpoint::new(g);
        ck.history.insert("x".into(), seed as f64 / 7.0);
        let back = from_bytes(&to_bytes(&ck, Dtype::F64).unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn stats_stable_after_noop_purify(seed in 0u64..200, kills in prop::collection::vec((0usize..8, 0usize..64, any::<bool>()), 0..6)) {
        let mut g = chain(seed);
        damage(&mut g, &kills);
        let base = BaselineCounts::of(&chain(0));
        let (p, _) = propagate_unused_paths(&g).unwrap();
        let (q, log) = propagate_unused_paths(&p).unwrap();
        prop_assert!(log.entries.iter().all(|e| e.nnz_before == e.nnz_after));
        let a = compression_stats(&p, &base).unwrap();
        prop_assert_eq!(&a, &compression_stats(&q, &base).unwrap());
        prop_assert!(a.nonzero_rate >= 1.0 && a.structural_rate >= 1.0);
        // doubling every count leaves the rates alone
        let twice = |n: usize, k: usize| (2 * n) as f64 / (2 * k) as f64;
        prop_assert_eq!(twice(a.total, a.nonzero), a.nonzero_rate);
        prop_assert_eq!(twice(a.total, a.structural), a.structural_rate);
    }

    #[test]
    fn evaluation_ignores_shard_size(seed in 0u64..100, shard in 1usize..40) {
        let g = chain(seed);
        let n = 37;
        let x = probe_input(&g, n);
        let labels = (0..n).map(|i| (i * 5 + seed as usize) % 3).collect();
        let data = Dataset::new(vec![1, 7, 7], x.into_data(), labels, 3).unwrap();
        let a = evaluate_sharded(&g, &data, shard).unwrap();
        let b = evaluate_sharded(&g, &data, 256).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((a.mean_loss - b.mean_loss).abs() <= 1e-9);
    }
}
