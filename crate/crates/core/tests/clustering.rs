mod common;

use std::collections::BTreeSet;

use common::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use scene_ssl::cluster::*;
use scene_ssl::depth::{depth_cost, TokenDepths};
use scene_ssl::metrics::{ari, purity};
use scene_ssl::synth::CropBox;

/// Sharpness at which 50 iterations converge on unit-range costs.
const MARGINAL_LAMBDA: f64 = 5.0;

fn marginal_gaps(p: &TransportPlan) -> (f64, f64) {
    let (n, m) = p.plan.dim();
    let rows = p.row_sums().iter().map(|s| (s - 1.0 / n as f64).abs()).fold(0.0, f64::max);
    let cols = p.col_sums().iter().map(|s| (s - 1.0 / m as f64).abs()).fold(0.0, f64::max);
    (rows, cols)
}

#[test]
fn sinkhorn_converges_to_balanced_marginals() {
    let mut r = rng(3);
    for (n, m) in [(8, 4), (16, 8)] {
        let cost = CostMatrix::new(Array2::from_shape_fn((n, m), |_| r.random::<f64>())).unwrap();
        let (rows, cols) = marginal_gaps(&sinkhorn_transport(&cost, MARGINAL_LAMBDA, 50).unwrap());
        assert!(rows < 1e-6 && cols < 1e-6, "{n}x{m}: {rows:e} {cols:e}");
        let (rows, _) = marginal_gaps(&sinkhorn_transport(&cost, MARGINAL_LAMBDA, 1).unwrap());
        assert!(rows < 1e-6);
    }
}

#[test]
fn sinkhorn_approaches_the_lp_optimum_at_fifty_iterations() {
    let cost = array![[0.1, 0.9], [0.2, 0.8], [0.9, 0.1], [0.75, 0.3]];
    let (_, best) = balanced_assignments(&cost)[0].clone();
    let plan = sinkhorn_transport(&CostMatrix::new(cost).unwrap(), 50.0, 50).unwrap();
    let tv: f64 = 0.5
        * plan
            .plan
            .indexed_iter()
            .map(|((i, j), &v)| (v - if best[i] == j { 0.25 } else { 0.0 }).abs())
            .sum::<f64>();
    assert!(tv < 1e-3, "tv {tv:e}");
}

#[test]
fn feature_position_cost_matches_elementwise_oracle() {
    let mut r = rng(9);
    let f = random_unit_rows(10, 6, &mut r);
    let c = random_unit_rows(4, 6, &mut r);
    let pos: Vec<(f64, f64)> = (0..10).map(|_| (r.random(), r.random())).collect();
    let cpos: Vec<(f64, f64)> = (0..4).map(|_| (r.random(), r.random())).collect();
    let cost = feature_position_cost_rows(&f, &pos, &c, &cpos, 0.7).unwrap();
    for i in 0..10 {
        for j in 0..4 {
            let mut dot = 0.0;
            for k in 0..6 {
                dot += f[[i, k]] * c[[j, k]];
            }
            let (dx, dy) = (pos[i].0 - cpos[j].0, pos[i].1 - cpos[j].1);
            let want = (1.0 - dot).max(0.0) + 0.7 * (dx * dx + dy * dy).sqrt();
            assert_eq!(cost.entries[[i, j]], want);
        }
    }
}

#[test]
fn depth_cost_matches_elementwise_oracle() {
    let mut r = rng(10);
    let d: Vec<f64> = (0..12).map(|_| r.random_range(3.0..60.0)).collect();
    let c: Vec<f64> = (0..5).map(|_| r.random_range(3.0..60.0)).collect();
    let cost = depth_cost(&d, &c, 57.0).unwrap();
    for i in 0..12 {
        for j in 0..5 {
            assert_eq!(cost.entries[[i, j]], (d[i] - c[j]).abs() / 57.0);
        }
    }
}

#[test]
fn pooled_objects_match_groupby_mean() {
    let mut r = rng(11);
    let feats = random_unit_rows(20, 5, &mut r);
    let labels: Vec<usize> = (0..20).map(|_| r.random_range(0..6)).collect();
    let reps = pool_features(&feats, &labels, 7).unwrap();
    for (row, &k) in reps.cluster_ids.iter().enumerate() {
        let members: Vec<usize> = (0..20).filter(|&i| labels[i] == k).collect();
        let mut mean = vec![0.0; 5];
        for &i in &members {
            for j in 0..5 {
                mean[j] += feats[[i, j]];
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..5 {
            assert!((reps.reps[[row, j]] - mean[j] / norm).abs() < 1e-12);
        }
    }
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    assert_eq!(reps.cluster_ids, present.into_iter().collect::<Vec<_>>());
}

#[test]
fn twins_split_only_with_depth() {
    let scene = twin_scene();
    let mut r = rng(5);
    let means = twin_means(&mut r, 16);
    let (a, b, truth) = class_mean_fields(&scene, &means, 0.0, [CropBox::FULL, CropBox::FULL], 5);
    let labels_of = |asg: &ClusterAssignment, class: usize| -> BTreeSet<usize> {
        (0..truth.len()).filter(|&i| truth[i] == class).map(|i| asg.labels[i]).collect()
    };
    // position is switched off so only depth can tell the twins apart
    let base = ClusterParams { num_clusters: 3, pos_alpha: 0.0, ..ClusterParams::default() };
    let with = cluster_joint_views(&a, &b, &ClusterParams { depth_beta: 4.0, ..base }).unwrap();
    assert!(labels_of(&with, 1).is_disjoint(&labels_of(&with, 2)));
    let without = cluster_joint_views(&a, &b, &ClusterParams { depth_beta: 0.0, ..base }).unwrap();
    let (l1, l2) = (labels_of(&without, 1), labels_of(&without, 2));
    assert_eq!(l1.len(), 1);
    assert_eq!(l1, l2);
}

#[test]
fn depth_separation_on_every_seed() {
    let scene = twin_scene();
    for seed in 0..20 {
        let mut r = rng(seed);
        let means = twin_means(&mut r, 16);
        let crops = [CropBox::FULL, random_crop(&mut r, 0.5)];
        let (a, b, truth) = class_mean_fields(&scene, &means, 0.6, crops, seed);
        let run = |beta: f64| {
            let p = ClusterParams { num_clusters: 3, depth_beta: beta, seed, ..ClusterParams::default() };
            ari(&cluster_joint_views(&a, &b, &p).unwrap().labels, &truth)
        };
        let (with, without) = (run(4.0), run(0.0));
        assert!(with > without, "seed {seed}: {with} vs {without}");
    }
}

#[test]
fn more_sinkhorn_iterations_balance_cluster_areas() {
    let scene = eight_to_one_scene();
    let mut wins = 0;
    for seed in 0..50 {
        let mut r = rng(seed);
        let means = random_unit_rows(2, 16, &mut r);
        let (a, b, _) = class_mean_fields(&scene, &means, 0.3, [CropBox::FULL, CropBox::FULL], seed);
        let h = |sk: usize| {
            let p = ClusterParams { num_clusters: 32, sk_iterations: sk, depth_beta: 0.0, seed, ..ClusterParams::default() };
            area_entropy(&cluster_joint_views(&a, &b, &p).unwrap().per_view_presence)
        };
        if h(5) >= h(1) {
            wins += 1;
        }
    }
    assert!(wins >= 45, "{wins}/50");
}

/// Four objects with distinct classes and depths on a background, aligned
/// to the 8-pixel patch grid of a full view.
fn four_object_scene() -> scene_ssl::synth::Scene {
    let mut mask = Array2::zeros((64, 64));
    let mut depth = Array2::from_elem((64, 64), 60.0);
    let boxes = [(0, 0, 24, 32, 8.0), (0, 40, 32, 64, 15.0), (40, 8, 64, 32, 25.0), (40, 40, 64, 56, 35.0)];
    for (k, &(r0, c0, r1, c1, d)) in boxes.iter().enumerate() {
        for r in r0..r1 {
            for c in c0..c1 {
                mask[[r, c]] = k + 1;
                depth[[r, c]] = d;
            }
        }
    }
    painted_scene(mask, depth)
}

/// Four equal quadrants with distinct classes and depths. Fully balanced
/// transport can only be pure when the objects have equal areas.
fn quadrant_scene() -> scene_ssl::synth::Scene {
    let mut mask = Array2::zeros((64, 64));
    let mut depth = Array2::zeros((64, 64));
    let depths = [60.0, 8.0, 20.0, 35.0];
    for r in 0..64 {
        for c in 0..64 {
            let k = 2 * (r / 32) + c / 32;
            mask[[r, c]] = k;
            depth[[r, c]] = depths[k];
        }
    }
    painted_scene(mask, depth)
}

#[test]
fn well_separated_objects_cluster_purely() {
    let scene = quadrant_scene();
    for seed in 0..5 {
        let mut r = rng(seed);
        let means = random_unit_rows(4, 32, &mut r);
        let crops = [CropBox::FULL, random_crop(&mut r, 0.6)];
        let (a, b, truth) = class_mean_fields(&scene, &means, 0.05, crops, seed);
        let p = ClusterParams { num_clusters: 4, outer_rounds: 10, sk_iterations: 50, seed, ..ClusterParams::default() };
        let asg = cluster_joint_views(&a, &b, &p).unwrap();
        let p = purity(&asg.labels, &truth);
        assert!(p >= 0.95, "seed {seed}: purity {p}");
    }
}

#[test]
fn same_object_gets_one_label_across_views() {
    let scene = four_object_scene();
    for seed in 0..5 {
        let mut r = rng(seed);
        let means = random_unit_rows(5, 32, &mut r);
        let crops = [CropBox::FULL, random_crop(&mut r, 0.5)];
        let (a, b, truth) = class_mean_fields(&scene, &means, 0.0, crops, seed);
        let pure = pure_tokens(&scene, crops);
        let p = ClusterParams { num_clusters: 5, seed, ..ClusterParams::default() };
        let asg = cluster_joint_views(&a, &b, &p).unwrap();
        for class in 0..5 {
            let labels: BTreeSet<usize> = (0..truth.len())
                .filter(|&i| pure[i] && truth[i] == class)
                .map(|i| asg.labels[i])
                .collect();
            assert!(labels.len() <= 1, "seed {seed} class {class}: {labels:?}");
        }
    }
}

#[test]
fn clustering_is_permutation_equivariant() {
    let scene = four_object_scene();
    let mut r = rng(4);
    let means = random_unit_rows(5, 16, &mut r);
    let (a, b, _) = class_mean_fields(&scene, &means, 0.4, [CropBox::FULL, random_crop(&mut r, 0.5)], 4);
    let p = ClusterParams { num_clusters: 8, ..ClusterParams::default() };
    let base = cluster_joint_views(&a, &b, &p).unwrap();

    let permute = |f: &TokenField, perm: &[usize]| {
        TokenField::new(
            f.features.select(ndarray::Axis(0), perm),
            perm.iter().map(|&i| f.positions[i]).collect(),
            TokenDepths::new(perm.iter().map(|&i| f.depths.values[i]).collect(), f.depths.grid).unwrap(),
            f.view_id,
        )
        .unwrap()
    };
    let mut pa: Vec<usize> = (0..a.len()).collect();
    let mut pb: Vec<usize> = (0..b.len()).collect();
    for v in [&mut pa, &mut pb] {
        for i in (1..v.len()).rev() {
            let j = r.random_range(0..=i);
            v.swap(i, j);
        }
    }
    let moved = cluster_joint_views(&permute(&a, &pa), &permute(&b, &pb), &p).unwrap();
    let n = a.len();
    for (k, &i) in pa.iter().enumerate() {
        assert_eq!(moved.labels[k], base.labels[i]);
    }
    for (k, &i) in pb.iter().enumerate() {
        assert_eq!(moved.labels[n + k], base.labels[n + i]);
    }
    assert!((&moved.centroids - &base.centroids).iter().all(|d| d.abs() < 1e-9));
}

#[test]
fn label_map_and_stats_sidecar() {
    let scene = four_object_scene();
    let mut r = rng(8);
    let means = random_unit_rows(5, 8, &mut r);
    let (a, b, _) = class_mean_fields(&scene, &means, 0.1, [CropBox::FULL, CropBox::FULL], 8);
    let asg = cluster_joint_views(&a, &b, &ClusterParams { num_clusters: 5, ..ClusterParams::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let map = asg.label_map(ViewId::B, (8, 8)).unwrap();
    let path = dir.path().join("b.pgm");
    scene_ssl::io::write_label_pgm(&path, &map).unwrap();
    assert_eq!(scene_ssl::io::read_label_pgm(&path).unwrap(), map);
    let stats = dir.path().join("stats.txt");
    asg.write_stats(&stats).unwrap();
    let text = std::fs::read_to_string(stats).unwrap();
    let counted: usize = text
        .lines()
        .filter(|l| !l.starts_with('#') && l.split_whitespace().count() == 5)
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            f[2].parse::<usize>().unwrap() + f[3].parse::<usize>().unwrap()
        })
        .sum();
    assert_eq!(counted, 128);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_are_always_row_balanced(
        n in 2usize..20, m in 1usize..10, lambda in 0.5f64..80.0, iters in 1usize..8, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let cost = CostMatrix::new(Array2::from_shape_fn((n, m), |_| r.random_range(0.0..3.0))).unwrap();
        let plan = sinkhorn_transport(&cost, lambda, iters).unwrap();
        prop_assert!(plan.plan.iter().all(|&v| v >= 0.0));
        let (rows, _) = marginal_gaps(&plan);
        prop_assert!(rows < 1e-6);
    }

    #[test]
    fn depth_cost_is_symmetric_and_zero_only_on_ties(
        a in proptest::collection::vec(0.5f64..80.0, 1..10),
        b in proptest::collection::vec(0.5f64..80.0, 1..10),
        scale in 0.1f64..100.0,
    ) {
        let ab = depth_cost(&a, &b, scale).unwrap();
        let ba = depth_cost(&b, &a, scale).unwrap();
        for i in 0..a.len() {
            for j in 0..b.len() {
                prop_assert_eq!(ab.entries[[i, j]], ba.entries[[j, i]]);
                prop_assert!(ab.entries[[i, j]] >= 0.0);
                prop_assert_eq!(ab.entries[[i, j]] == 0.0, a[i] == b[j]);
            }
        }
    }
}
