mod common;

use drone_lmpc::arclen::ArcIndex;
use drone_lmpc::kdtree::{knn_linear, nearest_linear, KdTree};
use drone_lmpc::track::Centerline;
use nalgebra::Vector3;
use proptest::prelude::*;

/// Arc length minimizing the distance to `p` over `[lo, hi]` on a dense grid.
fn dense_scan(cl: &Centerline, p: &Vector3<f64>, lo: f64, hi: f64, n: usize) -> f64 {
    (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .min_by(|a, b| (cl.position(*a) - p).norm().total_cmp(&(cl.position(*b) - p).norm()))
        .unwrap()
}

#[test]
fn straight_line_samples_are_uniform() {
    let cl = common::build(common::start(0.0, 0.0, 1.0, 0.0), &[common::gate(9.0, 0.0, 1.0, 0.0)]);
    assert!((cl.s_end() - 10.0).abs() < 1e-9);
    let index = ArcIndex::build(&cl, 11, 10).unwrap();
    for (i, s) in index.samples().iter().enumerate() {
        assert!((s - i as f64).abs() < 1e-9);
    }
    assert!(ArcIndex::build(&cl, 1, 10).is_err());
}

#[test]
fn crossing_point_follows_the_previous_branch() {
    let cl = common::crossing_track();
    let index = ArcIndex::build(&cl, ((cl.s_end() / 0.05).ceil() as usize) + 1, 10).unwrap();
    // locate the self-intersection
    let n = 4000;
    let grid: Vec<f64> = (0..=n).map(|i| cl.s_end() * i as f64 / n as f64).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for &a in &grid {
        for &b in grid.iter().filter(|b| **b > a + 2.0) {
            let d = (cl.position(a) - cl.position(b)).norm();
            if d < best.0 {
                best = (d, a, b);
            }
        }
    }
    let (gap, s_a, s_b) = best;
    assert!(gap < 1e-2, "track does not cross itself: {gap}");
    let p = (cl.position(s_a) + cl.position(s_b)) / 2.0;
    let w = index.window() as f64 * index.bin_width();
    for (s_branch, s_other) in [(s_a, s_b), (s_b, s_a)] {
        let s_prev = s_branch - 0.03;
        let est = index.estimate(&cl, &p, Some(s_prev));
        let oracle = dense_scan(&cl, &p, (s_prev - w).max(0.0), (s_prev + w).min(cl.s_end()), 200_000);
        assert!((est - oracle).abs() < 1e-3, "{est} vs windowed oracle {oracle}");
        assert!((est - s_branch).abs() < 0.02);
        assert!((est - s_other).abs() > 1.0);
    }
}

#[test]
fn normal_offset_keeps_the_arc_length_on_a_straight_leg() {
    let cl = common::build(common::start(0.0, 0.0, 1.0, 0.0), &[common::gate(6.0, 0.0, 1.0, 0.0)]);
    let index = ArcIndex::build(&cl, 141, 10).unwrap();
    for s in [0.7, 2.33, 4.1, 5.5] {
        let p = cl.position(s) + Vector3::new(0.0, 0.2, 0.0);
        let oracle = dense_scan(&cl, &p, 0.0, cl.s_end(), 1_000_000);
        let est = index.estimate(&cl, &p, Some(s - 0.04));
        assert!((est - s).abs() < 1e-3);
        assert!((est - oracle).abs() < 1e-3);
    }
}

proptest! {
    #[test]
    fn on_curve_points_are_recovered(frac in 0.0..1.0f64, lag in -0.05..0.05f64) {
        let cl = common::curved_track();
        let index = ArcIndex::build(&cl, 151, 10).unwrap();
        let s = frac * cl.s_end();
        let est = index.estimate(&cl, &cl.position(s), Some(cl.clamp(s + lag)));
        prop_assert!((est - s).abs() < 1e-4, "{est} vs {s}");
    }

    #[test]
    fn indexed_nearest_sample_equals_linear_scan(q in prop::array::uniform3(-2.0..6.0f64)) {
        let cl = common::curved_track();
        let index = ArcIndex::build(&cl, 631, 10).unwrap();
        let p = Vector3::from(q);
        prop_assert_eq!(index.nearest_sample(&p), index.nearest_sample_linear(&p));
    }

    #[test]
    fn kd_tree_matches_brute_force(
        points in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 1..200),
        q in prop::array::uniform3(-1.5..1.5f64),
        k in 1usize..30,
    ) {
        let tree = KdTree::new(points.clone());
        prop_assert_eq!(tree.nearest(&q), nearest_linear(&points, &q));
        prop_assert_eq!(tree.knn(&q, k), knn_linear(&points, &q, k));
    }

    #[test]
    fn kd_tree_ties_follow_insertion_order(
        base in prop::collection::vec(prop::array::uniform3(-1i32..2), 1..40),
        q in prop::array::uniform3(-1i32..2),
        k in 1usize..20,
    ) {
        // integer grids produce many equal distances
        let points: Vec<[f64; 3]> = base.iter().map(|p| p.map(f64::from)).collect();
        let q = q.map(f64::from);
        let tree = KdTree::new(points.clone());
        prop_assert_eq!(tree.knn(&q, k), knn_linear(&points, &q, k));
    }
}
