mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use topoguide::fea::{GridDomain, Load, Topology};
use topoguide::metrics::*;
use topoguide::problem::{bc_catalog, ProblemSpec};
use topoguide::CoreError;

/// Recursive-free stack flood fill, counting components.
fn flood_fill_count(mask: &[bool], nx: usize, ny: usize, eight: bool) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % nx) as i64, (i / nx) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 {
                        continue;
                    }
                    let j = yy as usize * nx + xx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[test]
fn component_labels_agree_with_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let nx = rng.random_range(1..=16);
        let ny = rng.random_range(1..=16);
        let p: f64 = rng.random_range(0.1..0.9);
        let mask: Vec<bool> = (0..nx * ny).map(|_| rng.random_bool(p)).collect();
        for (conn, eight) in [(Connectivity::Eight, true), (Connectivity::Four, false)] {
            let (labels, count) = label_components(&mask, nx, ny, conn);
            assert_eq!(count, flood_fill_count(&mask, nx, ny, eight));
            assert!(labels.iter().zip(&mask).all(|(l, &m)| l.is_some() == m));
        }
    }
}

fn grid(nx: usize, ny: usize, cells: &[(usize, usize)]) -> Topology {
    let mut t = Topology::uniform(nx, ny, 0.0);
    for &(x, y) in cells {
        t.densities[y * nx + x] = 1.0;
    }
    t
}

#[test]
fn floating_material_cases() {
    let one = grid(4, 4, &[(0, 0), (1, 0), (1, 1)]);
    assert!(!floating_material(&one, Connectivity::Eight).unwrap());
    let two = grid(4, 4, &[(0, 0), (3, 3)]);
    assert!(floating_material(&two, Connectivity::Eight).unwrap());
    let corner = grid(4, 4, &[(0, 0), (1, 1)]);
    assert!(!floating_material(&corner, Connectivity::Eight).unwrap());
    assert!(floating_material(&corner, Connectivity::Four).unwrap());
    let empty = Topology::uniform(4, 4, 0.2);
    assert!(matches!(floating_material(&empty, Connectivity::Eight), Err(CoreError::EmptyTopology)));
}

#[test]
fn volume_fraction_error_cases() {
    let exact = grid(10, 5, &(0..20).map(|i| (i % 10, i / 10)).collect::<Vec<_>>());
    assert_eq!(volume_fraction_error(&exact, 0.4), 0.0);
    let short = grid(10, 5, &(0..19).map(|i| (i % 10, i / 10)).collect::<Vec<_>>());
    assert!((volume_fraction_error(&short, 0.4) - 0.05).abs() < 1e-12);
    assert_eq!(volume_fraction_error(&Topology::uniform(4, 4, 1.0), 0.5), 1.0);
}

#[test]
fn load_violation_cases() {
    let d = GridDomain::new(4, 4).unwrap();
    let loads = [Load { node: d.node(4, 2), fx: 0.0, fy: 1.0 }];
    assert!(!load_violation(&Topology::uniform(4, 4, 1.0), &loads));
    assert!(load_violation(&Topology::uniform(4, 4, 0.0), &loads));
    let corner = [Load { node: d.node(4, 4), fx: 1.0, fy: 0.0 }];
    assert!(!load_violation(&grid(4, 4, &[(3, 3)]), &corner));
    assert!(load_violation(&grid(4, 4, &[(2, 3)]), &corner));
    // Interior-edge node with only one of its two elements solid is fine.
    assert!(!load_violation(&grid(4, 4, &[(3, 1)]), &loads));
}

fn cantilever(nx: usize, ny: usize) -> ProblemSpec {
    let d = GridDomain::new(nx, ny).unwrap();
    ProblemSpec {
        nx,
        ny,
        volfrac: 0.5,
        bc: bc_catalog(0, &d).unwrap(),
        loads: vec![Load { node: d.node(nx, ny / 2), fx: 0.0, fy: 1.0 }],
    }
}

#[test]
fn compliance_error_cases() {
    let p = cantilever(8, 8);
    let t = Topology::uniform(8, 8, 0.8);
    let ce = compliance_error(&t, &t, &p).unwrap();
    assert_eq!(ce.ce, 0.0);
    assert!(!ce.degenerate);
    assert!((relative_compliance_error(10.0, 12.0) - 0.2).abs() < 1e-15);
}

#[test]
fn compliance_error_matches_dense_oracle() {
    let p = cantilever(8, 8);
    let d = p.domain().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Random designs that stay edge-connected and keep material at supports
    // and the load, so both solves are well conditioned.
    let keep = p.keep_out_elements().unwrap();
    let mut draw = || loop {
        let t = Topology::new(8, 8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let mask = t.solid_mask();
        if keep.iter().all(|&e| mask[e]) && label_components(&mask, 8, 8, Connectivity::Four).1 == 1 {
            break t;
        }
    };
    let gt = draw();
    let gen = draw();
    let ce = compliance_error(&gt, &gen, &p).unwrap();
    let (_, c_gt) = common::dense_solve(&d, &p.bc, &p.loads, &gt.binarized().densities, 3.0);
    let (_, c_gen) = common::dense_solve(&d, &p.bc, &p.loads, &gen.binarized().densities, 3.0);
    let oracle = (c_gen - c_gt) / c_gt;
    if ce.degenerate {
        assert!(oracle > CE_CAP);
    } else {
        assert!((ce.ce - oracle).abs() / oracle.abs().max(1e-12) < 1e-8);
    }
    assert!((ce.c_gt - c_gt).abs() / c_gt < 1e-8);
    assert!((ce.c_gen - c_gen).abs() / c_gen < 1e-8);
}

#[test]
fn detached_design_is_capped_and_flagged() {
    let p = cantilever(8, 8);
    let gt = Topology::uniform(8, 8, 1.0);
    let gen = grid(8, 8, &(0..8).map(|y| (7, y)).collect::<Vec<_>>());
    let ce = compliance_error(&gt, &gen, &p).unwrap();
    assert!(ce.degenerate);
    assert_eq!(ce.ce, CE_CAP);
}

fn record(id: usize, ce: f64) -> EvalRecord {
    EvalRecord {
        problem_id: id,
        ce,
        vfe: 0.01,
        lv: false,
        fm: id % 2 == 0,
        c_gt: 1.0,
        c_gen: 1.0 + ce,
        degenerate: false,
    }
}

#[test]
fn aggregate_cases() {
    assert!(matches!(aggregate(&[]), Err(CoreError::EmptyRecords)));
    let same = vec![record(0, 0.1); 5];
    let s = aggregate(&same).unwrap();
    assert_eq!(s.ce.half_width, Some(0.0));
    let s = aggregate(&[record(0, 0.0), record(1, 0.2)]).unwrap();
    assert!((s.ce.mean - 0.1).abs() < 1e-15);
    assert!((s.median_ce - 0.1).abs() < 1e-15);
    assert_eq!(s.fm.mean, 50.0);
    let single = aggregate(&[record(0, 0.4)]).unwrap();
    assert_eq!(single.ce.half_width, None);
    assert_eq!(single.ce_over_30.mean, 100.0);
    let table = s.table();
    for row in
        ["Average % CE", "Median % CE", "% CE > 30%", "Average % VFE", "% Load disrespect", "% Floating material"]
    {
        assert!(table.contains(row));
    }
}

#[test]
fn confidence_interval_coverage() {
    let normal = Normal::new(0.3, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut covered = 0;
    for _ in 0..1000 {
        let recs: Vec<EvalRecord> = (0..1000).map(|i| record(i, normal.sample(&mut rng))).collect();
        let s = aggregate(&recs).unwrap();
        if (s.ce.mean - 0.3).abs() <= s.ce.half_width.unwrap() {
            covered += 1;
        }
    }
    let rate = covered as f64 / 1000.0;
    assert!((rate - 0.95).abs() <= 0.02, "coverage {rate}");
}

/// Differences with a prescribed t statistic: zero-mean spread plus offset.
fn pairs_with_t(n: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    let spread: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * (1.0 + i as f64 / n as f64)).collect();
    let m = spread.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = spread.iter().map(|v| v - m).collect();
    let sd = (centred.iter().map(|v| v * v).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let offset = t * sd / (n as f64).sqrt();
    let b: Vec<f64> = (0..n).map(|i| 2.0 + i as f64).collect();
    let a = b.iter().zip(&centred).map(|(b, c)| b + c + offset).collect();
    (a, b)
}

#[test]
fn paired_test_matches_reference_table() {
    // One-tailed critical values: df 9 at 0.05 is 1.833, df 4 at 0.025 is 2.776.
    let (a, b) = pairs_with_t(10, 1.833);
    let r = paired_t_test(&a, &b, Tail::Greater).unwrap();
    assert_eq!(r.df, 9);
    assert!((r.t - 1.833).abs() < 1e-9);
    assert!((r.p - 0.05).abs() < 1e-3, "p = {}", r.p);
    let (a, b) = pairs_with_t(5, 2.776);
    assert!((paired_t_test(&a, &b, Tail::Greater).unwrap().p - 0.025).abs() < 1e-3);
    assert!((paired_t_test(&a, &b, Tail::TwoSided).unwrap().p - 0.05).abs() < 1e-3);
    assert!((paired_t_test(&b, &a, Tail::Less).unwrap().p - 0.025).abs() < 1e-3);
}

#[test]
fn paired_test_edge_cases() {
    let a = [0.1, 0.4, 0.2];
    let r = paired_t_test(&a, &a, Tail::Less).unwrap();
    assert_eq!((r.t, r.p), (0.0, 0.5));
    assert!(paired_t_test(&[0.1, 0.3], &[0.2, 0.1], Tail::TwoSided).unwrap().p.is_finite());
    assert!(matches!(paired_t_test(&a, &a[..2], Tail::Less), Err(CoreError::MismatchedPairing(_))));
    let ra = vec![record(0, 0.1), record(1, 0.2)];
    let rb = vec![record(0, 0.1), record(2, 0.2)];
    assert!(paired_records_test(&ra, &rb, |r| r.ce, Tail::Less).is_err());
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant(ces in prop::collection::vec(-0.5f64..2.0, 2..40), seed in any::<u64>()) {
        let recs: Vec<EvalRecord> = ces.iter().enumerate().map(|(i, &c)| record(i, c)).collect();
        let mut shuffled = recs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = aggregate(&recs).unwrap();
        let b = aggregate(&shuffled).unwrap();
        prop_assert!((a.ce.mean - b.ce.mean).abs() < 1e-12);
        prop_assert_eq!(a.median_ce, b.median_ce);
        prop_assert!((a.fm.mean - b.fm.mean).abs() < 1e-9);
    }
}
