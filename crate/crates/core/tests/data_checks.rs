//! Ingestion, fold-geometry and ordering oracles: CSV round trips, leakage
//! guards, counting checks, and clustering hand traces.

mod util;

use proptest::prelude::*;
use stlab_core::data::{
    blocked_cv, build_adjacency, dendrogram_order, load_csv, make_windows, permute_space,
    stack_samples, synth_generate, write_csv, write_folds_json, FoldSpec, Zscore,
};
use util::seeded;

#[test]
fn load_csv_small_file_and_missing_policy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("series.csv");
    let coords = dir.path().join("coords.csv");
    std::fs::write(
        &coords,
        "name,x,y\na,0,0\nb,1,0\n",
    )
    .unwrap();
    std::fs::write(
        &data,
        "timestamp,a,b\n\
         2021-01-01T00:00:00,1.5,4.0\n\
         2021-01-01T01:00:00,2.5,5.0\n\
         2021-01-01T02:00:00,3.5,6.0\n",
    )
    .unwrap();
    let (series, filled) = load_csv(&data, &coords).unwrap();
    assert_eq!(series.n(), 3);
    assert_eq!(series.s(), 2);
    assert_eq!(filled, 0);
    assert_eq!(series.values().data(), &[1.5, 4.0, 2.5, 5.0, 3.5, 6.0]);
    assert_eq!(series.names(), &["a".to_string(), "b".to_string()]);
    assert_eq!(series.coords(), &[(0.0, 0.0), (1.0, 0.0)]);
    assert_eq!(series.timestep().num_seconds(), 3600);

    // One interior gap forward-fills from the previous row (six rows keep
    // the single gap under the 20% cap).
    std::fs::write(
        &data,
        "timestamp,a,b\n\
         2021-01-01T00:00:00,1.5,4.0\n\
         2021-01-01T01:00:00,,5.0\n\
         2021-01-01T02:00:00,3.5,6.0\n\
         2021-01-01T03:00:00,4.5,7.0\n\
         2021-01-01T04:00:00,5.5,8.0\n\
         2021-01-01T05:00:00,6.5,9.0\n",
    )
    .unwrap();
    let (series, filled) = load_csv(&data, &coords).unwrap();
    assert_eq!(filled, 1);
    assert_eq!(series.values().data()[2], 1.5);

    // A leading gap back-fills once forward filling has nothing to offer.
    std::fs::write(
        &data,
        "timestamp,a,b\n\
         2021-01-01T00:00:00,,4.0\n\
         2021-01-01T01:00:00,2.5,5.0\n\
         2021-01-01T02:00:00,3.5,6.0\n\
         2021-01-01T03:00:00,4.5,7.0\n\
         2021-01-01T04:00:00,5.5,8.0\n\
         2021-01-01T05:00:00,6.5,9.0\n",
    )
    .unwrap();
    let (series, filled) = load_csv(&data, &coords).unwrap();
    assert_eq!(filled, 1);
    assert_eq!(series.values().data()[0], 2.5);
}

#[test]
fn load_csv_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("series.csv");
    let coords = dir.path().join("coords.csv");
    std::fs::write(&coords, "name,x,y\na,0,0\n").unwrap();

    // Unknown location.
    std::fs::write(
        &data,
        "timestamp,a,zz\n2021-01-01T00:00:00,1,2\n2021-01-01T01:00:00,1,2\n",
    )
    .unwrap();
    assert!(load_csv(&data, &coords).is_err());

    // Backwards timestamps.
    std::fs::write(
        &data,
        "timestamp,a\n2021-01-01T05:00:00,1\n2021-01-01T00:00:00,2\n",
    )
    .unwrap();
    assert!(load_csv(&data, &coords).is_err());

    // 2 of 5 cells missing in a column breaches the 20% cap.
    std::fs::write(
        &data,
        "timestamp,a\n\
         2021-01-01T00:00:00,\n\
         2021-01-01T01:00:00,\n\
         2021-01-01T02:00:00,3\n\
         2021-01-01T03:00:00,4\n\
         2021-01-01T04:00:00,5\n",
    )
    .unwrap();
    assert!(load_csv(&data, &coords).is_err());
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_generate(9, 64, 1.5, 77).unwrap();
    let data = dir.path().join("out.csv");
    let coords = dir.path().join("coords.csv");
    write_csv(&series, &data, &coords).unwrap();
    let (back, filled) = load_csv(&data, &coords).unwrap();
    assert_eq!(filled, 0);
    assert_eq!(back.values().data(), series.values().data());
    assert_eq!(back.names(), series.names());
    assert_eq!(back.coords(), series.coords());
    assert_eq!(back.timestamps(), series.timestamps());
}

#[test]
fn zscore_normalizes_training_columns() {
    let series = synth_generate(6, 200, 0.0, 5).unwrap();
    let z = Zscore::fit(series.values()).unwrap();
    let out = z.apply(series.values()).unwrap();
    let (n, s) = (series.n(), series.s());
    for col in 0..s {
        let mean = (0..n).map(|t| out.data()[t * s + col]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|t| {
                let d = out.data()[t * s + col] - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 1e-10, "column {col} mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-10, "column {col} std");
    }
    let back = z.invert(&out).unwrap();
    for (a, b) in back.data().iter().zip(series.values().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Raw timestep span covered by a window index: [i, i + span).
fn window_steps(i: usize, span: usize) -> std::ops::Range<usize> {
    i..i + span
}

fn assert_no_leakage(folds: &[FoldSpec], span: usize) {
    for fold in folds {
        let sets = [
            fold.train_indices(),
            fold.val_indices(),
            fold.test_indices(),
        ];
        let mut touched: Vec<std::collections::HashSet<usize>> = Vec::new();
        for set in &sets {
            let mut steps = std::collections::HashSet::new();
            for &i in set {
                steps.extend(window_steps(i, span));
            }
            touched.push(steps);
        }
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(
                    touched[a].is_disjoint(&touched[b]),
                    "fold {} sets {a} and {b} share raw timesteps",
                    fold.fold_id
                );
            }
        }
    }
}

#[test]
fn blocked_cv_has_no_raw_timestep_leakage() {
    let (t, t_out) = (7, 3);
    let folds = blocked_cv(1000, t, t_out).unwrap();
    assert_no_leakage(&folds, t + t_out);
}

#[test]
fn blocked_cv_sizes_near_eighty_ten_ten() {
    let (t, t_out) = (5, 5);
    let num = 5000;
    let folds = blocked_cv(num, t, t_out).unwrap();
    for fold in &folds {
        let train = fold.train_indices().len() as f64 / num as f64;
        let val = fold.val_indices().len() as f64 / num as f64;
        let test = fold.test_indices().len() as f64 / num as f64;
        assert!((train - 0.8).abs() < 0.02, "fold {}: train {train}", fold.fold_id);
        assert!((val - 0.1).abs() < 0.02, "fold {}: val {val}", fold.fold_id);
        assert!((test - 0.1).abs() < 0.02, "fold {}: test {test}", fold.fold_id);
    }
}

#[test]
fn fold_spec_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let folds = blocked_cv(400, 3, 1).unwrap();
    let path = dir.path().join("folds.json");
    write_folds_json(&folds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<FoldSpec> = serde_json::from_str(&text).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in folds.iter().zip(&back) {
        assert_eq!(a.fold_id, b.fold_id);
        assert_eq!(a.gap, b.gap);
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
    }
}

#[test]
fn window_reconstruction_oracle() {
    let series = synth_generate(4, 40, 0.0, 9).unwrap();
    let (t, t_out) = (6, 2);
    let samples = make_windows(&series, t, t_out).unwrap();
    assert_eq!(samples.len(), series.n() - t - t_out + 1);
    // First rows of consecutive windows retrace the series prefix.
    let s = series.s();
    for (i, sample) in samples.iter().enumerate() {
        assert_eq!(sample.origin_index, i);
        assert_eq!(
            sample.x.data()[..s],
            series.values().data()[i * s..(i + 1) * s]
        );
    }
    let ds = stack_samples(&samples).unwrap();
    assert_eq!(ds.len(), samples.len());
}

#[test]
fn dendrogram_reversal_symmetry() {
    // Monotone line: nested clusters, no interleaving ranges, so relabelling
    // i -> S-1-i reverses the traversal exactly.
    let coords: Vec<(f64, f64)> = [0.0, 1.0, 2.4, 6.0, 6.9, 8.3]
        .iter()
        .map(|&x| (x, 0.0))
        .collect();
    let order = dendrogram_order(&coords).unwrap();
    let s = coords.len();
    let reversed_coords: Vec<(f64, f64)> = coords.iter().rev().cloned().collect();
    let rev_order = dendrogram_order(&reversed_coords).unwrap();
    let mapped: Vec<usize> = rev_order.iter().rev().map(|&i| s - 1 - i).collect();
    assert_eq!(order, mapped);
}

#[test]
fn permutations_differ_across_seeds() {
    let series = synth_generate(10, 8, 0.0, 3).unwrap();
    let mut seen = std::collections::HashSet::new();
    for seed in 0..100u64 {
        let (_, perm) = permute_space(&series, seed);
        seen.insert(perm);
    }
    assert_eq!(seen.len(), 100, "collision among 100 seeds over 10! orders");
}

#[test]
fn synth_same_seed_is_identical() {
    let a = synth_generate(16, 100, 2.0, 42).unwrap();
    let b = synth_generate(16, 100, 2.0, 42).unwrap();
    assert_eq!(a.values().data(), b.values().data());
    let c = synth_generate(16, 100, 2.0, 43).unwrap();
    assert_ne!(a.values().data(), c.values().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn window_count_formula_holds(n in 4usize..40, t in 1usize..6, t_out in 1usize..4) {
        prop_assume!(n >= t + t_out);
        let series = synth_generate(4, n, 0.0, 1).unwrap();
        let samples = make_windows(&series, t, t_out).unwrap();
        prop_assert_eq!(samples.len(), n - t - t_out + 1);
    }

    #[test]
    fn dendrogram_is_a_permutation(seed in 0u64..500, s in 2usize..12) {
        let mut rng = seeded(seed);
        let coords: Vec<(f64, f64)> = (0..s)
            .map(|_| (rand::Rng::gen_range(&mut rng, -5.0..5.0),
                      rand::Rng::gen_range(&mut rng, -5.0..5.0)))
            .collect();
        let mut order = dendrogram_order(&coords).unwrap();
        order.sort_unstable();
        prop_assert_eq!(order, (0..s).collect::<Vec<_>>());
    }

    #[test]
    fn blocked_cv_leakage_guard_property(
        num in 200usize..1200,
        t in 1usize..8,
        t_out in 1usize..5,
    ) {
        prop_assume!(num >= 10 * (t + t_out) * 3);
        if let Ok(folds) = blocked_cv(num, t, t_out) {
            assert_no_leakage(&folds, t + t_out);
        }
    }

    #[test]
    fn adjacency_symmetric_zero_diagonal(seed in 0u64..200, s in 5usize..12) {
        let mut rng = seeded(seed);
        let coords: Vec<(f64, f64)> = (0..s)
            .map(|_| (rand::Rng::gen_range(&mut rng, -5.0..5.0),
                      rand::Rng::gen_range(&mut rng, -5.0..5.0)))
            .collect();
        let a = build_adjacency(&coords).unwrap();
        for i in 0..s {
            prop_assert_eq!(a[i * s + i], 0);
            for j in 0..s {
                prop_assert_eq!(a[i * s + j], a[j * s + i]);
            }
        }
        // Every location keeps at least its own 4 nearest.
        for i in 0..s {
            let deg: u32 = (0..s).map(|j| u32::from(a[i * s + j])).sum();
            prop_assert!(deg >= 4);
        }
    }
}
