use cast_core::data::synth::{synthesize_ood, SyntheticScenario};
use cast_core::data::{split_bounds, Normalizer, PreparedData, Split};
use proptest::prelude::*;

fn prepared(sc: &SyntheticScenario) -> PreparedData {
    let ds = synthesize_ood(sc).unwrap();
    PreparedData::new(ds.raw(), &ds.manifest()).unwrap()
}

#[test]
fn splits_are_chronological() {
    let data = prepared(&SyntheticScenario::regime_shift(0));
    let last_step = |s: Split| {
        let st = data.starts(s);
        st[st.len() - 1] + data.input_len + data.horizon - 1
    };
    let first_target = |s: Split| data.starts(s)[0] + data.input_len;
    assert!(data.timestamps[last_step(Split::Train)] < data.timestamps[first_target(Split::Val)]);
    assert!(data.timestamps[last_step(Split::Val)] < data.timestamps[first_target(Split::Test)]);
    for s in Split::ALL {
        let (lo, hi) = data.bounds.range(s);
        assert!(data.starts(s).iter().all(|&t| t + data.input_len + data.horizon <= hi));
        // Targets never leave the split; inputs of val/test may reach back for history.
        assert!(data.starts(s).iter().all(|&t| t + data.input_len >= lo));
    }
}

#[test]
fn normalizer_sees_only_training_steps() {
    let sc = SyntheticScenario::regime_shift(1);
    let mut ds = synthesize_ood(&sc).unwrap();
    let base = PreparedData::new(ds.raw(), &ds.manifest()).unwrap();
    let train_end = base.bounds.train_end;
    for v in ds.series.values[train_end * ds.series.nodes..].iter_mut() {
        *v = *v * 10.0 + 100.0;
    }
    let changed = PreparedData::new(ds.raw(), &ds.manifest()).unwrap();
    assert_eq!(base.normalizer, changed.normalizer);
    assert_eq!(base.edge_scaler, changed.edge_scaler);
}

#[test]
fn normalization_round_trip() {
    let data = prepared(&SyntheticScenario::edge_perturb(3));
    let n = &data.normalizer;
    for (i, &v) in data.raw.values.iter().enumerate() {
        let c = i % data.raw.nodes;
        assert!((n.denormalize(c, n.normalize(c, v)) - v).abs() <= 1e-12 * (1.0 + v.abs()));
    }
}

#[test]
fn constant_channel_falls_back_to_unit_scale() {
    let mut ds = synthesize_ood(&SyntheticScenario::edge_perturb(0)).unwrap();
    let nodes = ds.series.nodes;
    for t in 0..ds.series.len {
        ds.series.values[t * nodes] = 4.0;
    }
    let n = Normalizer::fit(&ds.series, 100);
    assert_eq!((n.mean[0], n.std[0]), (4.0, 1.0));
}

#[test]
fn generator_is_deterministic_per_seed() {
    let a = synthesize_ood(&SyntheticScenario::regime_shift(7)).unwrap();
    let b = synthesize_ood(&SyntheticScenario::regime_shift(7)).unwrap();
    let c = synthesize_ood(&SyntheticScenario::regime_shift(8)).unwrap();
    assert_eq!(a.series, b.series);
    assert_eq!(a.regimes, b.regimes);
    assert_ne!(a.series, c.series);
    assert!(a.test_regime_unseen());
}

#[test]
fn every_batch_is_finite_and_well_shaped() {
    let data = prepared(&SyntheticScenario::edge_perturb(2));
    let d = data.dims();
    let m = data.graph.edge_count();
    for s in Split::ALL {
        let n = data.window_count(s);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(16) {
            let b = data.batch(s, chunk);
            let k = chunk.len();
            assert_eq!(b.x.shape(), &[k, d.input_len, d.nodes, d.in_features]);
            assert_eq!(b.y.shape(), &[k, d.horizon, d.nodes, d.out_features]);
            assert_eq!(b.y_raw.shape(), b.y.shape());
            assert_eq!(b.edge.shape(), &[k, m, d.edge_features]);
            assert!(b.x.all_finite() && b.y.all_finite() && b.edge.all_finite());
        }
        for i in 0..n {
            let raw = data.edge_signal(s, i);
            for row in raw.data().chunks(d.edge_features) {
                assert!((0.0..=1.0).contains(&row[0]) && (-1.0..=1.0).contains(&row[1]));
                assert!(row[2..].iter().all(|v| *v >= 0.0));
            }
        }
    }
}

#[test]
fn window_labels_follow_last_input_step() {
    let ds = synthesize_ood(&SyntheticScenario::regime_shift(0)).unwrap();
    let data = PreparedData::new(ds.raw(), &ds.manifest()).unwrap();
    for s in Split::ALL {
        for i in [0, data.window_count(s) - 1] {
            let t = data.starts(s)[i] + data.input_len - 1;
            assert_eq!(data.window_label(s, i), Some(ds.regimes[t]));
        }
    }
}

proptest! {
    #[test]
    fn split_bounds_partition_the_series(len in 10usize..5000, a in 0.1f64..10.0, b in 0.1f64..10.0, c in 0.1f64..10.0) {
        let total = a + b + c;
        let sb = split_bounds(len, [a / total, b / total, c / total]);
        prop_assert!(sb.train_end <= sb.val_end && sb.val_end <= sb.len && sb.len == len);
        prop_assert_eq!(sb.range(Split::Train).1, sb.range(Split::Val).0);
        prop_assert_eq!(sb.range(Split::Val).1, sb.range(Split::Test).0);
    }
}
