//! Synthetic generator geometry and dataset helpers.

use poolleak_core::data::{generate_synthetic, LabeledDataset, SyntheticConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn texture_stays_inside_the_class_tiles(
        (grid, layouts) in (1usize..=4).prop_flat_map(|g| {
            (Just(g), prop::collection::vec(prop::collection::btree_set(0..g * g, 0..=g * g), 3))
        }),
        seed in any::<u64>(),
    ) {
        let cfg = SyntheticConfig {
            classes: 3,
            per_class: 2,
            channels: 2,
            height: 8,
            width: 8,
            grid,
            layouts: layouts.iter().map(|s| s.iter().copied().collect()).collect(),
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg, seed).unwrap();
        for (x, &label) in data.inputs().iter().zip(data.labels()) {
            for c in 0..2 {
                for y in 0..8 {
                    for xx in 0..8 {
                        // tiles split the plane proportionally
                        let tile = (y * grid / 8) * grid + xx * grid / 8;
                        let textured = layouts[label].contains(&tile);
                        let v = x.at(&[c, y, xx]).unwrap();
                        prop_assert_eq!(v != 0.0, textured, "class {} pixel ({}, {})", label, y, xx);
                    }
                }
            }
        }
    }
}

#[test]
fn default_config_is_ten_distinct_classes() {
    let cfg = SyntheticConfig::default();
    assert_eq!(cfg.layouts.len(), cfg.classes);
    for (i, a) in cfg.layouts.iter().enumerate() {
        for b in &cfg.layouts[i + 1..] {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = SyntheticConfig::default();
    let bad = [
        SyntheticConfig { classes: 0, ..base.clone() },
        SyntheticConfig { grid: 17, ..base.clone() },
        SyntheticConfig { layouts: vec![vec![0]; 9], ..base.clone() },
        SyntheticConfig { layouts: vec![vec![16]; 10], ..base.clone() },
        SyntheticConfig { texture_std: 0.0, ..base.clone() },
    ];
    for cfg in bad {
        assert!(generate_synthetic(&cfg, 0).is_err(), "{cfg:?}");
    }
}

#[test]
fn split_and_concat_keep_every_example() {
    let cfg = SyntheticConfig {
        per_class: 5,
        ..SyntheticConfig::default()
    };
    let d = generate_synthetic(&cfg, 3).unwrap();
    let (t, q) = d.split_per_class(2);
    assert_eq!((t.len(), q.len()), (20, 30));
    assert!(t.inputs().iter().all(|x| !q.inputs().contains(x)));
    let joined = t.concat(&q).unwrap();
    assert_eq!(joined.len(), d.len());
    let other = LabeledDataset::new(3, vec![], vec![]).unwrap();
    assert!(t.concat(&other).is_err());
}

#[test]
fn dataset_json_round_trip() {
    let cfg = SyntheticConfig {
        per_class: 2,
        ..SyntheticConfig::default()
    };
    let d = generate_synthetic(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    d.save(&path).unwrap();
    assert_eq!(LabeledDataset::load(&path).unwrap(), d);
}
