use proptest::prelude::*;
use psl_core::data::{
    default_imbalanced_ratios, parse_idx, parse_series_csv, partition, summarize,
    synth_classification, synth_series, Dataset, PartitionMode, PartitionSpec, PAPER_RATIOS_6,
};
use psl_core::nn::Tensor;
use psl_core::Error;

fn labels_only(n: usize, classes: usize, seed: u64) -> Dataset {
    // Uneven class sizes so stratification is actually exercised.
    let labels = (0..n)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 97) as usize % classes)
        .collect();
    Dataset::new(Tensor::zeros(&[n, 1]), labels, classes).unwrap()
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}

#[test]
fn paper_ratio_counts() {
    let ds = labels_only(60_000, 10, 0);
    let spec = PartitionSpec {
        mode: PartitionMode::Imbalanced {
            ratios: Some(PAPER_RATIOS_6.to_vec()),
        },
        client_count: 6,
        seed: 4,
    };
    let counts: Vec<usize> = partition(&ds, &spec)
        .unwrap()
        .iter()
        .map(|s| s.len())
        .collect();
    assert_eq!(counts, [600, 1800, 5400, 11400, 18000, 22800]);
}

#[test]
fn default_ratios_follow_half_bell() {
    let r = default_imbalanced_ratios(6).unwrap();
    assert!(r.windows(2).all(|w| w[0] < w[1]));
    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((r[5] / r[0] - phi(0.0) / phi(2.0)).abs() < 1e-9);
    let two = default_imbalanced_ratios(2).unwrap();
    let z = phi(2.0) + phi(0.0);
    assert!((two[0] - phi(2.0) / z).abs() < 1e-12 && (two[1] - phi(0.0) / z).abs() < 1e-12);
    assert!(default_imbalanced_ratios(1).is_err());
}

#[test]
fn balanced_and_noniid_examples() {
    let ds = synth_classification(100, 10, &[1, 4, 4], 1).unwrap();
    let spec = PartitionSpec {
        mode: PartitionMode::Balanced,
        client_count: 4,
        seed: 2,
    };
    let counts: Vec<usize> = partition(&ds, &spec)
        .unwrap()
        .iter()
        .map(|s| s.len())
        .collect();
    assert_eq!(counts, [25; 4]);

    let ds = synth_classification(600, 10, &[1, 4, 4], 1).unwrap();
    let spec = PartitionSpec {
        mode: PartitionMode::NonIid {
            classes_per_client: 5,
        },
        client_count: 6,
        seed: 3,
    };
    let shards = partition(&ds, &spec).unwrap();
    let summary = summarize(&ds, &spec, &shards);
    for h in &summary.histograms {
        assert_eq!(h.iter().filter(|&&c| c > 0).count(), 5);
    }
    assert!(summary.uncovered_classes.is_empty());
    assert_eq!(summary.unassigned_samples, 0);

    // Two clients with one class each leave eight classes uncovered.
    let spec = PartitionSpec {
        mode: PartitionMode::NonIid {
            classes_per_client: 1,
        },
        client_count: 2,
        seed: 3,
    };
    let shards = partition(&ds, &spec).unwrap();
    let summary = summarize(&ds, &spec, &shards);
    assert_eq!(summary.uncovered_classes.len(), 8);
    assert_eq!(summary.unassigned_samples, 480);
}

#[test]
fn partition_errors() {
    let ds = labels_only(5, 2, 0);
    let spec = PartitionSpec {
        mode: PartitionMode::Balanced,
        client_count: 6,
        seed: 0,
    };
    assert!(matches!(partition(&ds, &spec), Err(Error::Domain(_))));
    let spec = PartitionSpec {
        mode: PartitionMode::Imbalanced {
            ratios: Some(vec![0.5, 0.6]),
        },
        client_count: 2,
        seed: 0,
    };
    assert!(matches!(partition(&ds, &spec), Err(Error::Config { .. })));
    let spec = PartitionSpec {
        mode: PartitionMode::NonIid {
            classes_per_client: 3,
        },
        client_count: 2,
        seed: 0,
    };
    assert!(matches!(partition(&ds, &spec), Err(Error::Config { .. })));
}

#[test]
fn synthetic_data_is_seeded_and_unit_range() {
    let a = synth_classification(50, 5, &[1, 8, 8], 9).unwrap();
    let b = synth_classification(50, 5, &[1, 8, 8], 9).unwrap();
    assert!(a.inputs.bitwise_eq(&b.inputs));
    assert!(a.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let s = synth_series(30, 3, 64, 2).unwrap();
    assert_eq!(s.sample_shape(), &[1, 64]);
    assert!(s.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn idx_and_csv_parsing() {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend([0, 255, 51, 102, 255, 0, 0, 0]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 1];
    let ds = parse_idx(&images, &labels).unwrap();
    assert_eq!(ds.inputs.shape(), &[2, 1, 2, 2]);
    assert_eq!(ds.inputs.data()[1], 1.0);
    assert!((ds.inputs.data()[2] - 0.2).abs() < 1e-15);
    assert_eq!(ds.labels, [3, 1]);
    let mut bad = images.clone();
    bad[3] = 9;
    assert!(matches!(parse_idx(&bad, &labels), Err(Error::Format(_))));
    assert!(parse_idx(&images[..20], &labels).is_err());

    let csv = "1,0.1,0.2,0.3\n0,0.4,0.5,0.6\n";
    let s = parse_series_csv(csv).unwrap();
    assert_eq!(s.sample_shape(), &[1, 3]);
    assert_eq!(s.labels, [1, 0]);
    assert!(parse_series_csv("1,0.1\n0,0.2,0.3\n").is_err());
}

fn spec_strategy() -> impl Strategy<Value = (usize, usize, PartitionSpec)> {
    (20usize..400, 2usize..8, 1usize..9, any::<u64>(), 0usize..3).prop_flat_map(
        |(n, classes, clients, seed, mode)| {
            let mode = match mode {
                0 => Just(PartitionMode::Balanced).boxed(),
                1 => prop::collection::vec(0.05f64..1.0, clients)
                    .prop_map(|raw| {
                        let s: f64 = raw.iter().sum();
                        let mut r: Vec<f64> = raw.iter().map(|v| v / s).collect();
                        let fix = 1.0 - r.iter().sum::<f64>();
                        r[0] += fix;
                        PartitionMode::Imbalanced { ratios: Some(r) }
                    })
                    .boxed(),
                _ => (1..=classes)
                    .prop_map(|k| PartitionMode::NonIid {
                        classes_per_client: k,
                    })
                    .boxed(),
            };
            mode.prop_map(move |mode| {
                (
                    n,
                    classes,
                    PartitionSpec {
                        mode,
                        client_count: clients,
                        seed,
                    },
                )
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn shards_are_disjoint_and_cover((n, classes, spec) in spec_strategy()) {
        let ds = labels_only(n, classes, spec.seed);
        let shards = partition(&ds, &spec).unwrap();
        prop_assert_eq!(shards.len(), spec.client_count);
        let mut seen = vec![false; n];
        for s in &shards {
            for &i in &s.indices {
                prop_assert!(!seen[i], "sample {} assigned twice", i);
                seen[i] = true;
            }
        }
        let summary = summarize(&ds, &spec, &shards);
        let covered = seen.iter().filter(|&&s| s).count();
        prop_assert_eq!(covered + summary.unassigned_samples, n);
        if !matches!(spec.mode, PartitionMode::NonIid { .. }) {
            prop_assert_eq!(covered, n);
        }
        prop_assert_eq!(&partition(&ds, &spec).unwrap(), &shards);

        match &spec.mode {
            PartitionMode::Balanced => {
                for c in 0..classes {
                    let per: Vec<usize> = summary.histograms.iter().map(|h| h[c]).collect();
                    prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
                }
            }
            PartitionMode::Imbalanced { ratios: Some(r) } => {
                for (s, ratio) in shards.iter().zip(r) {
                    prop_assert!((s.len() as f64 - ratio * n as f64).abs() < 1.0);
                }
            }
            PartitionMode::NonIid { classes_per_client } => {
                for h in &summary.histograms {
                    prop_assert!(h.iter().filter(|&&c| c > 0).count() <= *classes_per_client);
                }
            }
            _ => {}
        }
    }
}
