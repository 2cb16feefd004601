use std::collections::BTreeSet;
use std::time::Instant;

use fedspace::data::{LabeledDataset, SampleShape, SplitTag};
use fedspace::rng;
use fedspace::splitgen::{
    active_task, build_task_streams, dirichlet_partition, generate_split, largest_remainder, load_split, sample_client_sizes, save_split,
    SplitConfig, TaskStream,
};
use proptest::prelude::*;

/// Labels only matter to the split; samples are 1-d placeholders.
fn labels_only(per_class: &[usize]) -> LabeledDataset {
    let labels: Vec<usize> = per_class.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let samples = vec![0.0; labels.len()];
    LabeledDataset::new(SampleShape::Vector { dim: 1 }, samples, labels, per_class.len(), SplitTag::Train).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn largest_remainder_sums_exactly(total in 0usize..10_000, weights in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let out = largest_remainder(total, &weights);
        prop_assert_eq!(out.iter().sum::<usize>(), total);
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 {
            for (o, w) in out.iter().zip(&weights) {
                let quota = w / sum * total as f64;
                prop_assert!((*o as f64 - quota).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn client_sizes_follow_power_law(
        n in 1usize..60,
        min in 0usize..40,
        extra in 0usize..20_000,
        exponent in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let total = n * min + extra;
        let sizes = sample_client_sizes(n, total, exponent, min, &mut rng::stream(seed, "t", &[])).unwrap();
        prop_assert_eq!(sizes.len(), n);
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        prop_assert!(sizes.iter().all(|&s| s >= min));
        // sorted sizes track the rank weights within one rounding unit
        let mut sorted = sizes.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
        let wsum: f64 = weights.iter().sum();
        for (s, w) in sorted.iter().zip(&weights) {
            prop_assert!(((s - min) as f64 - w / wsum * extra as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn partition_is_exclusive_and_conserving(
        per_class in prop::collection::vec(0usize..60, 1..12),
        n in 1usize..8,
        alpha in 0.05f64..20.0,
        fill in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let data = labels_only(&per_class);
        let assign = (data.len() as f64 * fill) as usize;
        let sizes = largest_remainder(assign, &vec![1.0; n]);
        let parts = dirichlet_partition(&data, &sizes, alpha, &mut rng::stream(seed, "t", &[])).unwrap();
        let mut seen = BTreeSet::new();
        for (client, size) in parts.iter().zip(&sizes) {
            prop_assert_eq!(client.iter().map(Vec::len).sum::<usize>(), *size);
            for (c, idx) in client.iter().enumerate() {
                for &i in idx {
                    prop_assert_eq!(data.labels()[i], c);
                    prop_assert!(seen.insert(i), "index {} assigned twice", i);
                }
            }
        }
        prop_assert_eq!(seen.len(), assign);
    }

    #[test]
    fn streams_cover_every_task_once(
        n in 1usize..6,
        tasks in 1usize..10,
        per_task in 1usize..5,
        min_len in 1usize..20,
        slack in 0usize..200,
        shuffle in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let total = tasks * min_len + slack;
        let (partition, streams) = build_task_streams(n, tasks, per_task, total, min_len, shuffle, &mut rng::stream(seed, "t", &[])).unwrap();
        let all: BTreeSet<usize> = partition.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), tasks * per_task);
        for s in &streams {
            s.validate(tasks * per_task, total).unwrap();
            prop_assert_eq!(*s.boundaries.last().unwrap(), total);
            let mut order: Vec<&Vec<usize>> = s.tasks.iter().collect();
            order.sort();
            let mut expected: Vec<&Vec<usize>> = partition.iter().collect();
            expected.sort();
            prop_assert_eq!(order, expected);
            let mut prev = 0;
            for &b in &s.boundaries {
                prop_assert!(b - prev >= min_len);
                prev = b;
            }
        }
    }

    #[test]
    fn active_task_is_piecewise_constant(lengths in prop::collection::vec(1usize..30, 1..8)) {
        let mut boundaries = Vec::new();
        let mut end = 0;
        for l in &lengths {
            end += l;
            boundaries.push(end);
        }
        let tasks: Vec<Vec<usize>> = (0..lengths.len()).map(|i| vec![i]).collect();
        let stream = TaskStream { tasks, boundaries: boundaries.clone() };
        let mut changes = 0;
        let mut covered = vec![0usize; lengths.len()];
        let mut prev = None;
        for round in 1..=end {
            let t = active_task(&stream, round).unwrap()[0];
            covered[t] += 1;
            if prev.is_some_and(|p| p != t) {
                changes += 1;
                // a change happens right after a boundary
                prop_assert!(boundaries.contains(&(round - 1)));
            }
            prev = Some(t);
        }
        prop_assert_eq!(changes, lengths.len() - 1);
        prop_assert_eq!(covered, lengths);
        prop_assert!(active_task(&stream, 0).is_err());
        prop_assert!(active_task(&stream, end + 1).is_err());
    }
}

#[test]
fn full_split_is_deterministic_and_valid() {
    let data = labels_only(&[80; 20]);
    let cfg = SplitConfig { n_clients: 12, num_tasks: 4, classes_per_task: 5, total_rounds: 400, min_size: 16, seed: 5, ..Default::default() };
    let a = generate_split(&data, &cfg).unwrap();
    let b = generate_split(&data, &cfg).unwrap();
    assert_eq!(a, b);
    a.validate(data.labels()).unwrap();
    assert_eq!(a.clients.iter().map(|c| c.num_samples()).sum::<usize>(), data.len());

    let other = generate_split(&data, &SplitConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn two_clients_ten_tasks_five_thousand_rounds() {
    let (partition, streams) = build_task_streams(2, 10, 10, 5000, 10, false, &mut rng::stream(0, "t", &[])).unwrap();
    assert_eq!(partition[0], (0..10).collect::<Vec<_>>());
    for s in &streams {
        assert_eq!(s.boundaries.len(), 10);
        assert!(s.boundaries.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*s.boundaries.last().unwrap(), 5000);
    }
    assert_ne!(streams[0].tasks, streams[1].tasks);
}

#[test]
fn alpha_three_gives_skewed_exclusive_histograms() {
    // CIFAR-100 shaped label counts
    let data = labels_only(&[500; 100]);
    let cfg = SplitConfig { seed: 1, ..Default::default() };
    let split = generate_split(&data, &cfg).unwrap();
    let mut seen = BTreeSet::new();
    let (mut skewed, mut large) = (0, 0);
    for c in &split.clients {
        let counts: Vec<usize> = (0..100).map(|k| c.sample_indices.get(&k).map_or(0, Vec::len)).collect();
        let mean = c.num_samples() as f64 / 100.0;
        let var = counts.iter().map(|&n| (n as f64 - mean).powi(2)).sum::<f64>() / 100.0;
        // multinomial spread alone gives var ≈ mean; Dirichlet(3) adds
        // about n²/(100·301) on top, visible once n reaches a few hundred
        if c.num_samples() >= 1000 {
            large += 1;
            if var > 2.0 * mean {
                skewed += 1;
            }
        }
        for i in c.sample_indices.values().flatten() {
            assert!(seen.insert(*i));
        }
    }
    assert!(large >= 5 && skewed == large, "{skewed} of {large} large clients are skewed");
}

#[test]
fn large_split_round_trips_quickly() {
    let data = labels_only(&[1000; 10]);
    let cfg = SplitConfig { n_clients: 500, num_tasks: 5, classes_per_task: 2, min_size: 4, seed: 3, ..Default::default() };
    let split = generate_split(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.json");
    let start = Instant::now();
    save_split(&path, &split).unwrap();
    let back = load_split(&path).unwrap();
    assert!(start.elapsed().as_secs_f64() < 2.0);
    assert_eq!(back, split);
}
