//! Corpus and episode invariants over many seeds.

use std::collections::BTreeSet;

use haaf_core::synthdata::{generate_dataset, manifest, parse_manifest, sample_episode, DatasetSpec};
use haaf_core::{Class, Error};
use proptest::prelude::*;

fn small(seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed,
        n_normal: 12,
        n_abnormal: 10,
        ..DatasetSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn corpus_is_seeded_labeled_and_in_range(seed in any::<u64>()) {
        let spec = small(seed);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        prop_assert_eq!(&a.samples, &b.samples);
        prop_assert_eq!(a.len(), 22);
        prop_assert_eq!(a.ids_of(Class::Normal).len(), 12);
        prop_assert_eq!(a.ids_of(Class::Abnormal).len(), 10);
        for (i, s) in a.samples.iter().enumerate() {
            prop_assert_eq!(s.id, i);
            prop_assert_eq!(s.anomaly.is_some(), s.label == Class::Abnormal);
            prop_assert!(s.freq.0 >= 2.0 && s.freq.0 <= 4.0);
            if let Some(d) = s.anomaly {
                prop_assert!(d.radius >= 4.0 && d.radius <= 8.0);
                prop_assert!(d.center.0 >= 0.0 && d.center.0 <= 32.0);
                prop_assert!(d.center.1 >= 0.0 && d.center.1 <= 32.0);
            }
        }
        let s = &a.samples[seed as usize % a.len()];
        let img = a.render(s);
        prop_assert_eq!(img.shape(), &[32, 32, 3]);
        prop_assert!(img.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(img.bit_eq(&b.render(s)));
        if s.label == Class::Normal {
            prop_assert!(img.bit_eq(&a.render_without_anomaly(s)));
        }
    }

    #[test]
    fn episodes_are_disjoint_balanced_and_seeded(seed in any::<u64>(), k in 1usize..5, q in 1usize..5) {
        let ds = generate_dataset(&small(seed % 7)).unwrap();
        let ep = sample_episode(&ds, k, q, seed).unwrap();
        prop_assert_eq!(&ep, &sample_episode(&ds, k, q, seed).unwrap());
        prop_assert_eq!(ep.support.len(), 2 * k);
        prop_assert_eq!(ep.query.len(), 2 * q);
        prop_assert_eq!(ep.support_indices(Class::Normal).len(), k);
        prop_assert_eq!(ep.support_indices(Class::Abnormal).len(), k);
        let ids: BTreeSet<usize> = ep.support.iter().chain(&ep.query).map(|&(i, _)| i).collect();
        prop_assert_eq!(ids.len(), 2 * (k + q));
        for &(i, c) in ep.support.iter().chain(&ep.query) {
            prop_assert_eq!(ds.samples[i].label, c);
        }
    }

    #[test]
    fn manifest_is_regenerable(seed in any::<u64>()) {
        let ds = generate_dataset(&small(seed)).unwrap();
        let text = manifest(&ds);
        let spec = parse_manifest(&text).unwrap();
        prop_assert_eq!(&spec, &ds.spec);
        prop_assert_eq!(manifest(&generate_dataset(&spec).unwrap()), text);
    }
}

#[test]
fn default_corpus_has_four_hundred_samples() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    assert_eq!(ds.len(), 400);
    assert_eq!(manifest(&ds).lines().filter(|l| l.starts_with("sample=")).count(), 400);
}

#[test]
fn oversized_episode_is_a_capacity_error() {
    let ds = generate_dataset(&small(0)).unwrap();
    assert!(matches!(sample_episode(&ds, 8, 3, 0), Err(Error::Capacity(_))));
    assert!(matches!(sample_episode(&ds, 0, 3, 0), Err(Error::Domain(_))));
}
