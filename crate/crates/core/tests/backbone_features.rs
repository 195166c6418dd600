//! Frozen backbone features: bundle round trips, corruption handling and
//! the freeze invariant under training.

use haaf_core::backbone::{load_feature_bundle, save_feature_bundle, Backbone, BackboneSpec, FeatureBundle};
use haaf_core::experiment::{EpisodeSettings, Workbench};
use haaf_core::numcore::Tensor;
use haaf_core::synthdata::DatasetSpec;
use haaf_core::training::TrainConfig;
use haaf_core::{Class, Error};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bundle(seed: u64) -> FeatureBundle {
    let spec = BackboneSpec::default();
    let b = Backbone::build(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::randn(&[32, 32, 3], 0.3, &mut rng).map(|x| x.clamp(0.0, 1.0));
    let prompts = Class::ALL.map(|_| Tensor::randn(&[9, spec.d], 0.02, &mut rng));
    b.feature_bundle(&img, &prompts).unwrap()
}

fn quantized(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f32 as f64).collect()
}

#[test]
fn bundle_round_trip_is_exact_at_storage_precision() {
    let b = bundle(1);
    assert_eq!(b.visual.len(), 4);
    assert_eq!(b.text.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.haafb");
    save_feature_bundle(&b, &path).unwrap();
    let back = load_feature_bundle(&path).unwrap();
    for (a, o) in back.visual.iter().zip(&b.visual) {
        assert_eq!(a.layer, o.layer);
        assert_eq!(a.tokens.data(), quantized(&o.tokens).as_slice());
    }
    for (ca, co) in back.text.iter().zip(&b.text) {
        for (a, o) in ca.iter().zip(co) {
            assert_eq!(a.tokens.data(), quantized(&o.tokens).as_slice());
        }
    }
    assert_eq!(back.to_bytes().unwrap(), b.to_bytes().unwrap());
    let again = FeatureBundle::from_bytes(&back.to_bytes().unwrap()).unwrap();
    assert_eq!(again, back);
}

#[test]
fn bundle_header_corruptions_are_format_errors() {
    let bytes = bundle(2).to_bytes().unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'Z';
    assert!(matches!(FeatureBundle::from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
    let mut version = bytes.clone();
    version[4] = 7;
    assert!(matches!(FeatureBundle::from_bytes(&version), Err(Error::Format { offset: 4, .. })));
    let mut width = bytes.clone();
    width[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(FeatureBundle::from_bytes(&width), Err(Error::Format { offset: 8, .. })));
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[1, 2, 3]);
    assert!(matches!(FeatureBundle::from_bytes(&trailing), Err(Error::Format { .. })));
    let missing = tempfile::tempdir().unwrap().path().join("none.haafb");
    assert_eq!(load_feature_bundle(missing).unwrap_err().category(), "io");
}

#[test]
fn inconsistent_bundle_fails_validation() {
    let mut b = bundle(3);
    b.text[1].pop();
    assert!(matches!(b.to_bytes(), Err(Error::Validation(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncated_bundles_never_load(cut in 0usize..1000, seed in 0u64..4) {
        let bytes = bundle(seed).to_bytes().unwrap();
        let cut = cut * bytes.len() / 1000;
        let e = FeatureBundle::from_bytes(&bytes[..cut]).unwrap_err();
        prop_assert_eq!(e.category(), "format");
    }
}

#[test]
fn training_leaves_the_backbone_and_class_embeddings_untouched() {
    let data = DatasetSpec {
        n_normal: 8,
        n_abnormal: 8,
        ..DatasetSpec::default()
    };
    let bench = Workbench::new(&BackboneSpec::default(), &data).unwrap();
    let before = bench.backbone.checksum();
    let emb = bench.class_embeddings();
    let settings = EpisodeSettings {
        k: 2,
        queries_per_class: 2,
        train: TrainConfig {
            epochs: 3,
            lr_fast: 1e-2,
            lr_slow: 1e-2,
            ..TrainConfig::default()
        },
        ..EpisodeSettings::default()
    };
    let ep = bench.episode(&settings).unwrap();
    let mut model = bench.init_model(&settings).unwrap();
    let init = model.params.checksum();
    bench.train(&mut model, &ep, &settings.train).unwrap();
    assert_ne!(model.params.checksum(), init);
    assert_eq!(bench.backbone.checksum(), before);
    for c in Class::ALL {
        assert!(model.class_embedding(c).bit_eq(&emb[c.index()]));
    }
    let fresh = bench.backbone.encode_image(&bench.dataset.render(&bench.dataset.samples[0])).unwrap();
    for (a, b) in fresh.iter().zip(&bench.features[0]) {
        assert!(a.bit_eq(b));
    }
}
