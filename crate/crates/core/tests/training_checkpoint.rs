//! Training determinism, β-gate equivalences, λ endpoints and checkpoint
//! persistence on a small corpus.

use haaf_core::backbone::BackboneSpec;
use haaf_core::checkpoint::{load_checkpoint, restore_model, save_checkpoint, Checkpoint};
use haaf_core::clsa::Strategy;
use haaf_core::experiment::{run_episode, EpisodeSettings, Workbench};
use haaf_core::synthdata::DatasetSpec;
use haaf_core::Error;

fn bench() -> Workbench {
    let data = DatasetSpec {
        n_normal: 24,
        n_abnormal: 24,
        ..DatasetSpec::default()
    };
    Workbench::new(&BackboneSpec::default(), &data).unwrap()
}

fn settings(strategy: Strategy, epochs: usize) -> EpisodeSettings {
    let mut s = EpisodeSettings {
        k: 2,
        queries_per_class: 6,
        episode_seed: 3,
        model_seed: 5,
        ..EpisodeSettings::default()
    };
    s.model.strategy = strategy;
    s.train.epochs = epochs;
    s.train.lr_fast = 1e-3;
    s.train.lr_slow = 1e-3;
    s
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let b = bench();
    let s = settings(Strategy::Sequential, 8);
    let a = run_episode(&b, &s).unwrap();
    let c = run_episode(&b, &s).unwrap();
    assert_eq!(a.train.trace_csv(), c.train.trace_csv());
    assert_eq!(a.model.params.checksum(), c.model.params.checksum());
    assert_eq!(a.trained, c.trained);
    assert!(a.train.final_loss < a.train.initial_loss);
}

#[test]
fn zero_epochs_leave_parameters_at_init() {
    let b = bench();
    let s = settings(Strategy::Sequential, 0);
    let out = run_episode(&b, &s).unwrap();
    let init = b.init_model(&s).unwrap();
    assert_eq!(out.model.params.checksum(), init.params.checksum());
    assert!(out.train.trace.is_empty());
    assert_eq!(out.untrained, out.trained);
}

#[test]
fn fixed_closed_gates_match_no_alignment() {
    let b = bench();
    let mut none = settings(Strategy::None, 3);
    none.model.beta_learnable = false;
    none.model.beta_init = 0.0;
    let base = run_episode(&b, &none).unwrap();
    for strategy in [Strategy::V2tOnly, Strategy::T2vOnly, Strategy::Sequential] {
        let mut s = none.clone();
        s.model.strategy = strategy;
        let out = run_episode(&b, &s).unwrap();
        assert_eq!(out.untrained, base.untrained, "{strategy:?}");
        let (x, y) = (out.scored(false, 0.5).unwrap(), base.scored(false, 0.5).unwrap());
        assert_eq!(x.metrics.auc.to_bits(), y.metrics.auc.to_bits());
    }
}

#[test]
fn lambda_endpoints_select_single_branches() {
    let b = bench();
    let out = run_episode(&b, &settings(Strategy::Sequential, 2)).unwrap();
    let norm = |xs: &[f64]| {
        let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        xs.iter().map(|&x| (x - lo) / (hi - lo)).collect::<Vec<_>>()
    };
    let sem = norm(&out.trained.query.sem);
    let proto = norm(&out.trained.query.proto);
    let at = |lambda: f64| {
        let s = out.scored(true, lambda).unwrap();
        s.report.records.iter().map(|r| r.s_final).collect::<Vec<_>>()
    };
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(&at(1.0), &sem));
    assert!(close(&at(0.0), &proto));
}

#[test]
fn checkpoint_files_round_trip_bit_exactly() {
    let b = bench();
    let s = settings(Strategy::Sequential, 2);
    let out = run_episode(&b, &s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.haafp");
    save_checkpoint(&out.model, &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.checksum(), Checkpoint::from_model(&out.model).checksum());
    let template = b.init_model(&s).unwrap();
    let restored = restore_model(&ck, &template, b.backbone.spec()).unwrap();
    assert_eq!(restored.params.checksum(), out.model.params.checksum());
    let again = b.evaluate(&restored, &out.episode, s.eps).unwrap();
    assert_eq!(again, out.trained);
}

#[test]
fn incompatible_checkpoints_name_the_field() {
    let b = bench();
    let s = settings(Strategy::Sequential, 0);
    let model = b.init_model(&s).unwrap();
    let ck = Checkpoint::from_model(&model);

    let mut taps = b.backbone.spec().clone();
    taps.selected_visual = vec![2, 4, 6];
    match ck.check_compatible(&taps, &model.config) {
        Err(Error::Compatibility { field, .. }) => assert_eq!(field, "visual_taps"),
        other => panic!("expected compatibility error, got {other:?}"),
    }

    let mut cfg = model.config.clone();
    cfg.prompt_len = 4;
    match ck.check_compatible(b.backbone.spec(), &cfg) {
        Err(Error::Compatibility { field, .. }) => assert_eq!(field, "prompt_len"),
        other => panic!("expected compatibility error, got {other:?}"),
    }

    let mut small = s.clone();
    small.model.prompt_len = 4;
    let template = b.init_model(&small).unwrap();
    assert!(matches!(ck.into_params(&template.params), Err(Error::Compatibility { .. })));
}

#[test]
fn truncated_checkpoint_files_are_rejected() {
    let b = bench();
    let model = b.init_model(&settings(Strategy::Sequential, 0)).unwrap();
    let bytes = Checkpoint::from_model(&model).to_bytes();
    for cut in [0, 3, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
}
