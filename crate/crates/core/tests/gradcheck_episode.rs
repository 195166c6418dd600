//! Full support-loss gradients against finite differences for every
//! learnable tensor, with the injected backward fault as negative control.

use haaf_core::backbone::BackboneSpec;
use haaf_core::experiment::{EpisodeSettings, Workbench};
use haaf_core::gradcheck::{run_gradcheck, GradcheckOptions};
use haaf_core::synthdata::DatasetSpec;
use haaf_core::training::SupportBatch;

fn bench() -> Workbench {
    let data = DatasetSpec {
        n_normal: 6,
        n_abnormal: 6,
        ..DatasetSpec::default()
    };
    Workbench::new(&BackboneSpec::default(), &data).unwrap()
}

#[test]
fn every_parameter_group_matches_finite_differences() {
    let bench = bench();
    let settings = EpisodeSettings {
        k: 2,
        queries_per_class: 1,
        ..EpisodeSettings::default()
    };
    let ep = bench.episode(&settings).unwrap();
    let model = bench.init_model(&settings).unwrap();
    let (feats, labels) = bench.support_features(&ep);
    let batch = SupportBatch {
        visual: &feats,
        labels: &labels,
    };
    let report = run_gradcheck(&model, &bench.backbone, &batch, &GradcheckOptions::default()).unwrap();
    let names: Vec<&str> = report.params.iter().map(|l| l.name.as_str()).collect();
    assert_eq!(names, model.params.names().iter().map(String::as_str).collect::<Vec<_>>());
    for l in report.ops.iter().chain(&report.params) {
        assert!(l.max_rel_err < 1e-4, "{} relative error {:e}", l.name, l.max_rel_err);
    }
    let groups: Vec<String> = report.group_maxima().into_iter().map(|(g, _)| g).collect();
    assert_eq!(groups, ["op", "prompt", "adapter", "clsa", "logit_scale"]);
    assert!(report.passed());

    let faulty = run_gradcheck(
        &model,
        &bench.backbone,
        &batch,
        &GradcheckOptions {
            inject_fault: true,
            coords_per_tensor: 1,
            ..GradcheckOptions::default()
        },
    )
    .unwrap();
    assert!(!faulty.passed());
    assert!(faulty.params.iter().any(|l| l.max_rel_err >= 1e-4));
}
