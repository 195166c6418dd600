//! Acceptance suite: one PASS/FAIL line per criterion on the default
//! synthetic benchmark. Exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use haaf_cli::commands::{self, episode_metrics, mean, headline_rows, run_grid, AblationRunner, GridResult, Variant};
use haaf_cli::config::RunConfig;
use haaf_core::backbone::FeatureBundle;
use haaf_core::checkpoint::Checkpoint;
use haaf_core::clsa::Strategy;
use haaf_core::evalmetrics::{auc, average_precision};
use haaf_core::experiment::{EpisodeSettings, Workbench};
use haaf_core::gradcheck::{run_gradcheck, GradcheckOptions};
use haaf_core::inference::{minmax_normalize, DEFAULT_LAMBDA};
use haaf_core::model::{ModelConfig, ModelState};
use haaf_core::numcore::{Tape, Tensor};
use haaf_core::training::SupportBatch;
use haaf_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1(bench: &Workbench, cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.episode_settings(0);
    let ep = bench.episode(&s)?;
    let model = bench.init_model(&s)?;
    let (feats, labels) = bench.support_features(&ep);
    let batch = SupportBatch {
        visual: &feats,
        labels: &labels,
    };
    let report = run_gradcheck(&model, &bench.backbone, &batch, &GradcheckOptions::default())?;
    let faulty = run_gradcheck(
        &model,
        &bench.backbone,
        &batch,
        &GradcheckOptions {
            inject_fault: true,
            coords_per_tensor: 1,
            ..GradcheckOptions::default()
        },
    )?;
    let names: Vec<String> = report.params.iter().map(|l| l.name.clone()).collect();
    let covered = names == model.params.names();
    let groups = report
        .group_maxima()
        .iter()
        .map(|(g, e)| format!("{g}={e:.2e}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(outcome(
        report.passed() && covered && !faulty.passed(),
        format!(
            "max rel err per group (tol 1e-4): {groups}; {} ops, {} tensors; fault control detected: {}",
            report.ops.len(),
            names.len(),
            !faulty.passed()
        ),
    ))
}

fn criterion_2(bench: &Workbench, cfg: &RunConfig) -> Result<Outcome> {
    let mut s = cfg.episode_settings(0);
    let emb = bench.class_embeddings();
    let spec = bench.backbone.spec();
    let mut checks = Vec::new();

    // Closed gates: V′ = Ṽ and T′ = T̃ bit for bit.
    s.model.beta_init = 0.0;
    s.model.adapters = false;
    let closed = ModelState::init(spec, emb.clone(), s.model.clone(), 5)?;
    let mut gate_ok = true;
    for id in [0usize, 7, 250, 399] {
        let mut tape = Tape::new();
        let p = closed.bind(&mut tape, false);
        let tt = closed.text_features(&mut tape, &p, &bench.backbone)?;
        let f = closed.image_forward(&mut tape, &p, &tt, &bench.features[id])?;
        for (i, &v) in f.v_prime.iter().enumerate() {
            gate_ok &= tape.value(v).bit_eq(&bench.features[id][i]);
        }
        for (&tp, &t) in f.t_prime.iter().zip(&tt) {
            gate_ok &= tape.value(tp).bit_eq(tape.value(t));
        }
    }
    checks.push(("beta=0 alignment identity", gate_ok));

    // Closed text gate with nonzero adapter weights.
    let open = ModelConfig {
        alpha_init: 0.0,
        ..ModelConfig::default()
    };
    let with = ModelState::init(spec, emb.clone(), open.clone(), 5)?;
    let without = ModelState::init(
        spec,
        emb.clone(),
        ModelConfig {
            adapters: false,
            ..open
        },
        5,
    )?;
    let text_rows = |m: &ModelState| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let tt = m.text_features(&mut tape, &p, &bench.backbone)?;
        Ok(tt.iter().map(|&t| tape.value(t).clone()).collect())
    };
    let nonzero_up = with.params.text_adapters.iter().all(|a| a.up.data().iter().any(|&x| x != 0.0));
    let alpha_ok = nonzero_up
        && text_rows(&with)?
            .iter()
            .zip(text_rows(&without)?)
            .all(|(a, b)| a.bit_eq(&b));
    checks.push(("alpha_t=0 text identity", alpha_ok));

    // Zero-initialized visual up-projection at step 0.
    let fresh = ModelState::init(
        spec,
        emb,
        ModelConfig {
            beta_init: 0.0,
            ..ModelConfig::default()
        },
        5,
    )?;
    let mut vis_ok = true;
    for id in [3usize, 333] {
        let mut tape = Tape::new();
        let p = fresh.bind(&mut tape, false);
        let tt = fresh.text_features(&mut tape, &p, &bench.backbone)?;
        let f = fresh.image_forward(&mut tape, &p, &tt, &bench.features[id])?;
        for (i, &v) in f.v_prime.iter().enumerate() {
            vis_ok &= tape.value(v).bit_eq(&bench.features[id][i]);
        }
    }
    checks.push(("zero-init visual adapter identity", vis_ok));

    let pass = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, ok)| format!("{n}: {}", if *ok { "bit-exact" } else { "differs" }))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(outcome(pass, detail))
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut np, mut nn) = (0u64, 0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi {
            np += 1;
        } else {
            nn += 1;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * np * nn) as f64
}

/// `Σ (R_k − R_{k−1})·P_k` over distinct thresholds, each recall step taken
/// from the difference of true-positive counts.
fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let np = labels.iter().filter(|&&y| y).count() as u64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut prev_tp, mut ap) = (0u64, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y).count() as u64;
        let fp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && !y).count() as u64;
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / np as f64) * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    ap
}

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut auc_eq, mut ap_eq, mut complement, mut n) = (0, 0, 0, 0);
    while n < 200 {
        let len = rng.random_range(2..=12);
        let labels: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
            continue;
        }
        let levels = rng.random_range(2..=6);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        n += 1;
        let a = auc(&scores, &labels)?;
        auc_eq += (a == brute_auc(&scores, &labels)) as usize;
        ap_eq += (average_precision(&scores, &labels)? == brute_ap(&scores, &labels)) as usize;
        let flipped: Vec<bool> = labels.iter().map(|y| !y).collect();
        complement += (a + auc(&scores, &flipped)? == 1.0) as usize;
    }
    Ok(outcome(
        auc_eq == 200 && ap_eq == 200 && complement == 200,
        format!("exact matches over 200 instances: auc {auc_eq}, ap {ap_eq}, auc complement {complement}"),
    ))
}

fn criterion_4(bench: &Workbench, cfg: &RunConfig) -> Result<Outcome> {
    let probe = |strategy: Strategy| -> Result<Vec<bool>> {
        let model = ModelState::init(
            bench.backbone.spec(),
            bench.class_embeddings(),
            ModelConfig {
                strategy,
                ..cfg.model.clone()
            },
            9,
        )?;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let tt = model.text_features(&mut tape, &p, &bench.backbone)?;
        let base = bench.features[11].clone();
        let f0 = model.image_forward(&mut tape, &p, &tt, &base)?;
        let mut changed = Vec::new();
        for s in 0..base.len() {
            let mut moved = base.clone();
            moved[s] = moved[s].map(|x| x + 0.25);
            let f1 = model.image_forward(&mut tape, &p, &tt, &moved)?;
            let (Some(k0), Some(k1)) = (f0.guidance_keys[s], f1.guidance_keys[s]) else {
                return Err(Error::Contract("strategy lacks guidance keys".into()));
            };
            changed.push(!tape.value(k0).bit_eq(tape.value(k1)));
        }
        Ok(changed)
    };
    let seq = probe(Strategy::Sequential)?;
    let t2v = probe(Strategy::T2vOnly)?;
    Ok(outcome(
        seq.iter().all(|&c| c) && t2v.iter().all(|&c| !c),
        format!("guidance keys change per stage: seq {seq:?}, t2v {t2v:?}"),
    ))
}

fn criterion_5(runner: &mut AblationRunner<'_>, lambda: f64) -> Result<Outcome> {
    let runs = runner.outcomes(Variant::FULL)?;
    let l0 = mean(runs.iter().map(|o| o.train.initial_loss));
    let l1 = mean(runs.iter().map(|o| o.train.final_loss));
    let a0 = mean(episode_metrics(runs, false, lambda)?.iter().map(|m| m.auc));
    let a1 = mean(episode_metrics(runs, true, lambda)?.iter().map(|m| m.auc));
    Ok(outcome(
        l1 < l0 && a1 - a0 >= 0.05,
        format!(
            "{} episodes: support BCE {l0:.5} -> {l1:.5}; query AUC {a0:.4} -> {a1:.4} (gain {:+.4}, need >= 0.05)",
            runs.len(),
            a1 - a0
        ),
    ))
}

fn find<'a>(grid: &'a [GridResult], label: &str) -> &'a GridResult {
    grid.iter().find(|r| r.row.label == label).expect("row present")
}

fn print_grid(grid: &[GridResult], table: &str) {
    for r in grid.iter().filter(|r| r.row.table == table) {
        let v = r.row.variant;
        println!(
            "    {:<13} adapters={:<5} strategy={:<4} branches={:<8} stages={:<3} AUC {:.4} AP {:.4}",
            r.row.label,
            v.adapters,
            v.strategy.to_string(),
            if r.row.dual { "dual" } else { "semantic" },
            v.stage_label(),
            r.mean_auc(),
            r.mean_ap()
        );
    }
}

fn criterion_6(grid: &[GridResult]) -> Outcome {
    let (seq, v2t, t2v, none) = (
        find(grid, "seq").mean_auc(),
        find(grid, "v2t_only").mean_auc(),
        find(grid, "t2v_only").mean_auc(),
        find(grid, "+dual_branch").mean_auc(),
    );
    outcome(
        seq >= v2t.max(t2v) - 0.01 && seq >= none + 0.02,
        format!("seq {seq:.4} vs max(v2t {v2t:.4}, t2v {t2v:.4}) - 0.01 and none {none:.4} + 0.02"),
    )
}

fn criterion_7(grid: &[GridResult]) -> Outcome {
    let all = find(grid, "all_stages").mean_auc();
    let best = grid
        .iter()
        .filter(|r| r.row.label.starts_with("stage_"))
        .map(|r| (r.row.label.clone(), r.mean_auc()))
        .fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    outcome(
        all >= best.1 - 0.01,
        format!("all stages {all:.4} vs best single {} {:.4} - 0.01", best.0, best.1),
    )
}

fn criterion_8(runner: &mut AblationRunner<'_>, cfg: &RunConfig) -> Result<Outcome> {
    let runs = runner.outcomes(Variant::FULL)?;
    let mut exact = 0;
    for o in runs {
        let q = &o.trained.query;
        let sem = o.scored(true, 1.0)?.report.final_scores();
        let proto = o.scored(true, 0.0)?.report.final_scores();
        exact += (sem == minmax_normalize(&q.sem)? && proto == minmax_normalize(&q.proto)?) as usize;
    }
    let defaults = DEFAULT_LAMBDA == 0.5 && cfg.lambda == 0.5 && EpisodeSettings::default().lambda == 0.5;
    Ok(outcome(
        exact == runs.len() && defaults,
        format!(
            "endpoints bit-exact in {exact}/{} episodes; default lambda {}",
            runs.len(),
            cfg.lambda
        ),
    ))
}

fn criterion_9(cfg: &RunConfig) -> Result<Outcome> {
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut sums = Vec::new();
    let mut files = Vec::new();
    for d in &dirs {
        let mut c = cfg.clone();
        c.episode.count = 2;
        c.out = d.path().to_path_buf();
        let trained = commands::train(&c)?;
        commands::eval(&c, &c.out)?;
        sums.push(trained.iter().map(|t| t.checksum.clone()).collect::<Vec<_>>());
        files.push((
            std::fs::read(c.out.join("metrics.csv"))?,
            std::fs::read(c.out.join("scores.csv"))?,
        ));
    }
    let same_ck = sums[0] == sums[1];
    let same_csv = files[0] == files[1];
    Ok(outcome(
        same_ck && same_csv,
        format!(
            "checkpoint sha256 equal: {same_ck} ({}...); metric and score CSVs byte-equal: {same_csv}",
            &sums[0][0][..12]
        ),
    ))
}

fn criterion_10(bench: &Workbench, cfg: &RunConfig) -> Result<Outcome> {
    let model = bench.init_model(&cfg.episode_settings(0))?;
    let prompts = [model.params.context.clone(), model.params.context.clone()];
    let bundle = bench.backbone.feature_bundle(&bench.dataset.render(&bench.dataset.samples[5]), &prompts)?;
    let bytes = bundle.to_bytes()?;
    let loaded = FeatureBundle::from_bytes(&bytes)?;
    let f32_exact = loaded
        .visual
        .iter()
        .zip(&bundle.visual)
        .all(|(a, b)| a.tokens.data().iter().zip(b.tokens.data()).all(|(&x, &y)| x == y as f32 as f64));
    let bundle_ok = f32_exact && loaded.to_bytes()? == bytes;

    let ck = Checkpoint::from_model(&model);
    let ck_bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&ck_bytes)?;
    let ck_ok = back == ck && back.to_bytes() == ck_bytes;

    let mut categories = Vec::new();
    for bytes in [&bytes, &ck_bytes] {
        let parse = |b: &[u8]| -> std::result::Result<(), Error> {
            if bytes.starts_with(b"HAAF") {
                FeatureBundle::from_bytes(b).map(|_| ())
            } else {
                Checkpoint::from_bytes(b).map(|_| ())
            }
        };
        let mut bad_magic = bytes.to_vec();
        bad_magic[1] ^= 0x20;
        let mut bad_version = bytes.to_vec();
        bad_version[4] = 99;
        let mut extended = bytes.to_vec();
        extended.push(0);
        for corrupt in [bytes[..bytes.len() / 3].to_vec(), bad_magic, bad_version, extended] {
            categories.push(parse(&corrupt).err().map(|e| e.category()));
        }
    }
    let corrupt_ok = categories.iter().all(|c| *c == Some("format"));
    let mismatch = Checkpoint::from_model(&model).check_compatible(
        bench.backbone.spec(),
        &ModelConfig {
            prompt_len: 4,
            ..ModelConfig::default()
        },
    );
    let compat_ok = matches!(&mismatch, Err(Error::Compatibility { field, .. }) if field == "prompt_len");
    Ok(outcome(
        bundle_ok && ck_ok && corrupt_ok && compat_ok,
        format!(
            "bundle round trip {bundle_ok}; checkpoint round trip {ck_ok}; 8 corruptions -> {categories:?}; \
             architecture mismatch -> compatibility: {compat_ok}"
        ),
    ))
}

/// Same training with both learning rates scaled by 100; reported for
/// context only.
fn diagnostic_learning_rate(bench: &Workbench, cfg: &RunConfig) -> Result<String> {
    let mut fast = cfg.clone();
    fast.train.lr_fast *= 100.0;
    fast.train.lr_slow *= 100.0;
    let mut runner = AblationRunner::new(bench, &fast);
    let mut parts = Vec::new();
    for strategy in [Strategy::None, Strategy::Sequential] {
        let runs = runner.outcomes(Variant {
            strategy,
            ..Variant::FULL
        })?;
        let a0 = mean(episode_metrics(runs, false, fast.lambda)?.iter().map(|m| m.auc));
        let a1 = mean(episode_metrics(runs, true, fast.lambda)?.iter().map(|m| m.auc));
        parts.push(format!("{strategy} AUC {a0:.4} -> {a1:.4}"));
    }
    Ok(parts.join("; "))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let bench = Workbench::new(&cfg.backbone_spec(), &cfg.data).expect("default benchmark builds");
    let mut runner = AblationRunner::new(&bench, &cfg);
    let stages = cfg.backbone.selected_visual.len();
    let grid = run_grid(&mut runner, &headline_rows(stages)).expect("ablation grid runs");

    let names = [
        "gradient correctness",
        "gate and identity suite",
        "metric oracles",
        "sequentiality probe",
        "training efficacy",
        "component ablation ordering",
        "stage ablation ordering",
        "ensemble endpoints",
        "determinism",
        "format round trips",
    ];
    let results: Vec<Result<Outcome>> = vec![
        criterion_1(&bench, &cfg),
        criterion_2(&bench, &cfg),
        criterion_3(),
        criterion_4(&bench, &cfg),
        criterion_5(&mut runner, cfg.lambda),
        Ok(criterion_6(&grid)),
        Ok(criterion_7(&grid)),
        criterion_8(&mut runner, &cfg),
        criterion_9(&cfg),
        criterion_10(&bench, &cfg),
    ];
    let mut failed = 0;
    for (i, (name, r)) in names.iter().zip(results).enumerate() {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error[{}]: {e}", e.category())),
        };
        failed += !pass as usize;
        println!("{} criterion {:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("component ablation grid (mean query AUC/AP over {} episodes):", cfg.episode.count);
    print_grid(&grid, "components");
    println!("stage ablation grid:");
    print_grid(&grid, "stages");
    match diagnostic_learning_rate(&bench, &cfg) {
        Ok(d) => println!("diagnostic (not a criterion) learning rates x100: {d}"),
        Err(e) => println!("diagnostic (not a criterion) learning rates x100: error {e}"),
    }
    println!("acceptance: {} of 10 criteria passed in {:.1?}", 10 - failed, start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
