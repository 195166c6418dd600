//! The six harness commands as library functions; each writes its reports
//! under the configured output directory and returns the computed values.

use std::fs;
use std::path::{Path, PathBuf};

use haaf_core::backbone::save_feature_bundle;
use haaf_core::checkpoint::{load_checkpoint, restore_model, save_checkpoint, Checkpoint};
use haaf_core::clsa::Strategy;
use haaf_core::evalmetrics::MetricReport;
use haaf_core::experiment::{run_episode, EpisodeOutcome, EpisodeSettings, Scored, Workbench};
use haaf_core::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use haaf_core::inference::SCORE_CSV_HEADER;
use haaf_core::numcore::Tensor;
use haaf_core::synthdata::{generate_dataset, manifest};
use haaf_core::training::SupportBatch;
use haaf_core::{Class, Error, Result};

use crate::config::RunConfig;

pub const METRICS_CSV_HEADER: &str = "episode_seed,k,strategy,lambda,auc,ap,f1,acc,threshold,tp,fp,tn,fn";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes a CSV report whose first line records tool version and config
/// hash.
fn write_report(cfg: &RunConfig, name: &str, header: &str, body: &str) -> Result<PathBuf> {
    let path = cfg.out.join(name);
    write(&path, &format!("{}{header}\n{body}", cfg.report_header()))?;
    Ok(path)
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    write(&cfg.out.join("config.txt"), &cfg.to_text())
}

fn prepare(cfg: &RunConfig) -> Result<Workbench> {
    cfg.validate()?;
    echo_config(cfg)?;
    Workbench::new(&cfg.backbone_spec(), &cfg.data)
}

pub fn checkpoint_path(dir: &Path, episode: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("episode_{episode:03}.haafp"))
}

pub fn metrics_row(seed: u64, k: usize, strategy: Strategy, lambda: f64, m: &MetricReport) -> String {
    let c = m.counts;
    format!(
        "{seed},{k},{strategy},{lambda},{},{},{},{},{},{},{},{},{}\n",
        m.auc, m.ap, m.f1, m.acc, m.threshold, c.tp, c.fp, c.tn, c.fn_
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub samples: usize,
    pub manifest: PathBuf,
    pub bundles: Vec<PathBuf>,
}

/// Writes the corpus manifest and, if asked, one feature bundle per image
/// holding the frozen features under the initial prompts.
pub fn synth(cfg: &RunConfig, emit_features: bool) -> Result<SynthSummary> {
    cfg.validate()?;
    echo_config(cfg)?;
    let path = cfg.out.join("manifest.txt");
    let mut bundles = Vec::new();
    let samples = if emit_features {
        let bench = Workbench::new(&cfg.backbone_spec(), &cfg.data)?;
        write(&path, &manifest(&bench.dataset))?;
        let model = bench.init_model(&cfg.episode_settings(0))?;
        let prompt = |c: Class| {
            let ctx = &model.params.context;
            let mut rows: Vec<Vec<f64>> = (0..ctx.rows()).map(|i| ctx.row(i).to_vec()).collect();
            rows.push(model.class_embedding(c).data().to_vec());
            Tensor::from_rows(&rows)
        };
        let prompts = [prompt(Class::Normal)?, prompt(Class::Abnormal)?];
        let dir = cfg.out.join("features");
        fs::create_dir_all(&dir)?;
        for s in &bench.dataset.samples {
            let b = bench.backbone.feature_bundle(&bench.dataset.render(s), &prompts)?;
            let p = dir.join(format!("sample_{:05}.haafb", s.id));
            save_feature_bundle(&b, &p)?;
            bundles.push(p);
        }
        bench.dataset.len()
    } else {
        let ds = generate_dataset(&cfg.data)?;
        write(&path, &manifest(&ds))?;
        ds.len()
    };
    Ok(SynthSummary {
        samples,
        manifest: path,
        bundles,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedEpisode {
    pub episode_seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub checksum: String,
}

/// Trains one model per episode and writes its checkpoint and loss trace.
pub fn train(cfg: &RunConfig) -> Result<Vec<TrainedEpisode>> {
    let bench = prepare(cfg)?;
    write(&cfg.out.join("manifest.txt"), &manifest(&bench.dataset))?;
    let mut out = Vec::with_capacity(cfg.episode.count);
    let mut summary = String::new();
    for i in 0..cfg.episode.count {
        let s = cfg.episode_settings(i);
        let ep = bench.episode(&s)?;
        let mut model = bench.init_model(&s)?;
        let report = bench.train(&mut model, &ep, &s.train)?;
        let path = checkpoint_path(&cfg.out, i);
        fs::create_dir_all(cfg.out.join("checkpoints"))?;
        save_checkpoint(&model, &path)?;
        let checksum = Checkpoint::from_model(&model).checksum();
        let trace = report.trace_csv();
        let (head, body) = trace.split_once('\n').unwrap_or((&trace, ""));
        write_report(cfg, &format!("traces/episode_{i:03}.csv"), head, body)?;
        summary.push_str(&format!(
            "{},{},{},{},{checksum}\n",
            s.episode_seed, report.initial_loss, report.final_loss, s.model.strategy
        ));
        out.push(TrainedEpisode {
            episode_seed: s.episode_seed,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            checkpoint: path,
            checksum,
        });
    }
    write_report(cfg, "train_summary.csv", "episode_seed,initial_loss,final_loss,strategy,checkpoint_sha256", &summary)?;
    Ok(out)
}

/// Evaluates every episode with the checkpoint `train` wrote for it under
/// `from`, writing per-query scores and one metrics row per episode.
pub fn eval(cfg: &RunConfig, from: &Path) -> Result<Vec<Scored>> {
    let bench = prepare(cfg)?;
    let spec = cfg.backbone_spec();
    let mut scores = String::new();
    let mut metrics = String::new();
    let mut out = Vec::with_capacity(cfg.episode.count);
    for i in 0..cfg.episode.count {
        let s = cfg.episode_settings(i);
        let ep = bench.episode(&s)?;
        let template = bench.init_model(&s)?;
        let ck = load_checkpoint(checkpoint_path(from, i))?;
        let model = restore_model(&ck, &template, &spec)?;
        let e = bench.evaluate(&model, &ep, s.eps)?;
        let scored = e.finalize(s.lambda, s.k, s.episode_seed, &s.model)?;
        scores.push_str(&scored.report.csv_rows());
        metrics.push_str(&metrics_row(s.episode_seed, s.k, s.model.strategy, s.lambda, &scored.metrics));
        out.push(scored);
    }
    write_report(cfg, "scores.csv", SCORE_CSV_HEADER, &scores)?;
    write_report(cfg, "metrics.csv", METRICS_CSV_HEADER, &metrics)?;
    Ok(out)
}

/// One trained configuration of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub adapters: bool,
    pub strategy: Strategy,
    /// Zero-based single stage, or all stages.
    pub stage: Option<usize>,
}

impl Variant {
    pub const FULL: Variant = Variant {
        adapters: true,
        strategy: Strategy::Sequential,
        stage: None,
    };

    pub fn apply(&self, s: &mut EpisodeSettings) {
        s.model.adapters = self.adapters;
        s.model.strategy = self.strategy;
        s.model.stages = self.stage.map(|i| vec![i]);
    }

    pub fn stage_label(&self) -> String {
        self.stage.map_or("all".into(), |i| (i + 1).to_string())
    }
}

/// A reported row: a trained variant read out with one or both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub table: &'static str,
    pub label: String,
    pub variant: Variant,
    pub dual: bool,
}

/// The six component rows and the five stage rows.
pub fn headline_rows(stages: usize) -> Vec<GridRow> {
    let row = |table, label: &str, adapters, strategy, dual| GridRow {
        table,
        label: label.into(),
        variant: Variant {
            adapters,
            strategy,
            stage: None,
        },
        dual,
    };
    let mut rows = vec![
        row("components", "baseline", false, Strategy::None, false),
        row("components", "+adapters", true, Strategy::None, false),
        row("components", "+dual_branch", true, Strategy::None, true),
        row("components", "v2t_only", true, Strategy::V2tOnly, true),
        row("components", "t2v_only", true, Strategy::T2vOnly, true),
        row("components", "seq", true, Strategy::Sequential, true),
    ];
    for i in 0..stages {
        rows.push(GridRow {
            table: "stages",
            label: format!("stage_{}", i + 1),
            variant: Variant {
                stage: Some(i),
                ..Variant::FULL
            },
            dual: true,
        });
    }
    rows.push(GridRow {
        table: "stages",
        label: "all_stages".into(),
        variant: Variant::FULL,
        dual: true,
    });
    rows
}

/// Every strategy × adapter setting × stage choice × branch choice.
pub fn full_rows(stages: usize) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        for adapters in [false, true] {
            for stage in (0..stages).map(Some).chain([None]) {
                for dual in [false, true] {
                    let variant = Variant {
                        adapters,
                        strategy,
                        stage,
                    };
                    rows.push(GridRow {
                        table: "grid",
                        label: format!(
                            "{strategy}/{}/{}/{}",
                            if adapters { "adapters" } else { "no_adapters" },
                            variant.stage_label(),
                            if dual { "dual" } else { "semantic" }
                        ),
                        variant,
                        dual,
                    });
                }
            }
        }
    }
    rows
}

/// Trains each distinct variant once over the configured episodes.
pub struct AblationRunner<'a> {
    pub bench: &'a Workbench,
    pub cfg: &'a RunConfig,
    cache: Vec<(Variant, Vec<EpisodeOutcome>)>,
}

impl<'a> AblationRunner<'a> {
    pub fn new(bench: &'a Workbench, cfg: &'a RunConfig) -> Self {
        Self {
            bench,
            cfg,
            cache: Vec::new(),
        }
    }

    pub fn outcomes(&mut self, v: Variant) -> Result<&[EpisodeOutcome]> {
        if let Some(i) = self.cache.iter().position(|(c, _)| *c == v) {
            return Ok(&self.cache[i].1);
        }
        let runs = (0..self.cfg.episode.count)
            .map(|i| {
                let mut s = self.cfg.episode_settings(i);
                v.apply(&mut s);
                run_episode(self.bench, &s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.cache.push((v, runs));
        Ok(&self.cache.last().expect("just pushed").1)
    }
}

/// Per-episode query metrics of trained (or step-0) models read out at
/// `lambda`.
pub fn episode_metrics(runs: &[EpisodeOutcome], trained: bool, lambda: f64) -> Result<Vec<MetricReport>> {
    runs.iter().map(|o| Ok(o.scored(trained, lambda)?.metrics)).collect()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    s / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub row: GridRow,
    pub aucs: Vec<f64>,
    pub aps: Vec<f64>,
}

impl GridResult {
    pub fn mean_auc(&self) -> f64 {
        mean(self.aucs.iter().copied())
    }

    pub fn mean_ap(&self) -> f64 {
        mean(self.aps.iter().copied())
    }
}

pub fn run_grid(runner: &mut AblationRunner<'_>, rows: &[GridRow]) -> Result<Vec<GridResult>> {
    let lambda = runner.cfg.lambda;
    rows.iter()
        .map(|row| {
            let l = if row.dual { lambda } else { 1.0 };
            let m = episode_metrics(runner.outcomes(row.variant)?, true, l)?;
            Ok(GridResult {
                row: row.clone(),
                aucs: m.iter().map(|r| r.auc).collect(),
                aps: m.iter().map(|r| r.ap).collect(),
            })
        })
        .collect()
}

pub fn grid_csv(results: &[GridResult]) -> String {
    results
        .iter()
        .map(|r| {
            let v = r.row.variant;
            format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.row.table,
                r.row.label,
                v.adapters,
                v.strategy,
                if r.row.dual { "dual" } else { "semantic" },
                v.stage_label(),
                r.aucs.len(),
                r.mean_auc(),
                r.mean_ap()
            )
        })
        .collect()
}

pub const GRID_CSV_HEADER: &str = "table,row,adapters,strategy,branches,stages,episodes,mean_auc,mean_ap";

pub fn ablate(cfg: &RunConfig, full: bool) -> Result<Vec<GridResult>> {
    let bench = prepare(cfg)?;
    let stages = cfg.backbone.selected_visual.len();
    let rows = if full { full_rows(stages) } else { headline_rows(stages) };
    let mut runner = AblationRunner::new(&bench, cfg);
    let results = run_grid(&mut runner, &rows)?;
    write_report(cfg, "ablation.csv", GRID_CSV_HEADER, &grid_csv(&results))?;
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Beta,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "beta" => Ok(SweepParam::Beta),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}` (lambda | beta)"))),
        }
    }
}

pub const LAMBDA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const BETA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// `(episode_seed, auc, ap)` per episode.
    pub episodes: Vec<(u64, f64, f64)>,
}

impl SweepPoint {
    pub fn mean_auc(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.1))
    }

    pub fn mean_ap(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.2))
    }
}

/// λ reads out one trained model per episode at every grid value; β trains
/// one model per grid value with the gates frozen at that value.
pub fn sweep_points(bench: &Workbench, cfg: &RunConfig, param: SweepParam) -> Result<Vec<SweepPoint>> {
    let point = |value: f64, runs: &[EpisodeOutcome], lambda: f64| -> Result<SweepPoint> {
        let episodes = runs
            .iter()
            .map(|o| {
                let m = o.scored(true, lambda)?.metrics;
                Ok((o.episode.seed, m.auc, m.ap))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepPoint { value, episodes })
    };
    let train_all = |f: &dyn Fn(&mut EpisodeSettings)| -> Result<Vec<EpisodeOutcome>> {
        (0..cfg.episode.count)
            .map(|i| {
                let mut s = cfg.episode_settings(i);
                f(&mut s);
                run_episode(bench, &s)
            })
            .collect()
    };
    match param {
        SweepParam::Lambda => {
            let runs = train_all(&|_| {})?;
            LAMBDA_GRID.iter().map(|&l| point(l, &runs, l)).collect()
        }
        SweepParam::Beta => BETA_GRID
            .iter()
            .map(|&b| {
                let runs = train_all(&|s| {
                    s.model.beta_init = b;
                    s.model.beta_learnable = false;
                })?;
                point(b, &runs, cfg.lambda)
            })
            .collect(),
    }
}

pub fn sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let name = match param {
        SweepParam::Lambda => "lambda",
        SweepParam::Beta => "beta",
    };
    let mut s = String::new();
    for p in points {
        for &(seed, auc, ap) in &p.episodes {
            s.push_str(&format!("{name},{},{seed},{auc},{ap}\n", p.value));
        }
        s.push_str(&format!("{name},{},mean,{},{}\n", p.value, p.mean_auc(), p.mean_ap()));
    }
    s
}

pub fn sweep(cfg: &RunConfig, param: SweepParam) -> Result<Vec<SweepPoint>> {
    let bench = prepare(cfg)?;
    let points = sweep_points(&bench, cfg, param)?;
    let name = match param {
        SweepParam::Lambda => "sweep_lambda.csv",
        SweepParam::Beta => "sweep_beta.csv",
    };
    write_report(cfg, name, "param,value,episode_seed,auc,ap", &sweep_csv(param, &points))?;
    Ok(points)
}

/// Finite-difference report on the first episode's support set.
pub fn gradcheck(cfg: &RunConfig, inject_fault: bool) -> Result<GradcheckReport> {
    let bench = prepare(cfg)?;
    let s = cfg.episode_settings(0);
    let ep = bench.episode(&s)?;
    let model = bench.init_model(&s)?;
    let (feats, labels) = bench.support_features(&ep);
    let batch = SupportBatch {
        visual: &feats,
        labels: &labels,
    };
    let opts = GradcheckOptions {
        seed: cfg.model_seed,
        inject_fault,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&model, &bench.backbone, &batch, &opts)?;
    let csv = report.to_csv();
    let (head, body) = csv.split_once('\n').unwrap_or((&csv, ""));
    write_report(cfg, "gradcheck.csv", head, body)?;
    Ok(report)
}
