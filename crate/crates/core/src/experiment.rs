//! Episode runner: frozen features for a corpus, training on the support
//! set, and dual-branch evaluation on the query set.

use crate::backbone::{Backbone, BackboneSpec, TextBackbone};
use crate::class::Class;
use crate::error::{Error, Result};
use crate::evalmetrics::{metric_report, threshold_from_support, MetricReport};
use crate::inference::{
    blend, build_prototypes, proto_distance, proto_score, semantic_score, MinMax, ScoreRecord, ScoreReport,
};
use crate::model::{ModelConfig, ModelState};
use crate::numcore::{Tape, Tensor};
use crate::synthdata::{generate_dataset, sample_episode, Dataset, DatasetSpec, Episode};
use crate::training::{train_episode, SupportBatch, TrainConfig, TrainReport};

/// Everything that defines one episode run besides the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSettings {
    pub k: usize,
    pub queries_per_class: usize,
    pub episode_seed: u64,
    pub model_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lambda: f64,
    pub eps: f64,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            k: 4,
            queries_per_class: 50,
            episode_seed: 0,
            model_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lambda: crate::inference::DEFAULT_LAMBDA,
            eps: crate::inference::DEFAULT_EPS,
        }
    }
}

/// Branch scores before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScores {
    pub ids: Vec<usize>,
    pub labels: Vec<Class>,
    pub sem: Vec<f64>,
    pub proto: Vec<f64>,
}

impl RawScores {
    fn with_capacity(n: usize) -> Self {
        Self {
            ids: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            sem: Vec::with_capacity(n),
            proto: Vec::with_capacity(n),
        }
    }

    pub fn positives(&self) -> Vec<bool> {
        self.labels.iter().map(|&c| c == Class::Abnormal).collect()
    }
}

/// Raw branch scores of an evaluated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub support: RawScores,
    pub query: RawScores,
}

/// Normalized and blended outcome for one λ.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub report: ScoreReport,
    pub metrics: MetricReport,
}

impl Evaluation {
    /// Normalizes both branches over the query batch, blends with `lambda`,
    /// and thresholds with the F1-optimal cut on the support scores mapped
    /// through the same normalization.
    pub fn finalize(&self, lambda: f64, k: usize, episode_seed: u64, model: &ModelConfig) -> Result<Scored> {
        let (ms, mp) = (MinMax::fit(&self.query.sem)?, MinMax::fit(&self.query.proto)?);
        let norm = |m: &MinMax, xs: &[f64]| xs.iter().map(|&x| m.apply(x)).collect::<Vec<_>>();
        let (qs, qp) = (norm(&ms, &self.query.sem), norm(&mp, &self.query.proto));
        let q_final = blend(&qs, &qp, lambda)?;
        let s_final = blend(&norm(&ms, &self.support.sem), &norm(&mp, &self.support.proto), lambda)?;
        let threshold = threshold_from_support(&s_final, &self.support.positives())?;
        let metrics = metric_report(&q_final, &self.query.positives(), threshold)?;
        let records = (0..self.query.ids.len())
            .map(|i| ScoreRecord {
                id: self.query.ids[i],
                label: self.query.labels[i],
                s_sem: self.query.sem[i],
                s_proto: self.query.proto[i],
                s_final: q_final[i],
            })
            .collect();
        Ok(Scored {
            report: ScoreReport {
                k,
                seed: episode_seed,
                strategy: model.strategy,
                lambda,
                records,
            },
            metrics,
        })
    }
}

/// A corpus with its frozen backbone features precomputed.
pub struct Workbench {
    pub backbone: Backbone,
    pub dataset: Dataset,
    /// Visual taps per sample id.
    pub features: Vec<Vec<Tensor>>,
}

impl Workbench {
    pub fn new(backbone: &BackboneSpec, data: &DatasetSpec) -> Result<Self> {
        if backbone.image_size != (data.height, data.width) {
            return Err(Error::Config(format!(
                "backbone expects {:?} images, dataset renders {}x{}",
                backbone.image_size, data.height, data.width
            )));
        }
        let backbone = Backbone::build(backbone)?;
        let dataset = generate_dataset(data)?;
        let features = dataset
            .samples
            .iter()
            .map(|s| backbone.encode_image(&dataset.render(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone,
            dataset,
            features,
        })
    }

    pub fn class_embeddings(&self) -> [Tensor; 2] {
        [
            self.backbone.class_embedding(Class::Normal).clone(),
            self.backbone.class_embedding(Class::Abnormal).clone(),
        ]
    }

    pub fn episode(&self, s: &EpisodeSettings) -> Result<Episode> {
        sample_episode(&self.dataset, s.k, s.queries_per_class, s.episode_seed)
    }

    pub fn init_model(&self, s: &EpisodeSettings) -> Result<ModelState> {
        ModelState::init(self.backbone.spec(), self.class_embeddings(), s.model.clone(), s.model_seed)
    }

    pub fn support_features(&self, ep: &Episode) -> (Vec<Vec<Tensor>>, Vec<Class>) {
        let feats = ep.support.iter().map(|&(id, _)| self.features[id].clone()).collect();
        (feats, ep.support_labels())
    }

    pub fn train(&self, model: &mut ModelState, ep: &Episode, train: &TrainConfig) -> Result<TrainReport> {
        let (feats, labels) = self.support_features(ep);
        train_episode(
            model,
            &self.backbone,
            &SupportBatch {
                visual: &feats,
                labels: &labels,
            },
            train,
        )
    }

    pub fn evaluate(&self, model: &ModelState, ep: &Episode, eps: f64) -> Result<Evaluation> {
        evaluate_episode(model, &self.backbone, ep, &self.features, eps)
    }
}

/// Scores support and query samples of `ep` under `model`, building the
/// prototypes from the guided support features.
pub fn evaluate_episode(
    model: &ModelState,
    text: &dyn TextBackbone,
    ep: &Episode,
    features: &[Vec<Tensor>],
    eps: f64,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let tt = model.text_features(&mut tape, &p, text)?;
    let tau = model.params.tau();
    let guided = |tape: &mut Tape, id: usize| -> Result<(Vec<Tensor>, f64)> {
        let visual = features
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no features for sample {id}")))?;
        let f = model.image_forward(tape, &p, &tt, visual)?;
        let v: Vec<Tensor> = f.v_prime.iter().map(|&x| tape.value(x).clone()).collect();
        let s = semantic_score(&v, tape.value(f.t_abn), tau)?;
        Ok((v, s))
    };
    let mut support_v = Vec::with_capacity(ep.support.len());
    let mut support = RawScores::with_capacity(ep.support.len());
    for &(id, c) in &ep.support {
        let (v, s) = guided(&mut tape, id)?;
        support_v.push(v);
        support.ids.push(id);
        support.labels.push(c);
        support.sem.push(s);
    }
    let protos = build_prototypes(
        &support_v,
        &ep.support_indices(Class::Normal),
        &ep.support_indices(Class::Abnormal),
    )?;
    let proto_of = |v: &[Tensor]| -> Result<f64> {
        let dn = proto_distance(v, &protos, Class::Normal)?;
        let da = proto_distance(v, &protos, Class::Abnormal)?;
        Ok(proto_score(dn, da, eps))
    };
    for v in &support_v {
        support.proto.push(proto_of(v)?);
    }
    let mut query = RawScores::with_capacity(ep.query.len());
    for &(id, c) in &ep.query {
        let (v, s) = guided(&mut tape, id)?;
        query.ids.push(id);
        query.labels.push(c);
        query.sem.push(s);
        query.proto.push(proto_of(&v)?);
    }
    Ok(Evaluation { support, query })
}

/// Untrained and trained evaluations of one episode.
pub struct EpisodeOutcome {
    pub episode: Episode,
    pub model: ModelState,
    pub train: TrainReport,
    pub untrained: Evaluation,
    pub trained: Evaluation,
}

impl EpisodeOutcome {
    pub fn scored(&self, trained: bool, lambda: f64) -> Result<Scored> {
        let e = if trained { &self.trained } else { &self.untrained };
        e.finalize(lambda, self.episode.k, self.episode.seed, &self.model.config)
    }
}

pub fn run_episode(bench: &Workbench, s: &EpisodeSettings) -> Result<EpisodeOutcome> {
    let episode = bench.episode(s)?;
    let mut model = bench.init_model(s)?;
    let untrained = bench.evaluate(&model, &episode, s.eps)?;
    let train = bench.train(&mut model, &episode, &s.train)?;
    let trained = bench.evaluate(&model, &episode, s.eps)?;
    Ok(EpisodeOutcome {
        episode,
        model,
        train,
        untrained,
        trained,
    })
}
