//! Flat `section.key=value` run configuration with documented defaults.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use haaf_core::backbone::BackboneSpec;
use haaf_core::experiment::EpisodeSettings;
use haaf_core::inference::{DEFAULT_EPS, DEFAULT_LAMBDA};
use haaf_core::model::ModelConfig;
use haaf_core::synthdata::DatasetSpec;
use haaf_core::training::{TauRate, TrainConfig};
use haaf_core::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub k: usize,
    pub queries_per_class: usize,
    /// Episodes per grid cell and per sweep point.
    pub count: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            k: 4,
            queries_per_class: 50,
            count: 20,
            seed: 0,
        }
    }
}

/// Everything a command needs. Image size is shared by the corpus and the
/// backbone and set through `data.height` and `data.width`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneSpec,
    pub data: DatasetSpec,
    pub episode: EpisodeConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub lambda: f64,
    pub eps: f64,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            data: DatasetSpec::default(),
            episode: EpisodeConfig::default(),
            model: ModelConfig::default(),
            model_seed: 0,
            lambda: DEFAULT_LAMBDA,
            eps: DEFAULT_EPS,
            train: TrainConfig::default(),
            out: PathBuf::from("haaf-out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn s(v: impl Display) -> String {
    v.to_string()
}

impl RunConfig {
    /// Defaults overridden by the `key=value` lines of `text`; `#` starts a
    /// comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "backbone.d" => self.backbone.d = parse(key, v)?,
            "backbone.heads" => self.backbone.heads = parse(key, v)?,
            "backbone.vision_layers" => self.backbone.vision_layers = parse(key, v)?,
            "backbone.text_layers" => self.backbone.text_layers = parse(key, v)?,
            "backbone.visual_taps" => self.backbone.selected_visual = parse_list(key, v)?,
            "backbone.text_taps" => self.backbone.selected_text = parse_list(key, v)?,
            "backbone.patch_size" => self.backbone.patch_size = parse(key, v)?,
            "backbone.text_positions" => self.backbone.text_positions = parse(key, v)?,
            "backbone.seed" => self.backbone.seed = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.freq_min" => self.data.freq_range.0 = parse(key, v)?,
            "data.freq_max" => self.data.freq_range.1 = parse(key, v)?,
            "data.noise_std" => self.data.noise_std = parse(key, v)?,
            "data.radius_min" => self.data.radius_range.0 = parse(key, v)?,
            "data.radius_max" => self.data.radius_range.1 = parse(key, v)?,
            "data.contrast_shift" => self.data.contrast_shift = parse(key, v)?,
            "data.anomaly_freq_factor" => self.data.anomaly_freq_factor = parse(key, v)?,
            "data.n_normal" => self.data.n_normal = parse(key, v)?,
            "data.n_abnormal" => self.data.n_abnormal = parse(key, v)?,
            "episode.k" => self.episode.k = parse(key, v)?,
            "episode.queries" => self.episode.queries_per_class = parse(key, v)?,
            "episode.count" => self.episode.count = parse(key, v)?,
            "episode.seed" => self.episode.seed = parse(key, v)?,
            "adapt.enabled" => self.model.adapters = parse(key, v)?,
            "adapt.prompt_len" => self.model.prompt_len = parse(key, v)?,
            "adapt.reduction" => self.model.reduction = parse(key, v)?,
            "adapt.alpha_init" => self.model.alpha_init = parse(key, v)?,
            "clsa.strategy" => self.model.strategy = v.parse()?,
            "clsa.heads" => self.model.heads = parse(key, v)?,
            "clsa.beta_init" => self.model.beta_init = parse(key, v)?,
            "clsa.beta_learnable" => self.model.beta_learnable = parse(key, v)?,
            "clsa.init_std" => {
                self.model.clsa_init_std = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "model.seed" => self.model_seed = parse(key, v)?,
            "model.log_tau_init" => self.model.log_tau_init = parse(key, v)?,
            "model.stages" => {
                self.model.stages = if v == "all" {
                    None
                } else {
                    let one_based = parse_list(key, v)?;
                    if one_based.contains(&0) {
                        return Err(Error::Config("model.stages counts from 1".into()));
                    }
                    Some(one_based.into_iter().map(|i| i - 1).collect())
                }
            }
            "inference.lambda" => self.lambda = parse(key, v)?,
            "inference.eps" => self.eps = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr_fast" => self.train.lr_fast = parse(key, v)?,
            "train.lr_slow" => self.train.lr_slow = parse(key, v)?,
            "train.tau_rate" => {
                self.train.tau_rate = match v {
                    "fast" => TauRate::Fast,
                    "slow" => TauRate::Slow,
                    _ => return Err(Error::Config(format!("train.tau_rate must be fast or slow, got `{v}`"))),
                }
            }
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (b, d, e, m, t) = (&self.backbone, &self.data, &self.episode, &self.model, &self.train);
        vec![
            ("backbone.d", s(b.d)),
            ("backbone.heads", s(b.heads)),
            ("backbone.vision_layers", s(b.vision_layers)),
            ("backbone.text_layers", s(b.text_layers)),
            ("backbone.visual_taps", list(&b.selected_visual)),
            ("backbone.text_taps", list(&b.selected_text)),
            ("backbone.patch_size", s(b.patch_size)),
            ("backbone.text_positions", s(b.text_positions)),
            ("backbone.seed", s(b.seed)),
            ("data.seed", s(d.seed)),
            ("data.height", s(d.height)),
            ("data.width", s(d.width)),
            ("data.freq_min", s(d.freq_range.0)),
            ("data.freq_max", s(d.freq_range.1)),
            ("data.noise_std", s(d.noise_std)),
            ("data.radius_min", s(d.radius_range.0)),
            ("data.radius_max", s(d.radius_range.1)),
            ("data.contrast_shift", s(d.contrast_shift)),
            ("data.anomaly_freq_factor", s(d.anomaly_freq_factor)),
            ("data.n_normal", s(d.n_normal)),
            ("data.n_abnormal", s(d.n_abnormal)),
            ("episode.k", s(e.k)),
            ("episode.queries", s(e.queries_per_class)),
            ("episode.count", s(e.count)),
            ("episode.seed", s(e.seed)),
            ("adapt.enabled", s(m.adapters)),
            ("adapt.prompt_len", s(m.prompt_len)),
            ("adapt.reduction", s(m.reduction)),
            ("adapt.alpha_init", s(m.alpha_init)),
            ("clsa.strategy", s(m.strategy)),
            ("clsa.heads", s(m.heads)),
            ("clsa.beta_init", s(m.beta_init)),
            ("clsa.beta_learnable", s(m.beta_learnable)),
            ("clsa.init_std", m.clsa_init_std.map_or("auto".into(), s)),
            ("model.seed", s(self.model_seed)),
            ("model.log_tau_init", s(m.log_tau_init)),
            (
                "model.stages",
                m.stages.as_ref().map_or("all".into(), |st| {
                    list(&st.iter().map(|i| i + 1).collect::<Vec<_>>())
                }),
            ),
            ("inference.lambda", s(self.lambda)),
            ("inference.eps", s(self.eps)),
            ("train.epochs", s(t.epochs)),
            ("train.batch_size", s(t.batch_size)),
            ("train.lr_fast", s(t.lr_fast)),
            ("train.lr_slow", s(t.lr_slow)),
            (
                "train.tau_rate",
                match t.tau_rate {
                    TauRate::Fast => "fast".into(),
                    TauRate::Slow => "slow".into(),
                },
            ),
            ("train.weight_decay", s(t.weight_decay)),
            ("train.beta1", s(t.beta1)),
            ("train.beta2", s(t.beta2)),
            ("train.eps", s(t.eps)),
            ("train.seed", s(t.seed)),
            ("out", self.out.display().to_string()),
        ]
    }

    /// The effective configuration; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "out" {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    /// Sets every run seed (episode, model init, shuffling) at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.episode.seed = seed;
        self.model_seed = seed;
        self.train.seed = seed;
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            image_size: (self.data.height, self.data.width),
            ..self.backbone.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.backbone_spec();
        b.validate()?;
        self.data.validate()?;
        self.model.validate(&b)?;
        self.train.validate()?;
        if self.episode.count == 0 {
            return Err(Error::Config("episode.count must be positive".into()));
        }
        if self.episode.k == 0 || self.episode.queries_per_class == 0 {
            return Err(Error::Config("episode.k and episode.queries must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("inference.lambda={} outside [0, 1]", self.lambda)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("inference.eps must be positive".into()));
        }
        Ok(())
    }

    /// Settings of episode `i`: every seed advances by `i`.
    pub fn episode_settings(&self, i: usize) -> EpisodeSettings {
        let i = i as u64;
        EpisodeSettings {
            k: self.episode.k,
            queries_per_class: self.episode.queries_per_class,
            episode_seed: self.episode.seed.wrapping_add(i),
            model_seed: self.model_seed.wrapping_add(i),
            model: self.model.clone(),
            train: TrainConfig {
                seed: self.train.seed.wrapping_add(i),
                ..self.train.clone()
            },
            lambda: self.lambda,
            eps: self.eps,
        }
    }

    /// Leading comment line of every report.
    pub fn report_header(&self) -> String {
        format!("# haaf {} config={}\n", env!("CARGO_PKG_VERSION"), self.hash())
    }
}
