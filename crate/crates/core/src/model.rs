//! The learnable parameter set and the differentiable forward pass from
//! frozen features to the semantic anomaly score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adaptation::{
    apply_text_adapter, apply_visual_adapter, assemble_prompt, init_adaptation, ResidualAdapter, DEFAULT_PROMPT_LEN,
    DEFAULT_REDUCTION,
};
use crate::backbone::{BackboneSpec, TextBackbone};
use crate::class::Class;
use crate::clsa::{clsa_forward, ClsaPair, CrossAttentionBlock, PairFeatures, Strategy, DEFAULT_HEADS};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Hyperparameters of the adaptation and alignment stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub prompt_len: usize,
    pub reduction: usize,
    pub alpha_init: f64,
    pub adapters: bool,
    pub strategy: Strategy,
    pub heads: usize,
    pub beta_init: f64,
    pub beta_learnable: bool,
    /// Std of the cross-attention projections at initialization; `None`
    /// means `1/sqrt(d)`.
    pub clsa_init_std: Option<f64>,
    pub log_tau_init: f64,
    /// Zero-based indices of the layer pairs in use; `None` means all.
    pub stages: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompt_len: DEFAULT_PROMPT_LEN,
            reduction: DEFAULT_REDUCTION,
            alpha_init: 0.0,
            adapters: true,
            strategy: Strategy::Sequential,
            heads: DEFAULT_HEADS,
            beta_init: 1.0,
            beta_learnable: true,
            clsa_init_std: None,
            log_tau_init: 10f64.ln(),
            stages: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, backbone: &BackboneSpec) -> Result<()> {
        let d = backbone.d;
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        if self.reduction == 0 || d % self.reduction != 0 {
            return Err(Error::Config(format!("d={d} not divisible by reduction {}", self.reduction)));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by {} heads", self.heads)));
        }
        if self.prompt_len + 1 > backbone.text_positions {
            return Err(Error::Config(format!(
                "prompt of {} rows exceeds {} text positions",
                self.prompt_len + 1,
                backbone.text_positions
            )));
        }
        if self.clsa_init_std.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::Config("attention init std must be non-negative".into()));
        }
        if let Some(s) = &self.stages {
            let n = backbone.num_stages();
            if s.is_empty() || s.iter().any(|&i| i >= n) || s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "stage selection {s:?} must be increasing indices below {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn active_stages(&self, total: usize) -> Vec<usize> {
        self.stages.clone().unwrap_or_else(|| (0..total).collect())
    }
}

/// Optimizer group of a parameter, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Prompt,
    Adapter,
    Clsa,
    LogitScale,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("prompt") => ParamGroup::Prompt,
            Some("adapter") => ParamGroup::Adapter,
            Some("clsa") => ParamGroup::Clsa,
            _ => ParamGroup::LogitScale,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Prompt => "prompt",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Clsa => "clsa",
            ParamGroup::LogitScale => "logit_scale",
        }
    }
}

/// Every learnable tensor, generic over storage so the same layout serves
/// plain values and tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct HaafParams<T = Tensor> {
    pub context: T,
    pub visual_adapters: Vec<ResidualAdapter<T>>,
    pub text_adapters: Vec<ResidualAdapter<T>>,
    pub alpha_t: T,
    pub clsa: Vec<ClsaPair<T>>,
    pub beta_t: T,
    pub beta_v: T,
    pub log_tau: T,
    pub visual_taps: Vec<usize>,
    pub text_taps: Vec<usize>,
}

impl<T> HaafParams<T> {
    fn visual_prefix(&self, i: usize) -> String {
        format!("adapter.visual.{}", self.visual_taps[i])
    }

    fn text_prefix(&self, i: usize) -> String {
        format!("adapter.text.{}", self.text_taps[i])
    }

    fn clsa_prefix(&self, i: usize) -> String {
        format!("clsa.{}-{}", self.visual_taps[i], self.text_taps[i])
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> HaafParams<U> {
        let f = &mut f;
        HaafParams {
            context: f("prompt.context", &self.context),
            visual_adapters: self
                .visual_adapters
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(&self.visual_prefix(i), f))
                .collect(),
            text_adapters: self
                .text_adapters
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(&self.text_prefix(i), f))
                .collect(),
            alpha_t: f("adapter.text.alpha", &self.alpha_t),
            clsa: self
                .clsa
                .iter()
                .enumerate()
                .map(|(i, p)| p.map(&self.clsa_prefix(i), f))
                .collect(),
            beta_t: f("clsa.beta_t", &self.beta_t),
            beta_v: f("clsa.beta_v", &self.beta_v),
            log_tau: f("logit_scale.log_tau", &self.log_tau),
            visual_taps: self.visual_taps.clone(),
            text_taps: self.text_taps.clone(),
        }
    }

    /// `(name, value)` in a fixed canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![("prompt.context".to_string(), &self.context)];
        for (i, a) in self.visual_adapters.iter().enumerate() {
            a.entries(&self.visual_prefix(i), &mut out);
        }
        for (i, a) in self.text_adapters.iter().enumerate() {
            a.entries(&self.text_prefix(i), &mut out);
        }
        out.push(("adapter.text.alpha".into(), &self.alpha_t));
        for (i, p) in self.clsa.iter().enumerate() {
            p.entries(&self.clsa_prefix(i), &mut out);
        }
        out.push(("clsa.beta_t".into(), &self.beta_t));
        out.push(("clsa.beta_v".into(), &self.beta_v));
        out.push(("logit_scale.log_tau".into(), &self.log_tau));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let vp: Vec<String> = (0..self.visual_adapters.len()).map(|i| self.visual_prefix(i)).collect();
        let tp: Vec<String> = (0..self.text_adapters.len()).map(|i| self.text_prefix(i)).collect();
        let cp: Vec<String> = (0..self.clsa.len()).map(|i| self.clsa_prefix(i)).collect();
        let mut out = vec![("prompt.context".to_string(), &mut self.context)];
        for (a, p) in self.visual_adapters.iter_mut().zip(&vp) {
            a.entries_mut(p, &mut out);
        }
        for (a, p) in self.text_adapters.iter_mut().zip(&tp) {
            a.entries_mut(p, &mut out);
        }
        out.push(("adapter.text.alpha".into(), &mut self.alpha_t));
        for (c, p) in self.clsa.iter_mut().zip(&cp) {
            c.entries_mut(p, &mut out);
        }
        out.push(("clsa.beta_t".into(), &mut self.beta_t));
        out.push(("clsa.beta_v".into(), &mut self.beta_v));
        out.push(("logit_scale.log_tau".into(), &mut self.log_tau));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.entries().into_iter().map(|(n, _)| n).collect()
    }
}

impl HaafParams<Tensor> {
    pub fn num_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries() {
            h.update(name.as_bytes());
            t.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }
}

/// Learnable state plus the configuration it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: HaafParams,
    class_embeddings: [Tensor; 2],
}

/// Per-image output of the differentiable forward pass.
#[derive(Clone, Debug)]
pub struct ImageForward {
    /// Guided visual tokens `V′`, one per active stage.
    pub v_prime: Vec<Var>,
    /// Refined text rows of each active stage, normal rows first.
    pub t_prime: Vec<Var>,
    pub t_norm: Var,
    pub t_abn: Var,
    pub guidance_keys: Vec<Option<Var>>,
}

impl ModelState {
    /// Seeded initialization: adapters, prompts and `α_t` first, then the
    /// alignment blocks, gates and logit scale.
    pub fn init(backbone: &BackboneSpec, class_embeddings: [Tensor; 2], config: ModelConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        config.validate(backbone)?;
        let d = backbone.d;
        let stages = backbone.num_stages();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = init_adaptation(
            stages,
            config.prompt_len,
            config.reduction,
            config.alpha_init,
            class_embeddings.clone(),
            &mut rng,
        )?;
        let std = config.clsa_init_std.unwrap_or(1.0 / (d as f64).sqrt());
        let clsa = (0..stages)
            .map(|_| ClsaPair {
                v2t: CrossAttentionBlock::init(d, std, &mut rng),
                t2v: CrossAttentionBlock::init(d, std, &mut rng),
            })
            .collect();
        let params = HaafParams {
            context: a.prompts.context.clone(),
            visual_adapters: a.visual,
            text_adapters: a.text,
            alpha_t: Tensor::scalar(a.alpha_t),
            clsa,
            beta_t: Tensor::scalar(config.beta_init),
            beta_v: Tensor::scalar(config.beta_init),
            log_tau: Tensor::scalar(config.log_tau_init),
            visual_taps: backbone.selected_visual.clone(),
            text_taps: backbone.selected_text.clone(),
        };
        Ok(Self {
            config,
            params,
            class_embeddings,
        })
    }

    /// Rebuilds a state around loaded parameters.
    pub fn from_params(config: ModelConfig, params: HaafParams, class_embeddings: [Tensor; 2]) -> Self {
        Self {
            config,
            params,
            class_embeddings,
        }
    }

    pub fn class_embedding(&self, class: Class) -> &Tensor {
        &self.class_embeddings[class.index()]
    }

    pub fn width(&self) -> usize {
        self.params.context.cols()
    }

    pub fn num_stages(&self) -> usize {
        self.params.visual_taps.len()
    }

    pub fn active_stages(&self) -> Vec<usize> {
        self.config.active_stages(self.num_stages())
    }

    /// Whether the optimizer may touch `name` under this configuration.
    pub fn is_trainable(&self, name: &str) -> bool {
        match name {
            "clsa.beta_t" | "clsa.beta_v" => self.config.beta_learnable && self.config.strategy != Strategy::None,
            _ => true,
        }
    }

    /// Places the parameters on `tape`: as gradient-tracking leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HaafParams<Var> {
        self.params
            .map(|name, t| tape.leaf(t.clone(), trainable && self.is_trainable(name)))
    }

    /// Adapted text rows `T̃` per active stage: both class prompts encoded,
    /// stacked `[normal; abnormal]`, and passed through the text adapter.
    pub fn text_features(&self, tape: &mut Tape, p: &HaafParams<Var>, text: &dyn TextBackbone) -> Result<Vec<Var>> {
        let mut per_class = Vec::with_capacity(2);
        for class in Class::ALL {
            let prompt = assemble_prompt(tape, p.context, self.class_embedding(class))?;
            per_class.push(text.encode_prompt(tape, prompt, class)?.taps);
        }
        let mut out = Vec::new();
        for s in self.active_stages() {
            let (tn, ta) = (per_class[0].get(s), per_class[1].get(s));
            let (Some(&tn), Some(&ta)) = (tn, ta) else {
                return Err(Error::Config(format!("text features lack stage {s}")));
            };
            let t = tape.concat_rows(&[tn, ta])?;
            out.push(if self.config.adapters {
                apply_text_adapter(tape, t, &p.text_adapters[s], p.alpha_t)?
            } else {
                t
            });
        }
        Ok(out)
    }

    /// Adapter and alignment pass for one image, given its frozen visual taps
    /// (all stages) and the shared `T̃` from [`ModelState::text_features`].
    pub fn image_forward(
        &self,
        tape: &mut Tape,
        p: &HaafParams<Var>,
        text_tilde: &[Var],
        visual: &[Tensor],
    ) -> Result<ImageForward> {
        let stages = self.active_stages();
        if visual.len() != self.num_stages() {
            return Err(Error::Config(format!(
                "{} visual layers supplied for {} stages",
                visual.len(),
                self.num_stages()
            )));
        }
        if text_tilde.len() != stages.len() {
            return Err(Error::Config(format!(
                "{} text stages supplied for {} active stages",
                text_tilde.len(),
                stages.len()
            )));
        }
        let mut pairs = Vec::with_capacity(stages.len());
        let mut blocks = Vec::with_capacity(stages.len());
        for (&s, &t_tilde) in stages.iter().zip(text_tilde) {
            let v = tape.constant(visual[s].clone());
            let v_tilde = if self.config.adapters {
                apply_visual_adapter(tape, v, &p.visual_adapters[s])?
            } else {
                v
            };
            pairs.push(PairFeatures { v_tilde, t_tilde });
            blocks.push(&p.clsa[s]);
        }
        let out = clsa_forward(tape, &pairs, &blocks, p.beta_t, p.beta_v, self.config.strategy, self.config.heads)?;
        let last = *out.t_prime.last().expect("at least one stage");
        let rows = tape.value(last).rows();
        let t_norm = tape.row(last, rows / 2 - 1)?;
        let t_abn = tape.row(last, rows - 1)?;
        Ok(ImageForward {
            v_prime: out.v_prime,
            t_prime: out.t_prime,
            t_norm,
            t_abn,
            guidance_keys: out.guidance_keys,
        })
    }
}

/// `mean_ℓ mean_p σ(τ·⟨V′_p, t_abn⟩)` on the tape, with `τ = exp(log_tau)`.
pub fn semantic_score_var(tape: &mut Tape, v_prime: &[Var], t_abn: Var, log_tau: Var) -> Result<Var> {
    if v_prime.is_empty() {
        return Err(Error::Contract("semantic score needs at least one layer".into()));
    }
    let tau = tape.exp(log_tau);
    let mut total: Option<Var> = None;
    for &v in v_prime {
        let logits = tape.matvec(v, t_abn)?;
        let logits = tape.scale_by(logits, tau)?;
        let probs = tape.sigmoid(logits);
        let m = tape.mean(probs);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / v_prime.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;

    fn small_spec() -> BackboneSpec {
        BackboneSpec {
            d: 16,
            heads: 2,
            vision_layers: 4,
            text_layers: 2,
            selected_visual: vec![2, 4],
            selected_text: vec![1, 2],
            image_size: (16, 16),
            patch_size: 8,
            text_positions: 8,
            seed: 1,
        }
    }

    fn small_model(config: ModelConfig) -> (Backbone, ModelState) {
        let bb = Backbone::build(&small_spec()).unwrap();
        let ce = [bb.class_embedding(Class::Normal).clone(), bb.class_embedding(Class::Abnormal).clone()];
        let cfg = ModelConfig {
            prompt_len: 3,
            heads: 2,
            ..config
        };
        let m = ModelState::init(&small_spec(), ce, cfg, 7).unwrap();
        (bb, m)
    }

    #[test]
    fn parameter_names_cover_every_member() {
        let (_, m) = small_model(ModelConfig::default());
        let names = m.params.names();
        assert_eq!(names[0], "prompt.context");
        for n in [
            "adapter.visual.2.down",
            "adapter.visual.4.up_bias",
            "adapter.text.1.up",
            "adapter.text.alpha",
            "clsa.2-1.v2t.wq",
            "clsa.4-2.t2v.wo",
            "clsa.beta_t",
            "clsa.beta_v",
            "logit_scale.log_tau",
        ] {
            assert!(names.iter().any(|x| x == n), "missing {n}");
        }
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(ParamGroup::of("adapter.text.alpha"), ParamGroup::Adapter);
        assert_eq!(ParamGroup::of("clsa.beta_t"), ParamGroup::Clsa);
    }

    #[test]
    fn init_is_seeded() {
        let (_, a) = small_model(ModelConfig::default());
        let (_, b) = small_model(ModelConfig::default());
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert!((a.params.tau() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn semantic_score_closed_forms() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap());
        let t = tape.constant(Tensor::vector(vec![1.0, 5.0]).unwrap());
        let lt = tape.constant(Tensor::scalar(0.0));
        let s = semantic_score_var(&mut tape, &[v], t, lt).unwrap();
        assert!((tape.value(s).data()[0] - 0.75).abs() < 1e-12);
        let z = tape.constant(Tensor::zeros(&[4, 2]));
        let s = semantic_score_var(&mut tape, &[z, z], t, lt).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!(semantic_score_var(&mut tape, &[], t, lt).is_err());
    }

    #[test]
    fn forward_shapes_and_class_rows() {
        let closed = ModelConfig {
            beta_init: 0.0,
            ..Default::default()
        };
        let (bb, m) = small_model(closed);
        let img = Tensor::full(&[16, 16, 3], 0.3);
        let vis = bb.encode_image(&img).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, true);
        let tt = m.text_features(&mut tape, &p, &bb).unwrap();
        assert_eq!(tape.shape(tt[0]), &[8, 16]);
        let f = m.image_forward(&mut tape, &p, &tt, &vis).unwrap();
        assert_eq!(f.v_prime.len(), 2);
        assert_eq!(tape.shape(f.v_prime[1]), &[4, 16]);
        assert_eq!(tape.value(f.t_abn).data(), tape.value(tt[1]).row(7));
        assert_eq!(tape.value(f.t_norm).data(), tape.value(tt[1]).row(3));
    }

    #[test]
    fn stage_selection_restricts_pairs() {
        let cfg = ModelConfig {
            stages: Some(vec![0]),
            beta_init: 0.0,
            ..Default::default()
        };
        let (bb, m) = small_model(cfg);
        let vis = bb.encode_image(&Tensor::full(&[16, 16, 3], 0.6)).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let tt = m.text_features(&mut tape, &p, &bb).unwrap();
        assert_eq!(tt.len(), 1);
        let f = m.image_forward(&mut tape, &p, &tt, &vis).unwrap();
        assert_eq!(f.v_prime.len(), 1);
        assert!(tape.value(f.v_prime[0]).bit_eq(&vis[0]));
    }

    #[test]
    fn invalid_stage_selection() {
        let bad = ModelConfig {
            stages: Some(vec![5]),
            ..Default::default()
        };
        assert!(matches!(bad.validate(&small_spec()), Err(Error::Config(_))));
    }
}
