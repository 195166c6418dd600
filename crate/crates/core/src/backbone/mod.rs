//! Frozen multi-layer feature extraction.
//!
//! A seeded toy transformer pair stands in for a pre-trained vision-language
//! model. Visual taps are plain values (nothing upstream of an image is
//! learnable); text taps are recorded on a tape so gradients reach the
//! learnable context rows through the frozen weights.

mod bundle;
mod encoder;

pub use bundle::{load_feature_bundle, save_feature_bundle, FeatureBundle, LayerTokens, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use encoder::{Backbone, FixedText, TextBackbone, TextEncoding, ToyEncoder};

use crate::error::{Error, Result};

/// Geometry and seed of the frozen backbone. Tap layers are 1-based block
/// indices; the i-th visual tap pairs with the i-th text tap.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub d: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub selected_visual: Vec<usize>,
    pub selected_text: Vec<usize>,
    /// Image height and width in pixels.
    pub image_size: (usize, usize),
    pub patch_size: usize,
    /// Learned-position capacity of the text encoder.
    pub text_positions: usize,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            vision_layers: 8,
            text_layers: 4,
            selected_visual: vec![2, 4, 6, 8],
            selected_text: vec![1, 2, 3, 4],
            image_size: (32, 32),
            patch_size: 8,
            text_positions: 32,
            seed: 0,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.selected_visual.is_empty() {
            return fail("at least one tap layer is required".into());
        }
        if self.selected_visual.len() != self.selected_text.len() {
            return fail(format!(
                "visual taps {:?} and text taps {:?} differ in length",
                self.selected_visual, self.selected_text
            ));
        }
        for (name, taps, depth) in [
            ("visual", &self.selected_visual, self.vision_layers),
            ("text", &self.selected_text, self.text_layers),
        ] {
            if taps.iter().any(|&l| l == 0 || l > depth) {
                return fail(format!("{name} taps {taps:?} outside 1..={depth}"));
            }
            if taps.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("{name} taps {taps:?} must be strictly increasing"));
            }
        }
        let (h, w) = self.image_size;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return fail(format!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch_size
            ));
        }
        if self.text_positions == 0 {
            return fail("text_positions must be positive".into());
        }
        Ok(())
    }

    /// `(rows, cols)` of the patch grid.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    pub fn num_stages(&self) -> usize {
        self.selected_visual.len()
    }
}

/// Positional pairing of visual and text tap layers.
pub fn layer_map(spec: &BackboneSpec) -> Result<Vec<(usize, usize)>> {
    pair_taps(&spec.selected_visual, &spec.selected_text)
}

pub fn pair_taps(visual: &[usize], text: &[usize]) -> Result<Vec<(usize, usize)>> {
    if visual.len() != text.len() {
        return Err(Error::Config(format!(
            "cannot pair {} visual taps with {} text taps",
            visual.len(),
            text.len()
        )));
    }
    Ok(visual.iter().copied().zip(text.iter().copied()).collect())
}

/// Evenly spaced taps for asymmetric encoders: `stages` visual taps at
/// multiples of `vision_layers/stages`, each paired with
/// `round(ℓ · text_layers / vision_layers)`.
pub fn even_spacing_map(vision_layers: usize, text_layers: usize, stages: usize) -> Result<Vec<(usize, usize)>> {
    if stages == 0 || stages > vision_layers || vision_layers % stages != 0 {
        return Err(Error::Config(format!(
            "{stages} stages do not evenly divide {vision_layers} visual layers"
        )));
    }
    let step = vision_layers / stages;
    Ok((1..=stages)
        .map(|i| {
            let l = i * step;
            let m = ((l * text_layers) as f64 / vision_layers as f64).round() as usize;
            (l, m.max(1))
        })
        .collect())
}
