//! `.haafb` feature bundles.
//!
//! Layout, all integers `u32` little-endian and all values `f32` LE:
//!
//! ```text
//! "HAAF" | version | d | visual layer count
//!   per visual layer: layer id | P | P·d values
//! class count | text layer count
//!   per class, per text layer: layer id | rows | rows·d values
//! class count × d final-class values
//! ```
//!
//! Values are widened to `f64` on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numcore::Tensor;

pub const BUNDLE_MAGIC: [u8; 4] = *b"HAAF";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTokens {
    pub layer: u32,
    /// `[rows × d]`.
    pub tokens: Tensor,
}

/// Frozen features of one input: visual patch tokens per tap layer and text
/// hidden states per class and tap layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub d: usize,
    pub visual: Vec<LayerTokens>,
    /// Indexed `[class][layer]`.
    pub text: Vec<Vec<LayerTokens>>,
    /// One `[d]` vector per class.
    pub final_text_class: Vec<Tensor>,
}

impl FeatureBundle {
    pub fn from_layers(
        visual_ids: &[usize],
        visual: Vec<Tensor>,
        text_ids: &[usize],
        text: Vec<Vec<Tensor>>,
        final_text_class: Vec<Tensor>,
    ) -> Result<Self> {
        let d = visual.first().map(Tensor::cols).unwrap_or(0);
        let wrap = |ids: &[usize], ts: Vec<Tensor>| {
            ids.iter()
                .zip(ts)
                .map(|(&l, tokens)| LayerTokens { layer: l as u32, tokens })
                .collect::<Vec<_>>()
        };
        let b = Self {
            d,
            visual: wrap(visual_ids, visual),
            text: text.into_iter().map(|t| wrap(text_ids, t)).collect(),
            final_text_class,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn visual_tokens(&self) -> Vec<Tensor> {
        self.visual.iter().map(|l| l.tokens.clone()).collect()
    }

    /// Widths agree everywhere; every class carries the same text layers with
    /// the same row count.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.d == 0 {
            return bad("feature width d must be positive".into());
        }
        for l in &self.visual {
            if l.tokens.rank() != 2 || l.tokens.cols() != self.d {
                return bad(format!(
                    "visual layer {} has shape {:?}, expected width {}",
                    l.layer,
                    l.tokens.shape(),
                    self.d
                ));
            }
        }
        if self.final_text_class.len() != self.text.len() {
            return bad(format!(
                "{} final class vectors for {} classes",
                self.final_text_class.len(),
                self.text.len()
            ));
        }
        let reference = self.text.first();
        let mut rows = None;
        for (c, layers) in self.text.iter().enumerate() {
            let ref_ids: Vec<u32> = reference.into_iter().flatten().map(|l| l.layer).collect();
            let ids: Vec<u32> = layers.iter().map(|l| l.layer).collect();
            if ids != ref_ids {
                return bad(format!("class {c} text layers {ids:?} differ from {ref_ids:?}"));
            }
            for l in layers {
                if l.tokens.rank() != 2 || l.tokens.cols() != self.d {
                    return bad(format!(
                        "class {c} text layer {} has shape {:?}, expected width {}",
                        l.layer,
                        l.tokens.shape(),
                        self.d
                    ));
                }
                match rows {
                    None => rows = Some(l.tokens.rows()),
                    Some(r) if r != l.tokens.rows() => {
                        return bad(format!(
                            "class {c} text layer {} has {} rows, expected {r}",
                            l.layer,
                            l.tokens.rows()
                        ))
                    }
                    _ => {}
                }
            }
        }
        for (c, f) in self.final_text_class.iter().enumerate() {
            if f.numel() != self.d {
                return bad(format!("final class vector {c} has {} values, expected {}", f.numel(), self.d));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ByteWriter::default();
        w.bytes(&BUNDLE_MAGIC);
        w.u32(BUNDLE_VERSION);
        w.u32(self.d as u32);
        w.u32(self.visual.len() as u32);
        for l in &self.visual {
            w.u32(l.layer);
            w.u32(l.tokens.rows() as u32);
            w.f32s(l.tokens.data());
        }
        w.u32(self.text.len() as u32);
        w.u32(self.text.first().map_or(0, Vec::len) as u32);
        for layers in &self.text {
            for l in layers {
                w.u32(l.layer);
                w.u32(l.tokens.rows() as u32);
                w.f32s(l.tokens.data());
            }
        }
        for f in &self.final_text_class {
            w.f32s(f.data());
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(&BUNDLE_MAGIC)?;
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(r.error_at(r.offset() - 4, format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(r.error_at(r.offset() - 4, "zero feature width".into()));
        }
        let n_visual = r.u32()? as usize;
        let mut visual = Vec::with_capacity(n_visual.min(1024));
        for _ in 0..n_visual {
            visual.push(read_layer(&mut r, d)?);
        }
        let n_classes = r.u32()? as usize;
        let n_text = r.u32()? as usize;
        let mut text = Vec::with_capacity(n_classes.min(16));
        for _ in 0..n_classes {
            let mut layers = Vec::with_capacity(n_text.min(1024));
            for _ in 0..n_text {
                layers.push(read_layer(&mut r, d)?);
            }
            text.push(layers);
        }
        let mut final_text_class = Vec::with_capacity(n_classes.min(16));
        for _ in 0..n_classes {
            final_text_class.push(Tensor::vector(r.f32s(d)?)?);
        }
        r.finish()?;
        let b = Self {
            d,
            visual,
            text,
            final_text_class,
        };
        b.validate()?;
        Ok(b)
    }
}

fn read_layer(r: &mut ByteReader<'_>, d: usize) -> Result<LayerTokens> {
    let layer = r.u32()?;
    let rows_at = r.offset();
    let rows = r.u32()? as usize;
    if rows == 0 {
        return Err(r.error_at(rows_at, format!("layer {layer} has zero rows")));
    }
    let data = r.f32s(rows * d)?;
    Ok(LayerTokens {
        layer,
        tokens: Tensor::matrix(rows, d, data)?,
    })
}

pub fn save_feature_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, bundle.to_bytes()?)?;
    Ok(())
}

pub fn load_feature_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    FeatureBundle::from_bytes(&std::fs::read(path)?)
}
