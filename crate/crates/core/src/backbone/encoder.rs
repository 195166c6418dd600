use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{BackboneSpec, FeatureBundle};
use crate::attention::{multi_head_attention, Projections};
use crate::class::Class;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Standard deviation of every frozen weight.
pub const FROZEN_INIT_STD: f64 = 0.02;
/// Pixel normalization applied before patch projection.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;
const FF_MULT: usize = 4;

#[derive(Clone, Debug)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w_in: Tensor,
    w_out: Tensor,
}

impl Block {
    fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |r: usize, c: usize| Tensor::randn(&[r, c], FROZEN_INIT_STD, rng);
        Self {
            wq: w(d, d),
            wk: w(d, d),
            wv: w(d, d),
            wo: w(d, d),
            w_in: w(d, FF_MULT * d),
            w_out: w(FF_MULT * d, d),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_in, &self.w_out]
    }

    /// Pre-norm residual block: `x + attn(ln x)`, then `x + ff(ln x)`.
    fn forward(&self, tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
        let proj = Projections {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            wo: tape.constant(self.wo.clone()),
        };
        let h = tape.layer_norm_rows(x);
        let a = multi_head_attention(tape, h, h, &proj, heads, None)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm_rows(x);
        let w_in = tape.constant(self.w_in.clone());
        let w_out = tape.constant(self.w_out.clone());
        let f = tape.matmul(h, w_in)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w_out)?;
        tape.add(x, f)
    }
}

/// Frozen transformer stack with a patch projection (visual) or a
/// learned-position table only (text).
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    embed: Option<Tensor>,
    positions: Tensor,
    blocks: Vec<Block>,
    heads: usize,
}

impl ToyEncoder {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Every frozen weight in a fixed order.
    pub fn weights(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.embed.iter().collect();
        out.push(&self.positions);
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.weights() {
            w.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn first_block_checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.blocks[0].tensors() {
            w.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Runs the stack on already-embedded rows, returning the residual stream
    /// after each 1-based block listed in `taps` and after the last block.
    fn run(&self, tape: &mut Tape, x: Var, taps: &[usize]) -> Result<(Vec<Var>, Var)> {
        let mut x = x;
        let mut out = Vec::with_capacity(taps.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x, self.heads)?;
            if taps.contains(&(i + 1)) {
                out.push(x);
            }
        }
        Ok((out, x))
    }
}

/// Text hidden states at the tap layers plus the class-position row of the
/// final layer.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub taps: Vec<Var>,
    pub final_class: Var,
}

/// Source of text hidden states for an assembled prompt.
pub trait TextBackbone {
    fn encode_prompt(&self, tape: &mut Tape, prompt: Var, class: Class) -> Result<TextEncoding>;
}

/// The frozen visual and text encoders plus the class token embeddings.
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    pub visual: ToyEncoder,
    pub text: ToyEncoder,
    class_embeddings: [Tensor; 2],
}

impl Backbone {
    /// Deterministic construction: identical specs give bit-identical weights.
    pub fn build(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let patch_dim = spec.patch_size * spec.patch_size * 3;
        let visual = ToyEncoder {
            embed: Some(Tensor::randn(&[patch_dim, d], FROZEN_INIT_STD, &mut rng)),
            positions: Tensor::randn(&[spec.num_patches(), d], FROZEN_INIT_STD, &mut rng),
            blocks: (0..spec.vision_layers).map(|_| Block::random(d, &mut rng)).collect(),
            heads: spec.heads,
        };
        let text = ToyEncoder {
            embed: None,
            positions: Tensor::randn(&[spec.text_positions, d], FROZEN_INIT_STD, &mut rng),
            blocks: (0..spec.text_layers).map(|_| Block::random(d, &mut rng)).collect(),
            heads: spec.heads,
        };
        let class_embeddings = orthonormal_pair(d, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            visual,
            text,
            class_embeddings,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Fixed token embedding `e_c` of a class name; unit norm, and the two
    /// classes are orthogonal.
    pub fn class_embedding(&self, class: Class) -> &Tensor {
        &self.class_embeddings[class.index()]
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.visual.checksum().as_bytes());
        h.update(self.text.checksum().as_bytes());
        for e in &self.class_embeddings {
            e.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Splits an `H×W×3` image into normalized flattened patches `[P × p²·3]`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = self.spec.image_size;
        let p = self.spec.patch_size;
        if image.shape() != [h, w, 3] {
            return Err(Error::shape("encode_image", image.shape(), &[h, w, 3]));
        }
        let (gr, gc) = self.spec.patch_grid();
        let px = image.data();
        let mut out = Vec::with_capacity(h * w * 3);
        for r in 0..gr {
            for c in 0..gc {
                for y in 0..p {
                    for x in 0..p {
                        let base = ((r * p + y) * w + (c * p + x)) * 3;
                        for ch in 0..3 {
                            out.push((px[base + ch] - PIXEL_MEAN) / PIXEL_STD);
                        }
                    }
                }
            }
        }
        Tensor::matrix(gr * gc, p * p * 3, out)
    }

    /// Patch tokens `[P × d]` at each selected visual layer.
    pub fn encode_image(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let patches = self.patchify(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(patches);
        let embed = tape.constant(self.visual.embed.clone().expect("visual encoder has a patch projection"));
        let pos = tape.constant(self.visual.positions.clone());
        let x = tape.matmul(x, embed)?;
        let x = tape.add(x, pos)?;
        let (taps, _) = self.visual.run(&mut tape, x, &self.spec.selected_visual)?;
        Ok(taps.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Visual taps plus the text encoding of the default prompts, packaged
    /// for the feature file format.
    pub fn feature_bundle(&self, image: &Tensor, prompts: &[Tensor; 2]) -> Result<FeatureBundle> {
        let visual = self.encode_image(image)?;
        let mut text = Vec::with_capacity(2);
        let mut finals = Vec::with_capacity(2);
        for class in Class::ALL {
            let mut tape = Tape::new();
            let p = tape.constant(prompts[class.index()].clone());
            let enc = self.encode_prompt(&mut tape, p, class)?;
            text.push(enc.taps.iter().map(|&v| tape.value(v).clone()).collect());
            finals.push(tape.value(enc.final_class).clone());
        }
        FeatureBundle::from_layers(
            &self.spec.selected_visual,
            visual,
            &self.spec.selected_text,
            text,
            finals,
        )
    }
}

impl TextBackbone for Backbone {
    /// Encodes `[v₁…v_L, e_c]`; frozen weights transmit gradient to the rows.
    fn encode_prompt(&self, tape: &mut Tape, prompt: Var, _class: Class) -> Result<TextEncoding> {
        let shape = tape.shape(prompt).to_vec();
        let rows = match shape.as_slice() {
            [r, c] if *c == self.spec.d => *r,
            _ => return Err(Error::shape("encode_prompt", &shape, &[0, self.spec.d])),
        };
        if rows > self.spec.text_positions {
            return Err(Error::shape(
                "encode_prompt",
                &shape,
                &[self.spec.text_positions, self.spec.d],
            ));
        }
        let pos = tape.constant(Tensor::matrix(
            rows,
            self.spec.d,
            self.text.positions.data()[..rows * self.spec.d].to_vec(),
        )?);
        let x = tape.add(prompt, pos)?;
        let (taps, last) = self.text.run(tape, x, &self.spec.selected_text)?;
        let final_class = tape.row(last, rows - 1)?;
        Ok(TextEncoding { taps, final_class })
    }
}

/// Text source backed by precomputed features: the prompt is ignored and the
/// stored hidden states are returned as constants.
#[derive(Clone, Debug)]
pub struct FixedText {
    taps: [Vec<Tensor>; 2],
    finals: [Tensor; 2],
}

impl FixedText {
    pub fn from_bundle(bundle: &FeatureBundle) -> Result<Self> {
        if bundle.text.len() != 2 || bundle.final_text_class.len() != 2 {
            return Err(Error::Validation(format!(
                "expected text features for 2 classes, found {}",
                bundle.text.len()
            )));
        }
        let taps = |c: usize| bundle.text[c].iter().map(|l| l.tokens.clone()).collect();
        Ok(Self {
            taps: [taps(0), taps(1)],
            finals: [bundle.final_text_class[0].clone(), bundle.final_text_class[1].clone()],
        })
    }
}

impl TextBackbone for FixedText {
    fn encode_prompt(&self, tape: &mut Tape, _prompt: Var, class: Class) -> Result<TextEncoding> {
        let i = class.index();
        let taps = self.taps[i].iter().map(|t| tape.constant(t.clone())).collect();
        let final_class = tape.constant(self.finals[i].clone());
        Ok(TextEncoding { taps, final_class })
    }
}

fn orthonormal_pair(d: usize, rng: &mut ChaCha8Rng) -> Result<[Tensor; 2]> {
    if d < 2 {
        return Err(Error::Config("class embeddings need d >= 2".into()));
    }
    let a = Tensor::randn(&[d], 1.0, rng);
    let b = Tensor::randn(&[d], 1.0, rng);
    let na = crate::numcore::ops::norm(a.data());
    let a = a.map(|x| x / na);
    let proj = crate::numcore::ops::dot(a.data(), b.data());
    let b: Vec<f64> = b.data().iter().zip(a.data()).map(|(y, x)| y - proj * x).collect();
    let nb = crate::numcore::ops::norm(&b);
    let b = Tensor::vector(b.iter().map(|y| y / nb).collect())?;
    Ok([a, b])
}
