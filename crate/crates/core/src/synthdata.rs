//! Seeded synthetic corpus of textured images with localized anomalies, and
//! few-shot episode sampling.
//!
//! A normal image is a per-channel product of sinusoids plus Gaussian noise.
//! An abnormal image additionally carries one disk in which the texture
//! frequency is multiplied and the intensity shifted.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::class::Class;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub freq_range: (f64, f64),
    pub noise_std: f64,
    pub radius_range: (f64, f64),
    pub contrast_shift: f64,
    /// Texture frequency multiplier inside the anomaly disk.
    pub anomaly_freq_factor: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            freq_range: (2.0, 4.0),
            noise_std: 0.05,
            radius_range: (4.0, 8.0),
            contrast_shift: 0.3,
            anomaly_freq_factor: 2.0,
            n_normal: 200,
            n_abnormal: 200,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return fail("image size must be positive".into());
        }
        let (r0, r1) = self.radius_range;
        let half = self.height.min(self.width) as f64 / 2.0;
        if !(r0 > 0.0 && r0 <= r1 && r1 < half) {
            return fail(format!("radius range {:?} must satisfy 0 < lo <= hi < {half}", self.radius_range));
        }
        let (f0, f1) = self.freq_range;
        if !(f0 >= 0.0 && f0 <= f1) {
            return fail(format!("frequency range {:?} is empty", self.freq_range));
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise std must be non-negative".into());
        }
        if self.n_normal == 0 || self.n_abnormal == 0 {
            return fail("each class needs at least one sample".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub center: (f64, f64),
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.center.0;
        let dx = col as f64 + 0.5 - self.center.1;
        dy * dy + dx * dx <= self.radius * self.radius
    }
}

/// Everything needed to render one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: Class,
    pub freq: (f64, f64),
    pub phases: [(f64, f64); 3],
    pub anomaly: Option<Disk>,
    noise_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n_normal + spec.n_abnormal);
    let labels = std::iter::repeat_n(Class::Normal, spec.n_normal)
        .chain(std::iter::repeat_n(Class::Abnormal, spec.n_abnormal));
    for (id, label) in labels.enumerate() {
        let (f0, f1) = spec.freq_range;
        let freq = (rng.random_range(f0..=f1), rng.random_range(f0..=f1));
        let mut phases = [(0.0, 0.0); 3];
        for p in &mut phases {
            *p = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        }
        let anomaly = match label {
            Class::Normal => None,
            Class::Abnormal => {
                let (r0, r1) = spec.radius_range;
                let radius = rng.random_range(r0..=r1);
                let cy = rng.random_range(radius..=spec.height as f64 - radius);
                let cx = rng.random_range(radius..=spec.width as f64 - radius);
                Some(Disk { center: (cy, cx), radius })
            }
        };
        samples.push(Sample {
            id,
            label,
            freq,
            phases,
            anomaly,
            noise_seed: rng.random(),
        });
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids_of(&self, class: Class) -> Vec<usize> {
        self.samples.iter().filter(|s| s.label == class).map(|s| s.id).collect()
    }

    /// `H×W×3` pixels in `[0, 1]`.
    pub fn render(&self, sample: &Sample) -> Tensor {
        render(&self.spec, sample, true)
    }

    /// The sample's texture without its anomaly disk.
    pub fn render_without_anomaly(&self, sample: &Sample) -> Tensor {
        render(&self.spec, sample, false)
    }
}

fn render(spec: &DatasetSpec, s: &Sample, with_anomaly: bool) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(s.noise_seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise std");
    let field = |x: usize, y: usize, ch: usize, k: f64| {
        let (p1, p2) = s.phases[ch];
        0.5 + 0.25
            * (2.0 * PI * k * s.freq.0 * x as f64 / h as f64 + p1).sin()
            * (2.0 * PI * k * s.freq.1 * y as f64 / w as f64 + p2).sin()
    };
    let disk = s.anomaly.filter(|_| with_anomaly);
    let mut data = Vec::with_capacity(h * w * 3);
    for x in 0..h {
        for y in 0..w {
            let inside = disk.is_some_and(|d| d.contains(x, y));
            for ch in 0..3 {
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let v = if inside {
                    field(x, y, ch, spec.anomaly_freq_factor) + spec.contrast_shift
                } else {
                    field(x, y, ch, 1.0)
                };
                data.push((v + n).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("consistent image shape")
}

/// A few-shot task: `K` labeled support samples per class and a disjoint
/// labeled query set. Ids refer to [`Dataset::samples`].
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub k: usize,
    pub seed: u64,
    pub support: Vec<(usize, Class)>,
    pub query: Vec<(usize, Class)>,
}

impl Episode {
    /// Positions within `support` carrying `class`.
    pub fn support_indices(&self, class: Class) -> Vec<usize> {
        self.support
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| *c == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn support_labels(&self) -> Vec<Class> {
        self.support.iter().map(|&(_, c)| c).collect()
    }

    pub fn query_labels(&self) -> Vec<Class> {
        self.query.iter().map(|&(_, c)| c).collect()
    }
}

/// Uniform without-replacement draw of `k` support and `queries_per_class`
/// query samples for each class.
pub fn sample_episode(dataset: &Dataset, k: usize, queries_per_class: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Domain("shots per class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(2 * k);
    let mut query = Vec::with_capacity(2 * queries_per_class);
    for class in Class::ALL {
        let mut ids = dataset.ids_of(class);
        if ids.len() < k + queries_per_class {
            return Err(Error::Capacity(format!(
                "{} {class} samples available, {k} support + {queries_per_class} query requested",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        support.extend(ids[..k].iter().map(|&i| (i, class)));
        query.extend(ids[k..k + queries_per_class].iter().map(|&i| (i, class)));
    }
    Ok(Episode { k, seed, support, query })
}

/// Regenerable description of a corpus: spec fields and per-sample labels.
pub fn manifest(dataset: &Dataset) -> String {
    let s = &dataset.spec;
    let mut out = String::new();
    let _ = writeln!(out, "# synthetic anomaly corpus manifest");
    let _ = writeln!(out, "seed={}", s.seed);
    let _ = writeln!(out, "height={}", s.height);
    let _ = writeln!(out, "width={}", s.width);
    let _ = writeln!(out, "freq_min={}", s.freq_range.0);
    let _ = writeln!(out, "freq_max={}", s.freq_range.1);
    let _ = writeln!(out, "noise_std={}", s.noise_std);
    let _ = writeln!(out, "radius_min={}", s.radius_range.0);
    let _ = writeln!(out, "radius_max={}", s.radius_range.1);
    let _ = writeln!(out, "contrast_shift={}", s.contrast_shift);
    let _ = writeln!(out, "anomaly_freq_factor={}", s.anomaly_freq_factor);
    let _ = writeln!(out, "n_normal={}", s.n_normal);
    let _ = writeln!(out, "n_abnormal={}", s.n_abnormal);
    let _ = writeln!(out, "samples={}", dataset.len());
    for sample in &dataset.samples {
        let _ = writeln!(out, "sample={:05},{}", sample.id, sample.label);
    }
    out
}

/// Rebuilds the spec recorded in a manifest.
pub fn parse_manifest(text: &str) -> Result<DatasetSpec> {
    let mut spec = DatasetSpec::default();
    let mut seen = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("manifest line {}: expected key=value", lineno + 1)))?;
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|e| Error::Config(format!("manifest line {}: {key}: {e}", lineno + 1)))
        };
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|e| Error::Config(format!("manifest line {}: {key}: {e}", lineno + 1)))
        };
        match key {
            "seed" => spec.seed = int(value)?,
            "height" => spec.height = int(value)? as usize,
            "width" => spec.width = int(value)? as usize,
            "freq_min" => spec.freq_range.0 = num(value)?,
            "freq_max" => spec.freq_range.1 = num(value)?,
            "noise_std" => spec.noise_std = num(value)?,
            "radius_min" => spec.radius_range.0 = num(value)?,
            "radius_max" => spec.radius_range.1 = num(value)?,
            "contrast_shift" => spec.contrast_shift = num(value)?,
            "anomaly_freq_factor" => spec.anomaly_freq_factor = num(value)?,
            "n_normal" => spec.n_normal = int(value)? as usize,
            "n_abnormal" => spec.n_abnormal = int(value)? as usize,
            "samples" => seen = int(value)? as usize,
            "sample" => {}
            other => return Err(Error::Config(format!("manifest: unknown key `{other}`"))),
        }
    }
    spec.validate()?;
    if seen != spec.n_normal + spec.n_abnormal {
        return Err(Error::Validation(format!(
            "manifest lists {seen} samples but spec implies {}",
            spec.n_normal + spec.n_abnormal
        )));
    }
    Ok(spec)
}
