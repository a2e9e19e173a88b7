//! Synthetic fine-grained datasets with planted attributes.
//!
//! Every attribute owns a template: a unit channel direction per level and a
//! Gaussian spatial blob around a home location. A class is a binary
//! signature over attributes; an image of the class sums the templates of its
//! active attributes, each shifted by a small random jitter, and adds
//! Gaussian noise. Values are rounded to `f32` so that a written dataset
//! reads back identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pyramid::{FeaturePyramid, LevelShape, PyramidGeometry};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub name: String,
    pub classes: usize,
    pub attributes: usize,
    pub images_per_class: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    /// Maximum template shift, in coarsest-level cells, per axis.
    pub jitter: f64,
    /// Blob standard deviation, in coarsest-level cells.
    pub blob_width: f64,
    pub geometry: PyramidGeometry,
    /// Explicit class signatures; random distinct ones when `None`.
    pub signatures: Option<Vec<Vec<bool>>>,
    /// Fraction of each class sent to the query side, if a split is wanted.
    pub query_fraction: Option<f64>,
    pub seed: u64,
}

/// Two levels, 8×8×32 and 16×16×16.
pub fn default_geometry() -> PyramidGeometry {
    PyramidGeometry::new(vec![
        LevelShape { channels: 32, width: 8, height: 8 },
        LevelShape { channels: 16, width: 16, height: 16 },
    ])
    .expect("valid default geometry")
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "synthetic".into(),
            classes: 50,
            attributes: 24,
            images_per_class: 20,
            noise: 0.1,
            jitter: 0.25,
            blob_width: 0.75,
            geometry: default_geometry(),
            signatures: None,
            query_fraction: Some(0.5),
            seed: 0,
        }
    }
}

struct Template {
    home: (f64, f64),
    directions: Vec<Vec<f64>>,
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn random_signatures(classes: usize, attributes: usize, rng: &mut impl Rng) -> Result<Vec<Vec<bool>>> {
    if attributes < 64 && classes as u128 > (1u128 << attributes) - 1 {
        return Err(Error::Config(format!(
            "{classes} classes cannot have distinct non-empty signatures over {attributes} attributes"
        )));
    }
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let s: Vec<bool> = (0..attributes).map(|_| rng.gen::<bool>()).collect();
        if s.iter().any(|&b| b) && !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.classes == 0 || self.attributes == 0 || self.images_per_class == 0 {
            return Err(Error::Config("classes, attributes and images_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0 && self.blob_width > 0.0) {
            return Err(Error::Config("noise and jitter must be nonnegative, blob_width positive".into()));
        }
        if let Some(sigs) = &self.signatures {
            if sigs.len() != self.classes || sigs.iter().any(|s| s.len() != self.attributes) {
                return Err(Error::Config("signature table does not match classes × attributes".into()));
            }
            for (i, a) in sigs.iter().enumerate() {
                if let Some(j) = sigs[..i].iter().position(|b| b == a) {
                    return Err(Error::Config(format!("classes {j} and {i} share a signature")));
                }
            }
        }
        Ok(())
    }
}

/// Class signatures actually used by `generate(spec)`.
pub fn signatures(spec: &SynthSpec) -> Result<Vec<Vec<bool>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let _ = templates(spec, &mut rng);
    match &spec.signatures {
        Some(s) => Ok(s.clone()),
        None => random_signatures(spec.classes, spec.attributes, &mut rng),
    }
}

fn templates(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<Template> {
    let base = &spec.geometry.levels[0];
    (0..spec.attributes)
        .map(|_| Template {
            home: (
                rng.gen_range(0.0..base.width as f64),
                rng.gen_range(0.0..base.height as f64),
            ),
            directions: spec.geometry.levels.iter().map(|l| unit_vector(l.channels, rng)).collect(),
        })
        .collect()
}

fn render(
    spec: &SynthSpec,
    templates: &[Template],
    signature: &[bool],
    image_id: usize,
    rng: &mut impl Rng,
) -> FeaturePyramid {
    let mut levels: Vec<Tensor> = spec
        .geometry
        .levels
        .iter()
        .map(|l| Tensor::zeros(l.positions(), l.channels))
        .collect();
    let inv = 1.0 / (2.0 * spec.blob_width * spec.blob_width);
    for (t, _) in templates.iter().zip(signature).filter(|(_, &on)| on) {
        let (dx, dy) = if spec.jitter > 0.0 {
            (rng.gen_range(-spec.jitter..=spec.jitter), rng.gen_range(-spec.jitter..=spec.jitter))
        } else {
            (0.0, 0.0)
        };
        let (cx, cy) = (t.home.0 + dx, t.home.1 + dy);
        for (j, (shape, level)) in spec.geometry.levels.iter().zip(&mut levels).enumerate() {
            let cell = 1.0 / (1u64 << j) as f64;
            for row in 0..shape.height {
                for col in 0..shape.width {
                    let x = (col as f64 + 0.5) * cell;
                    let y = (row as f64 + 0.5) * cell;
                    let w = (-((x - cx).powi(2) + (y - cy).powi(2)) * inv).exp();
                    for (v, d) in level.row_mut(row * shape.width + col).iter_mut().zip(&t.directions[j]) {
                        *v += w * d;
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise");
        for level in &mut levels {
            for v in level.data_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    for level in &mut levels {
        for v in level.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
    FeaturePyramid { image_id, levels }
}

/// Generates the dataset described by `spec`; images are ordered class by
/// class.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = templates(spec, &mut rng);
    let sigs = match &spec.signatures {
        Some(s) => s.clone(),
        None => random_signatures(spec.classes, spec.attributes, &mut rng)?,
    };
    let total = spec.classes * spec.images_per_class;
    let labels: Vec<usize> = (0..total).map(|i| i / spec.images_per_class).collect();
    let images = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0000_0000);
            r.set_stream(i as u64 + 1);
            render(spec, &templates, &sigs[labels[i]], i, &mut r)
        })
        .collect();
    let split = match spec.query_fraction {
        Some(f) => Some(dataset::split(&labels, f, spec.seed.wrapping_add(1))?),
        None => None,
    };
    Ok(Dataset {
        name: spec.name.clone(),
        geometry: spec.geometry.clone(),
        labels,
        images,
        split,
    })
}

/// Noise-free, unjittered image of each class.
pub fn prototypes(spec: &SynthSpec) -> Result<Vec<FeaturePyramid>> {
    let clean = SynthSpec {
        noise: 0.0,
        jitter: 0.0,
        images_per_class: 1,
        query_fraction: None,
        ..spec.clone()
    };
    Ok(generate(&clean)?.images)
}

/// Squared Euclidean distance between two pyramids of equal geometry.
pub fn distance_sq(a: &FeaturePyramid, b: &FeaturePyramid) -> f64 {
    a.levels
        .iter()
        .zip(&b.levels)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum()
}
