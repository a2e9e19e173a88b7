//! In-memory datasets and query/gallery splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, PyramidGeometry};

/// Query and gallery image indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub geometry: PyramidGeometry,
    pub labels: Vec<usize>,
    pub images: Vec<FeaturePyramid>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// The stored split, or an error naming what is missing.
    pub fn require_split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("dataset '{}' has no query/gallery split", self.name)))
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Stratified split: within every class a seeded shuffle sends
/// `round(fraction · count)` images (at least one, at most `count - 1`) to
/// the query side and the rest to the gallery. Both lists are sorted.
pub fn split(labels: &[usize], query_fraction: f64, seed: u64) -> Result<Split> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(Error::Invalid(format!("query fraction {query_fraction} outside (0, 1)")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (class, idx) in members.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Invalid(format!("class {class} has {} image(s); need at least 2", idx.len())));
        }
        idx.shuffle(&mut rng);
        let q = ((query_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        query.extend_from_slice(&idx[..q]);
        gallery.extend_from_slice(&idx[q..]);
    }
    query.sort_unstable();
    gallery.sort_unstable();
    Ok(Split { query, gallery })
}
