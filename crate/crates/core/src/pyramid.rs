//! Multi-scale feature extractor.
//!
//! Backbone stage outputs arrive as a [`FeaturePyramid`] ordered top to
//! bottom (coarsest first). Level `j > 1` is fused with the upsampled fused
//! level above it, every level is reduced to `d` channels with a 1×1
//! convolution, the maps are flattened and stacked into a token matrix, and
//! one residual self-attention + feed-forward layer refines the tokens.
//!
//! A map of shape `(c, w, h)` has `h` rows and `w` columns. Inside the engine
//! it is stored as an `(h·w) × c` matrix whose row `r·w + col` holds the
//! channel vector at `(r, col)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl LevelShape {
    pub fn positions(&self) -> usize {
        self.width * self.height
    }

    pub fn values(&self) -> usize {
        self.channels * self.positions()
    }
}

/// Level shapes of a pyramid, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidGeometry {
    pub levels: Vec<LevelShape>,
}

impl PyramidGeometry {
    pub fn new(levels: Vec<LevelShape>) -> Result<Self> {
        let g = PyramidGeometry { levels };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        for (j, l) in self.levels.iter().enumerate() {
            if l.channels == 0 || l.width == 0 || l.height == 0 {
                return Err(Error::Config(format!("level {} has a zero dimension", j + 1)));
            }
            if j > 0 {
                let up = self.levels[j - 1];
                if l.width != 2 * up.width || l.height != 2 * up.height {
                    return Err(Error::Config(format!(
                        "level {} is {}x{} but must be twice level {} ({}x{})",
                        j + 1,
                        l.width,
                        l.height,
                        j,
                        up.width,
                        up.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// Token count `E = Σ w_j·h_j`.
    pub fn tokens(&self) -> usize {
        self.levels.iter().map(LevelShape::positions).sum()
    }

    /// Scalar values per image across all levels.
    pub fn values_per_image(&self) -> usize {
        self.levels.iter().map(LevelShape::values).sum()
    }

    /// `(level, row, col)` of every token, in token order.
    pub fn token_coordinates(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.tokens());
        for (j, l) in self.levels.iter().enumerate() {
            for r in 0..l.height {
                for c in 0..l.width {
                    out.push((j, r, c));
                }
            }
        }
        out
    }
}

/// Stage outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub image_id: usize,
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Builds a pyramid from channel-major `(c, h, w)` level buffers.
    pub fn from_channel_major(image_id: usize, geometry: &PyramidGeometry, buffers: &[Vec<f64>]) -> Result<Self> {
        if buffers.len() != geometry.levels.len() {
            return Err(Error::Invalid(format!(
                "expected {} levels, got {}",
                geometry.levels.len(),
                buffers.len()
            )));
        }
        let mut levels = Vec::with_capacity(buffers.len());
        for (shape, buf) in geometry.levels.iter().zip(buffers) {
            if buf.len() != shape.values() {
                return Err(Error::shape("pyramid level", &[shape.values()], &[buf.len()]));
            }
            let p = shape.positions();
            let mut data = vec![0.0; buf.len()];
            for ch in 0..shape.channels {
                for pos in 0..p {
                    data[pos * shape.channels + ch] = buf[ch * p + pos];
                }
            }
            levels.push(Tensor::matrix(p, shape.channels, data)?);
        }
        Ok(FeaturePyramid { image_id, levels })
    }

    /// Inverse of [`FeaturePyramid::from_channel_major`].
    pub fn to_channel_major(&self) -> Vec<Vec<f64>> {
        self.levels
            .iter()
            .map(|t| {
                let (p, c) = (t.rows(), t.cols());
                let mut buf = vec![0.0; p * c];
                for pos in 0..p {
                    for ch in 0..c {
                        buf[ch * p + pos] = t.at(pos, ch);
                    }
                }
                buf
            })
            .collect()
    }

    pub fn check(&self, geometry: &PyramidGeometry) -> Result<()> {
        if self.levels.len() != geometry.levels.len() {
            return Err(Error::Invalid(format!(
                "image {}: {} levels, geometry has {}",
                self.image_id,
                self.levels.len(),
                geometry.levels.len()
            )));
        }
        for (t, s) in self.levels.iter().zip(&geometry.levels) {
            if t.shape() != [s.positions(), s.channels] {
                return Err(Error::shape("pyramid level", t.shape(), &[s.positions(), s.channels]));
            }
        }
        Ok(())
    }
}

/// Row indices realizing nearest-neighbour 2× upsampling of an `h×w` grid.
pub fn upsample_indices(width: usize, height: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(4 * width * height);
    for r in 0..2 * height {
        for c in 0..2 * width {
            idx.push((r / 2) * width + c / 2);
        }
    }
    idx
}

/// Trainable extractor weights. Level-indexed vectors for the fusion convs
/// have `L - 1` entries, one per level `j ≥ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    /// 1×1 conv on `X^j`, `c_j × c_j`.
    pub lateral: Vec<Tensor>,
    /// 1×1 conv taking the upsampled fused level `j-1` to `c_j` channels.
    pub adapters: Vec<Tensor>,
    /// Per-level 1×1 conv down to `d` channels, `c_j × d`.
    pub reducers: Vec<Tensor>,
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    pub attn_v: Tensor,
    pub attn_o: Tensor,
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
}

/// Graph handles for [`ExtractorParams`].
#[derive(Clone, Debug)]
pub struct ExtractorNodes {
    pub lateral: Vec<NodeId>,
    pub adapters: Vec<NodeId>,
    pub reducers: Vec<NodeId>,
    pub attn_q: NodeId,
    pub attn_k: NodeId,
    pub attn_v: NodeId,
    pub attn_o: NodeId,
    pub ffn_in: NodeId,
    pub ffn_in_bias: NodeId,
    pub ffn_out: NodeId,
    pub ffn_out_bias: NodeId,
}

impl ExtractorParams {
    pub fn init(geometry: &PyramidGeometry, d: usize, ffn_hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ls = &geometry.levels;
        let lateral = ls[1..].iter().map(|l| init::xavier(l.channels, l.channels, &mut rng)).collect();
        let adapters = ls
            .windows(2)
            .map(|w| init::xavier(w[0].channels, w[1].channels, &mut rng))
            .collect();
        let reducers = ls.iter().map(|l| init::xavier(l.channels, d, &mut rng)).collect();
        ExtractorParams {
            lateral,
            adapters,
            reducers,
            attn_q: init::xavier(d, d, &mut rng),
            attn_k: init::xavier(d, d, &mut rng),
            attn_v: init::xavier(d, d, &mut rng),
            attn_o: init::xavier(d, d, &mut rng).scale(0.5),
            ffn_in: init::xavier(d, ffn_hidden, &mut rng),
            ffn_in_bias: Tensor::zeros(1, ffn_hidden),
            ffn_out: init::xavier(ffn_hidden, d, &mut rng).scale(0.5),
            ffn_out_bias: Tensor::zeros(1, d),
        }
    }

    /// Parameters in checkpoint order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.lateral.iter().enumerate() {
            out.push((format!("extractor.lateral.{}", i + 2), t));
        }
        for (i, t) in self.adapters.iter().enumerate() {
            out.push((format!("extractor.adapter.{}", i + 2), t));
        }
        for (i, t) in self.reducers.iter().enumerate() {
            out.push((format!("extractor.reducer.{}", i + 1), t));
        }
        out.push(("extractor.attn_q".into(), &self.attn_q));
        out.push(("extractor.attn_k".into(), &self.attn_k));
        out.push(("extractor.attn_v".into(), &self.attn_v));
        out.push(("extractor.attn_o".into(), &self.attn_o));
        out.push(("extractor.ffn_in".into(), &self.ffn_in));
        out.push(("extractor.ffn_in_bias".into(), &self.ffn_in_bias));
        out.push(("extractor.ffn_out".into(), &self.ffn_out));
        out.push(("extractor.ffn_out_bias".into(), &self.ffn_out_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.lateral.iter_mut());
        out.extend(self.adapters.iter_mut());
        out.extend(self.reducers.iter_mut());
        out.extend([
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_o,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
        ]);
        out
    }

    pub fn count(levels: usize) -> usize {
        3 * levels - 2 + 8
    }

    /// Rebuilds parameters from tensors in [`ExtractorParams::named`] order.
    pub fn from_tensors(levels: usize, tensors: &mut impl Iterator<Item = Tensor>) -> Result<Self> {
        let mut next = || tensors.next().ok_or(Error::Invalid("missing extractor parameter".into()));
        let lateral = (1..levels).map(|_| next()).collect::<Result<_>>()?;
        let adapters = (1..levels).map(|_| next()).collect::<Result<_>>()?;
        let reducers = (0..levels).map(|_| next()).collect::<Result<_>>()?;
        Ok(ExtractorParams {
            lateral,
            adapters,
            reducers,
            attn_q: next()?,
            attn_k: next()?,
            attn_v: next()?,
            attn_o: next()?,
            ffn_in: next()?,
            ffn_in_bias: next()?,
            ffn_out: next()?,
            ffn_out_bias: next()?,
        })
    }

    pub fn check(&self, geometry: &PyramidGeometry, d: usize, ffn_hidden: usize) -> Result<()> {
        let ls = &geometry.levels;
        let want = |t: &Tensor, r: usize, c: usize, what: &str| -> Result<()> {
            if t.shape() != [r, c] {
                return Err(Error::Config(format!("{what} has shape {:?}, expected [{r}, {c}]", t.shape())));
            }
            Ok(())
        };
        if self.lateral.len() + 1 != ls.len() || self.adapters.len() + 1 != ls.len() || self.reducers.len() != ls.len() {
            return Err(Error::Config("extractor level count does not match geometry".into()));
        }
        for j in 1..ls.len() {
            want(&self.lateral[j - 1], ls[j].channels, ls[j].channels, "lateral conv")?;
            want(&self.adapters[j - 1], ls[j - 1].channels, ls[j].channels, "fusion adapter")?;
        }
        for (t, l) in self.reducers.iter().zip(ls) {
            want(t, l.channels, d, "reducer")?;
        }
        for t in [&self.attn_q, &self.attn_k, &self.attn_v, &self.attn_o] {
            want(t, d, d, "attention projection")?;
        }
        want(&self.ffn_in, d, ffn_hidden, "ffn_in")?;
        want(&self.ffn_in_bias, 1, ffn_hidden, "ffn_in_bias")?;
        want(&self.ffn_out, ffn_hidden, d, "ffn_out")?;
        want(&self.ffn_out_bias, 1, d, "ffn_out_bias")
    }
}

impl ExtractorNodes {
    pub fn from_ids(levels: usize, ids: &mut impl Iterator<Item = NodeId>) -> Self {
        let mut next = || ids.next().expect("extractor node id");
        ExtractorNodes {
            lateral: (1..levels).map(|_| next()).collect(),
            adapters: (1..levels).map(|_| next()).collect(),
            reducers: (0..levels).map(|_| next()).collect(),
            attn_q: next(),
            attn_k: next(),
            attn_v: next(),
            attn_o: next(),
            ffn_in: next(),
            ffn_in_bias: next(),
            ffn_out: next(),
            ffn_out_bias: next(),
        }
    }
}

/// Top-down fusion. Level 1 passes through; level `j` becomes
/// `lateral_j(X^j) + adapter_j(up(X̂^{j-1}))`.
pub fn fuse_topdown(
    g: &mut Graph,
    levels: &[NodeId],
    geometry: &PyramidGeometry,
    p: &ExtractorNodes,
) -> Result<Vec<NodeId>> {
    let mut fused = Vec::with_capacity(levels.len());
    fused.push(levels[0]);
    for j in 1..levels.len() {
        let above = geometry.levels[j - 1];
        let up = g.gather_rows(fused[j - 1], upsample_indices(above.width, above.height))?;
        if g.value(up).rows() != g.value(levels[j]).rows() {
            return Err(Error::shape("fuse_topdown", g.value(up).shape(), g.value(levels[j]).shape()));
        }
        let up = g.matmul(up, p.adapters[j - 1])?;
        let lat = g.matmul(levels[j], p.lateral[j - 1])?;
        fused.push(g.add(lat, up)?);
    }
    Ok(fused)
}

/// Reduces every fused level to `d` channels and stacks the flattened maps
/// into an `E×d` token matrix, coarsest level first.
pub fn tokenize(g: &mut Graph, fused: &[NodeId], p: &ExtractorNodes) -> Result<NodeId> {
    let reduced = fused
        .iter()
        .zip(&p.reducers)
        .map(|(&f, &r)| g.matmul(f, r))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&reduced, 0)
}

/// One residual multi-head self-attention layer followed by one residual
/// GELU feed-forward layer.
pub fn self_attend(g: &mut Graph, x: NodeId, heads: usize, p: &ExtractorNodes) -> Result<NodeId> {
    let d = g.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let q = g.matmul(x, p.attn_q)?;
    let k = g.matmul(x, p.attn_k)?;
    let v = g.matmul(x, p.attn_v)?;
    let attended = multi_head_attention(g, q, k, v, heads)?.output;
    let proj = g.matmul(attended, p.attn_o)?;
    let x1 = g.add(x, proj)?;

    let hidden = g.matmul(x1, p.ffn_in)?;
    let hidden = g.add_row(hidden, p.ffn_in_bias)?;
    let hidden = g.gelu(hidden);
    let out = g.matmul(hidden, p.ffn_out)?;
    let out = g.add_row(out, p.ffn_out_bias)?;
    g.add(x1, out)
}

pub(crate) struct Attention {
    /// Concatenated head outputs, before any output projection.
    pub output: NodeId,
    /// Per-head attention weights (queries × keys).
    pub weights: Vec<NodeId>,
}

/// Scaled dot-product attention split over `heads` column blocks.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> Result<Attention> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for m in 0..heads {
        let (qm, km, vm) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice(q, 1, m * dh, dh)?, g.slice(k, 1, m * dh, dh)?, g.slice(v, 1, m * dh, dh)?)
        };
        let kt = g.transpose(km)?;
        let logits = g.matmul(qm, kt)?;
        let logits = g.scale(logits, scale);
        let w = g.softmax_rows(logits)?;
        outs.push(g.matmul(w, vm)?);
        weights.push(w);
    }
    let output = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok(Attention { output, weights })
}

/// Fixed sinusoidal encodings over the flat token index:
/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)`.
pub fn positional_table(tokens: usize, d: usize) -> Result<Tensor> {
    if tokens == 0 || d == 0 {
        return Err(Error::Config("positional table needs positive size".into()));
    }
    let mut data = vec![0.0; tokens * d];
    for p in 0..tokens {
        for c in 0..d {
            let pair = (c / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = p as f64 * freq;
            data[p * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(tokens, d, data)
}
