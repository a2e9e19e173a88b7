//! Attribute query decoding.
//!
//! Each of the `k` learnable queries cross-attends over the refined tokens
//! and yields one attribute feature `a_i`; `a_i` is normalized and projected
//! onto a shared vector to give one logit per bit. During training the
//! queries can additionally be block-rotated into `N - 1` auxiliary branches
//! that reuse every decoder weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::pyramid::multi_head_attention;

/// The `k × d` matrix of learnable attribute queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeQuerySet {
    pub queries: Tensor,
}

impl AttributeQuerySet {
    pub fn bits(&self) -> usize {
        self.queries.rows()
    }

    pub fn width(&self) -> usize {
        self.queries.cols()
    }
}

/// Draws `k` queries i.i.d. uniform on `[-1/√d, 1/√d]`.
pub fn init_queries(k: usize, d: usize, seed: u64) -> Result<AttributeQuerySet> {
    if k == 0 || d == 0 {
        return Err(Error::Config("query count and width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d as f64).sqrt();
    Ok(AttributeQuerySet {
        queries: init::uniform(k, d, bound, &mut rng),
    })
}

/// Initial scale of the query and key projections. At plain Xavier scale the
/// cross-attention starts almost uniform over the tokens, so every query
/// reads the same pooled feature and all bits begin as one function of the
/// image.
pub const ATTENTION_GAIN: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// `d × 1` compression vector shared by all bits.
    pub compress: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub compress: NodeId,
}

impl DecoderParams {
    /// Xavier initialization, with `W_q` and `W_k` scaled up by
    /// [`ATTENTION_GAIN`].
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderParams {
            w_q: init::xavier(d, d, &mut rng).scale(ATTENTION_GAIN),
            w_k: init::xavier(d, d, &mut rng).scale(ATTENTION_GAIN),
            w_v: init::xavier(d, d, &mut rng),
            w_o: init::xavier(d, d, &mut rng),
            compress: init::xavier(d, 1, &mut rng),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("decoder.w_q".into(), &self.w_q),
            ("decoder.w_k".into(), &self.w_k),
            ("decoder.w_v".into(), &self.w_v),
            ("decoder.w_o".into(), &self.w_o),
            ("decoder.compress".into(), &self.compress),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o, &mut self.compress]
    }

    pub fn from_tensors(tensors: &mut impl Iterator<Item = Tensor>) -> Result<Self> {
        let mut next = || tensors.next().ok_or(Error::Invalid("missing decoder parameter".into()));
        Ok(DecoderParams {
            w_q: next()?,
            w_k: next()?,
            w_v: next()?,
            w_o: next()?,
            compress: next()?,
        })
    }

    pub fn check(&self, d: usize) -> Result<()> {
        for (name, t) in self.named() {
            let want = if name == "decoder.compress" { [d, 1] } else { [d, d] };
            if t.shape() != want {
                return Err(Error::Config(format!("{name} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }
}

impl DecoderNodes {
    pub fn from_ids(ids: &mut impl Iterator<Item = NodeId>) -> Self {
        let mut next = || ids.next().expect("decoder node id");
        DecoderNodes {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            compress: next(),
        }
    }
}

/// Number of decoder branches: the original plus `N - 1` auxiliary ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    pub branches: usize,
}

impl BranchConfig {
    pub fn new(branches: usize, d: usize) -> Result<Self> {
        if branches == 0 {
            return Err(Error::Config("branch count must be at least 1".into()));
        }
        if d % branches != 0 {
            return Err(Error::Config(format!("width {d} is not divisible into {branches} sub-vectors")));
        }
        Ok(BranchConfig { branches })
    }
}

/// Rotates the `n` equal sub-vectors of `q` right by `j` blocks:
/// `[q^{n-j+1}; …; q^n; q^1; …; q^{n-j}]`, for `1 ≤ j ≤ n - 1`.
pub fn transform_query(q: &[f64], n: usize, j: usize) -> Result<Vec<f64>> {
    if n == 0 || q.len() % n != 0 {
        return Err(Error::Config(format!("width {} is not divisible into {n} sub-vectors", q.len())));
    }
    if j == 0 || j >= n {
        return Err(Error::Invalid(format!("shift {j} outside 1..={}", n.saturating_sub(1))));
    }
    let len = q.len() / n;
    let mut out = Vec::with_capacity(q.len());
    for b in 0..n {
        let src = (b + n - j) % n;
        out.extend_from_slice(&q[src * len..(src + 1) * len]);
    }
    Ok(out)
}

/// Graph form of [`transform_query`] applied to every row of `q`.
fn shifted_queries(g: &mut Graph, q: NodeId, n: usize, j: usize) -> Result<NodeId> {
    let d = g.value(q).cols();
    let len = d / n;
    let blocks = (0..n)
        .map(|b| g.slice(q, 1, ((b + n - j) % n) * len, len))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&blocks, 1)
}

/// Stacks the original queries and their `n - 1` shifted versions,
/// branch-major: rows `b·k .. (b+1)·k` hold branch `b`.
pub fn branch_queries(g: &mut Graph, q: NodeId, branches: BranchConfig) -> Result<NodeId> {
    let n = branches.branches;
    let d = g.value(q).cols();
    BranchConfig::new(n, d)?;
    if n == 1 {
        return Ok(q);
    }
    let mut parts = vec![q];
    for j in 1..n {
        parts.push(shifted_queries(g, q, n, j)?);
    }
    g.concat(&parts, 0)
}

pub struct Decoded {
    /// Attribute features, one row per query.
    pub features: NodeId,
    /// Per-head attention weights, queries × tokens.
    pub weights: Vec<NodeId>,
}

/// Cross-attention of `queries` over the tokens. Keys come from the
/// position-augmented tokens, values from the plain tokens.
pub fn decode_attributes(
    g: &mut Graph,
    queries: NodeId,
    tokens: NodeId,
    tokens_with_position: NodeId,
    p: &DecoderNodes,
    heads: usize,
) -> Result<Decoded> {
    let (qd, td, pd) = (g.value(queries).cols(), g.value(tokens).cols(), g.value(tokens_with_position).cols());
    if qd != td || td != pd || g.value(tokens).rows() != g.value(tokens_with_position).rows() {
        return Err(Error::shape(
            "decode_attributes",
            g.value(queries).shape(),
            g.value(tokens).shape(),
        ));
    }
    let q = g.matmul(queries, p.w_q)?;
    let k = g.matmul(tokens_with_position, p.w_k)?;
    let v = g.matmul(tokens, p.w_v)?;
    let att = multi_head_attention(g, q, k, v, heads)?;
    let features = g.matmul(att.output, p.w_o)?;
    Ok(Decoded {
        features,
        weights: att.weights,
    })
}

/// `h_i = (a_i / ‖a_i‖) · W` for every row; zero rows give `h_i = 0`.
pub fn compress(g: &mut Graph, features: NodeId, w: NodeId) -> Result<NodeId> {
    let unit = g.l2_normalize_rows(features)?;
    g.matmul(unit, w)
}

/// Logits of all branches, `(N·k) × 1`, branch-major.
pub fn forward_train(
    g: &mut Graph,
    queries: NodeId,
    tokens: NodeId,
    tokens_with_position: NodeId,
    p: &DecoderNodes,
    heads: usize,
    branches: BranchConfig,
) -> Result<NodeId> {
    let all = branch_queries(g, queries, branches)?;
    let decoded = decode_attributes(g, all, tokens, tokens_with_position, p, heads)?;
    compress(g, decoded.features, p.compress)
}

/// `sign` with `sign(0) = +1`.
pub fn sign_codes(logits: &[f64]) -> Vec<i8> {
    logits.iter().map(|&h| if h >= 0.0 { 1 } else { -1 }).collect()
}
