//! Code-geometry diagnostics: coherence, the Welch bound and its proof
//! chain, the squared-cosine objective, loss landscapes and attention export.
//!
//! Code matrices are `n × C`: one column per class representative.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::pyramid::FeaturePyramid;

fn column_norms(v: &Tensor, op: &str) -> Result<Vec<f64>> {
    let (n, c) = (v.rows(), v.cols());
    let norms: Vec<f64> = (0..c)
        .map(|j| (0..n).map(|i| v.at(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    if let Some(j) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::Invalid(format!("{op}: column {j} is zero")));
    }
    Ok(norms)
}

/// Columns scaled to unit length.
pub fn normalize_columns(v: &Tensor) -> Result<Tensor> {
    let norms = column_norms(v, "normalize_columns")?;
    let mut out = v.clone();
    for i in 0..v.rows() {
        for (j, n) in norms.iter().enumerate() {
            out.set(i, j, v.at(i, j) / n);
        }
    }
    Ok(out)
}

/// `dims × classes` matrix of seeded random unit columns.
pub fn random_unit_columns(dims: usize, classes: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normalize_columns(&init::gaussian(dims, classes, 1.0, &mut rng))
}

/// Gram matrix of unit columns, `C × C`.
fn unit_gram(v: &Tensor) -> Result<Tensor> {
    let x = normalize_columns(v)?;
    x.transpose()?.matmul(&x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coherence {
    pub mu: f64,
    /// Column pair attaining `mu`.
    pub pair: (usize, usize),
}

/// `max_{i≠j} |v_iᵀv_j| / (‖v_i‖‖v_j‖)`.
pub fn coherence_mu(v: &Tensor) -> Result<Coherence> {
    if v.cols() < 2 {
        return Err(Error::Invalid("coherence needs at least two columns".into()));
    }
    let g = unit_gram(v)?;
    let mut best = Coherence { mu: -1.0, pair: (0, 1) };
    for i in 0..g.rows() {
        for j in i + 1..g.cols() {
            let m = g.at(i, j).abs();
            if m > best.mu {
                best = Coherence { mu: m, pair: (i, j) };
            }
        }
    }
    best.mu = best.mu.min(1.0);
    Ok(best)
}

/// Lower bound on the coherence of `classes` unit vectors in `dims`
/// dimensions; zero when `classes ≤ dims`.
pub fn welch_lower_bound(classes: usize, dims: usize) -> f64 {
    if classes <= dims || classes < 2 || dims == 0 {
        return 0.0;
    }
    let (c, n) = (classes as f64, dims as f64);
    ((c - n) / (n * (c - 1.0))).sqrt()
}

/// Numerical trace of the Welch-bound derivation for one matrix. Every
/// `*_slack` is `rhs_side − lhs_side` of an inequality that must be ≥ 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrace {
    pub classes: usize,
    pub dims: usize,
    pub trace: f64,
    pub frobenius_sq: f64,
    pub eigen_sq_sum: f64,
    /// `n·Σλ² − (Tr G)²`.
    pub cauchy_schwarz_slack: f64,
    pub off_diagonal_sq_sum: f64,
    /// `Σ_{i≠j} G_ij² − C(C−n)/n`.
    pub off_diagonal_slack: f64,
    pub mu: f64,
    /// `μ² − Σ_{i≠j} G_ij² / (C(C−1))`.
    pub mean_slack: f64,
    pub welch: f64,
    /// `μ − welch`.
    pub welch_slack: f64,
}

impl BoundTrace {
    /// All identities within `tol` and all inequalities with slack ≥ `−tol`.
    pub fn holds(&self, tol: f64) -> bool {
        let scale = self.frobenius_sq.max(1.0);
        (self.trace - self.classes as f64).abs() <= tol * self.classes as f64
            && (self.frobenius_sq - self.eigen_sq_sum).abs() <= tol * scale
            && self.cauchy_schwarz_slack >= -tol * scale * self.dims as f64
            && self.off_diagonal_slack >= -tol * scale
            && self.mean_slack >= -tol
            && self.welch_slack >= -tol
    }
}

pub fn verify_bound(v: &Tensor) -> Result<BoundTrace> {
    let (n, c) = (v.rows(), v.cols());
    let x = normalize_columns(v)?;
    let g = x.transpose()?.matmul(&x)?;
    let trace: f64 = (0..c).map(|i| g.at(i, i)).sum();
    let frobenius_sq = g.sum_sq();
    // G and X·Xᵀ share their nonzero spectrum; decompose the smaller one.
    let small = if n < c { x.matmul(&x.transpose()?)? } else { g.clone() };
    let m = DMatrix::from_row_slice(small.rows(), small.cols(), small.data());
    let eig = SymmetricEigen::new(m);
    let eigen_sq_sum: f64 = eig.eigenvalues.iter().map(|l| l * l).sum();
    let cauchy_schwarz_slack = n as f64 * eigen_sq_sum - trace * trace;
    let off_diagonal_sq_sum = frobenius_sq - (0..c).map(|i| g.at(i, i).powi(2)).sum::<f64>();
    let (cf, nf) = (c as f64, n as f64);
    let off_lower = if c > n { cf * (cf - nf) / nf } else { 0.0 };
    let mu = if c >= 2 { coherence_mu(v)?.mu } else { 0.0 };
    let mean = if c >= 2 { off_diagonal_sq_sum / (cf * (cf - 1.0)) } else { 0.0 };
    let welch = welch_lower_bound(c, n);
    Ok(BoundTrace {
        classes: c,
        dims: n,
        trace,
        frobenius_sq,
        eigen_sq_sum,
        cauchy_schwarz_slack,
        off_diagonal_sq_sum,
        off_diagonal_slack: off_diagonal_sq_sum - off_lower,
        mu,
        mean_slack: mu * mu - mean,
        welch,
        welch_slack: mu - welch,
    })
}

/// `f(V) = Σ_{i≠j} cos²(v_i, v_j)` and `∂f/∂V`.
pub fn cosine_objective(v: &Tensor) -> Result<(f64, Tensor)> {
    let norms = column_norms(v, "cosine_objective")?;
    let x = normalize_columns(v)?;
    let mut g = x.transpose()?.matmul(&x)?;
    let c = g.rows();
    for i in 0..c {
        g.set(i, i, 0.0);
    }
    let f = g.sum_sq();
    // ∂f/∂X = 4·X·G_off, then project each column off x_i and divide by ‖v_i‖.
    let gx = x.matmul(&g)?.scale(4.0);
    let mut grad = Tensor::zeros(v.rows(), c);
    for j in 0..c {
        let dot: f64 = (0..v.rows()).map(|i| x.at(i, j) * gx.at(i, j)).sum();
        for i in 0..v.rows() {
            grad.set(i, j, (gx.at(i, j) - x.at(i, j) * dot) / norms[j]);
        }
    }
    Ok((f, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceStep {
    pub objective: f64,
    pub mu: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<CoherenceStep>,
    pub codes: Tensor,
}

impl Trajectory {
    pub fn final_mu(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.mu)
    }
}

/// Gradient descent on the squared-cosine objective over `classes` unit
/// columns in `dims` dimensions, renormalizing columns after every step.
pub fn minimize_coherence(classes: usize, dims: usize, steps: usize, seed: u64) -> Result<Trajectory> {
    if classes < 2 || dims == 0 {
        return Err(Error::Invalid("need at least two classes and one dimension".into()));
    }
    let mut v = random_unit_columns(dims, classes, seed)?;
    let ratio = (classes as f64 / dims as f64).sqrt();
    let lr = 0.125 / (1.0 + ratio).powi(2);
    let mut trajectory = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (f, grad) = cosine_objective(&v)?;
        trajectory.push(CoherenceStep {
            objective: f,
            mu: coherence_mu(&v)?.mu,
        });
        if step == steps {
            break;
        }
        v = normalize_columns(&v.sub(&grad.scale(lr))?)?;
    }
    Ok(Trajectory {
        steps: trajectory,
        codes: v,
    })
}

#[derive(Clone, Debug)]
pub struct LandscapeGrid {
    /// Offsets along each direction; the middle one is exactly zero.
    pub offsets: Vec<f64>,
    /// `values[a][b] = f(V + offsets[a]·D1 + offsets[b]·D2)`.
    pub values: Vec<Vec<f64>>,
    pub d1: Tensor,
    pub d2: Tensor,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let m = self.offsets.len() / 2;
        self.values[m][m]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,loss\n");
        for (a, row) in self.offsets.iter().zip(&self.values) {
            for (b, v) in self.offsets.iter().zip(row) {
                let _ = writeln!(s, "{a},{b},{v}");
            }
        }
        s
    }
}

fn direction_like(v: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let norms = column_norms(v, "landscape_grid")?;
    let d = normalize_columns(&init::gaussian(v.rows(), v.cols(), 1.0, rng))?;
    let mut out = d.clone();
    for i in 0..v.rows() {
        for (j, n) in norms.iter().enumerate() {
            out.set(i, j, d.at(i, j) * n);
        }
    }
    Ok(out)
}

/// Squared-cosine objective over a `resolution × resolution` plane spanned
/// by two random directions whose columns match `V`'s column norms.
pub fn landscape_grid(v: &Tensor, resolution: usize, extent: f64, seed: u64) -> Result<LandscapeGrid> {
    if resolution < 3 || resolution % 2 == 0 {
        return Err(Error::Invalid(format!("resolution must be odd and at least 3, got {resolution}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = direction_like(v, &mut rng)?;
    let d2 = direction_like(v, &mut rng)?;
    let m = (resolution / 2) as f64;
    let offsets: Vec<f64> = (0..resolution).map(|i| extent * (i as f64 - m) / m).collect();
    let values = offsets
        .par_iter()
        .map(|&a| {
            offsets
                .iter()
                .map(|&b| {
                    let p = v.add(&d1.scale(a))?.add(&d2.scale(b))?;
                    // A column can cancel exactly at some offset; score it as
                    // undefined rather than failing the whole grid.
                    match cosine_objective(&p) {
                        Ok((f, _)) => Ok(f),
                        Err(Error::Invalid(_)) => Ok(f64::NAN),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid {
        offsets,
        values,
        d1,
        d2,
    })
}

/// One relaxed code per class, chosen at random among the class members,
/// assembled as columns (`n × C`, classes in ascending label order).
pub fn class_representatives(codes: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<Tensor> {
    use rand::seq::SliceRandom;
    if codes.len() != labels.len() || codes.is_empty() {
        return Err(Error::Invalid("codes and labels must be non-empty and aligned".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = members
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| *m.choose(&mut rng).expect("non-empty class"))
        .collect();
    let n = codes[0].len();
    let mut out = Tensor::zeros(n, picks.len());
    for (j, &p) in picks.iter().enumerate() {
        if codes[p].len() != n {
            return Err(Error::shape("class_representatives", &[n], &[codes[p].len()]));
        }
        for i in 0..n {
            out.set(i, j, codes[p][i]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceReport {
    pub classes: usize,
    pub dims: usize,
    pub mu: f64,
    pub pair: (usize, usize),
    pub welch: f64,
    pub trace: f64,
    pub frobenius_sq: f64,
}

impl CoherenceReport {
    pub fn new(v: &Tensor) -> Result<Self> {
        let c = coherence_mu(v)?;
        let g = unit_gram(v)?;
        Ok(CoherenceReport {
            classes: v.cols(),
            dims: v.rows(),
            mu: c.mu,
            pair: c.pair,
            welch: welch_lower_bound(v.cols(), v.rows()),
            trace: (0..g.rows()).map(|i| g.at(i, i)).sum(),
            frobenius_sq: g.sum_sq(),
        })
    }

    /// Human-readable block followed by `key=value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Coherence of {} codes in {} dimensions", self.classes, self.dims);
        let _ = writeln!(s, "  mu          {:.6} (columns {} and {})", self.mu, self.pair.0, self.pair.1);
        let _ = writeln!(s, "  welch bound {:.6}", self.welch);
        let _ = writeln!(s, "  gram trace  {:.6}", self.trace);
        let _ = writeln!(s, "  gram |G|_F^2 {:.6}", self.frobenius_sq);
        let _ = writeln!(s);
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "dims={}", self.dims);
        let _ = writeln!(s, "mu={}", self.mu);
        let _ = writeln!(s, "pair={},{}", self.pair.0, self.pair.1);
        let _ = writeln!(s, "welch={}", self.welch);
        let _ = writeln!(s, "trace={}", self.trace);
        let _ = writeln!(s, "frobenius_sq={}", self.frobenius_sq);
        s
    }
}

/// Head-averaged decoder attention of every query as CSV rows
/// `query,level,row,col,weight`, levels numbered from 1 (coarsest).
pub fn attention_export(model: &Model, image: &FeaturePyramid) -> Result<String> {
    let a = model.attention_map(image)?;
    let coords = model.config.geometry.token_coordinates();
    let mut s = String::from("query,level,row,col,weight\n");
    for q in 0..a.rows() {
        for (t, &(level, row, col)) in coords.iter().enumerate() {
            let _ = writeln!(s, "{q},{},{row},{col},{}", level + 1, a.at(q, t));
        }
    }
    Ok(s)
}
