//! Asymmetric pairwise training objective, database codes and the
//! alternating optimization loop.
//!
//! For a sampled point `i ∈ Ω` with relaxed code `v_i = tanh(h_i)` and the
//! database codes `Z` (one ±1 row per gallery item `j ∈ Γ`):
//!
//! ```text
//! loss_i = β · Σ_j (v_iᵀ z_j / K − S_ij)²  +  γ · ‖z_i − v_i‖²
//! ```
//!
//! where `K = N·k` is the effective code length.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelNodes};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::pyramid::FeaturePyramid;

/// Label-equality similarity over gallery positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityOracle {
    labels: Vec<usize>,
}

impl SimilarityOracle {
    pub fn new(labels: Vec<usize>) -> Self {
        SimilarityOracle { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn similar(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }

    pub fn s(&self, i: usize, j: usize) -> f64 {
        if self.similar(i, j) {
            1.0
        } else {
            0.0
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.labels.len()).map(|j| self.s(i, j)).collect()
    }
}

/// `|Γ| × K` matrix over {−1, +1}.
#[derive(Clone, Debug, PartialEq)]
pub struct DatabaseCodes {
    codes: Tensor,
}

impl DatabaseCodes {
    pub fn new(codes: Tensor) -> Result<Self> {
        if codes.shape().len() != 2 {
            return Err(Error::Invalid("database codes must be a matrix".into()));
        }
        if let Some(bad) = codes.data().iter().find(|&&x| x != 1.0 && x != -1.0) {
            return Err(Error::Invalid(format!("database code entry {bad} is not ±1")));
        }
        Ok(DatabaseCodes { codes })
    }

    pub fn random(count: usize, bits: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..count * bits)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        DatabaseCodes {
            codes: Tensor::matrix(count, bits, data).expect("consistent shape"),
        }
    }

    pub fn count(&self) -> usize {
        self.codes.rows()
    }

    pub fn bits(&self) -> usize {
        self.codes.cols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.codes.row(j)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.codes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            gamma: 200.0,
        }
    }
}

/// `Σ_j (vᵀz_j / K − S_j)²` with `K` the code length of `z`.
pub fn pairwise_loss(v: &[f64], z: &DatabaseCodes, s_row: &[f64]) -> Result<f64> {
    if v.len() != z.bits() || s_row.len() != z.count() {
        return Err(Error::shape("pairwise_loss", &[v.len(), s_row.len()], z.codes.shape()));
    }
    let k = z.bits() as f64;
    Ok((0..z.count())
        .map(|j| {
            let dot: f64 = v.iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
            (dot / k - s_row[j]).powi(2)
        })
        .sum())
}

/// `Σ_c (z_c − v_c)²`.
pub fn quantization_loss(v: &[f64], z: &[f64]) -> Result<f64> {
    if v.len() != z.len() {
        return Err(Error::shape("quantization_loss", &[v.len()], &[z.len()]));
    }
    Ok(v.iter().zip(z).map(|(a, b)| (b - a).powi(2)).sum())
}

/// The loss with `Z`, `S` and the weights held fixed.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub codes: &'a DatabaseCodes,
    pub oracle: &'a SimilarityOracle,
    pub weights: LossWeights,
}

impl Objective<'_> {
    /// Loss node of one sample given its logits (`K × 1`) and its gallery
    /// position.
    pub fn sample_loss(&self, g: &mut Graph, logits: NodeId, position: usize) -> Result<NodeId> {
        let k = self.codes.bits();
        if g.value(logits).shape() != [k, 1] {
            return Err(Error::shape("sample_loss", g.value(logits).shape(), &[k, 1]));
        }
        if position >= self.codes.count() || self.oracle.len() != self.codes.count() {
            return Err(Error::Invalid(format!(
                "gallery position {position} with {} codes and {} labels",
                self.codes.count(),
                self.oracle.len()
            )));
        }
        let v = g.tanh(logits);
        let z = g.constant(self.codes.codes.clone());
        let dots = g.matmul(z, v)?;
        let scaled = g.scale(dots, 1.0 / k as f64);
        let s = g.constant(Tensor::matrix(self.codes.count(), 1, self.oracle.row(position))?);
        let diff = g.sub(scaled, s)?;
        let pair = g.sum_sq(diff);
        let pair = g.scale(pair, self.weights.beta);
        let zi = g.constant(Tensor::matrix(k, 1, self.codes.row(position).to_vec())?);
        let gap = g.sub(zi, v)?;
        let quant = g.sum_sq(gap);
        let quant = g.scale(quant, self.weights.gamma);
        g.add(pair, quant)
    }

    /// Summed loss over a batch of `(gallery position, image)` pairs.
    pub fn total_loss(
        &self,
        g: &mut Graph,
        model: &Model,
        nodes: &ModelNodes,
        batch: &[(usize, &FeaturePyramid)],
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut total = None;
        for &(position, image) in batch {
            let h = model.logits_node(g, nodes, image, model.config.branch_config())?;
            let l = self.sample_loss(g, h, position)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(total.expect("non-empty batch"))
    }

    /// Objective value for relaxed codes `v_omega` (one row per entry of
    /// `omega`, which holds gallery positions).
    pub fn value(&self, v_omega: &Tensor, omega: &[usize]) -> Result<f64> {
        if v_omega.rows() != omega.len() {
            return Err(Error::shape("objective", v_omega.shape(), &[omega.len()]));
        }
        let mut total = 0.0;
        for (r, &i) in omega.iter().enumerate() {
            let v = v_omega.row(r);
            total += self.weights.beta * pairwise_loss(v, self.codes, &self.oracle.row(i))?;
            total += self.weights.gamma * quantization_loss(v, self.codes.row(i))?;
        }
        Ok(total)
    }
}

/// Per-parameter momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        OptimizerState {
            buffers: params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }
}

/// `buf ← μ·buf + grad + wd·param; param ← param − lr·buf`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::Invalid(format!(
            "{} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.buffers.len()
        )));
    }
    for ((p, gr), buf) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        if p.shape() != gr.shape() || p.shape() != buf.shape() {
            return Err(Error::shape("sgd_step", p.shape(), gr.shape()));
        }
        for ((x, &gv), b) in p.data_mut().iter_mut().zip(gr.data()).zip(buf.data_mut()) {
            *b = momentum * *b + gv + weight_decay * *x;
            *x -= learning_rate * *b;
        }
    }
    Ok(())
}

/// Uniform sample of `count` distinct positions out of `0..population`,
/// sorted ascending.
pub fn sample_omega(population: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(population, count, &mut rng)
}

fn sample_with(population: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if count > population {
        return Err(Error::Invalid(format!("cannot sample {count} of {population} items")));
    }
    let mut out = rand::seq::index::sample(rng, population, count).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Coordinate descent on `Z` with the relaxed codes of `Ω` fixed.
///
/// For each row `j` the objective reduces to `β/K²·zᵀAz − 2·zᵀb_j` with
/// `A = V_ΩᵀV_Ω` and `b_j = β/K·Σ_i S_ij v_i + γ·v_j·[j ∈ Ω]`. Each bit is set
/// to the sign of its exact conditional minimizer; a zero keeps the current
/// value, so no step increases the objective. Columns are swept until none
/// changes or `max_sweeps` is reached.
pub fn update_database_codes(
    codes: &DatabaseCodes,
    v_omega: &Tensor,
    omega: &[usize],
    oracle: &SimilarityOracle,
    weights: LossWeights,
    max_sweeps: usize,
) -> Result<DatabaseCodes> {
    let k = codes.bits();
    if v_omega.rows() != omega.len() || v_omega.cols() != k || oracle.len() != codes.count() {
        return Err(Error::shape("update_database_codes", v_omega.shape(), codes.codes.shape()));
    }
    if let Some(&bad) = omega.iter().find(|&&i| i >= codes.count()) {
        return Err(Error::Invalid(format!("sample position {bad} out of range")));
    }
    let kf = k as f64;
    let quad = weights.beta / (kf * kf);
    let a = v_omega.transpose()?.matmul(v_omega)?;

    let classes = oracle.labels().iter().max().map_or(0, |m| m + 1);
    let mut class_sums = vec![vec![0.0; k]; classes];
    for (r, &i) in omega.iter().enumerate() {
        for (s, &v) in class_sums[oracle.labels()[i]].iter_mut().zip(v_omega.row(r)) {
            *s += v;
        }
    }
    let mut own = vec![None; codes.count()];
    for (r, &i) in omega.iter().enumerate() {
        own[i] = Some(r);
    }

    let rows: Vec<Vec<f64>> = (0..codes.count())
        .into_par_iter()
        .map(|j| {
            let mut b: Vec<f64> = class_sums[oracle.labels()[j]]
                .iter()
                .map(|s| weights.beta / kf * s)
                .collect();
            if let Some(r) = own[j] {
                for (bc, &v) in b.iter_mut().zip(v_omega.row(r)) {
                    *bc += weights.gamma * v;
                }
            }
            let mut z = codes.row(j).to_vec();
            for _ in 0..max_sweeps {
                let mut changed = false;
                for c in 0..k {
                    let cross: f64 = (0..k).filter(|&c2| c2 != c).map(|c2| a.at(c, c2) * z[c2]).sum();
                    let drive = b[c] - quad * cross;
                    let next = if drive > 0.0 {
                        1.0
                    } else if drive < 0.0 {
                        -1.0
                    } else {
                        z[c]
                    };
                    if next != z[c] {
                        z[c] = next;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            z
        })
        .collect();
    DatabaseCodes::new(Tensor::matrix(codes.count(), k, rows.concat())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `|Ω|`, points sampled per outer iteration.
    pub samples: usize,
    pub outer_iterations: usize,
    pub inner_epochs: usize,
    pub z_sweeps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            learning_rate: 3e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            samples: 2000,
            outer_iterations: 40,
            inner_epochs: 3,
            z_sweeps: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if !(w.beta >= 0.0 && w.gamma >= 0.0 && w.beta.is_finite() && w.gamma.is_finite()) {
            return Err(Error::Config("beta and gamma must be finite and nonnegative".into()));
        }
        if !(self.learning_rate >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate, momentum and weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.samples == 0 {
            return Err(Error::Config("batch_size and samples must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-sample loss terms over one inner epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub outer: usize,
    pub epoch: usize,
    pub pairwise: f64,
    pub quantization: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub codes: DatabaseCodes,
    pub log: Vec<EpochRecord>,
}

struct SampleResult {
    pairwise: f64,
    quantization: f64,
    relaxed: Vec<f64>,
    grads: Vec<Tensor>,
}

fn sample_gradient(model: &Model, objective: &Objective, position: usize, image: &FeaturePyramid) -> Result<SampleResult> {
    let mut g = Graph::new();
    let nodes = model.bind(&mut g, true);
    let h = model.logits_node(&mut g, &nodes, image, model.config.branch_config())?;
    let loss = objective.sample_loss(&mut g, h, position)?;
    let relaxed: Vec<f64> = g.value(h).data().iter().map(|x| x.tanh()).collect();
    let pairwise = pairwise_loss(&relaxed, objective.codes, &objective.oracle.row(position))?;
    let quantization = quantization_loss(&relaxed, objective.codes.row(position))?;
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {value} at gallery position {position}")));
    }
    let mut grads = g.backward(loss)?;
    let grads = nodes
        .ordered
        .iter()
        .map(|&id| grads.take(id).expect("parameter gradient"))
        .collect();
    Ok(SampleResult {
        pairwise,
        quantization,
        relaxed,
        grads,
    })
}

/// Alternating optimization on the gallery side of `dataset`'s split.
///
/// Every outer iteration samples `Ω`, runs `inner_epochs` passes of
/// mini-batch momentum SGD over `Ω` with `Z` fixed, then refreshes `Z` from
/// the relaxed codes of `Ω`. The returned model has `f32`-representable
/// parameters so that a saved checkpoint reproduces it exactly.
pub fn train(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, model_config, config, |_| {})
}

/// [`train`] with a callback invoked after every inner epoch.
pub fn train_with(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let model = Model::init(model_config.clone(), config.seed)?;
    train_model(dataset, model, config, on_epoch)
}

/// [`train_with`] starting from an existing model.
pub fn train_model(
    dataset: &Dataset,
    mut model: Model,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = model.config.clone();
    if dataset.geometry != model_config.geometry {
        return Err(Error::Config("model geometry does not match the dataset".into()));
    }
    let gallery = &dataset.require_split()?.gallery;
    if gallery.is_empty() {
        return Err(Error::Invalid("empty gallery".into()));
    }
    if config.samples > gallery.len() {
        return Err(Error::Config(format!(
            "samples {} exceeds gallery size {}",
            config.samples,
            gallery.len()
        )));
    }
    let oracle = SimilarityOracle::new(dataset.labels_of(gallery));
    let mut codes = DatabaseCodes::random(gallery.len(), model_config.train_bits(), config.seed.wrapping_add(7));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(11));
    let mut state = OptimizerState::new(model.named_params().into_iter().map(|(_, t)| t));
    let mut log = Vec::new();

    for outer in 0..config.outer_iterations {
        let omega = sample_with(gallery.len(), config.samples, &mut rng)?;
        let mut relaxed = vec![Vec::new(); omega.len()];
        for epoch in 0..config.inner_epochs {
            let mut order: Vec<usize> = (0..omega.len()).collect();
            order.shuffle(&mut rng);
            let (mut pair_sum, mut quant_sum) = (0.0, 0.0);
            for batch in order.chunks(config.batch_size) {
                let objective = Objective {
                    codes: &codes,
                    oracle: &oracle,
                    weights: config.weights,
                };
                let results = batch
                    .par_iter()
                    .map(|&r| {
                        let position = omega[r];
                        sample_gradient(&model, &objective, position, &dataset.images[gallery[position]])
                    })
                    .collect::<Vec<_>>();
                let mut total: Option<Vec<Tensor>> = None;
                for (&r, res) in batch.iter().zip(results) {
                    let res = res.map_err(|e| match e {
                        Error::Numerical(m) => Error::Numerical(format!("outer {outer}, epoch {epoch}: {m}")),
                        other => other,
                    })?;
                    pair_sum += res.pairwise;
                    quant_sum += res.quantization;
                    relaxed[r] = res.relaxed;
                    match &mut total {
                        None => total = Some(res.grads),
                        Some(acc) => acc.iter_mut().zip(&res.grads).for_each(|(a, g)| a.add_assign(g)),
                    }
                }
                let grads = total.expect("non-empty batch");
                sgd_step(
                    &mut model.params_mut(),
                    &grads,
                    &mut state,
                    config.learning_rate,
                    config.momentum,
                    config.weight_decay,
                )?;
            }
            let n = omega.len() as f64;
            let record = EpochRecord {
                outer,
                epoch,
                pairwise: pair_sum / n,
                quantization: quant_sum / n,
                total: (config.weights.beta * pair_sum + config.weights.gamma * quant_sum) / n,
            };
            if !record.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite epoch loss at outer {outer}, epoch {epoch}")));
            }
            on_epoch(&record);
            log.push(record);
        }
        if config.inner_epochs > 0 {
            let v_omega = Tensor::from_rows(&relaxed)?;
            codes = update_database_codes(&codes, &v_omega, &omega, &oracle, config.weights, config.z_sweeps)?;
        }
    }
    model.round_to_f32();
    Ok(TrainOutcome { model, codes, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{random_image, tiny_config};
    use crate::numerics::grad_check;

    fn codes(rows: &[&[f64]]) -> DatabaseCodes {
        DatabaseCodes::new(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap()
    }

    #[test]
    fn pairwise_examples() {
        let near_one = 1.0 - 1e-12;
        let z = codes(&[&[1.0, 1.0]]);
        assert!(pairwise_loss(&[near_one, near_one], &z, &[1.0]).unwrap() < 1e-20);
        let z = codes(&[&[1.0, -1.0]]);
        assert_eq!(pairwise_loss(&[1.0, 1.0], &z, &[0.0]).unwrap(), 0.0);
        let z = codes(&[&[-1.0, -1.0]]);
        assert_eq!(pairwise_loss(&[1.0, 1.0], &z, &[1.0]).unwrap(), 4.0);
        assert!(pairwise_loss(&[1.0], &z, &[1.0]).is_err());
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantization_loss(&[1.0, -1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(quantization_loss(&[0.5, -0.5], &[1.0, -1.0]).unwrap(), 0.5);
        assert_eq!(quantization_loss(&[0.0; 5], &[1.0, -1.0, 1.0, 1.0, -1.0]).unwrap(), 5.0);
    }

    #[test]
    fn rejects_non_binary_codes() {
        assert!(DatabaseCodes::new(Tensor::row_vector(&[1.0, 0.0])).is_err());
    }

    fn setup(branches: usize, gallery: usize, seed: u64) -> (Model, Vec<FeaturePyramid>, SimilarityOracle, DatabaseCodes) {
        let model = Model::init(tiny_config(branches), seed).unwrap();
        let images = (0..gallery).map(|i| random_image(&model.config, seed * 100 + i as u64)).collect();
        let oracle = SimilarityOracle::new((0..gallery).map(|i| i % 3).collect());
        let z = DatabaseCodes::random(gallery, model.config.train_bits(), seed + 1);
        (model, images, oracle, z)
    }

    #[test]
    fn total_loss_matches_scalar_oracle() {
        let (model, images, oracle, z) = setup(2, 6, 3);
        let weights = LossWeights { beta: 0.7, gamma: 1.3 };
        let obj = Objective {
            codes: &z,
            oracle: &oracle,
            weights,
        };
        let batch: Vec<(usize, &FeaturePyramid)> = [1usize, 4, 5].iter().map(|&p| (p, &images[p])).collect();
        let mut g = Graph::new();
        let nodes = model.bind(&mut g, true);
        let root = obj.total_loss(&mut g, &model, &nodes, &batch).unwrap();
        let got = g.value(root).item().unwrap();

        let k = z.bits();
        let mut expect = 0.0;
        for &(p, img) in &batch {
            let v: Vec<f64> = model.forward_train(img).unwrap().iter().map(|h| h.tanh()).collect();
            for j in 0..z.count() {
                let mut dot = 0.0;
                for c in 0..k {
                    dot += v[c] * z.row(j)[c];
                }
                let s = if oracle.labels()[p] == oracle.labels()[j] { 1.0 } else { 0.0 };
                expect += weights.beta * (dot / k as f64 - s) * (dot / k as f64 - s);
            }
            for c in 0..k {
                expect += weights.gamma * (z.row(p)[c] - v[c]) * (z.row(p)[c] - v[c]);
            }
        }
        assert!((got - expect).abs() < 1e-12 * expect.max(1.0), "{got} vs {expect}");
        assert!(got >= 0.0);
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradients() {
        let (model, images, oracle, z) = setup(1, 3, 4);
        let obj = Objective {
            codes: &z,
            oracle: &oracle,
            weights: LossWeights { beta: 0.0, gamma: 0.0 },
        };
        let mut g = Graph::new();
        let nodes = model.bind(&mut g, true);
        let root = obj.total_loss(&mut g, &model, &nodes, &[(0, &images[0])]).unwrap();
        assert_eq!(g.value(root).item(), Some(0.0));
        let grads = g.backward(root).unwrap();
        assert!(nodes.ordered.iter().all(|&id| grads.get(id).unwrap().max_abs() == 0.0));
        assert!(obj.total_loss(&mut g, &model, &nodes, &[]).is_err());
    }

    #[test]
    fn loss_gradient_through_branches() {
        for branches in [1, 2, 4] {
            let (model, images, oracle, z) = setup(branches, 4, 10 + branches as u64);
            let obj = Objective {
                codes: &z,
                oracle: &oracle,
                weights: LossWeights { beta: 1.0, gamma: 0.5 },
            };
            let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
            let report = grad_check(&params, 1e-6, 1e-5, |g, ids| {
                let nodes = ModelNodes::from_ids(&model.config, ids.to_vec());
                obj.total_loss(g, &model, &nodes, &[(0, &images[0]), (3, &images[3])])
            })
            .unwrap();
            assert!(report.passed(), "N={branches}: {:?}", report.per_param);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut x = Tensor::scalar(1.0);
        let mut state = OptimizerState::new([&x]);
        for _ in 0..2 {
            let grad = x.clone();
            sgd_step(&mut [&mut x], &[grad], &mut state, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((x.item().unwrap() - 0.72).abs() < 1e-15);
        assert!((state.buffers[0].item().unwrap() - 1.8).abs() < 1e-15);

        let mut y = Tensor::row_vector(&[1.0, 2.0]);
        let mut st = OptimizerState::new([&y]);
        sgd_step(&mut [&mut y], &[Tensor::row_vector(&[5.0, 5.0])], &mut st, 0.0, 0.9, 0.1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let mut fresh = OptimizerState::new([&y]);
        sgd_step(&mut [&mut y], &[Tensor::row_vector(&[1.0, -1.0])], &mut fresh, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(y.data(), &[0.5, 2.5]);
    }

    #[test]
    fn omega_sampling() {
        assert_eq!(sample_omega(10, 10, 3).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_omega(50, 7, 9).unwrap(), sample_omega(50, 7, 9).unwrap());
        assert!(sample_omega(3, 4, 0).is_err());
    }

    #[test]
    fn omega_covers_classes_proportionally() {
        let labels: Vec<usize> = (0..100).map(|i| if i < 70 { 0 } else { 1 }).collect();
        let mut hits = 0usize;
        let draws = 2000;
        for seed in 0..draws {
            hits += sample_omega(100, 10, seed).unwrap().iter().filter(|&&i| labels[i] == 0).count();
        }
        let share = hits as f64 / (draws as f64 * 10.0);
        assert!((share - 0.7).abs() < 0.01, "{share}");
    }

    fn random_instance(seed: u64) -> (DatabaseCodes, Tensor, Vec<usize>, SimilarityOracle, LossWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery = rng.gen_range(2..12);
        let k = rng.gen_range(1..9);
        let count = rng.gen_range(1..=gallery);
        let omega = sample_with(gallery, count, &mut rng).unwrap();
        let v = crate::init::uniform(count, k, 0.999, &mut rng);
        let labels = (0..gallery).map(|_| rng.gen_range(0..3)).collect();
        let weights = LossWeights {
            beta: rng.gen_range(0.0..3.0),
            gamma: rng.gen_range(0.0..3.0),
        };
        (DatabaseCodes::random(gallery, k, seed ^ 0xabc), v, omega, SimilarityOracle::new(labels), weights)
    }

    #[test]
    fn code_update_never_increases_objective() {
        for seed in 0..150 {
            let (z, v, omega, oracle, weights) = random_instance(seed);
            let before = Objective { codes: &z, oracle: &oracle, weights }.value(&v, &omega).unwrap();
            let z2 = update_database_codes(&z, &v, &omega, &oracle, weights, 10).unwrap();
            let after = Objective { codes: &z2, oracle: &oracle, weights }.value(&v, &omega).unwrap();
            assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn dominant_quantization_term_gives_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = crate::init::uniform(6, 5, 0.9, &mut rng);
        let oracle = SimilarityOracle::new(vec![0, 1, 0, 2, 1, 2]);
        let omega: Vec<usize> = (0..6).collect();
        let z = DatabaseCodes::random(6, 5, 1);
        let weights = LossWeights { beta: 1.0, gamma: 1e9 };
        let z2 = update_database_codes(&z, &v, &omega, &oracle, weights, 10).unwrap();
        for r in 0..6 {
            let signs: Vec<f64> = v.row(r).iter().map(|x| if *x >= 0.0 { 1.0 } else { -1.0 }).collect();
            assert_eq!(z2.row(r), signs.as_slice());
        }
    }

    #[test]
    fn optimal_codes_stay_put() {
        let oracle = SimilarityOracle::new(vec![0, 1]);
        let v = Tensor::matrix(2, 1, vec![0.8, -0.6]).unwrap();
        let omega = [0, 1];
        let weights = LossWeights { beta: 1.0, gamma: 1.0 };
        let mut best = None;
        for a in [-1.0, 1.0] {
            for b in [-1.0, 1.0] {
                let z = DatabaseCodes::new(Tensor::matrix(2, 1, vec![a, b]).unwrap()).unwrap();
                let f = Objective { codes: &z, oracle: &oracle, weights }.value(&v, &omega).unwrap();
                if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                    best = Some((f, z));
                }
            }
        }
        let (_, z) = best.unwrap();
        assert_eq!(z.tensor().data(), &[1.0, -1.0]);
        assert_eq!(update_database_codes(&z, &v, &omega, &oracle, weights, 10).unwrap(), z);
    }
}
