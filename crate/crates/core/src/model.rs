//! The full hashing network `H(I, Q, Θ)`: extractor, queries and decoder.

use crate::decoder::{self, AttributeQuerySet, BranchConfig, DecoderNodes, DecoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::pyramid::{self, ExtractorNodes, ExtractorParams, FeaturePyramid, PyramidGeometry};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub geometry: PyramidGeometry,
    /// Token width `d`.
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Code length `k`.
    pub bits: usize,
    /// Branch count `N` used during training.
    pub branches: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.width == 0 || self.bits == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("width, bits and ffn_hidden must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        BranchConfig::new(self.branches, self.width)?;
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.geometry.tokens()
    }

    /// Effective code length during training, `N·k`.
    pub fn train_bits(&self) -> usize {
        self.branches * self.bits
    }

    pub fn branch_config(&self) -> BranchConfig {
        BranchConfig {
            branches: self.branches,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: ExtractorParams,
    pub queries: AttributeQuerySet,
    pub decoder: DecoderParams,
    positional: Tensor,
}

/// Graph handles of every model parameter.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub extractor: ExtractorNodes,
    pub queries: NodeId,
    pub decoder: DecoderNodes,
    /// All parameter ids in [`Model::named_params`] order.
    pub ordered: Vec<NodeId>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let extractor = ExtractorParams::init(&config.geometry, config.width, config.ffn_hidden, seed);
        let queries = decoder::init_queries(config.bits, config.width, seed.wrapping_add(1))?;
        let decoder = DecoderParams::init(config.width, seed.wrapping_add(2));
        let mut model = Self::from_parts(config, extractor, queries, decoder)?;
        model.round_to_f32();
        Ok(model)
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.params_mut() {
            for x in t.data_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }

    pub fn from_parts(
        config: ModelConfig,
        extractor: ExtractorParams,
        queries: AttributeQuerySet,
        decoder: DecoderParams,
    ) -> Result<Self> {
        config.validate()?;
        extractor.check(&config.geometry, config.width, config.ffn_hidden)?;
        decoder.check(config.width)?;
        if queries.queries.shape() != [config.bits, config.width] {
            return Err(Error::Config(format!(
                "queries have shape {:?}, expected [{}, {}]",
                queries.queries.shape(),
                config.bits,
                config.width
            )));
        }
        let positional = pyramid::positional_table(config.tokens(), config.width)?;
        Ok(Model {
            config,
            extractor,
            queries,
            decoder,
            positional,
        })
    }

    /// Rebuilds a model from tensors in [`Model::named_params`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::param_count(&config);
        if tensors.len() != expected {
            return Err(Error::Invalid(format!("expected {expected} parameter tensors, got {}", tensors.len())));
        }
        let levels = config.geometry.levels.len();
        let mut it = tensors.into_iter();
        let extractor = ExtractorParams::from_tensors(levels, &mut it)?;
        let queries = AttributeQuerySet {
            queries: it.next().ok_or(Error::Invalid("missing queries".into()))?,
        };
        let decoder = DecoderParams::from_tensors(&mut it)?;
        Self::from_parts(config, extractor, queries, decoder)
    }

    pub fn param_count(config: &ModelConfig) -> usize {
        ExtractorParams::count(config.geometry.levels.len()) + 1 + 5
    }

    /// Parameters in persistence order: extractor convs, self-attention,
    /// feed-forward, queries, decoder projections, compression vector.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.extractor.named();
        out.push(("queries".into(), &self.queries.queries));
        out.extend(self.decoder.named());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.extractor.tensors_mut();
        out.push(&mut self.queries.queries);
        out.extend(self.decoder.tensors_mut());
        out
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    /// Registers the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelNodes {
        let ordered: Vec<NodeId> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        ModelNodes::from_ids(&self.config, ordered)
    }

    /// Refined tokens `x_out` and their position-augmented copy.
    pub fn tokens(&self, g: &mut Graph, nodes: &ModelNodes, image: &FeaturePyramid) -> Result<(NodeId, NodeId)> {
        image.check(&self.config.geometry)?;
        let levels: Vec<NodeId> = image.levels.iter().map(|t| g.constant(t.clone())).collect();
        let fused = pyramid::fuse_topdown(g, &levels, &self.config.geometry, &nodes.extractor)?;
        let x_in = pyramid::tokenize(g, &fused, &nodes.extractor)?;
        let x_out = pyramid::self_attend(g, x_in, self.config.heads, &nodes.extractor)?;
        let pe = g.constant(self.positional.clone());
        let x_hat = g.add(x_out, pe)?;
        Ok((x_out, x_hat))
    }

    /// Logits of every branch, `(N·k) × 1`, for `branches` branches.
    pub fn logits_node(
        &self,
        g: &mut Graph,
        nodes: &ModelNodes,
        image: &FeaturePyramid,
        branches: BranchConfig,
    ) -> Result<NodeId> {
        let (x_out, x_hat) = self.tokens(g, nodes, image)?;
        decoder::forward_train(g, nodes.queries, x_out, x_hat, &nodes.decoder, self.config.heads, branches)
    }

    /// Training-time logits over all configured branches.
    pub fn forward_train(&self, image: &FeaturePyramid) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let h = self.logits_node(&mut g, &nodes, image, self.config.branch_config())?;
        Ok(g.value(h).data().to_vec())
    }

    /// Inference logits: original queries only, `k` values.
    pub fn forward_logits(&self, image: &FeaturePyramid) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let h = self.logits_node(&mut g, &nodes, image, BranchConfig { branches: 1 })?;
        Ok(g.value(h).data().to_vec())
    }

    /// `u = sign(H(I, Q, Θ))` with `sign(0) = +1`.
    pub fn forward_infer(&self, image: &FeaturePyramid) -> Result<Vec<i8>> {
        Ok(decoder::sign_codes(&self.forward_logits(image)?))
    }

    /// Decoder attention of each original query over the tokens, averaged
    /// over heads (`k × E`).
    pub fn attention_map(&self, image: &FeaturePyramid) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let (x_out, x_hat) = self.tokens(&mut g, &nodes, image)?;
        let decoded = decoder::decode_attributes(&mut g, nodes.queries, x_out, x_hat, &nodes.decoder, self.config.heads)?;
        let mut acc = g.value(decoded.weights[0]).clone();
        for &w in &decoded.weights[1..] {
            acc.add_assign(g.value(w));
        }
        acc.scale_assign(1.0 / decoded.weights.len() as f64);
        Ok(acc)
    }
}

impl ModelNodes {
    pub fn from_ids(config: &ModelConfig, ordered: Vec<NodeId>) -> Self {
        let mut it = ordered.iter().copied();
        let extractor = ExtractorNodes::from_ids(config.geometry.levels.len(), &mut it);
        let queries = it.next().expect("query node id");
        let decoder = DecoderNodes::from_ids(&mut it);
        ModelNodes {
            extractor,
            queries,
            decoder,
            ordered,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::pyramid::LevelShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(branches: usize) -> ModelConfig {
        ModelConfig {
            geometry: PyramidGeometry::new(vec![
                LevelShape { channels: 3, width: 1, height: 1 },
                LevelShape { channels: 2, width: 2, height: 2 },
            ])
            .unwrap(),
            width: 8,
            heads: 2,
            ffn_hidden: 16,
            bits: 3,
            branches,
        }
    }

    pub(crate) fn random_image(config: &ModelConfig, seed: u64) -> FeaturePyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = config
            .geometry
            .levels
            .iter()
            .map(|l| crate::init::uniform(l.positions(), l.channels, 1.0, &mut rng))
            .collect();
        FeaturePyramid {
            image_id: seed as usize,
            levels,
        }
    }

    #[test]
    fn param_order_round_trips() {
        let m = Model::init(tiny_config(2), 3).unwrap();
        let tensors: Vec<Tensor> = m.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(tensors.len(), Model::param_count(&m.config));
        let back = Model::from_tensors(m.config.clone(), tensors).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.params_mut_len(), tensors_len(&m));
    }

    impl Model {
        fn params_mut_len(&self) -> usize {
            self.clone().params_mut().len()
        }
    }

    fn tensors_len(m: &Model) -> usize {
        m.named_params().len()
    }

    #[test]
    fn inference_ignores_branch_count() {
        let m1 = Model::init(tiny_config(1), 4).unwrap();
        let mut cfg8 = tiny_config(8);
        cfg8.branches = 8;
        let m8 = Model::from_parts(cfg8, m1.extractor.clone(), m1.queries.clone(), m1.decoder.clone()).unwrap();
        for s in 0..5 {
            let img = random_image(&m1.config, s);
            assert_eq!(m1.forward_logits(&img).unwrap(), m8.forward_logits(&img).unwrap());
            assert_eq!(m1.forward_infer(&img).unwrap(), m8.forward_infer(&img).unwrap());
        }
    }

    #[test]
    fn training_prefix_equals_inference_logits() {
        let m = Model::init(tiny_config(4), 5).unwrap();
        let img = random_image(&m.config, 9);
        let train = m.forward_train(&img).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(&train[..3], m.forward_logits(&img).unwrap().as_slice());
        let codes = m.forward_infer(&img).unwrap();
        assert!(codes.iter().all(|&b| b == 1 || b == -1));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = Model::init(tiny_config(1), 6).unwrap();
        let img = random_image(&m.config, 1);
        let a = m.attention_map(&img).unwrap();
        assert_eq!(a.shape(), &[3, 5]);
        for r in 0..3 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
