//! Elastic ACRNet: encoder at the UE, aggregated decoder at the BS.

mod blocks;
mod config;

pub use blocks::{ConvUnit, DecoderBlock, EncoderBlock};
pub use config::{ActivationKind, Eta, ModelConfig};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::nn::{BatchNormLayer, DenseLayer, ForwardCtx, LayerError, Param, ParamBuilder};
use crate::tensor::{BatchStats, Graph, Scalar, Tensor, TensorError, Var};

pub const ENCODER_BLOCKS: usize = 2;
pub const DECODER_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected input of shape {expected:?}, got {got:?}")]
    Shape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub head: ConvUnit,
    pub blocks: Vec<EncoderBlock>,
    pub fc: DenseLayer,
    /// Squash features into (0, 1) ahead of the quantizer.
    pub output_sigmoid: bool,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub fc: DenseLayer,
    pub head: ConvUnit,
    pub blocks: Vec<DecoderBlock>,
}

#[derive(Debug, Clone)]
pub struct AcrNet {
    config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl AcrNet {
    /// Randomly initialized model.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build_with(
            config,
            &mut ParamBuilder::new(ChaCha8Rng::seed_from_u64(seed)),
        )
    }

    /// Zero-initialized model, enough for complexity accounting.
    pub fn structural(config: &ModelConfig) -> Result<Self, ModelError> {
        Self::build_with(config, &mut ParamBuilder::structural())
    }

    fn build_with(config: &ModelConfig, pb: &mut ParamBuilder) -> Result<Self, ModelError> {
        config.validate()?;
        let act = config.activation;
        let fd = config.feature_dim()?;
        let flat = config.input_len();
        let encoder = pb.scope("encoder", |pb| -> Result<Encoder, ModelError> {
            let head = ConvUnit::new(pb, "head", 2, (5, 5), 1, act)?;
            let blocks = (0..ENCODER_BLOCKS)
                .map(|i| EncoderBlock::new(pb, &format!("block{i}"), act))
                .collect::<Result<_, _>>()?;
            let mut fc = DenseLayer::new(pb, "fc", flat, fd);
            if config.binarize_encoder_fc {
                fc = fc.binarize()?;
            }
            Ok(Encoder {
                head,
                blocks,
                fc,
                output_sigmoid: config.quant_bits.is_some(),
            })
        })?;
        let decoder = pb.scope("decoder", |pb| -> Result<Decoder, ModelError> {
            let mut fc = DenseLayer::new(pb, "fc", fd, flat);
            if config.binarize_decoder_fc {
                fc = fc.binarize()?;
            }
            let head = ConvUnit::new(pb, "head", 2, (5, 5), 1, act)?;
            let blocks = (0..DECODER_BLOCKS)
                .map(|i| DecoderBlock::new(pb, &format!("block{i}"), config.group_factor(), act))
                .collect::<Result<_, _>>()?;
            Ok(Decoder { fc, head, blocks })
        })?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.fc.out_dim
    }

    fn sample_shape(&self) -> [usize; 3] {
        [2, self.config.na, self.config.nt]
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize, ModelError> {
        let s = self.sample_shape();
        if shape.len() != 4 || shape[1..] != s {
            return Err(ModelError::Shape {
                expected: vec![shape.first().copied().unwrap_or(1), s[0], s[1], s[2]],
                got: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// `[B, 2, na, nt] -> [B, feature_dim]`.
    pub fn encode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let batch = self.check_batch(g.shape(x))?;
        let enc = &self.encoder;
        let mut y = enc.head.forward(g, x, ctx)?;
        for b in &enc.blocks {
            y = b.forward(g, y, ctx)?;
        }
        let y = g.reshape(y, &[batch, self.config.input_len()])?;
        let mut v = enc.fc.forward(g, y)?;
        if enc.output_sigmoid {
            v = g.sigmoid(v);
        }
        Ok(v)
    }

    /// `[B, feature_dim] -> [B, 2, na, nt]`, squashed into (0, 1).
    pub fn decode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        v: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let shape = g.shape(v).to_vec();
        if shape.len() != 2 || shape[1] != self.feature_dim() {
            return Err(ModelError::Shape {
                expected: vec![shape.first().copied().unwrap_or(1), self.feature_dim()],
                got: shape,
            });
        }
        let [c, h, w] = self.sample_shape();
        let dec = &self.decoder;
        let y = dec.fc.forward(g, v)?;
        let mut y = g.reshape(y, &[shape[0], c, h, w])?;
        y = dec.head.forward(g, y, ctx)?;
        for b in &dec.blocks {
            y = b.forward(g, y, ctx)?;
        }
        Ok(g.sigmoid(y))
    }

    /// Full autoencoder pass; the quantizer, when configured, sits between
    /// encoder and decoder with a straight-through gradient.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let mut v = self.encode_graph(g, x, ctx)?;
        if let Some(bits) = self.config.quant_bits {
            v = codec::ste_quantize(g, v, bits)?;
        }
        self.decode_graph(g, v, ctx)
    }

    /// Inference-mode encoding of a `[B, 2, na, nt]` batch.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let mut g = Graph::<f32>::new();
        let xv = g.input(x.clone());
        let v = self.encode_graph(&mut g, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(v).clone())
    }

    /// Inference-mode decoding of a `[B, feature_dim]` batch.
    pub fn decode(&self, v: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let mut g = Graph::<f32>::new();
        let vv = g.input(v.clone());
        let y = self.decode_graph(&mut g, vv, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }

    /// Encode, quantize/dequantize when configured, decode.
    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.reconstruct_with(x, self.config.quant_bits)
    }

    /// As [`AcrNet::reconstruct`] with an explicit quantizer setting.
    pub fn reconstruct_with(
        &self,
        x: &Tensor<f32>,
        bits: Option<u8>,
    ) -> Result<Tensor<f32>, ModelError> {
        let mut v = self.encode(x)?;
        if let Some(bits) = bits {
            let deq = codec::dequantize(&codec::quantize(v.data(), bits)?, bits)?;
            v.data_mut().copy_from_slice(&deq);
        }
        self.decode(&v)
    }

    pub fn visit_encoder_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        let enc = &self.encoder;
        enc.head.visit_params(f);
        for b in &enc.blocks {
            b.units().into_iter().for_each(|u| u.visit_params(f));
        }
        enc.fc.visit_params(f);
    }

    pub fn visit_decoder_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        let dec = &self.decoder;
        dec.fc.visit_params(f);
        dec.head.visit_params(f);
        for b in &dec.blocks {
            b.units().into_iter().for_each(|u| u.visit_params(f));
        }
    }

    /// Every parameter in id order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.visit_encoder_params(f);
        self.visit_decoder_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        let enc = &mut self.encoder;
        enc.head.visit_params_mut(f);
        for b in &mut enc.blocks {
            b.units_mut()
                .into_iter()
                .for_each(|u| u.visit_params_mut(f));
        }
        enc.fc.visit_params_mut(f);
        let dec = &mut self.decoder;
        dec.fc.visit_params_mut(f);
        dec.head.visit_params_mut(f);
        for b in &mut dec.blocks {
            b.units_mut()
                .into_iter()
                .for_each(|u| u.visit_params_mut(f));
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    /// Number of learnable scalars (full precision, no binarization
    /// discount).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn visit_bn<'a>(&'a self, f: &mut dyn FnMut(&'a BatchNormLayer)) {
        f(&self.encoder.head.bn);
        for b in &self.encoder.blocks {
            b.units().into_iter().for_each(|u| f(&u.bn));
        }
        f(&self.decoder.head.bn);
        for b in &self.decoder.blocks {
            b.units().into_iter().for_each(|u| f(&u.bn));
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNormLayer)) {
        f(&mut self.encoder.head.bn);
        for b in &mut self.encoder.blocks {
            b.units_mut().into_iter().for_each(|u| f(&mut u.bn));
        }
        f(&mut self.decoder.head.bn);
        for b in &mut self.decoder.blocks {
            b.units_mut().into_iter().for_each(|u| f(&mut u.bn));
        }
    }

    /// Adds the parameter gradients reached by `g.backward` into each
    /// parameter's accumulator.
    pub fn accumulate_grads<T: Scalar>(&mut self, g: &Graph<T>) {
        let grads: HashMap<usize, &[T]> = g.param_grads().collect();
        self.visit_params_mut(&mut |p| {
            if let Some(src) = grads.get(&p.id) {
                for (d, &s) in p.grad.data_mut().iter_mut().zip(src.iter()) {
                    *d += s.as_f32();
                }
            }
        });
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let by_id: HashMap<usize, &BatchStats> = stats.iter().map(|(id, s)| (*id, s)).collect();
        self.visit_bn_mut(&mut |bn| {
            if let Some(s) = by_id.get(&bn.gamma.id) {
                bn.update_running(s);
            }
        });
    }

    /// Freezes or unfreezes every learnable activation slope.
    pub fn set_slopes_trainable(&mut self, trainable: bool) {
        self.visit_params_mut(&mut |p| {
            if p.kind == crate::nn::ParamKind::Slope {
                p.trainable = trainable;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{prelu_forward, BatchNormLayer, Conv2dLayer};
    use rand::Rng;

    fn small(k: usize) -> ModelConfig {
        ModelConfig {
            na: 8,
            nt: 8,
            ..ModelConfig::new(k, Eta::QUARTER)
        }
    }

    fn random_batch(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_input_is_finite_and_decode_in_unit_interval() {
        let m = AcrNet::build(&ModelConfig::default(), 1).unwrap();
        let v = m.encode(&Tensor::zeros([1, 2, 32, 32])).unwrap();
        assert_eq!(v.shape(), &[1, 512]);
        assert!(v.all_finite());
        let h = m.decode(&Tensor::zeros([1, 512])).unwrap();
        assert!(h.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn encode_is_deterministic_and_sensitive() {
        let m = AcrNet::build(&small(1), 3).unwrap();
        let x = random_batch([1, 2, 8, 8], 4);
        let a = m.encode(&x).unwrap();
        assert_eq!(a, m.encode(&x).unwrap());
        let mut y = x.clone();
        y.data_mut()[37] += 0.5;
        assert_ne!(a, m.encode(&y).unwrap());
    }

    #[test]
    fn quantizing_model_emits_unit_interval_features() {
        let cfg = ModelConfig {
            quant_bits: Some(4),
            ..small(1)
        };
        let m = AcrNet::build(&cfg, 5).unwrap();
        let v = m.encode(&random_batch([3, 2, 8, 8], 6)).unwrap();
        assert!(v.data().iter().all(|&x| x > 0.0 && x < 1.0));
        let r = m.reconstruct(&random_batch([3, 2, 8, 8], 6)).unwrap();
        assert_eq!(r.shape(), &[3, 2, 8, 8]);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let m = AcrNet::build(&small(1), 0).unwrap();
        assert!(matches!(
            m.encode(&Tensor::zeros([1, 2, 8, 9])),
            Err(ModelError::Shape { .. })
        ));
        assert!(matches!(
            m.decode(&Tensor::zeros([1, 31])),
            Err(ModelError::Shape { .. })
        ));
    }

    #[test]
    fn encoder_does_not_depend_on_expansion() {
        let count = |k| {
            let m = AcrNet::structural(&ModelConfig::new(k, Eta::QUARTER)).unwrap();
            let mut n = 0;
            m.visit_encoder_params(&mut |p| n += p.len());
            n
        };
        assert_eq!(count(1), count(7));
    }

    #[test]
    fn parameter_ids_are_dense_and_ordered() {
        let m = AcrNet::structural(&small(2)).unwrap();
        let ids: Vec<usize> = m.params().iter().map(|p| p.id).collect();
        assert_eq!(ids, (0..ids.len()).collect::<Vec<_>>());
    }

    fn zero_weights(unit: &mut ConvUnit) {
        unit.conv
            .weight
            .value
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 0.0);
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let mut m = AcrNet::build(&small(2), 9).unwrap();
        let mut dec = m.decoder.blocks.remove(0);
        dec.units_mut().into_iter().for_each(zero_weights);
        let mut enc = m.encoder.blocks.remove(0);
        enc.units_mut().into_iter().for_each(zero_weights);
        let x = random_batch([2, 2, 8, 8], 10);
        let mut g = Graph::<f32>::new();
        let xv = g.input(x.clone());
        let yd = dec.forward(&mut g, xv, &mut ForwardCtx::eval()).unwrap();
        let ye = enc.forward(&mut g, xv, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(g.value(yd), &x);
        assert_eq!(g.value(ye), &x);
    }

    /// One branch of the aggregated block built from slices of the grouped
    /// weights, evaluated layer by layer with plain convolution.
    fn branch(block: &DecoderBlock, n: usize, x: &Tensor<f32>) -> Tensor<f32> {
        let mut y = x.clone();
        for unit in block.units() {
            let mut pb = ParamBuilder::structural();
            let (kh, kw) = unit.conv.kernel;
            let mut conv = Conv2dLayer::new(&mut pb, "c", 2, 2, (kh, kw), 1, false).unwrap();
            let wl = 4 * kh * kw;
            conv.weight
                .value
                .data_mut()
                .copy_from_slice(&unit.conv.weight.value.data()[n * wl..(n + 1) * wl]);
            let mut bn = BatchNormLayer::new(&mut pb, "bn", 2);
            let sl = n * 2..n * 2 + 2;
            bn.gamma
                .value
                .data_mut()
                .copy_from_slice(&unit.bn.gamma.value.data()[sl.clone()]);
            bn.beta
                .value
                .data_mut()
                .copy_from_slice(&unit.bn.beta.value.data()[sl.clone()]);
            bn.running_mean
                .copy_from_slice(&unit.bn.running_mean[sl.clone()]);
            bn.running_var
                .copy_from_slice(&unit.bn.running_var[sl.clone()]);
            let alphas = &unit.act.slopes().unwrap().value.data()[sl];
            y = conv.apply(&y).unwrap();
            y = bn.apply(&y).unwrap();
            y = prelu_forward(&y, alphas).unwrap();
        }
        y
    }

    #[test]
    fn grouped_block_matches_parallel_branches() {
        let mut m = AcrNet::build(&small(2), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        m.visit_bn_mut(&mut |bn| {
            for i in 0..bn.channels {
                bn.running_mean[i] = rng.random_range(-0.2..0.2);
                bn.running_var[i] = rng.random_range(0.5..2.0);
                bn.gamma.value.data_mut()[i] = rng.random_range(0.5..1.5);
                bn.beta.value.data_mut()[i] = rng.random_range(-0.2..0.2);
            }
        });
        m.visit_params_mut(&mut |p| {
            if p.kind == crate::nn::ParamKind::Slope {
                p.value
                    .data_mut()
                    .iter_mut()
                    .for_each(|a| *a = rng.random_range(0.0..0.6));
            }
        });
        let block = &m.decoder.blocks[1];
        let x = random_batch([2, 2, 8, 8], 13);
        let mut g = Graph::<f32>::new();
        let xv = g.input(x.clone());
        let y = block.forward(&mut g, xv, &mut ForwardCtx::eval()).unwrap();
        let mut expect = x.clone();
        for n in 0..block.groups {
            let b = branch(block, n, &x);
            for (e, v) in expect.data_mut().iter_mut().zip(b.data()) {
                *e += v;
            }
        }
        for (a, e) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn grads_route_back_by_id() {
        let mut m = AcrNet::build(&small(1), 2).unwrap();
        let x = random_batch([2, 2, 8, 8], 3);
        let mut g = Graph::<f32>::new();
        let xv = g.input(x.clone());
        let mut ctx = ForwardCtx::train();
        let y = m.forward(&mut g, xv, &mut ctx).unwrap();
        let t = g.input(x);
        let loss = g.mse_loss(y, t).unwrap();
        g.backward(loss).unwrap();
        m.accumulate_grads(&g);
        let nonzero = m
            .params()
            .iter()
            .filter(|p| p.grad.data().iter().any(|&v| v != 0.0))
            .count();
        assert!(nonzero > m.params().len() / 2);
        assert_eq!(ctx.bn_stats.len(), 1 + 2 * 2 + 1 + 2 * 3);
        m.apply_bn_stats(&ctx.bn_stats);
        assert_ne!(m.encoder.head.bn.running_mean, vec![0.0, 0.0]);
        m.zero_grads();
        assert!(m
            .params()
            .iter()
            .all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn binarization_flags_reach_the_fc_layers() {
        let cfg = ModelConfig {
            binarize_encoder_fc: true,
            ..small(1)
        };
        let m = AcrNet::structural(&cfg).unwrap();
        assert!(m.encoder.fc.is_binarized());
        assert!(!m.decoder.fc.is_binarized());
    }
}
