use super::{LayerError, Param, ParamBuilder, ParamKind};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Fully connected layer, optionally binarized.
///
/// A binarized layer keeps its full-precision weights as latent values. The
/// forward pass uses `alpha_r * sign(latent)` where `alpha_r` is the mean
/// absolute latent weight of output row `r`; gradients reach the latent
/// weights through a straight-through estimator clipped at `|latent| <= 1`.
/// Biases stay full precision.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out, in]`; latent weights when binarized.
    pub weight: Param,
    pub bias: Param,
    binarized: bool,
}

impl DenseLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = (1.0 / in_dim as f32).sqrt();
        let (weight, bias) = pb.scope(name, |pb| {
            (
                pb.uniform("weight", ParamKind::Weight, &[out_dim, in_dim], bound),
                pb.uniform("bias", ParamKind::Bias, &[out_dim], bound),
            )
        });
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
            binarized: false,
        }
    }

    pub fn is_binarized(&self) -> bool {
        self.binarized
    }

    /// Switches the layer to sign-binarized weights.
    pub fn binarize(mut self) -> Result<Self, LayerError> {
        if self.binarized {
            return Err(LayerError::AlreadyBinarized);
        }
        self.binarized = true;
        Ok(self)
    }

    /// Weights actually used by the forward pass.
    pub fn effective_weight(&self) -> Tensor<f32> {
        if !self.binarized {
            return self.weight.value.clone();
        }
        let mut g = Graph::<f32>::new();
        let w = g.input(self.weight.value.clone());
        let b = g.sign_rows(w).expect("dense weight is rank 2");
        g.value(b).clone()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let mut w = g.param(&self.weight.value, self.weight.id, self.weight.trainable);
        if self.binarized {
            w = g.sign_rows(w)?;
        }
        let b = g.param(&self.bias.value, self.bias.id, self.bias.trainable);
        g.dense(x, w, Some(b))
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let mut g = Graph::<f32>::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn flops(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }

    /// Storage in bits: 1 bit per weight when binarized, 32 otherwise, plus
    /// full-precision biases.
    pub fn param_bits(&self) -> u64 {
        let per_weight = if self.binarized { 1 } else { 32 };
        (self.in_dim * self.out_dim) as u64 * per_weight + 32 * self.out_dim as u64
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(in_dim: usize, out_dim: usize, rows: &[&[f32]]) -> DenseLayer {
        let mut l = DenseLayer::new(&mut ParamBuilder::structural(), "fc", in_dim, out_dim);
        let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        l.weight.value.data_mut().copy_from_slice(&flat);
        l
    }

    #[test]
    fn binarized_row_uses_mean_abs_scale() {
        let l = layer(3, 1, &[&[0.5, -0.25, 0.25]]).binarize().unwrap();
        let w = l.effective_weight();
        let third = 1.0f32 / 3.0;
        assert_eq!(w.data(), &[third, -third, third]);
    }

    #[test]
    fn constant_positive_row_is_unchanged() {
        let c = 0.37f32;
        let l = layer(3, 1, &[&[c, c, c]]).binarize().unwrap();
        for v in l.effective_weight().data() {
            assert!((v - c).abs() < 1e-7);
        }
    }

    #[test]
    fn all_zero_row_gets_tiny_scale() {
        let l = layer(2, 1, &[&[0.0, 0.0]]).binarize().unwrap();
        assert_eq!(l.effective_weight().data(), &[1e-8, 1e-8]);
    }

    #[test]
    fn double_binarization_rejected() {
        let l = layer(2, 1, &[&[1.0, 2.0]]).binarize().unwrap();
        assert_eq!(l.binarize().unwrap_err(), LayerError::AlreadyBinarized);
    }

    #[test]
    fn binarized_rows_have_uniform_magnitude_and_latent_signs() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(3));
        let l = DenseLayer::new(&mut pb, "fc", 40, 7).binarize().unwrap();
        let eff = l.effective_weight();
        for (row, latent) in eff.data().chunks(40).zip(l.weight.value.data().chunks(40)) {
            let mag = row[0].abs();
            for (e, w) in row.iter().zip(latent) {
                assert_eq!(e.abs(), mag);
                assert_eq!(*e >= 0.0, *w >= 0.0);
            }
        }
    }

    #[test]
    fn binary_storage_is_one_thirty_second() {
        let l = DenseLayer::new(&mut ParamBuilder::structural(), "fc", 2048, 512);
        let full = l.param_bits();
        let bin = l.binarize().unwrap().param_bits();
        assert_eq!(full - 32 * 512, 32 * 2048 * 512);
        // 2048 x 512 one-bit weights fill 32768 32-bit words
        assert_eq!((bin - 32 * 512) / 32, 32_768);
    }

    #[test]
    fn ste_gradient_matches_effective_weight_gradient_inside_clip() {
        let l = layer(3, 2, &[&[0.5, -0.25, 2.0], &[-0.1, 0.3, -1.5]])
            .binarize()
            .unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new([1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let latent = g.param(&l.weight.value, 0, true);
        let eff = g.sign_rows(latent).unwrap();
        let eff_leaf = g.leaf(g.value(eff).clone(), true);
        let y1 = g.dense(x, eff, None).unwrap();
        let y2 = g.dense(x, eff_leaf, None).unwrap();
        let s1 = g.sum(y1);
        let s2 = g.sum(y2);
        g.backward(s1).unwrap();
        g.backward(s2).unwrap();
        let gl = g.grad(latent).unwrap();
        let ge = g.grad(eff_leaf).unwrap();
        for ((a, e), w) in gl.iter().zip(ge).zip(l.weight.value.data()) {
            if w.abs() <= 1.0 {
                assert_eq!(a, e);
            } else {
                assert_eq!(*a, 0.0);
            }
        }
    }
}
