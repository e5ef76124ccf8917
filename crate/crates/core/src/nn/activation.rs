use super::{Param, ParamBuilder, ParamKind, DEFAULT_NEGATIVE_SLOPE};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Activation following a convolution + batch norm pair.
#[derive(Debug, Clone)]
pub enum ActivationLayer {
    Relu,
    /// Fixed negative slope.
    LRelu(f32),
    /// One learnable slope per channel.
    PRelu(Param),
    /// A single learnable slope shared by the whole layer.
    SPRelu(Param),
}

impl ActivationLayer {
    pub fn prelu(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self::PRelu(pb.scope(name, |pb| {
            pb.constant(
                "alpha",
                ParamKind::Slope,
                &[channels],
                DEFAULT_NEGATIVE_SLOPE,
            )
        }))
    }

    pub fn sprelu(pb: &mut ParamBuilder, name: &str) -> Self {
        Self::SPRelu(pb.scope(name, |pb| {
            pb.constant("alpha", ParamKind::Slope, &[1], DEFAULT_NEGATIVE_SLOPE)
        }))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        match self {
            Self::Relu => Ok(g.relu(x)),
            Self::LRelu(c) => Ok(g.leaky_relu(x, T::of_f32(*c))),
            Self::PRelu(a) | Self::SPRelu(a) => {
                let alpha = g.param(&a.value, a.id, a.trainable);
                g.prelu(x, alpha)
            }
        }
    }

    pub fn slopes(&self) -> Option<&Param> {
        match self {
            Self::PRelu(a) | Self::SPRelu(a) => Some(a),
            _ => None,
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(a) = self.slopes() {
            f(a);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Self::PRelu(a) | Self::SPRelu(a) = self {
            f(a);
        }
    }
}

fn unary(
    x: &Tensor<f32>,
    op: impl FnOnce(&mut Graph<f32>, Var) -> Result<Var, TensorError>,
) -> Result<Tensor<f32>, TensorError> {
    let mut g = Graph::<f32>::new();
    let v = g.input(x.clone());
    let y = op(&mut g, v)?;
    Ok(g.value(y).clone())
}

/// Channel-wise PReLU on a `[B, C, ...]` tensor (or a shared slope when
/// `alphas` has one element).
pub fn prelu_forward(x: &Tensor<f32>, alphas: &[f32]) -> Result<Tensor<f32>, TensorError> {
    let a = Tensor::new([alphas.len()], alphas.to_vec())?;
    unary(x, |g, v| {
        let alpha = g.input(a);
        g.prelu(v, alpha)
    })
}

pub fn lrelu_forward(x: &Tensor<f32>, slope: f32) -> Tensor<f32> {
    unary(x, |g, v| Ok(g.leaky_relu(v, slope))).expect("elementwise op")
}

pub fn relu_forward(x: &Tensor<f32>) -> Tensor<f32> {
    unary(x, |g, v| Ok(g.relu(v))).expect("elementwise op")
}

pub fn sigmoid_forward(x: &Tensor<f32>) -> Tensor<f32> {
    unary(x, |g, v| Ok(g.sigmoid(v))).expect("elementwise op")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_batch(v: f32) -> Tensor<f32> {
        Tensor::new([1, 1], vec![v]).unwrap()
    }

    #[test]
    fn closed_forms() {
        assert_eq!(
            prelu_forward(&scalar_batch(-2.0), &[0.3]).unwrap().data()[0],
            -0.6
        );
        assert_eq!(
            prelu_forward(&scalar_batch(3.0), &[0.7]).unwrap().data()[0],
            3.0
        );
        assert_eq!(relu_forward(&scalar_batch(-5.0)).data()[0], 0.0);
        assert_eq!(lrelu_forward(&scalar_batch(-1.0), 0.3).data()[0], -0.3);
        assert_eq!(sigmoid_forward(&scalar_batch(0.0)).data()[0], 0.5);
    }

    #[test]
    fn slope_count_must_match_channels() {
        let x = Tensor::zeros([2, 3, 4]);
        assert!(prelu_forward(&x, &[0.1, 0.2]).is_err());
        assert!(prelu_forward(&x, &[0.1, 0.2, 0.3]).is_ok());
        assert!(prelu_forward(&x, &[0.1]).is_ok());
    }

    #[test]
    fn prelu_uses_the_slope_of_each_channel() {
        let x = Tensor::new([1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = prelu_forward(&x, &[0.1, 0.5]).unwrap();
        assert_eq!(y.data(), &[-0.1, 1.0, -0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn prelu_degenerates_to_relu_and_lrelu(data in proptest::collection::vec(-10.0f32..10.0, 24)) {
            let x = Tensor::new([2, 3, 4], data).unwrap();
            prop_assert_eq!(prelu_forward(&x, &[0.0; 3]).unwrap(), relu_forward(&x));
            prop_assert_eq!(
                prelu_forward(&x, &[DEFAULT_NEGATIVE_SLOPE; 3]).unwrap(),
                lrelu_forward(&x, DEFAULT_NEGATIVE_SLOPE)
            );
        }

        #[test]
        fn sigmoid_stays_inside_unit_interval(v in -15.0f32..15.0) {
            let y = sigmoid_forward(&scalar_batch(v)).data()[0];
            prop_assert!(y > 0.0 && y < 1.0);
        }
    }
}
