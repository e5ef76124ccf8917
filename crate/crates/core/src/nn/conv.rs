use super::{LayerError, Param, ParamBuilder, ParamKind};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Stride-1 grouped convolution with "same" zero padding.
///
/// Output channel `j` of group `n` only reads the `in_channels / groups`
/// input channels of group `n`; with `groups == 1` this is the ordinary
/// dense-channel convolution.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub groups: usize,
    pub padding: (usize, usize),
    /// `[out, in / groups, kh, kw]`.
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2dLayer {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Result<Self, LayerError> {
        if groups == 0
            || !in_channels.is_multiple_of(groups)
            || !out_channels.is_multiple_of(groups)
        {
            return Err(TensorError::Groups {
                op: "conv2d layer",
                channels: if groups != 0 && in_channels.is_multiple_of(groups) {
                    out_channels
                } else {
                    in_channels
                },
                groups,
            }
            .into());
        }
        if kernel.0.is_multiple_of(2) || kernel.1.is_multiple_of(2) {
            return Err(LayerError::Config(format!(
                "{name}: size-preserving padding needs odd kernel extents, got {kernel:?}"
            )));
        }
        let ipg = in_channels / groups;
        let fan_in = ipg * kernel.0 * kernel.1;
        let bound = (1.0 / fan_in as f32).sqrt();
        let (weight, bias) = pb.scope(name, |pb| {
            let w = pb.uniform(
                "weight",
                ParamKind::Weight,
                &[out_channels, ipg, kernel.0, kernel.1],
                bound,
            );
            let b = bias.then(|| pb.uniform("bias", ParamKind::Bias, &[out_channels], bound));
            (w, b)
        });
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            groups,
            padding: ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2),
            weight,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let channels = g.shape(x).get(1).copied().unwrap_or(0);
        if channels != self.in_channels {
            return Err(TensorError::Shape {
                op: "conv2d layer",
                expected: vec![self.in_channels],
                got: vec![channels],
            });
        }
        let w = g.param(&self.weight.value, self.weight.id, self.weight.trainable);
        let b = self
            .bias
            .as_ref()
            .map(|b| g.param(&b.value, b.id, b.trainable));
        g.conv2d(x, w, b, self.groups, self.padding)
    }

    /// Inference on a `[B, C, H, W]` batch.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let mut g = Graph::<f32>::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Multiply-accumulates on an `h x w` map: `(in/g) * kh * kw * out * h * w`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        ((self.in_channels / self.groups)
            * self.kernel.0
            * self.kernel.1
            * self.out_channels
            * h
            * w) as u64
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d_naive, ConvGeometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn builder(seed: u64) -> ParamBuilder {
        ParamBuilder::new(ChaCha8Rng::seed_from_u64(seed))
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_group_equals_vanilla_convolution() {
        let layer = Conv2dLayer::new(&mut builder(1), "c", 2, 2, (3, 3), 1, false).unwrap();
        let x = random_input([1, 2, 8, 8], 2);
        let fast = layer.apply(&x).unwrap();
        let geo = ConvGeometry {
            batch: 1,
            in_channels: 2,
            height: 8,
            width: 8,
            out_channels: 2,
            kernel_h: 3,
            kernel_w: 3,
            groups: 1,
            pad_h: 1,
            pad_w: 1,
        };
        let slow = conv2d_naive(&geo, x.data(), layer.weight.value.data(), None).unwrap();
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut layer = Conv2dLayer::new(&mut builder(1), "c", 6, 6, (1, 1), 6, false).unwrap();
        layer
            .weight
            .value
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 1.0);
        let x = random_input([2, 6, 5, 5], 3);
        assert_eq!(layer.apply(&x).unwrap(), x);
    }

    #[test]
    fn grouped_equals_independent_slices() {
        let layer = Conv2dLayer::new(&mut builder(4), "c", 8, 8, (3, 3), 4, true).unwrap();
        let x = random_input([2, 8, 6, 6], 5);
        let out = layer.apply(&x).unwrap();
        let plane = 36;
        for grp in 0..4 {
            let mut pb = ParamBuilder::structural();
            let mut slice = Conv2dLayer::new(&mut pb, "s", 2, 2, (3, 3), 1, true).unwrap();
            let wlen = 2 * 2 * 9;
            slice
                .weight
                .value
                .data_mut()
                .copy_from_slice(&layer.weight.value.data()[grp * wlen..(grp + 1) * wlen]);
            slice
                .bias
                .as_mut()
                .unwrap()
                .value
                .data_mut()
                .copy_from_slice(&layer.bias.as_ref().unwrap().value.data()[grp * 2..grp * 2 + 2]);
            let xs = Tensor::from_fn([2, 2, 6, 6], |i| {
                let (b, rest) = (i / (2 * plane), i % (2 * plane));
                x.data()[b * 8 * plane + grp * 2 * plane + rest]
            });
            let ys = slice.apply(&xs).unwrap();
            for b in 0..2 {
                let got = &out.data()[b * 8 * plane + grp * 2 * plane..][..2 * plane];
                let want = &ys.data()[b * 2 * plane..(b + 1) * 2 * plane];
                for (a, e) in got.iter().zip(want) {
                    assert!((a - e).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zeroing_other_groups_leaves_group_untouched() {
        let layer = Conv2dLayer::new(&mut builder(7), "c", 8, 4, (3, 3), 4, false).unwrap();
        let x = random_input([1, 8, 5, 5], 8);
        let base = layer.apply(&x).unwrap();
        let mut masked = x.clone();
        // keep only group 1 (input channels 2, 3)
        for (i, v) in masked.data_mut().iter_mut().enumerate() {
            let c = i / 25;
            if c != 2 && c != 3 {
                *v = 0.0;
            }
        }
        let out = layer.apply(&masked).unwrap();
        assert_eq!(&out.data()[25..50], &base.data()[25..50]);
    }

    #[test]
    fn divisibility_is_enforced() {
        let err = Conv2dLayer::new(&mut builder(0), "c", 6, 4, (3, 3), 4, false).unwrap_err();
        assert!(matches!(
            err,
            LayerError::Tensor(TensorError::Groups { .. })
        ));
    }

    #[test]
    fn flops_of_group_conv_equal_sum_of_parts() {
        let mut pb = ParamBuilder::structural();
        let grouped = Conv2dLayer::new(&mut pb, "g", 80, 80, (7, 7), 40, false).unwrap();
        let part = Conv2dLayer::new(&mut pb, "p", 2, 2, (7, 7), 1, false).unwrap();
        assert_eq!(grouped.flops(32, 32), 40 * part.flops(32, 32));
        assert_eq!(part.flops(32, 32), 200_704);
    }
}
