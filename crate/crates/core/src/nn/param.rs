use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale.
    Scale,
    /// Batch-norm shift.
    Shift,
    /// Learnable negative slope of a PReLU.
    Slope,
}

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: usize,
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Hands out sequential parameter ids and initial values.
///
/// Without an RNG every "random" tensor is zero-filled, which is enough for
/// structural uses such as complexity accounting.
pub struct ParamBuilder {
    rng: Option<ChaCha8Rng>,
    next_id: usize,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            next_id: 0,
            prefix: Vec::new(),
        }
    }

    pub fn structural() -> Self {
        Self {
            rng: None,
            next_id: 0,
            prefix: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.next_id
    }

    /// Runs `f` with `name` appended to the naming scope.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn make(&mut self, name: &str, kind: ParamKind, value: Tensor<f32>) -> Param {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let grad = Tensor::zeros(value.shape().to_vec());
        let id = self.next_id;
        self.next_id += 1;
        Param {
            id,
            name: full,
            kind,
            value,
            grad,
            trainable: true,
        }
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, name: &str, kind: ParamKind, shape: &[usize], bound: f32) -> Param {
        let value = match self.rng.as_mut() {
            Some(rng) => Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound)),
            None => Tensor::zeros(shape.to_vec()),
        };
        self.make(name, kind, value)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, shape: &[usize], v: f32) -> Param {
        self.make(name, kind, Tensor::full(shape.to_vec(), v))
    }
}
