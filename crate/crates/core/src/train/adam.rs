use crate::model::AcrNet;

/// Adam with bias correction. Moment buffers are indexed by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &AcrNet, beta1: f64, beta2: f64) -> Self {
        let params = model.params();
        let mut m = vec![Vec::new(); params.len()];
        for p in &params {
            m[p.id] = vec![0.0; p.len()];
        }
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update from the gradients accumulated in `model`. Frozen
    /// parameters are skipped.
    pub fn update(&mut self, model: &mut AcrNet, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let eps = self.eps;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let (m, v) = (&mut ms[p.id], &mut vs[p.id]);
            let grads = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *w = (*w as f64 - step) as f32;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Eta, ModelConfig};

    fn tiny() -> AcrNet {
        AcrNet::build(
            &ModelConfig {
                na: 4,
                nt: 4,
                ..ModelConfig::new(1, Eta::QUARTER)
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut model = tiny();
        model.visit_params_mut(&mut |p| {
            p.grad.data_mut().iter_mut().enumerate().for_each(|(i, g)| {
                *g = if i % 2 == 0 { 0.5 } else { -2.0 };
            })
        });
        let before = model.clone();
        let mut adam = Adam::new(&model, 0.9, 0.999);
        adam.update(&mut model, 1e-3);
        let after = model.params();
        for (p, q) in before.params().iter().zip(after) {
            for (i, (a, b)) in p.value.data().iter().zip(q.value.data()).enumerate() {
                let expect = if i % 2 == 0 { -1e-3 } else { 1e-3 };
                assert!(((b - a) as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut model = tiny();
        model.visit_params_mut(&mut |p| p.grad.data_mut().iter_mut().for_each(|g| *g = 1.0));
        let before = model.clone();
        Adam::new(&model, 0.9, 0.999).update(&mut model, 0.0);
        for (p, q) in before.params().iter().zip(model.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut model = tiny();
        model.set_slopes_trainable(false);
        model.visit_params_mut(&mut |p| p.grad.data_mut().iter_mut().for_each(|g| *g = 1.0));
        let before = model.clone();
        Adam::new(&model, 0.9, 0.999).update(&mut model, 1e-2);
        for (p, q) in before.params().iter().zip(model.params()) {
            assert_eq!(p.value == q.value, !p.trainable);
        }
    }
}
