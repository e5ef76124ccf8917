use super::{ForwardCtx, Param, ParamBuilder, ParamKind};
use crate::tensor::{BatchStats, BnMode, Graph, Scalar, Tensor, TensorError, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNormLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let (gamma, beta) = pb.scope(name, |pb| {
            (
                pb.constant("gamma", ParamKind::Scale, &[channels], 1.0),
                pb.constant("beta", ParamKind::Shift, &[channels], 0.0),
            )
        });
        Self {
            channels,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, TensorError> {
        let gamma = g.param(&self.gamma.value, self.gamma.id, self.gamma.trainable);
        let beta = g.param(&self.beta.value, self.beta.id, self.beta.trainable);
        let eps = T::of_f32(self.eps);
        if ctx.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train { eps })?;
            ctx.bn_stats
                .push((self.gamma.id, stats.expect("training mode reports stats")));
            Ok(y)
        } else {
            let mean: Vec<T> = self.running_mean.iter().map(|&v| T::of_f32(v)).collect();
            let var: Vec<T> = self.running_var.iter().map(|&v| T::of_f32(v)).collect();
            let (y, _) = g.batch_norm(
                x,
                gamma,
                beta,
                BnMode::Eval {
                    mean: &mean,
                    var: &var,
                    eps,
                },
            )?;
            Ok(y)
        }
    }

    /// Folds one batch worth of statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum as f64;
        for (r, &s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = ((1.0 - m) * *r as f64 + m * s) as f32;
        }
        for (r, &s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r as f64 + m * s) as f32;
        }
    }

    /// Evaluation-mode inference.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let mut g = Graph::<f32>::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
