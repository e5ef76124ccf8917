//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Upper bound on sampled coordinates per leaf; `None` checks all.
    pub max_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_per_leaf: None,
            seed: 0,
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Relative deviation per checked coordinate, in visiting order.
    pub deviations: Vec<f64>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.deviations.len()
    }

    /// Largest deviation; 0 when nothing was checked.
    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().copied().fold(0.0, f64::max)
    }

    /// Share of coordinates whose deviation is below `tol` (1 when empty).
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.deviations.is_empty() {
            return 1.0;
        }
        self.deviations.iter().filter(|&&d| d < tol).count() as f64 / self.deviations.len() as f64
    }

    pub fn push(&mut self, analytic: f64, numeric: f64) {
        self.deviations.push(relative_deviation(analytic, numeric));
    }
}

/// Picks the coordinates of a tensor with `len` elements to probe.
pub fn sample_coordinates(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut idx = sample(rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks a scalar function of `leaves` built by `build`.
///
/// Leaves flagged `true` in `trainable` are differentiated; `skip(leaf, i)`
/// excludes individual coordinates (e.g. points sitting on an activation
/// kink). The graph is rebuilt from scratch for every probe.
pub fn grad_check<F>(
    leaves: &mut [(Tensor<f64>, bool)],
    mut build: F,
    config: GradCheckConfig,
    skip: impl Fn(usize, usize) -> bool,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::<f64>::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|(t, rg)| graph.leaf(t.clone(), *rg))
        .collect();
    let loss = build(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| graph.grad(v).map(<[f64]>::to_vec))
        .collect();

    let mut eval = |leaves: &[(Tensor<f64>, bool)]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = leaves
            .iter()
            .map(|(t, rg)| g.leaf(t.clone(), *rg))
            .collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    for li in 0..leaves.len() {
        if !leaves[li].1 {
            continue;
        }
        let coords = sample_coordinates(leaves[li].0.len(), config.max_per_leaf, &mut rng);
        for i in coords {
            if skip(li, i) {
                continue;
            }
            let orig = leaves[li].0.data()[i];
            leaves[li].0.data_mut()[i] = orig + config.epsilon;
            let up = eval(leaves)?;
            leaves[li].0.data_mut()[i] = orig - config.epsilon;
            let down = eval(leaves)?;
            leaves[li].0.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * config.epsilon);
            let a = analytic[li].as_ref().map_or(0.0, |g| g[i]);
            report.push(a, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut leaves = vec![
            (random(&[5, 4], &mut rng), true),
            (random(&[3, 4], &mut rng), true),
            (random(&[3], &mut rng), true),
            (random(&[5, 3], &mut rng), false),
        ];
        let report = grad_check(
            &mut leaves,
            |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                let s = g.sigmoid(y);
                g.mse_loss(s, v[3])
            },
            GradCheckConfig::default(),
            |_, _| false,
        )
        .unwrap();
        assert_eq!(report.checked(), 20 + 12 + 3);
        assert!(report.max_deviation() < 1e-4, "{}", report.max_deviation());
    }

    #[test]
    fn frozen_graph_is_vacuous() {
        let mut leaves = vec![(Tensor::<f64>::full([3], 0.5), false)];
        let report = grad_check(
            &mut leaves,
            |g, v| Ok(g.sum(v[0])),
            GradCheckConfig::default(),
            |_, _| false,
        )
        .unwrap();
        assert_eq!(report.checked(), 0);
        assert_eq!(report.max_deviation(), 0.0);
    }

    #[test]
    fn prelu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random(&[2, 3, 4], &mut rng);
        x.data_mut()[0] = 0.0;
        x.data_mut()[7] = 0.0;
        let zeros: Vec<usize> = (0..x.len()).filter(|&i| x.data()[i] == 0.0).collect();
        let mut leaves = vec![
            (x, true),
            (Tensor::from_fn([3], |i| 0.1 + 0.2 * i as f64), true),
            (random(&[2, 3, 4], &mut rng), false),
        ];
        let report = grad_check(
            &mut leaves,
            |g, v| {
                let y = g.prelu(v[0], v[1])?;
                g.mse_loss(y, v[2])
            },
            GradCheckConfig::default(),
            |leaf, i| leaf == 0 && zeros.contains(&i),
        )
        .unwrap();
        assert_eq!(report.checked(), 24 - 2 + 3);
        assert!(report.max_deviation() < 1e-4);
    }

    #[test]
    fn conv_and_batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut leaves = vec![
            (random(&[3, 4, 5, 5], &mut rng), true),
            (random(&[4, 2, 3, 3], &mut rng), true),
            (random(&[4], &mut rng), true),
            (random(&[4], &mut rng), true),
            (random(&[3, 4, 5, 5], &mut rng), false),
        ];
        let report = grad_check(
            &mut leaves,
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, (1, 1))?;
                let (y, _) =
                    g.batch_norm(y, v[2], v[3], super::super::BnMode::Train { eps: 1e-5 })?;
                let y = g.sigmoid(y);
                g.mse_loss(y, v[4])
            },
            GradCheckConfig {
                max_per_leaf: Some(40),
                ..Default::default()
            },
            |_, _| false,
        )
        .unwrap();
        assert!(
            report.fraction_within(1e-4) == 1.0,
            "{:?}",
            report.max_deviation()
        );
    }
}
