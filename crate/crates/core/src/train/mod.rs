//! Training loop, evaluation and checkpoints.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointError, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::lr_at;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::csi::{nmse, CsiError, Dataset, Nmse, Normalization};
use crate::model::{AcrNet, ModelError};
use crate::nn::ForwardCtx;
use crate::tensor::{Graph, Tensor};

/// Stream of the shuffling RNG, kept apart from weight initialization.
const SHUFFLE_STREAM: u64 = 1;

pub const NMSE_DOMAIN: &str = "normalized angular-delay planes, 0.5 offset removed";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] CsiError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },
    #[error("dataset normalization {found:?} differs from the training record {expected:?}")]
    RecordMismatch {
        expected: Normalization,
        found: Normalization,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub epochs: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
    /// Keep activation slopes fixed at their initial value.
    pub freeze_slopes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma_max: 4e-3,
            gamma_min: 5e-5,
            epochs: 2500,
            warmup: 30,
            batch_size: 200,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            val_every: 1,
            freeze_slopes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.gamma_min >= 0.0 && self.gamma_min <= self.gamma_max) {
            return bad(format!(
                "need 0 <= gamma_min <= gamma_max, got {} and {}",
                self.gamma_min, self.gamma_max
            ));
        }
        if self.epochs == 0 || self.warmup >= self.epochs {
            return bad(format!(
                "need 0 <= warmup < epochs, got {} and {}",
                self.warmup, self.epochs
            ));
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return bad("batch size and validation cadence must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_nmse_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// `epoch,lr,train_mse,val_nmse_db` lines with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_mse,val_nmse_db\n");
        for r in &self.records {
            let val = r.val_nmse_db.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6e},{:.8e},{}\n",
                r.epoch, r.lr, r.train_mse, val
            ));
        }
        out
    }

    pub fn last_val_db(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_nmse_db)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    rng: ChaCha8Rng,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: History,
}

impl Trainer {
    pub fn new(model: &mut AcrNet, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        model.set_slopes_trainable(!config.freeze_slopes);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            adam: Adam::new(model, config.beta1, config.beta2),
            config,
            rng,
            epoch: 0,
            history: History::default(),
        })
    }

    /// Picks up optimizer, RNG and epoch from a checkpoint written by
    /// [`Trainer::checkpoint`].
    pub fn resume(
        checkpoint: Checkpoint,
        config: TrainConfig,
    ) -> Result<(AcrNet, Self), TrainError> {
        config.validate()?;
        let mut model = checkpoint.model;
        model.set_slopes_trainable(!config.freeze_slopes);
        let adam = match checkpoint.optimizer {
            Some(a) => a,
            None => Adam::new(&model, config.beta1, config.beta2),
        };
        let rng = match checkpoint.rng {
            Some(s) => s.restore(),
            None => {
                let mut r = ChaCha8Rng::seed_from_u64(config.seed);
                r.set_stream(SHUFFLE_STREAM);
                r
            }
        };
        Ok((
            model,
            Self {
                config,
                adam,
                rng,
                epoch: checkpoint.epoch as usize,
                history: History::default(),
            },
        ))
    }

    pub fn checkpoint(&self, model: &AcrNet, norm: Option<Normalization>) -> Checkpoint {
        Checkpoint {
            config: model.config().clone(),
            norm,
            epoch: self.epoch as u64,
            model: model.clone(),
            optimizer: Some(self.adam.clone()),
            rng: Some(RngState::capture(&self.rng)),
        }
    }

    /// One optimization step on `batch`; returns the batch loss.
    pub fn step(
        &mut self,
        model: &mut AcrNet,
        batch: &Tensor<f32>,
        lr: f64,
    ) -> Result<f64, TrainError> {
        let mut g = Graph::<f32>::new();
        let x = g.input(batch.clone());
        let mut ctx = ForwardCtx::train();
        let y = model.forward(&mut g, x, &mut ctx)?;
        let loss = g.mse_loss(y, x).map_err(ModelError::from)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        g.backward(loss).map_err(ModelError::from)?;
        model.zero_grads();
        model.accumulate_grads(&g);
        self.adam.update(model, lr);
        model.apply_bn_stats(&ctx.bn_stats);
        Ok(value)
    }

    pub fn run_epoch(
        &mut self,
        model: &mut AcrNet,
        train: &Dataset,
        val: Option<&Dataset>,
    ) -> Result<EpochRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.config);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sum, mut seen) = (0.0f64, 0usize);
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let loss = self.step(model, &train.batch(chunk), lr)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    lr,
                });
            }
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        self.epoch += 1;
        let last = self.epoch == self.config.epochs;
        let val_nmse_db = match val {
            Some(v) if last || self.epoch.is_multiple_of(self.config.val_every) => {
                Some(evaluate(model, v, Some(train.norm))?.nmse.db)
            }
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_mse: sum / seen as f64,
            val_nmse_db,
        };
        self.history.records.push(rec);
        Ok(rec)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        model: &mut AcrNet,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<&History, TrainError> {
        while self.epoch < self.config.epochs {
            let rec = self.run_epoch(model, train, val)?;
            log::debug!(
                "epoch {} lr {:.3e} mse {:.4e} val {:?}",
                rec.epoch,
                rec.lr,
                rec.train_mse,
                rec.val_nmse_db
            );
            on_epoch(&rec);
        }
        Ok(&self.history)
    }
}

/// Trains `model` from scratch for `config.epochs` epochs.
pub fn train(
    model: &mut AcrNet,
    train: &Dataset,
    val: Option<&Dataset>,
    config: TrainConfig,
) -> Result<History, TrainError> {
    let mut t = Trainer::new(model, config)?;
    t.fit(model, train, val, |_| {})?;
    Ok(t.history)
}

/// Anything that maps a `[B, 2, na, nt]` batch to its reconstruction.
pub trait Reconstructor {
    fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError>;

    /// Uplink bits per sample when a quantizer is in the path.
    fn feedback_bits(&self) -> Option<usize> {
        None
    }
}

impl Reconstructor for AcrNet {
    fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.reconstruct(x)
    }

    fn feedback_bits(&self) -> Option<usize> {
        self.config()
            .quant_bits
            .map(|b| codec::feedback_bits(self.feature_dim(), b))
    }
}

/// A model evaluated with an explicit quantizer setting, overriding its
/// configuration.
pub struct WithQuantizer<'a> {
    pub model: &'a AcrNet,
    pub bits: Option<u8>,
}

impl Reconstructor for WithQuantizer<'_> {
    fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.model.reconstruct_with(x, self.bits)
    }

    fn feedback_bits(&self) -> Option<usize> {
        self.bits
            .map(|b| codec::feedback_bits(self.model.feature_dim(), b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub nmse: Nmse,
    pub samples: usize,
    pub feedback_bits: Option<usize>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NMSE {} over {} samples", self.nmse, self.samples)?;
        if let Some(b) = self.feedback_bits {
            write!(f, ", N_fb {b} bits")?;
        }
        write!(f, " [domain: {NMSE_DOMAIN}]")
    }
}

const EVAL_BATCH: usize = 200;

/// NMSE of `r` on `data`. When `expected` is given, `data` must carry that
/// normalization record.
pub fn evaluate(
    r: &dyn Reconstructor,
    data: &Dataset,
    expected: Option<Normalization>,
) -> Result<EvalReport, TrainError> {
    if let Some(e) = expected {
        if e != data.norm {
            return Err(TrainError::RecordMismatch {
                expected: e,
                found: data.norm,
            });
        }
    }
    if data.is_empty() {
        return Err(TrainError::Config("empty evaluation set".into()));
    }
    let mut out = Vec::with_capacity(data.data().len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend_from_slice(r.reconstruct_batch(&data.batch(chunk))?.data());
    }
    Ok(EvalReport {
        nmse: nmse(data.data(), &out, data.sample_len())?,
        samples: data.len(),
        feedback_bits: r.feedback_bits(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi::RawSet;
    use crate::model::{ActivationKind, Eta, ModelConfig};
    use rand::Rng;

    struct Identity;
    impl Reconstructor for Identity {
        fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
            Ok(x.clone())
        }
    }

    struct Flat;
    impl Reconstructor for Flat {
        fn reconstruct_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
            Ok(Tensor::full(x.shape().to_vec(), 0.5))
        }
    }

    fn toy_data(count: usize, na: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f32> = (0..count * 2 * na * na)
            .map(|i| ((i % 7) as f32 - 3.0) * 0.1 + rng.random_range(-0.05..0.05))
            .collect();
        Dataset::from_raw(RawSet::new(na, na, raw).unwrap(), None, 0)
            .unwrap()
            .0
    }

    fn tiny(activation: ActivationKind) -> ModelConfig {
        ModelConfig {
            na: 8,
            nt: 8,
            activation,
            ..ModelConfig::new(1, Eta::QUARTER)
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup: 1,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stub_reconstructors() {
        let d = toy_data(5, 4, 1);
        assert_eq!(
            evaluate(&Identity, &d, None).unwrap().nmse.db,
            f64::NEG_INFINITY
        );
        assert!(evaluate(&Flat, &d, None).unwrap().nmse.db.abs() < 1e-9);
    }

    #[test]
    fn record_mismatch_is_rejected() {
        let d = toy_data(2, 4, 1);
        let other = Normalization {
            scale: 1.0,
            offset: 0.5,
        };
        assert!(matches!(
            evaluate(&Identity, &d, Some(other)),
            Err(TrainError::RecordMismatch { .. })
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut m = AcrNet::build(&tiny(ActivationKind::PRelu), 1).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            gamma_max: 0.0,
            gamma_min: 0.0,
            ..quick(2)
        };
        train(&mut m, &toy_data(12, 8, 2), None, cfg).unwrap();
        for (p, q) in before.params().iter().zip(m.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = toy_data(20, 8, 4);
        let run = || {
            let mut m = AcrNet::build(&tiny(ActivationKind::PRelu), 5).unwrap();
            train(&mut m, &data, Some(&data), quick(3)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy_data(32, 8, 6);
        let mut m = AcrNet::build(&tiny(ActivationKind::PRelu), 7).unwrap();
        let h = train(&mut m, &data, None, quick(8)).unwrap();
        assert!(h.records.last().unwrap().train_mse < h.records[0].train_mse);
    }

    #[test]
    fn frozen_prelu_tracks_lrelu() {
        let data = toy_data(16, 8, 8);
        let mut a = AcrNet::build(&tiny(ActivationKind::PRelu), 9).unwrap();
        let mut b = AcrNet::build(&tiny(ActivationKind::LRelu), 9).unwrap();
        let cfg = TrainConfig {
            freeze_slopes: true,
            ..quick(3)
        };
        let ha = train(&mut a, &data, Some(&data), cfg.clone()).unwrap();
        let hb = train(&mut b, &data, Some(&data), cfg).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let data = toy_data(8, 8, 1);
        let mut m = AcrNet::build(&tiny(ActivationKind::PRelu), 1).unwrap();
        m.visit_params_mut(&mut |p| {
            if p.name == "decoder.fc.bias" {
                p.value.data_mut()[0] = f32::NAN;
            }
        });
        let err = train(&mut m, &data, None, quick(2)).unwrap_err();
        assert!(matches!(
            err,
            TrainError::NonFinite {
                epoch: 0,
                batch: 0,
                ..
            }
        ));
    }

    #[test]
    fn history_csv() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 0,
                lr: 1e-3,
                train_mse: 0.25,
                val_nmse_db: Some(-3.5),
            }],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,lr,train_mse,val_nmse_db\n0,"));
        assert!(csv.trim_end().ends_with("-3.500000"));
    }
}
