//! `ACKP` checkpoint files.
//!
//! Little-endian layout: magic `ACKP`, version u16, model configuration,
//! optional normalization record, epoch, batch-norm constants, optional RNG
//! and optimizer state, then named tensor records (`name`, role, dtype,
//! shape, f32 data).

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Adam;
use crate::csi::Normalization;
use crate::model::{AcrNet, ActivationKind, Eta, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ACKP";
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Role {
    Value = 0,
    AdamM = 1,
    AdamV = 2,
    RunningMean = 3,
    RunningVar = 4,
}

impl Role {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Value,
            1 => Self::AdamM,
            2 => Self::AdamV,
            3 => Self::RunningMean,
            4 => Self::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated or malformed: {0}")]
    Truncated(String),
    #[error("checkpoint was written for {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("record {name}: shape {found:?} does not match the model's {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("record {0} missing from checkpoint")]
    Missing(String),
    #[error("unexpected record {0}")]
    Unexpected(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(e.to_string())
        } else {
            CheckpointError::Io(e)
        }
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Normalization record of the training set.
    pub norm: Option<Normalization>,
    /// Epochs completed.
    pub epoch: u64,
    pub model: AcrNet,
    pub optimizer: Option<Adam>,
    pub rng: Option<RngState>,
}

fn bn_base(gamma_name: &str) -> &str {
    gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name)
}

impl Checkpoint {
    /// Weights and batch-norm statistics only.
    pub fn model_only(model: &AcrNet, norm: Option<Normalization>) -> Self {
        Self {
            config: model.config().clone(),
            norm,
            epoch: 0,
            model: model.clone(),
            optimizer: None,
            rng: None,
        }
    }

    fn write_config(w: &mut impl Write, c: &ModelConfig) -> io::Result<()> {
        w.write_u16::<LittleEndian>(c.na as u16)?;
        w.write_u16::<LittleEndian>(c.nt as u16)?;
        w.write_u16::<LittleEndian>(c.expansion as u16)?;
        w.write_u32::<LittleEndian>(c.eta.num())?;
        w.write_u32::<LittleEndian>(c.eta.den())?;
        w.write_u8(c.quant_bits.unwrap_or(0))?;
        w.write_u8(c.binarize_encoder_fc as u8)?;
        w.write_u8(c.binarize_decoder_fc as u8)?;
        w.write_u8(c.activation.code())
    }

    fn read_config(r: &mut impl Read) -> Result<ModelConfig, CheckpointError> {
        let na = r.read_u16::<LittleEndian>()? as usize;
        let nt = r.read_u16::<LittleEndian>()? as usize;
        let expansion = r.read_u16::<LittleEndian>()? as usize;
        let num = r.read_u32::<LittleEndian>()?;
        let den = r.read_u32::<LittleEndian>()?;
        let q = r.read_u8()?;
        let be = r.read_u8()?;
        let bd = r.read_u8()?;
        let act = r.read_u8()?;
        let activation = ActivationKind::from_code(act)
            .ok_or_else(|| CheckpointError::Truncated(format!("activation code {act}")))?;
        Ok(ModelConfig {
            na,
            nt,
            expansion,
            eta: Eta::new(num, den)?,
            quant_bits: (q != 0).then_some(q),
            binarize_encoder_fc: be != 0,
            binarize_decoder_fc: bd != 0,
            activation,
        })
    }

    fn write_record(
        w: &mut impl Write,
        name: &str,
        role: Role,
        shape: &[usize],
        data: &[f32],
    ) -> io::Result<()> {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(role as u8)?;
        w.write_u8(DTYPE_F32)?;
        w.write_u8(shape.len() as u8)?;
        for &d in shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in data {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        Self::write_config(w, &self.config)?;
        match self.norm {
            Some(n) => {
                w.write_u8(1)?;
                w.write_f32::<LittleEndian>(n.scale)?;
                w.write_f32::<LittleEndian>(n.offset)?;
            }
            None => w.write_u8(0)?,
        }
        w.write_u64::<LittleEndian>(self.epoch)?;
        let (eps, momentum) = {
            let bn = &self.model.encoder.head.bn;
            (bn.eps, bn.momentum)
        };
        w.write_f32::<LittleEndian>(eps)?;
        w.write_f32::<LittleEndian>(momentum)?;
        match &self.rng {
            Some(s) => {
                w.write_u8(1)?;
                w.write_all(&s.seed)?;
                w.write_u64::<LittleEndian>(s.stream)?;
                w.write_u128::<LittleEndian>(s.word_pos)?;
            }
            None => w.write_u8(0)?,
        }
        match &self.optimizer {
            Some(a) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(a.step)?;
                w.write_f64::<LittleEndian>(a.beta1)?;
                w.write_f64::<LittleEndian>(a.beta2)?;
                w.write_f64::<LittleEndian>(a.eps)?;
            }
            None => w.write_u8(0)?,
        }

        let params = self.model.params();
        let mut bns = Vec::new();
        self.model.visit_bn(&mut |bn| bns.push(bn));
        let per_param = if self.optimizer.is_some() { 3 } else { 1 };
        w.write_u32::<LittleEndian>((params.len() * per_param + 2 * bns.len()) as u32)?;
        for p in &params {
            Self::write_record(w, &p.name, Role::Value, p.value.shape(), p.value.data())?;
            if let Some(a) = &self.optimizer {
                Self::write_record(w, &p.name, Role::AdamM, p.value.shape(), &a.m[p.id])?;
                Self::write_record(w, &p.name, Role::AdamV, p.value.shape(), &a.v[p.id])?;
            }
        }
        for bn in bns {
            let base = bn_base(&bn.gamma.name);
            let shape = [bn.channels];
            Self::write_record(w, base, Role::RunningMean, &shape, &bn.running_mean)?;
            Self::write_record(w, base, Role::RunningVar, &shape, &bn.running_var)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = Self::read_config(&mut r)?;
        let norm = match r.read_u8()? {
            0 => None,
            _ => Some(Normalization {
                scale: r.read_f32::<LittleEndian>()?,
                offset: r.read_f32::<LittleEndian>()?,
            }),
        };
        let epoch = r.read_u64::<LittleEndian>()?;
        let eps = r.read_f32::<LittleEndian>()?;
        let momentum = r.read_f32::<LittleEndian>()?;
        let rng = match r.read_u8()? {
            0 => None,
            _ => {
                let mut seed = [0u8; 32];
                r.read_exact(&mut seed)?;
                Some(RngState {
                    seed,
                    stream: r.read_u64::<LittleEndian>()?,
                    word_pos: r.read_u128::<LittleEndian>()?,
                })
            }
        };
        let adam_header = match r.read_u8()? {
            0 => None,
            _ => Some((
                r.read_u64::<LittleEndian>()?,
                r.read_f64::<LittleEndian>()?,
                r.read_f64::<LittleEndian>()?,
                r.read_f64::<LittleEndian>()?,
            )),
        };

        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut records: HashMap<(String, Role), Tensor<f32>> = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Truncated("record name is not UTF-8".into()))?;
            let role_byte = r.read_u8()?;
            let role = Role::from_u8(role_byte)
                .ok_or_else(|| CheckpointError::Truncated(format!("record role {role_byte}")))?;
            let dtype = r.read_u8()?;
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Truncated(format!("record dtype {dtype}")));
            }
            let rank = r.read_u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            if r.len() < 4 * n {
                return Err(CheckpointError::Truncated(format!("record {name}")));
            }
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Truncated(format!("record {name}: {e}")))?;
            records.insert((name, role), t);
        }
        if !r.is_empty() {
            return Err(CheckpointError::Truncated(format!(
                "{} trailing bytes",
                r.len()
            )));
        }

        let mut model = AcrNet::structural(&config)?;
        let mut take =
            |name: &str, role: Role, shape: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
                let t = records
                    .remove(&(name.to_string(), role))
                    .ok_or_else(|| CheckpointError::Missing(format!("{name} ({role:?})")))?;
                if t.shape() != shape {
                    return Err(CheckpointError::Shape {
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                Ok(t)
            };

        let mut failure = None;
        let mut optimizer = adam_header.map(|(step, beta1, beta2, eps)| {
            let mut a = Adam::new(&model, beta1, beta2);
            a.step = step;
            a.eps = eps;
            a
        });
        model.visit_params_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            let res = (|| {
                p.value = take(&p.name, Role::Value, p.value.shape())?;
                if let Some(a) = optimizer.as_mut() {
                    a.m[p.id] = take(&p.name, Role::AdamM, p.value.shape())?.into_data();
                    a.v[p.id] = take(&p.name, Role::AdamV, p.value.shape())?.into_data();
                }
                Ok(())
            })();
            if let Err(e) = res {
                failure = Some(e);
            }
        });
        model.visit_bn_mut(&mut |bn| {
            if failure.is_some() {
                return;
            }
            bn.eps = eps;
            bn.momentum = momentum;
            let base = bn_base(&bn.gamma.name).to_string();
            let res = (|| {
                bn.running_mean = take(&base, Role::RunningMean, &[bn.channels])?.into_data();
                bn.running_var = take(&base, Role::RunningVar, &[bn.channels])?.into_data();
                Ok(())
            })();
            if let Err(e) = res {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(((name, _), _)) = records.into_iter().next() {
            return Err(CheckpointError::Unexpected(name));
        }
        Ok(Self {
            config,
            norm,
            epoch,
            model,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and insists on a particular model configuration.
    pub fn load_for(
        path: impl AsRef<Path>,
        expected: &ModelConfig,
    ) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(CheckpointError::ConfigMismatch {
                expected: expected.label(),
                found: ck.config.label(),
            });
        }
        Ok(ck)
    }
}
