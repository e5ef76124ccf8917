//! CSI data: angular-delay transform, synthetic generation, normalization,
//! the NMSE metric and the `CSID` dataset file.
//!
//! Dataset file, little-endian:
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `CSID`                  |
//! | 4..6   | version u16 (`1`)             |
//! | 6..10  | sample count u32              |
//! | 10..12 | `na` u16                      |
//! | 12..14 | `nt` u16                      |
//! | 14     | scenario tag u8               |
//! | 15..19 | normalization scale f32       |
//! | 19..23 | normalization offset f32      |
//! | 23..   | samples, f32: real plane then imaginary plane, row-major |

mod dft;
mod generator;
mod metric;

pub use dft::{from_angular_delay, to_angular_delay, truncate, AngularDelay, CMatrix};
pub use generator::{generate_synthetic, GeneratorConfig, Path};
pub use metric::{nmse, Nmse};

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path as FsPath;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"CSID";
pub const DATASET_VERSION: u16 = 1;
pub const DATASET_HEADER_LEN: usize = 23;

#[derive(Debug, thiserror::Error)]
pub enum CsiError {
    #[error("not a dataset file (bad magic)")]
    Magic,
    #[error("unsupported dataset version {0}")]
    Version(u16),
    #[error("dataset truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("inconsistent shape: {0}")]
    Shape(String),
    #[error("data has zero range; cannot normalize")]
    Degenerate,
    #[error("reference sample {0} has zero energy")]
    ZeroEnergy(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Affine map `normalized = raw * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub scale: f32,
    pub offset: f32,
}

impl Normalization {
    /// Identity record for data that is already normalized.
    pub const IDENTITY: Normalization = Normalization {
        scale: 1.0,
        offset: 0.0,
    };

    /// Symmetric record mapping `[-c, c]` onto `[0, 1]` with `c = max |raw|`.
    pub fn fit(raw: &[f32]) -> Result<Self, CsiError> {
        let c = raw.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if !(c > 0.0 && c.is_finite()) {
            return Err(CsiError::Degenerate);
        }
        Ok(Self {
            scale: 0.5 / c,
            offset: 0.5,
        })
    }

    pub fn apply(&self, raw: f32) -> f32 {
        raw * self.scale + self.offset
    }

    pub fn invert(&self, v: f32) -> f32 {
        (v - self.offset) / self.scale
    }
}

/// Result of normalizing a set: how many values fell outside `[0, 1]` and
/// were clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormReport {
    pub clamped: usize,
    pub total: usize,
}

impl NormReport {
    pub fn clamp_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clamped as f64 / self.total as f64
        }
    }
}

/// Un-normalized truncated angular-delay planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSet {
    pub na: usize,
    pub nt: usize,
    pub data: Vec<f32>,
}

impl RawSet {
    pub fn new(na: usize, nt: usize, data: Vec<f32>) -> Result<Self, CsiError> {
        let len = 2 * na * nt;
        if len == 0 || !data.len().is_multiple_of(len) {
            return Err(CsiError::Shape(format!(
                "{} values do not form whole 2x{na}x{nt} samples",
                data.len()
            )));
        }
        Ok(Self { na, nt, data })
    }

    pub fn count(&self) -> usize {
        self.data.len() / (2 * self.na * self.nt)
    }
}

/// Normalized samples of shape `2 × na × nt` with their normalization
/// record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub na: usize,
    pub nt: usize,
    pub scenario: u8,
    pub norm: Normalization,
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(
        na: usize,
        nt: usize,
        scenario: u8,
        norm: Normalization,
        data: Vec<f32>,
    ) -> Result<Self, CsiError> {
        RawSet::new(na, nt, Vec::new())?;
        if !data.len().is_multiple_of(2 * na * nt) {
            return Err(CsiError::Shape(format!(
                "{} values do not form whole 2x{na}x{nt} samples",
                data.len()
            )));
        }
        if na > u16::MAX as usize || nt > u16::MAX as usize {
            return Err(CsiError::Shape(format!("extents {na}x{nt} exceed u16")));
        }
        Ok(Self {
            na,
            nt,
            scenario,
            norm,
            data,
        })
    }

    /// Normalizes `raw` with `norm`, or with a record fitted on `raw` itself.
    /// Values leaving `[0, 1]` are clamped and counted.
    pub fn from_raw(
        raw: RawSet,
        norm: Option<Normalization>,
        scenario: u8,
    ) -> Result<(Self, NormReport), CsiError> {
        let norm = match norm {
            Some(n) => n,
            None => Normalization::fit(&raw.data)?,
        };
        let mut clamped = 0;
        let data: Vec<f32> = raw
            .data
            .iter()
            .map(|&v| {
                let x = norm.apply(v);
                if !(0.0..=1.0).contains(&x) {
                    clamped += 1;
                }
                x.clamp(0.0, 1.0)
            })
            .collect();
        let total = data.len();
        Ok((
            Self::new(raw.na, raw.nt, scenario, norm, data)?,
            NormReport { clamped, total },
        ))
    }

    pub fn sample_len(&self) -> usize {
        2 * self.na * self.nt
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Raw (de-normalized) values of sample `i`.
    pub fn denormalized(&self, i: usize) -> Vec<f32> {
        self.sample(i)
            .iter()
            .map(|&v| self.norm.invert(v))
            .collect()
    }

    /// `[indices.len(), 2, na, nt]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new([indices.len(), 2, self.na, self.nt], data).expect("batch shape")
    }

    /// Whole set as one tensor.
    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::new([self.len(), 2, self.na, self.nt], self.data.clone()).expect("dataset shape")
    }

    /// The first `n` samples and the rest, both sharing this record.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let cut = n.min(self.len()) * self.sample_len();
        let mk = |d: &[f32]| Self {
            data: d.to_vec(),
            ..self.clone_meta()
        };
        (mk(&self.data[..cut]), mk(&self.data[cut..]))
    }

    fn clone_meta(&self) -> Self {
        Self {
            na: self.na,
            nt: self.nt,
            scenario: self.scenario,
            norm: self.norm,
            data: Vec::new(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CsiError> {
        w.write_all(&DATASET_MAGIC)?;
        w.write_u16::<LittleEndian>(DATASET_VERSION)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        w.write_u16::<LittleEndian>(self.na as u16)?;
        w.write_u16::<LittleEndian>(self.nt as u16)?;
        w.write_u8(self.scenario)?;
        w.write_f32::<LittleEndian>(self.norm.scale)?;
        w.write_f32::<LittleEndian>(self.norm.offset)?;
        let mut buf = vec![0u8; 4 * self.data.len()];
        LittleEndian::write_f32_into(&self.data, &mut buf);
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CsiError> {
        let short = |expected| CsiError::Truncated {
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(short(DATASET_HEADER_LEN));
        }
        if bytes[..4] != DATASET_MAGIC {
            return Err(CsiError::Magic);
        }
        if bytes.len() < DATASET_HEADER_LEN {
            return Err(short(DATASET_HEADER_LEN));
        }
        let mut r = &bytes[4..];
        let version = r.read_u16::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(CsiError::Version(version));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let na = r.read_u16::<LittleEndian>()? as usize;
        let nt = r.read_u16::<LittleEndian>()? as usize;
        let scenario = r.read_u8()?;
        let scale = r.read_f32::<LittleEndian>()?;
        let offset = r.read_f32::<LittleEndian>()?;
        if na == 0 || nt == 0 {
            return Err(CsiError::Shape(format!("header extents {na}x{nt}")));
        }
        let values = count * 2 * na * nt;
        let expected = DATASET_HEADER_LEN + 4 * values;
        if r.len() < 4 * values {
            return Err(short(expected));
        }
        if r.len() > 4 * values {
            return Err(CsiError::Shape(format!(
                "{} trailing bytes after {count} samples",
                r.len() - 4 * values
            )));
        }
        let mut data = vec![0f32; values];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        Self::new(na, nt, scenario, Normalization { scale, offset }, data)
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<(), CsiError> {
        let mut buf = Vec::with_capacity(DATASET_HEADER_LEN + 4 * self.data.len());
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self, CsiError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Wraps a headerless little-endian f32 array of `count × 2 × na × nt`
    /// values. `norm` is the record the values were produced with; `None`
    /// treats them as raw and fits a record.
    pub fn import_raw(
        path: impl AsRef<FsPath>,
        na: usize,
        nt: usize,
        norm: Option<Normalization>,
        scenario: u8,
    ) -> Result<(Self, NormReport), CsiError> {
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(CsiError::Shape(format!(
                "{} bytes is not a whole number of f32 values",
                bytes.len()
            )));
        }
        let mut data = vec![0f32; bytes.len() / 4];
        (&bytes[..]).read_f32_into::<LittleEndian>(&mut data)?;
        let raw = RawSet::new(na, nt, data)?;
        match norm {
            None => Self::from_raw(raw, None, scenario),
            Some(n) => {
                // already normalized: keep values, clamp stragglers
                let identity = RawSet {
                    data: raw.data,
                    ..raw
                };
                let (mut ds, rep) =
                    Self::from_raw(identity, Some(Normalization::IDENTITY), scenario)?;
                ds.norm = n;
                Ok((ds, rep))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let raw = RawSet::new(2, 3, (0..24).map(|i| (i as f32 - 11.0) * 0.1).collect()).unwrap();
        Dataset::from_raw(raw, None, 4).unwrap().0
    }

    #[test]
    fn symmetric_normalization() {
        let n = Normalization::fit(&[-2.0, 1.0, 2.0]).unwrap();
        assert_eq!(n.apply(0.0), 0.5);
        assert_eq!(n.apply(-2.0), 0.0);
        assert_eq!(n.apply(2.0), 1.0);
        for v in [-1.7f32, 0.3, 1.99] {
            assert!((n.invert(n.apply(v)) - v).abs() < 1e-6);
        }
        assert!(matches!(
            Normalization::fit(&[0.0, 0.0]),
            Err(CsiError::Degenerate)
        ));
    }

    #[test]
    fn foreign_record_clamps_and_reports() {
        let record = Normalization::fit(&[-1.0, 1.0]).unwrap();
        let raw = RawSet::new(1, 1, vec![0.0, 2.0, -0.5, -3.0]).unwrap();
        let (ds, rep) = Dataset::from_raw(raw, Some(record), 0).unwrap();
        assert_eq!(rep.clamped, 2);
        assert_eq!(rep.clamp_rate(), 0.5);
        assert_eq!(ds.data(), &[0.5, 1.0, 0.25, 0.0]);
    }

    #[test]
    fn file_round_trip_and_size() {
        let ds = toy();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), DATASET_HEADER_LEN + 24 * 4);
        assert_eq!(Dataset::from_bytes(&buf).unwrap(), ds);
    }

    #[test]
    fn file_errors_are_distinct() {
        let mut buf = Vec::new();
        toy().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(CsiError::Magic)));
        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(CsiError::Version(7))
        ));
        assert!(matches!(
            Dataset::from_bytes(&buf[..buf.len() - 3]),
            Err(CsiError::Truncated { .. })
        ));
        let mut long = buf.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(
            Dataset::from_bytes(&long),
            Err(CsiError::Shape(_))
        ));
    }

    #[test]
    fn raw_import_fits_or_keeps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.f32");
        let vals: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let mut bytes = vec![0u8; 48];
        LittleEndian::write_f32_into(&vals, &mut bytes);
        fs::write(&path, &bytes).unwrap();
        let (kept, _) = Dataset::import_raw(&path, 2, 3, Some(Normalization::IDENTITY), 1).unwrap();
        assert_eq!(kept.data(), &vals[..]);
        assert_eq!(kept.len(), 1);
        assert!(Dataset::import_raw(&path, 5, 5, None, 1).is_err());
    }

    #[test]
    fn split_shares_record() {
        let ds = toy();
        let (a, b) = ds.split(1);
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_eq!(a.norm, b.norm);
        assert_eq!(b.sample(0), ds.sample(1));
        assert_eq!(ds.batch(&[1, 0]).shape(), &[2, 2, 2, 3]);
    }
}
