//! B-bit uniform feature quantization and the packed uplink payload.
//!
//! Wire format (8-byte header, then payload):
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 0..2  | magic `0xAC 0xFB`             |
//! | 2     | version (`1`)                 |
//! | 3     | bits per codeword `B`         |
//! | 4..8  | feature dimension, u32 LE     |
//! | 8..   | codewords, MSB-first, zero-padded to a byte |

use byteorder::{ByteOrder, LittleEndian};

use crate::tensor::{Graph, Scalar, Var};

pub const PAYLOAD_MAGIC: [u8; 2] = [0xAC, 0xFB];
pub const PAYLOAD_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("quantizer bits must be in 1..={MAX_BITS}, got {0}")]
    Bits(u8),
    #[error("codeword {code} does not fit in {bits} bits")]
    CodewordRange { code: u32, bits: u8 },
    #[error("feature value {0} is not finite")]
    NonFinite(f32),
    #[error("payload magic mismatch")]
    Magic,
    #[error("unsupported payload version {0}")]
    Version(u8),
    #[error("payload truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload body holds {got} bytes, header implies {expected}")]
    BitCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, CodecError>;

fn check_bits(bits: u8) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(CodecError::Bits(bits));
    }
    Ok(())
}

/// `floor(x * 2^B)` clamped to `[0, 2^B - 1]`.
#[inline]
pub fn quantize_value(x: f64, bits: u8) -> u32 {
    let levels = (1u32 << bits) as f64;
    let q = (x * levels).floor();
    q.clamp(0.0, levels - 1.0) as u32
}

/// Bin midpoint `(code + 0.5) / 2^B`.
#[inline]
pub fn dequantize_value(code: u32, bits: u8) -> f64 {
    (code as f64 + 0.5) / (1u32 << bits) as f64
}

pub fn quantize(v: &[f32], bits: u8) -> Result<Vec<u32>> {
    check_bits(bits)?;
    v.iter()
        .map(|&x| {
            if !x.is_finite() {
                return Err(CodecError::NonFinite(x));
            }
            Ok(quantize_value(x as f64, bits))
        })
        .collect()
}

pub fn dequantize(codes: &[u32], bits: u8) -> Result<Vec<f32>> {
    check_bits(bits)?;
    codes
        .iter()
        .map(|&code| {
            if code >> bits != 0 {
                return Err(CodecError::CodewordRange { code, bits });
            }
            Ok(dequantize_value(code, bits) as f32)
        })
        .collect()
}

/// Quantize-dequantize in the forward pass with an identity gradient.
pub fn ste_quantize<T: Scalar>(g: &mut Graph<T>, x: Var, bits: u8) -> Result<Var> {
    check_bits(bits)?;
    Ok(g.straight_through(x, move |v| {
        T::of_f64(dequantize_value(quantize_value(v.as_f64(), bits), bits))
    }))
}

/// Feedback bit count `2 * na * nt * eta * B`, i.e. `feature_dim * B`.
pub fn feedback_bits(feature_dim: usize, bits: u8) -> usize {
    feature_dim * bits as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackPayload {
    pub bits: u8,
    pub feature_dim: u32,
    body: Vec<u8>,
}

impl FeedbackPayload {
    pub fn pack(codes: &[u32], bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let mut body = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
        let mut pos = 0usize;
        for &code in codes {
            if code >> bits != 0 {
                return Err(CodecError::CodewordRange { code, bits });
            }
            for b in (0..bits).rev() {
                if (code >> b) & 1 == 1 {
                    body[pos / 8] |= 0x80 >> (pos % 8);
                }
                pos += 1;
            }
        }
        Ok(Self {
            bits,
            feature_dim: codes.len() as u32,
            body,
        })
    }

    pub fn unpack(&self) -> Vec<u32> {
        let mut codes = Vec::with_capacity(self.feature_dim as usize);
        let mut pos = 0usize;
        for _ in 0..self.feature_dim {
            let mut code = 0u32;
            for _ in 0..self.bits {
                let bit = (self.body[pos / 8] >> (7 - pos % 8)) & 1;
                code = (code << 1) | bit as u32;
                pos += 1;
            }
            codes.push(code);
        }
        codes
    }

    /// Codeword bits on the wire, excluding the header and padding.
    pub fn payload_bits(&self) -> usize {
        feedback_bits(self.feature_dim as usize, self.bits)
    }

    pub fn body(&self) -> &[u8] {
        &self.body
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&PAYLOAD_MAGIC);
        out.push(PAYLOAD_VERSION);
        out.push(self.bits);
        let mut dim = [0u8; 4];
        LittleEndian::write_u32(&mut dim, self.feature_dim);
        out.extend_from_slice(&dim);
        out.extend_from_slice(&self.body);
        out
    }

    /// Bytes taken by the header and body.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.body.len()
    }

    /// Parses back-to-back payloads, as written by concatenating
    /// [`FeedbackPayload::to_bytes`] outputs.
    pub fn read_stream(mut bytes: &[u8]) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            if bytes.len() < HEADER_LEN {
                return Err(CodecError::Truncated {
                    needed: HEADER_LEN,
                    have: bytes.len(),
                });
            }
            if bytes[..2] != PAYLOAD_MAGIC {
                return Err(CodecError::Magic);
            }
            let bits = bytes[3];
            check_bits(bits)?;
            let dim = LittleEndian::read_u32(&bytes[4..8]) as usize;
            let len = HEADER_LEN + (dim * bits as usize).div_ceil(8);
            if bytes.len() < len {
                return Err(CodecError::Truncated {
                    needed: len,
                    have: bytes.len(),
                });
            }
            out.push(Self::from_bytes(&bytes[..len])?);
            bytes = &bytes[len..];
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        if bytes[..2] != PAYLOAD_MAGIC {
            return Err(CodecError::Magic);
        }
        if bytes[2] != PAYLOAD_VERSION {
            return Err(CodecError::Version(bytes[2]));
        }
        let bits = bytes[3];
        check_bits(bits)?;
        let feature_dim = LittleEndian::read_u32(&bytes[4..8]);
        let expected = (feature_dim as usize * bits as usize).div_ceil(8);
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(CodecError::BitCount {
                expected,
                got: body.len(),
            });
        }
        Ok(Self {
            bits,
            feature_dim,
            body: body.to_vec(),
        })
    }
}
