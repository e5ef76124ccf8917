use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Reciprocal compression ratio, kept as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Eta {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Eta {
    pub const QUARTER: Eta = Eta { num: 1, den: 4 };

    pub fn new(num: u32, den: u32) -> Result<Self, ModelError> {
        if num == 0 || den == 0 || num > den {
            return Err(ModelError::Config(format!(
                "eta must lie in (0, 1], got {num}/{den}"
            )));
        }
        let d = gcd(num, den);
        Ok(Self {
            num: num / d,
            den: den / d,
        })
    }

    /// `1/den`.
    pub fn reciprocal(den: u32) -> Result<Self, ModelError> {
        Self::new(1, den)
    }

    /// Accepts `"1/4"`, `"0.25"` or a feature dimension such as `"512"`
    /// (relative to `input_len = 2 * na * nt`).
    pub fn parse(s: &str, input_len: usize) -> Result<Self, ModelError> {
        let s = s.trim();
        let bad = || ModelError::Config(format!("cannot parse eta from {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n: u32 = n.trim().parse().map_err(|_| bad())?;
            let d: u32 = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        if let Ok(dim) = s.parse::<u32>() {
            return Self::new(dim, input_len as u32);
        }
        let x: f64 = s.parse().map_err(|_| bad())?;
        if !(x > 0.0 && x <= 1.0) {
            return Err(bad());
        }
        let den = (1.0 / x).round();
        if (1.0 / den - x).abs() > 1e-9 {
            return Err(ModelError::Config(format!(
                "decimal eta {s} is not a unit fraction; use n/d"
            )));
        }
        Self::new(1, den as u32)
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `eta * input_len`, which must be a positive integer.
    pub fn feature_dim(&self, input_len: usize) -> Result<usize, ModelError> {
        let scaled = input_len * self.num as usize;
        if !scaled.is_multiple_of(self.den as usize) {
            return Err(ModelError::Config(format!(
                "eta {self} times {input_len} is not an integer feature dimension"
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

impl fmt::Display for Eta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    /// Per-channel learnable slope.
    PRelu,
    /// Fixed slope 0.3.
    LRelu,
    /// One learnable slope per layer.
    SPRelu,
}

impl ActivationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PRelu => "prelu",
            Self::LRelu => "lrelu",
            Self::SPRelu => "sprelu",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            Self::PRelu => 0,
            Self::LRelu => 1,
            Self::SPRelu => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::PRelu),
            1 => Some(Self::LRelu),
            2 => Some(Self::SPRelu),
            _ => None,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "prelu" => Ok(Self::PRelu),
            "lrelu" => Ok(Self::LRelu),
            "sprelu" => Ok(Self::SPRelu),
            other => Err(ModelError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Description of an elastic ACRNet-k× instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub na: usize,
    pub nt: usize,
    /// Expansion multiple `k`; every decoder block aggregates `4k` groups.
    pub expansion: usize,
    pub eta: Eta,
    /// Feature quantizer bits; `None` disables quantization.
    pub quant_bits: Option<u8>,
    pub binarize_encoder_fc: bool,
    pub binarize_decoder_fc: bool,
    pub activation: ActivationKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            na: 32,
            nt: 32,
            expansion: 1,
            eta: Eta::QUARTER,
            quant_bits: None,
            binarize_encoder_fc: false,
            binarize_decoder_fc: false,
            activation: ActivationKind::PRelu,
        }
    }
}

impl ModelConfig {
    pub fn new(expansion: usize, eta: Eta) -> Self {
        Self {
            expansion,
            eta,
            ..Self::default()
        }
    }

    /// Real dimension `2 * na * nt` of one truncated sample.
    pub fn input_len(&self) -> usize {
        2 * self.na * self.nt
    }

    pub fn feature_dim(&self) -> Result<usize, ModelError> {
        self.eta.feature_dim(self.input_len())
    }

    pub fn group_factor(&self) -> usize {
        4 * self.expansion
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.na == 0 || self.nt == 0 {
            return Err(ModelError::Config("na and nt must be positive".into()));
        }
        if self.expansion == 0 {
            return Err(ModelError::Config("expansion k must be at least 1".into()));
        }
        if let Some(b) = self.quant_bits {
            if b == 0 || b > crate::codec::MAX_BITS {
                return Err(ModelError::Config(format!(
                    "quantizer bits must be in 1..={}, got {b}",
                    crate::codec::MAX_BITS
                )));
            }
        }
        self.feature_dim().map(|_| ())
    }

    /// Short human-readable tag, e.g. `ACRNet-4x eta=1/8 B=4`.
    pub fn label(&self) -> String {
        let prefix = if self.binarize_encoder_fc || self.binarize_decoder_fc {
            "BACRNet"
        } else {
            "ACRNet"
        };
        let mut s = format!("{prefix}-{}x eta={}", self.expansion, self.eta);
        if let Some(b) = self.quant_bits {
            s.push_str(&format!(" B={b}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_parsing() {
        assert_eq!(Eta::parse("1/4", 2048).unwrap(), Eta::QUARTER);
        assert_eq!(Eta::parse("512", 2048).unwrap(), Eta::QUARTER);
        assert_eq!(Eta::parse("0.25", 2048).unwrap(), Eta::QUARTER);
        assert_eq!(Eta::parse("2/8", 2048).unwrap().to_string(), "1/4");
        assert!(Eta::parse("abc", 2048).is_err());
        assert!(Eta::parse("3/2", 2048).is_err());
    }

    #[test]
    fn feature_dims() {
        let dims: Vec<usize> = [4, 8, 16, 32, 64]
            .iter()
            .map(|&d| {
                ModelConfig::new(1, Eta::reciprocal(d).unwrap())
                    .feature_dim()
                    .unwrap()
            })
            .collect();
        assert_eq!(dims, [512, 256, 128, 64, 32]);
        let odd = ModelConfig::new(1, Eta::reciprocal(3).unwrap());
        assert!(matches!(odd.feature_dim(), Err(ModelError::Config(_))));
    }

    #[test]
    fn group_factor_is_four_k() {
        assert_eq!(ModelConfig::new(10, Eta::QUARTER).group_factor(), 40);
    }
}
