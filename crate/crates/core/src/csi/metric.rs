use std::fmt;

use super::CsiError;

/// Normalized mean square error, linear and in dB. A perfect
/// reconstruction reports `-inf` dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nmse {
    pub linear: f64,
    pub db: f64,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        let db = if linear == 0.0 {
            f64::NEG_INFINITY
        } else {
            10.0 * linear.log10()
        };
        Self { linear, db }
    }
}

impl fmt::Display for Nmse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.db == f64::NEG_INFINITY {
            write!(f, "-inf dB (linear 0)")
        } else {
            write!(f, "{:.3} dB (linear {:.6e})", self.db, self.linear)
        }
    }
}

/// Mean over samples of `‖a − â‖² / ‖a‖²` on normalized data with the 0.5
/// offset removed from both sides.
pub fn nmse(reference: &[f32], estimate: &[f32], sample_len: usize) -> Result<Nmse, CsiError> {
    if reference.len() != estimate.len()
        || sample_len == 0
        || !reference.len().is_multiple_of(sample_len)
    {
        return Err(CsiError::Shape(format!(
            "nmse over {} and {} values with sample length {sample_len}",
            reference.len(),
            estimate.len()
        )));
    }
    let count = reference.len() / sample_len;
    if count == 0 {
        return Err(CsiError::Shape("nmse over an empty set".into()));
    }
    let mut total = 0.0f64;
    for (i, (a, b)) in reference
        .chunks_exact(sample_len)
        .zip(estimate.chunks_exact(sample_len))
        .enumerate()
    {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let x = x as f64 - 0.5;
            let d = x - (y as f64 - 0.5);
            num += d * d;
            den += x * x;
        }
        if den == 0.0 {
            return Err(CsiError::ZeroEnergy(i));
        }
        total += num / den;
    }
    Ok(Nmse::from_linear(total / count as f64))
}
