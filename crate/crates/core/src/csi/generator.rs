use std::f64::consts::{PI, TAU};
use std::ops::RangeInclusive;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dft::{AngularDelay, CMatrix};
use super::{CsiError, Dataset, NormReport, RawSet};

/// Multipath channel generator on a half-wavelength uniform linear array.
///
/// Each path carries a complex Gaussian gain, an integer delay tap drawn
/// from `[0, na / 2)` and a departure angle uniform in `[-π/2, π/2)`; every
/// channel is scaled to unit Frobenius norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub nc: usize,
    pub nt: usize,
    pub na: usize,
    pub paths: RangeInclusive<usize>,
    pub scenario: u8,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            nc: 1024,
            nt: 32,
            na: 32,
            paths: 3..=12,
            scenario: 0,
        }
    }
}

/// One specular path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    pub delay: usize,
    /// Departure angle in radians.
    pub angle: f64,
}

impl GeneratorConfig {
    fn validate(&self) -> Result<(), CsiError> {
        if self.na < 2 || self.na > self.nc || self.nt == 0 {
            return Err(CsiError::Shape(format!(
                "generator needs 2 <= na <= nc and nt > 0 (nc={}, nt={}, na={})",
                self.nc, self.nt, self.na
            )));
        }
        if *self.paths.start() == 0 || self.paths.is_empty() {
            return Err(CsiError::Shape(format!(
                "path count range {:?} must be non-empty and start at 1 or more",
                self.paths
            )));
        }
        Ok(())
    }

    pub fn draw_paths(&self, rng: &mut ChaCha8Rng) -> Vec<Path> {
        let p = rng.random_range(self.paths.clone());
        (0..p)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Path {
                    gain: Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2,
                    delay: rng.random_range(0..self.na / 2),
                    angle: rng.random_range(-PI / 2.0..PI / 2.0),
                }
            })
            .collect()
    }

    /// `H[n, t] = Σ_p g_p · e^{+j2πnτ_p/nc} · e^{-jπ t sin θ_p}`, unit norm.
    pub fn channel(&self, paths: &[Path]) -> CMatrix {
        let mut h = CMatrix::zeros(self.nc, self.nt);
        for p in paths {
            let steer: Vec<Complex64> = (0..self.nt)
                .map(|t| Complex64::from_polar(1.0, -PI * t as f64 * p.angle.sin()))
                .collect();
            for n in 0..self.nc {
                let phase = Complex64::from_polar(
                    1.0,
                    TAU * (n * p.delay % self.nc) as f64 / self.nc as f64,
                );
                let g = p.gain * phase;
                for (t, s) in steer.iter().enumerate() {
                    h.data[n * self.nt + t] += g * s;
                }
            }
        }
        let norm = h.frobenius();
        if norm > 0.0 {
            h.data.iter_mut().for_each(|z| *z /= norm);
        }
        h
    }

    /// `count` spatial-frequency channels, deterministic per seed.
    pub fn channels(&self, count: usize, seed: u64) -> Result<Vec<CMatrix>, CsiError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                let paths = self.draw_paths(&mut rng);
                self.channel(&paths)
            })
            .collect())
    }

    /// Truncated angular-delay planes of `count` channels, not normalized.
    pub fn raw(&self, count: usize, seed: u64) -> Result<RawSet, CsiError> {
        let plan = AngularDelay::new(self.nc, self.nt);
        let mut data = Vec::with_capacity(count * 2 * self.na * self.nt);
        for h in self.channels(count, seed)? {
            let ha = plan.forward(&h).truncate_rows(self.na);
            data.extend(ha.data.iter().map(|z| z.re as f32));
            data.extend(ha.data.iter().map(|z| z.im as f32));
        }
        RawSet::new(self.na, self.nt, data)
    }
}

/// Normalized synthetic dataset whose record is fitted on the samples
/// themselves.
pub fn generate_synthetic(
    config: &GeneratorConfig,
    count: usize,
    seed: u64,
) -> Result<(Dataset, NormReport), CsiError> {
    Dataset::from_raw(config.raw(count, seed)?, None, config.scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            nc: 128,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn single_broadside_tap_lands_in_row_zero() {
        let cfg = small();
        let h = cfg.channel(&[Path {
            gain: Complex64::new(1.0, 0.0),
            delay: 0,
            angle: 0.0,
        }]);
        let h_ad = AngularDelay::new(cfg.nc, cfg.nt).forward(&h);
        assert!((h_ad.at(0, 0).norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_is_lossless() {
        let cfg = small();
        let plan = AngularDelay::new(cfg.nc, cfg.nt);
        for h in cfg.channels(5, 3).unwrap() {
            let h_ad = plan.forward(&h);
            let kept = h_ad.truncate_rows(cfg.na);
            assert!(h_ad.frobenius_sq() - kept.frobenius_sq() < 1e-10);
            let back = plan.inverse(&kept.pad_rows(cfg.nc));
            assert!(back.distance(&h) / h.frobenius() < 1e-5);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small();
        assert_eq!(cfg.raw(4, 9).unwrap(), cfg.raw(4, 9).unwrap());
        assert_ne!(cfg.raw(4, 9).unwrap(), cfg.raw(4, 10).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = GeneratorConfig {
            paths: 0..=3,
            ..small()
        };
        assert!(cfg.channels(1, 0).is_err());
    }
}
