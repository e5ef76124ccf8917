use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// The first `n` rows.
    pub fn truncate_rows(&self, n: usize) -> Self {
        let n = n.min(self.rows);
        Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    /// Zero-extends to `n` rows.
    pub fn pad_rows(&self, n: usize) -> Self {
        let mut out = Self::zeros(n.max(self.rows), self.cols);
        out.data[..self.data.len()].copy_from_slice(&self.data);
        out
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// Unitary 2-D transform between the spatial-frequency domain (`nc × nt`)
/// and the angular-delay domain: `H' = F_c · H · F_tᴴ`.
pub struct AngularDelay {
    nc: usize,
    nt: usize,
    fwd_c: Arc<dyn Fft<f64>>,
    inv_c: Arc<dyn Fft<f64>>,
    fwd_t: Arc<dyn Fft<f64>>,
    inv_t: Arc<dyn Fft<f64>>,
}

impl AngularDelay {
    pub fn new(nc: usize, nt: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nc,
            nt,
            fwd_c: planner.plan_fft_forward(nc),
            inv_c: planner.plan_fft_inverse(nc),
            fwd_t: planner.plan_fft_forward(nt),
            inv_t: planner.plan_fft_inverse(nt),
        }
    }

    fn check(&self, h: &CMatrix) {
        assert_eq!(
            (h.rows, h.cols),
            (self.nc, self.nt),
            "transform planned for {}x{}",
            self.nc,
            self.nt
        );
    }

    /// Transforms every column with `col_fft` and every row with `row_fft`,
    /// then applies the unitary scaling.
    fn apply(&self, h: &CMatrix, col_fft: &dyn Fft<f64>, row_fft: &dyn Fft<f64>) -> CMatrix {
        self.check(h);
        let (nc, nt) = (self.nc, self.nt);
        let mut out = h.clone();
        let mut column = vec![Complex64::new(0.0, 0.0); nc];
        for c in 0..nt {
            for (r, z) in column.iter_mut().enumerate() {
                *z = out.data[r * nt + c];
            }
            col_fft.process(&mut column);
            for (r, z) in column.iter().enumerate() {
                out.data[r * nt + c] = *z;
            }
        }
        for row in out.data.chunks_exact_mut(nt) {
            row_fft.process(row);
        }
        let s = 1.0 / ((nc * nt) as f64).sqrt();
        out.data.iter_mut().for_each(|z| *z *= s);
        out
    }

    pub fn forward(&self, h: &CMatrix) -> CMatrix {
        self.apply(h, self.fwd_c.as_ref(), self.inv_t.as_ref())
    }

    /// `H = F_cᴴ · H' · F_t`.
    pub fn inverse(&self, h_ad: &CMatrix) -> CMatrix {
        self.apply(h_ad, self.inv_c.as_ref(), self.fwd_t.as_ref())
    }
}

/// `H' = F_c · H · F_tᴴ` with freshly planned transforms.
pub fn to_angular_delay(h: &CMatrix) -> CMatrix {
    AngularDelay::new(h.rows, h.cols).forward(h)
}

pub fn from_angular_delay(h_ad: &CMatrix) -> CMatrix {
    AngularDelay::new(h_ad.rows, h_ad.cols).inverse(h_ad)
}

pub fn truncate(h_ad: &CMatrix, na: usize) -> CMatrix {
    h_ad.truncate_rows(na)
}
