//! Dense 2-D complex and real grids plus the centered FFT conventions used
//! throughout the forward model.
//!
//! Conventions (fixed once, everything else derives from them):
//! - Grids are row-major; row index maps to the y/ky axis, column index to x/kx.
//! - Spectra are stored centered: DC sits at (rows/2, cols/2), which requires
//!   even dimensions.
//! - `spectrum_from_spatial` scales by 1/(rows*cols) so the DC bin equals the
//!   spatial mean; `spatial_from_spectrum` is its exact inverse (unnormalized
//!   inverse FFT). A flat unit object therefore round-trips to a flat unit
//!   field, which pins the forward-model energy normalization.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};

/// Dense 2-D grid of complex amplitudes; carries both spatial fields and
/// centered spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexField2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexField2D {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FpmError::DimensionMismatch {
                expected: format!("{}x{}={} elements", rows, cols, rows * cols),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        let i = r * self.cols + c;
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm_sqr_sum(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Amplitude (modulus) of every element.
    pub fn amplitude(&self) -> RealField2D {
        RealField2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }

    /// Argument of every element, in [-pi, pi).
    pub fn phase(&self) -> RealField2D {
        RealField2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| wrap_phase(z.arg())).collect(),
        }
    }
}

/// Dense 2-D grid of reals: intensity planes, amplitude and phase maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealField2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealField2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FpmError::DimensionMismatch {
                expected: format!("{}x{}={} elements", rows, cols, rows * cols),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let i = r * self.cols + c;
        self.data[i] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Map an angle to [-pi, pi).
pub fn wrap_phase(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if x >= std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_rows(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    PLANNER.with(|p| {
        let fft = {
            let mut planner = p.borrow_mut();
            if inverse {
                planner.plan_fft_inverse(cols)
            } else {
                planner.plan_fft_forward(cols)
            }
        };
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for row in data.chunks_exact_mut(cols) {
            fft.process_with_scratch(row, &mut scratch);
        }
        let _ = rows;
    });
}

fn transpose(data: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Unnormalized 2-D FFT in place (forward: e^{-j}, inverse: e^{+j}).
pub fn fft2_in_place(field: &mut ComplexField2D, inverse: bool) {
    let (rows, cols) = (field.rows, field.cols);
    fft_rows(&mut field.data, rows, cols, inverse);
    let mut t = transpose(&field.data, rows, cols);
    fft_rows(&mut t, cols, rows, inverse);
    field.data = transpose(&t, cols, rows);
}

/// Swap quadrants so DC moves between index 0 and index n/2.
/// Requires even dimensions, where fftshift and ifftshift coincide.
pub fn fftshift(field: &ComplexField2D) -> ComplexField2D {
    assert!(
        field.rows % 2 == 0 && field.cols % 2 == 0,
        "fftshift requires even dimensions"
    );
    let (hr, hc) = (field.rows / 2, field.cols / 2);
    ComplexField2D::from_fn(field.rows, field.cols, |r, c| {
        field.get((r + hr) % field.rows, (c + hc) % field.cols)
    })
}

/// Centered spectrum of a spatial field, scaled so the DC bin is the spatial mean.
pub fn spectrum_from_spatial(spatial: &ComplexField2D) -> ComplexField2D {
    let mut f = spatial.clone();
    fft2_in_place(&mut f, false);
    let n = (f.rows * f.cols) as f64;
    for z in f.data.iter_mut() {
        *z /= n;
    }
    fftshift(&f)
}

/// Exact inverse of `spectrum_from_spatial`: unnormalized inverse FFT of the
/// de-centered spectrum. Also used as the forward-model window transform,
/// where its scaling makes a unit flat object yield unit intensity.
pub fn spatial_from_spectrum(spectrum: &ComplexField2D) -> ComplexField2D {
    let mut f = fftshift(spectrum);
    fft2_in_place(&mut f, true);
    f
}

/// Adjoint of `spatial_from_spectrum` under the standard inner product:
/// centered unnormalized forward FFT. Used by the gradient chain.
pub fn spectrum_adjoint(spatial: &ComplexField2D) -> ComplexField2D {
    let mut f = spatial.clone();
    fft2_in_place(&mut f, false);
    fftshift(&f)
}

/// Copy the `size`x`size` window of `hr` whose center pixel is
/// (`center_r`, `center_c`). Errors if the window leaves the grid.
pub fn crop_window(
    hr: &ComplexField2D,
    center_r: i64,
    center_c: i64,
    size: usize,
) -> Result<ComplexField2D> {
    let half = (size / 2) as i64;
    let r0 = center_r - half;
    let c0 = center_c - half;
    if r0 < 0 || c0 < 0 || r0 + size as i64 > hr.rows as i64 || c0 + size as i64 > hr.cols as i64 {
        return Err(FpmError::Geometry(format!(
            "spectral window [{}..{}) x [{}..{}) outside {}x{} grid",
            r0,
            r0 + size as i64,
            c0,
            c0 + size as i64,
            hr.rows,
            hr.cols
        )));
    }
    let mut out = ComplexField2D::zeros(size, size);
    for r in 0..size {
        let src = (r0 as usize + r) * hr.cols + c0 as usize;
        let dst = r * size;
        out.data[dst..dst + size].copy_from_slice(&hr.data[src..src + size]);
    }
    Ok(out)
}

/// Add `window` into `hr` at the window position used by `crop_window`.
pub fn scatter_add_window(
    hr: &mut ComplexField2D,
    window: &ComplexField2D,
    center_r: i64,
    center_c: i64,
) {
    let size = window.rows;
    let half = (size / 2) as i64;
    let r0 = (center_r - half) as usize;
    let c0 = (center_c - half) as usize;
    for r in 0..size {
        let dst = (r0 + r) * hr.cols + c0;
        let src = r * size;
        for c in 0..size {
            hr.data[dst + c] += window.data[src + c];
        }
    }
}
