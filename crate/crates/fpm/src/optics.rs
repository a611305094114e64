//! Geometry and optics primitives: illumination wave vectors from LED
//! positions, pupil construction, and the defocus transfer kernel.
//!
//! Unit bookkeeping is centralized here: lengths in micrometers internally
//! (LED geometry entered in millimeters), spatial frequencies in cycles/um.
//! The sample-plane pixel pitch is `camera_pixel / magnification`; the
//! frequency-pixel step `delta_k = 1 / (lr_size * pitch)` is shared by the
//! low-resolution window grid and the high-resolution spectrum grid, which is
//! what makes the window crop in the forward model physically consistent.
//!
//! Inside the defocus kernel the frequency coordinate is the direction sine
//! (lambda-normalized frequency); the spectral shift table uses cycles/um.
//! The two appear with different units in the usual formulations and are
//! reconciled here by converting explicitly.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};

const MM_TO_UM: f64 = 1000.0;

/// Static description of the acquisition geometry and optics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Illumination wavelength, micrometers.
    pub wavelength_um: f64,
    /// Camera pixel size, micrometers.
    pub camera_pixel_um: f64,
    /// Objective magnification.
    pub magnification: f64,
    /// Objective numerical aperture.
    pub objective_na: f64,
    /// Pitch between neighboring LEDs, millimeters.
    pub led_pitch_mm: f64,
    /// LED board to sample distance, millimeters.
    pub led_to_sample_mm: f64,
    /// LEDs per side of the square array (odd, so a center LED exists).
    pub grid_side: usize,
    /// Low-resolution image side, pixels (even).
    pub lr_size: usize,
    /// High-resolution upsampling factor; HR side = lr_size * upsample_factor.
    pub upsample_factor: usize,
}

impl SystemConfig {
    /// Desk-scale default: 64x64 LR, 4x upsampling, 7x7 LEDs, otherwise the
    /// standard 470 nm / 2.4 um / 4x 0.13 NA / 97 mm / 5 mm geometry.
    pub fn desk_scale() -> Self {
        Self {
            wavelength_um: 0.470,
            camera_pixel_um: 2.4,
            magnification: 4.0,
            objective_na: 0.13,
            led_pitch_mm: 5.0,
            led_to_sample_mm: 97.0,
            grid_side: 7,
            lr_size: 64,
            upsample_factor: 4,
        }
    }

    /// Full-scale preset: 256x256 LR images upsampled 4x to 1024x1024,
    /// 11x11 LED array.
    pub fn paper_scale() -> Self {
        Self {
            grid_side: 11,
            lr_size: 256,
            ..Self::desk_scale()
        }
    }

    /// Sample-plane pixel pitch of the camera, micrometers.
    pub fn sample_pixel_um(&self) -> f64 {
        self.camera_pixel_um / self.magnification
    }

    pub fn hr_size(&self) -> usize {
        self.lr_size * self.upsample_factor
    }

    /// Frequency-pixel step shared by the LR window and HR spectrum grids,
    /// cycles/um.
    pub fn delta_k(&self) -> f64 {
        1.0 / (self.lr_size as f64 * self.sample_pixel_um())
    }

    /// Pupil cutoff radius NA/lambda, cycles/um.
    pub fn cutoff_cycles_per_um(&self) -> f64 {
        self.objective_na / self.wavelength_um
    }

    pub fn led_count(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Largest illumination direction sine over the LED grid.
    pub fn max_illumination_sine(&self) -> f64 {
        let h = (self.grid_side as i32 - 1) / 2;
        let d = h as f64 * self.led_pitch_mm * MM_TO_UM;
        let z = self.led_to_sample_mm * MM_TO_UM;
        let lateral = (2.0 * d * d).sqrt();
        lateral / (lateral * lateral + z * z).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FpmError::Config(msg));
        if !(self.wavelength_um > 0.0) {
            return fail(format!("wavelength must be positive, got {}", self.wavelength_um));
        }
        if !(self.camera_pixel_um > 0.0) || !(self.magnification > 0.0) {
            return fail("camera pixel and magnification must be positive".into());
        }
        if !(self.objective_na > 0.0 && self.objective_na < 1.0) {
            return fail(format!("objective NA must be in (0,1), got {}", self.objective_na));
        }
        if !(self.led_pitch_mm > 0.0) || !(self.led_to_sample_mm > 0.0) {
            return fail("LED pitch and distance must be positive".into());
        }
        if self.grid_side % 2 == 0 || self.grid_side == 0 {
            return fail(format!("grid_side must be odd, got {}", self.grid_side));
        }
        if self.lr_size < 8 || self.lr_size % 2 != 0 {
            return fail(format!("lr_size must be even and >= 8, got {}", self.lr_size));
        }
        if self.upsample_factor == 0 {
            return fail("upsample_factor must be >= 1".into());
        }
        // Pupil disk must fit the LR window band.
        let half_band_lr = self.lr_size as f64 / 2.0 * self.delta_k();
        if self.cutoff_cycles_per_um() > half_band_lr {
            return fail(format!(
                "pupil cutoff {:.4} cycles/um exceeds LR half-band {:.4}: camera pixel undersamples the objective NA",
                self.cutoff_cycles_per_um(),
                half_band_lr
            ));
        }
        // HR grid must hold the synthetic aperture at this upsample factor.
        let synthetic_na = self.objective_na + self.max_illumination_sine();
        let hr_nyquist = self.hr_size() as f64 / 2.0 * self.delta_k();
        if synthetic_na / self.wavelength_um > hr_nyquist {
            return fail(format!(
                "synthetic NA {:.3} needs bandwidth {:.4} cycles/um but HR Nyquist is {:.4}; increase upsample_factor",
                synthetic_na,
                synthetic_na / self.wavelength_um,
                hr_nyquist
            ));
        }
        Ok(())
    }
}

/// LED grid offsets (row, col) from the center LED, ordered by ascending
/// distance from the center with row-major tie-breaking. The center LED is
/// first; this is the stored acquisition order and the sequential update
/// order.
pub fn led_offsets_center_out(grid_side: usize) -> Vec<(i32, i32)> {
    let h = (grid_side as i32 - 1) / 2;
    let mut offsets: Vec<(i32, i32)> = (-h..=h)
        .flat_map(|r| (-h..=h).map(move |c| (r, c)))
        .collect();
    offsets.sort_by_key(|&(r, c)| (r * r + c * c, r, c));
    offsets
}

/// Per-LED illumination descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveVector {
    /// LED grid offset (row, col) from the center LED.
    pub grid_offset: (i32, i32),
    /// Normalized direction sines (sin_theta_y, sin_theta_x) i.e. (row, col).
    pub sin_theta: (f64, f64),
    /// Spectral shift (ky, kx), cycles/um.
    pub k_shift: (f64, f64),
    /// Nearest-integer shift on the shared frequency grid, (rows, cols).
    pub pixel_shift: (i64, i64),
}

impl WaveVector {
    pub fn sine_norm(&self) -> f64 {
        (self.sin_theta.0 * self.sin_theta.0 + self.sin_theta.1 * self.sin_theta.1).sqrt()
    }
}

/// Per-LED wave vectors for a given LED ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveVectorTable {
    pub entries: Vec<WaveVector>,
}

/// Wave vectors in the default center-out order.
pub fn compute_wave_vectors(cfg: &SystemConfig) -> Result<WaveVectorTable> {
    compute_wave_vectors_for(cfg, &led_offsets_center_out(cfg.grid_side))
}

/// Wave vectors for an explicit LED order (grid offsets from center).
pub fn compute_wave_vectors_for(
    cfg: &SystemConfig,
    order: &[(i32, i32)],
) -> Result<WaveVectorTable> {
    cfg.validate()?;
    let h_um = cfg.led_to_sample_mm * MM_TO_UM;
    let pitch_um = cfg.led_pitch_mm * MM_TO_UM;
    let dk = cfg.delta_k();
    let entries = order
        .iter()
        .map(|&(gr, gc)| {
            let dy = gr as f64 * pitch_um;
            let dx = gc as f64 * pitch_um;
            let denom = (dx * dx + dy * dy + h_um * h_um).sqrt();
            let sy = dy / denom;
            let sx = dx / denom;
            let ky = sy / cfg.wavelength_um;
            let kx = sx / cfg.wavelength_um;
            WaveVector {
                grid_offset: (gr, gc),
                sin_theta: (sy, sx),
                k_shift: (ky, kx),
                pixel_shift: ((ky / dk).round() as i64, (kx / dk).round() as i64),
            }
        })
        .collect();
    Ok(WaveVectorTable { entries })
}

/// Complex pupil transmission on the shared frequency grid (LR-window sized;
/// the pupil is zero beyond that band by the Nyquist validation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PupilGrid {
    pub size: usize,
    /// Cutoff radius NA/lambda, cycles/um.
    pub cutoff_cycles_per_um: f64,
    /// Frequency-pixel step, cycles/um.
    pub delta_k: f64,
    pub data: Vec<Complex64>,
    /// NA-disk support; values outside are pinned to exactly zero.
    pub support: Vec<bool>,
}

impl PupilGrid {
    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.size + c
    }

    /// Re-apply the support mask (values outside the disk forced to zero).
    pub fn enforce_support(&mut self) {
        for (v, &s) in self.data.iter_mut().zip(self.support.iter()) {
            if !s {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// Ideal circular low-pass pupil: 1 inside the NA/lambda disk, 0 outside.
pub fn build_ideal_pupil(cfg: &SystemConfig) -> Result<PupilGrid> {
    cfg.validate()?;
    let n = cfg.lr_size;
    let dk = cfg.delta_k();
    let cutoff = cfg.cutoff_cycles_per_um();
    let cutoff2 = cutoff * cutoff;
    let half = (n / 2) as f64;
    let mut data = Vec::with_capacity(n * n);
    let mut support = Vec::with_capacity(n * n);
    for r in 0..n {
        let ky = (r as f64 - half) * dk;
        for c in 0..n {
            let kx = (c as f64 - half) * dk;
            let inside = kx * kx + ky * ky <= cutoff2;
            support.push(inside);
            data.push(if inside {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            });
        }
    }
    Ok(PupilGrid {
        size: n,
        cutoff_cycles_per_um: cutoff,
        delta_k: dk,
        data,
        support,
    })
}

/// Angular-spectrum defocus transfer kernel for propagation distance `z_um`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefocusKernel {
    pub z_um: f64,
    pub size: usize,
    pub data: Vec<Complex64>,
}

fn kernel_grid(cfg: &SystemConfig, f: impl Fn(f64) -> Complex64) -> Vec<Complex64> {
    // f receives 1 - |k_hat|^2 on the propagating region, in direction-sine units.
    let n = cfg.lr_size;
    let dk = cfg.delta_k();
    let lambda = cfg.wavelength_um;
    let half = (n / 2) as f64;
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        let ky_hat = (r as f64 - half) * dk * lambda;
        for c in 0..n {
            let kx_hat = (c as f64 - half) * dk * lambda;
            let under = 1.0 - kx_hat * kx_hat - ky_hat * ky_hat;
            data.push(if under >= 0.0 {
                f(under)
            } else {
                // Evanescent region: the propagation phase is undefined; decay
                // is modeled as exact zero.
                Complex64::new(0.0, 0.0)
            });
        }
    }
    data
}

/// Pure-phase defocus kernel exp(j 2 pi / lambda * z * sqrt(1 - |k_hat|^2))
/// on the propagating region, zero on the evanescent region.
pub fn defocus_kernel(cfg: &SystemConfig, z_um: f64) -> Result<DefocusKernel> {
    cfg.validate()?;
    if !z_um.is_finite() {
        return Err(FpmError::Config(format!("defocus z must be finite, got {z_um}")));
    }
    let rate = 2.0 * std::f64::consts::PI / cfg.wavelength_um * z_um;
    let data = kernel_grid(cfg, |under| Complex64::from_polar(1.0, rate * under.sqrt()));
    Ok(DefocusKernel {
        z_um,
        size: cfg.lr_size,
        data,
    })
}

/// Derivative of the defocus kernel with respect to z:
/// (j 2 pi / lambda) sqrt(1 - |k_hat|^2) * H(k, z).
pub fn defocus_kernel_dz(cfg: &SystemConfig, z_um: f64) -> Result<Vec<Complex64>> {
    let rate = 2.0 * std::f64::consts::PI / cfg.wavelength_um;
    Ok(kernel_grid(cfg, |under| {
        let s = under.sqrt();
        Complex64::new(0.0, rate * s) * Complex64::from_polar(1.0, rate * z_um * s)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SystemConfig {
        SystemConfig::desk_scale()
    }

    #[test]
    fn center_led_is_first_and_on_axis() {
        let t = compute_wave_vectors(&cfg()).unwrap();
        assert_eq!(t.entries[0].grid_offset, (0, 0));
        assert_eq!(t.entries[0].sin_theta, (0.0, 0.0));
        assert_eq!(t.entries[0].pixel_shift, (0, 0));
    }

    #[test]
    fn direction_sine_matches_trigonometry() {
        // LED one pitch off-axis: dx = 5 mm, h = 97 mm.
        let t = compute_wave_vectors(&cfg()).unwrap();
        let e = t
            .entries
            .iter()
            .find(|e| e.grid_offset == (0, 1))
            .unwrap();
        let expect = 5.0 / (25.0f64 + 9409.0).sqrt();
        assert!((e.sin_theta.1 - expect).abs() < 1e-12);
        assert!((expect - 0.051478).abs() < 1e-6);
    }

    #[test]
    fn wave_vector_point_antisymmetry_is_exact() {
        let t = compute_wave_vectors(&cfg()).unwrap();
        for e in &t.entries {
            let neg = t
                .entries
                .iter()
                .find(|o| o.grid_offset == (-e.grid_offset.0, -e.grid_offset.1))
                .unwrap();
            assert_eq!(neg.sin_theta.0, -e.sin_theta.0);
            assert_eq!(neg.sin_theta.1, -e.sin_theta.1);
            assert_eq!(neg.pixel_shift.0, -e.pixel_shift.0);
            assert_eq!(neg.pixel_shift.1, -e.pixel_shift.1);
        }
    }

    #[test]
    fn pupil_cutoff_and_dc() {
        let p = build_ideal_pupil(&cfg()).unwrap();
        assert!((p.cutoff_cycles_per_um - 0.13 / 0.47).abs() < 1e-12);
        assert!((p.cutoff_cycles_per_um - 0.27660).abs() < 1e-5);
        let n = p.size;
        assert_eq!(p.data[p.idx(n / 2, n / 2)], Complex64::new(1.0, 0.0));
        // Outside the disk: exactly zero and outside support.
        let dk = p.delta_k;
        for r in 0..n {
            for c in 0..n {
                let ky = (r as f64 - (n / 2) as f64) * dk;
                let kx = (c as f64 - (n / 2) as f64) * dk;
                if (kx * kx + ky * ky).sqrt() > p.cutoff_cycles_per_um {
                    assert_eq!(p.data[p.idx(r, c)], Complex64::new(0.0, 0.0));
                    assert!(!p.support[p.idx(r, c)]);
                }
            }
        }
    }

    #[test]
    fn pupil_mask_idempotent() {
        let p = build_ideal_pupil(&cfg()).unwrap();
        let mut twice = p.clone();
        for (v, &s) in twice.data.iter_mut().zip(p.support.iter()) {
            if !s {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        assert_eq!(twice.data, p.data);
    }

    #[test]
    fn defocus_zero_is_identity_on_propagating_region() {
        let k = defocus_kernel(&cfg(), 0.0).unwrap();
        for v in &k.data {
            assert!(*v == Complex64::new(1.0, 0.0) || *v == Complex64::new(0.0, 0.0));
        }
        let n = k.size;
        assert_eq!(k.data[n / 2 * n + n / 2], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn defocus_dc_phase() {
        let k = defocus_kernel(&cfg(), 10.0).unwrap();
        let n = k.size;
        let dc = k.data[n / 2 * n + n / 2];
        let expect = 2.0 * std::f64::consts::PI * 10.0 / 0.47;
        assert!((dc - Complex64::from_polar(1.0, expect)).norm() < 1e-9);
    }

    #[test]
    fn defocus_unitary_and_group_property() {
        let c = cfg();
        let k1 = defocus_kernel(&c, 13.7).unwrap();
        let k2 = defocus_kernel(&c, -4.2).unwrap();
        let ks = defocus_kernel(&c, 13.7 - 4.2).unwrap();
        for i in 0..k1.data.len() {
            let a = k1.data[i];
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            assert!((a.norm() - 1.0).abs() < 1e-12);
            let prod = a * k2.data[i];
            assert!((prod - ks.data[i]).norm() / ks.data[i].norm() < 1e-12);
        }
    }

    #[test]
    fn evanescent_region_zero() {
        // Config whose LR band extends past |k_hat| = 1 so the evanescent
        // branch is exercised: large pixels relative to wavelength is the
        // opposite direction, so shrink wavelength instead.
        let mut c = cfg();
        c.wavelength_um = 2.0; // k_hat = lambda*k reaches beyond 1 at band edge
        c.objective_na = 0.5;
        let k = defocus_kernel(&c, 5.0).unwrap();
        let n = k.size;
        // Band corner: |k_hat|^2 = 2*(lambda/(2p))^2 > 1 here.
        assert_eq!(k.data[0], Complex64::new(0.0, 0.0));
        assert!((k.data[n / 2 * n + n / 2].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg();
        c.grid_side = 8;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.objective_na = 1.5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.upsample_factor = 0;
        assert!(c.validate().is_err());
        // Undersampled camera: pupil exceeds the LR half-band.
        let mut c = cfg();
        c.camera_pixel_um = 40.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn center_out_order_properties() {
        let order = led_offsets_center_out(7);
        assert_eq!(order.len(), 49);
        assert_eq!(order[0], (0, 0));
        // Non-decreasing distance from center.
        let d: Vec<i32> = order.iter().map(|&(r, c)| r * r + c * c).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }
}
