//! Forward image formation and synthetic dataset generation.
//!
//! A low-resolution intensity plane for LED i is formed by cropping the
//! lr-sized window of the HR spectrum centered at minus that LED's pixel
//! shift, applying the pupil and defocus kernel, inverse-transforming and
//! taking gamma_i times the squared modulus. The transform scaling is chosen
//! so a unit-amplitude flat object under the center LED yields mean
//! intensity 1.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};
use crate::field::{crop_window, spatial_from_spectrum, spectrum_from_spatial, ComplexField2D, RealField2D};
use crate::gradient::SystemParameters;
use crate::optics::{
    compute_wave_vectors_for, defocus_kernel, DefocusKernel, SystemConfig, WaveVectorTable,
};

/// High-resolution ground-truth object: amplitude in [0,1], phase in [-pi, pi).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub amplitude: RealField2D,
    pub phase: RealField2D,
}

impl GroundTruth {
    pub fn new(amplitude: RealField2D, phase: RealField2D) -> Result<Self> {
        if amplitude.rows != phase.rows || amplitude.cols != phase.cols {
            return Err(FpmError::DimensionMismatch {
                expected: format!("{}x{}", amplitude.rows, amplitude.cols),
                actual: format!("{}x{}", phase.rows, phase.cols),
            });
        }
        if amplitude.data.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(FpmError::Config("ground-truth amplitude must lie in [0,1]".into()));
        }
        Ok(Self { amplitude, phase })
    }

    /// Flat unit-amplitude, zero-phase object.
    pub fn flat(hr_size: usize) -> Self {
        Self {
            amplitude: RealField2D {
                rows: hr_size,
                cols: hr_size,
                data: vec![1.0; hr_size * hr_size],
            },
            phase: RealField2D::zeros(hr_size, hr_size),
        }
    }

    /// Smooth band-limited random object, reproducible under `seed`. Content
    /// is kept inside roughly 80% of the synthetic-aperture band so the
    /// object is recoverable from the configured LED set.
    pub fn synthetic(cfg: &SystemConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.hr_size();
        let synth_cutoff_px =
            (cfg.objective_na + cfg.max_illumination_sine()) / cfg.wavelength_um / cfg.delta_k();
        let cutoff_px = 0.8 * synth_cutoff_px;
        let amp_raw = bandlimited_noise(n, cutoff_px, seed, 0);
        let phase_raw = bandlimited_noise(n, cutoff_px, seed, 1);
        let amp_peak = amp_raw.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let phase_peak = phase_raw.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let amplitude = RealField2D {
            rows: n,
            cols: n,
            data: amp_raw.data.iter().map(|v| 0.6 + 0.35 * v / amp_peak).collect(),
        };
        let phase = RealField2D {
            rows: n,
            cols: n,
            data: phase_raw.data.iter().map(|v| 1.3 * v / phase_peak).collect(),
        };
        Self::new(amplitude, phase)
    }

    /// Complex object amplitude * exp(i phase).
    pub fn complex_object(&self) -> ComplexField2D {
        ComplexField2D {
            rows: self.amplitude.rows,
            cols: self.amplitude.cols,
            data: self
                .amplitude
                .data
                .iter()
                .zip(self.phase.data.iter())
                .map(|(&a, &p)| Complex64::from_polar(a, p))
                .collect(),
        }
    }
}

/// White noise low-passed by a Gaussian radial filter in the frequency domain.
fn bandlimited_noise(n: usize, cutoff_px: f64, seed: u64, stream: u64) -> RealField2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let white = ComplexField2D {
        rows: n,
        cols: n,
        data: (0..n * n)
            .map(|_| Complex64::new(normal.sample(&mut rng), 0.0))
            .collect(),
    };
    let mut spec = spectrum_from_spatial(&white);
    let sigma = cutoff_px / 2.0;
    let half = (n / 2) as f64;
    for r in 0..n {
        for c in 0..n {
            let dr = r as f64 - half;
            let dc = c as f64 - half;
            let r2 = dr * dr + dc * dc;
            let g = if r2.sqrt() > cutoff_px {
                0.0
            } else {
                (-r2 / (2.0 * sigma * sigma)).exp()
            };
            let i = r * n + c;
            spec.data[i] *= g;
        }
    }
    let filtered = spatial_from_spectrum(&spec);
    RealField2D {
        rows: n,
        cols: n,
        data: filtered.data.iter().map(|z| z.re).collect(),
    }
}

/// Per-image additive noise description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub seed: u64,
    /// Constant noise mean tied to the system (subtracted again after
    /// generation, matching how real acquisitions are corrected at load).
    #[serde(default)]
    pub systematic_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    None,
    Gaussian { variance: VarianceRule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum VarianceRule {
    Fixed { value: f64 },
    /// Variance = fraction * max(plane), evaluated per plane before noise.
    FractionOfMax { fraction: f64 },
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            seed: 0,
            systematic_offset: 0.0,
        }
    }

    pub fn gaussian_fraction(fraction: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian {
                variance: VarianceRule::FractionOfMax { fraction },
            },
            seed,
            systematic_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            NoiseKind::None => Ok(()),
            NoiseKind::Gaussian { variance } => {
                let v = match variance {
                    VarianceRule::Fixed { value } => *value,
                    VarianceRule::FractionOfMax { fraction } => *fraction,
                };
                if v < 0.0 {
                    Err(FpmError::Config(format!("noise variance must be >= 0, got {v}")))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Record of the noise applied at synthesis, kept in dataset metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub model: NoiseModel,
}

/// Ordered stack of low-resolution intensity planes plus geometry metadata;
/// the unit of persistence. Planes are stored in `led_order` order and are
/// exposure-normalized, offset-corrected intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct FpmDataset {
    pub config: SystemConfig,
    /// LED grid offsets from center, in acquisition/storage order.
    pub led_order: Vec<(i32, i32)>,
    pub planes: Vec<RealField2D>,
    /// Per-LED exposure weights applied at synthesis (divided out already).
    pub exposures: Option<Vec<f64>>,
    /// True illumination intensities used at synthesis (synthetic data only).
    pub true_gamma: Option<Vec<f64>>,
    /// True defocus used at synthesis (synthetic data only).
    pub true_defocus_um: Option<f64>,
    pub noise: Option<NoiseRecord>,
    pub note: Option<String>,
    /// Ground truth attached for evaluation (synthetic data only).
    pub truth: Option<GroundTruth>,
}

impl FpmDataset {
    pub fn led_count(&self) -> usize {
        self.led_order.len()
    }

    /// Index of the center LED in the stored order.
    pub fn center_index(&self) -> Result<usize> {
        self.led_order
            .iter()
            .position(|&o| o == (0, 0))
            .ok_or_else(|| FpmError::Dataset("dataset has no center LED".into()))
    }

    pub fn wave_vectors(&self) -> Result<WaveVectorTable> {
        compute_wave_vectors_for(&self.config, &self.led_order)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.planes.len() != self.led_order.len() {
            return Err(FpmError::Dataset(format!(
                "{} planes but {} LEDs",
                self.planes.len(),
                self.led_order.len()
            )));
        }
        let n = self.config.lr_size;
        for (i, p) in self.planes.iter().enumerate() {
            if p.rows != n || p.cols != n {
                return Err(FpmError::Dataset(format!(
                    "plane {i} is {}x{}, expected {n}x{n}",
                    p.rows, p.cols
                )));
            }
            if p.data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(FpmError::Dataset(format!("plane {i} has negative or non-finite values")));
            }
        }
        // The LED order must be a permutation of the full grid.
        let mut sorted = self.led_order.clone();
        sorted.sort_unstable();
        let mut expect = crate::optics::led_offsets_center_out(self.config.grid_side);
        expect.sort_unstable();
        if sorted != expect {
            return Err(FpmError::Dataset("LED order is not a permutation of the grid".into()));
        }
        Ok(())
    }
}

/// Complex field at the camera for one LED: windowed spectrum times pupil and
/// defocus kernel, inverse-transformed.
pub fn forward_field(
    hr_spectrum: &ComplexField2D,
    pixel_shift: (i64, i64),
    pupil: &crate::optics::PupilGrid,
    kernel: &DefocusKernel,
) -> Result<ComplexField2D> {
    let n = pupil.size;
    let center_r = hr_spectrum.rows as i64 / 2 - pixel_shift.0;
    let center_c = hr_spectrum.cols as i64 / 2 - pixel_shift.1;
    let mut window = crop_window(hr_spectrum, center_r, center_c, n)?;
    for i in 0..n * n {
        window.data[i] *= pupil.data[i] * kernel.data[i];
    }
    Ok(spatial_from_spectrum(&window))
}

/// Low-resolution intensity plane for one LED under the current parameters.
pub fn forward_image(
    hr_spectrum: &ComplexField2D,
    params: &SystemParameters,
    table: &WaveVectorTable,
    led_index: usize,
    cfg: &SystemConfig,
) -> Result<RealField2D> {
    let kernel = defocus_kernel(cfg, params.defocus_um)?;
    forward_image_with_kernel(hr_spectrum, params, table, led_index, &kernel)
}

/// Same as [`forward_image`] with a precomputed defocus kernel; used by loops
/// that evaluate many LEDs at one z.
pub fn forward_image_with_kernel(
    hr_spectrum: &ComplexField2D,
    params: &SystemParameters,
    table: &WaveVectorTable,
    led_index: usize,
    kernel: &DefocusKernel,
) -> Result<RealField2D> {
    let entry = table
        .entries
        .get(led_index)
        .ok_or_else(|| FpmError::Dataset(format!("LED index {led_index} out of range")))?;
    let field = forward_field(hr_spectrum, entry.pixel_shift, &params.pupil, kernel)?;
    let gamma = params.intensities[led_index];
    Ok(RealField2D {
        rows: field.rows,
        cols: field.cols,
        data: field.data.iter().map(|z| gamma * z.norm_sqr()).collect(),
    })
}

/// Synthesize one intensity dataset from a ground-truth object.
///
/// Noise uses one seed-derived stream per LED index, so parallel and serial
/// generation are bit-identical. Intensities are clamped at zero after noise.
pub fn generate_dataset(
    truth: &GroundTruth,
    cfg: &SystemConfig,
    params: &SystemParameters,
    noise: &NoiseModel,
) -> Result<FpmDataset> {
    generate_dataset_with_exposures(truth, cfg, params, noise, None)
}

/// [`generate_dataset`] with optional per-LED exposure weights. Longer
/// exposures suppress the relative noise of the affected planes; the weights
/// are divided out immediately and recorded in the dataset.
pub fn generate_dataset_with_exposures(
    truth: &GroundTruth,
    cfg: &SystemConfig,
    params: &SystemParameters,
    noise: &NoiseModel,
    exposures: Option<Vec<f64>>,
) -> Result<FpmDataset> {
    cfg.validate()?;
    noise.validate()?;
    params.validate(cfg)?;
    let n_hr = cfg.hr_size();
    if truth.amplitude.rows != n_hr || truth.amplitude.cols != n_hr {
        return Err(FpmError::DimensionMismatch {
            expected: format!("{n_hr}x{n_hr} ground truth"),
            actual: format!("{}x{}", truth.amplitude.rows, truth.amplitude.cols),
        });
    }
    let led_order = crate::optics::led_offsets_center_out(cfg.grid_side);
    if let Some(e) = &exposures {
        if e.len() != led_order.len() {
            return Err(FpmError::Config(format!(
                "{} exposures for {} LEDs",
                e.len(),
                led_order.len()
            )));
        }
        if e.iter().any(|&v| !(v > 0.0)) {
            return Err(FpmError::Config("exposure weights must be positive".into()));
        }
    }
    let table = compute_wave_vectors_for(cfg, &led_order)?;
    let spectrum = spectrum_from_spatial(&truth.complex_object());
    let kernel = defocus_kernel(cfg, params.defocus_um)?;

    let planes: Result<Vec<RealField2D>> = (0..led_order.len())
        .into_par_iter()
        .map(|i| {
            let clean = forward_image_with_kernel(&spectrum, params, &table, i, &kernel)?;
            let exposure = exposures.as_ref().map_or(1.0, |e| e[i]);
            Ok(apply_noise(&clean, noise, exposure, i as u64))
        })
        .collect();

    Ok(FpmDataset {
        config: cfg.clone(),
        led_order,
        planes: planes?,
        exposures,
        true_gamma: Some(params.intensities.clone()),
        true_defocus_um: Some(params.defocus_um),
        noise: Some(NoiseRecord { model: noise.clone() }),
        note: None,
        truth: Some(truth.clone()),
    })
}

fn apply_noise(clean: &RealField2D, noise: &NoiseModel, exposure: f64, led: u64) -> RealField2D {
    let measured: Vec<f64> = match &noise.kind {
        NoiseKind::None => clean.data.iter().map(|&v| exposure * v).collect(),
        NoiseKind::Gaussian { variance } => {
            let exposed: Vec<f64> = clean.data.iter().map(|&v| exposure * v).collect();
            let max = exposed.iter().copied().fold(0.0f64, f64::max);
            let var = match variance {
                VarianceRule::Fixed { value } => *value,
                VarianceRule::FractionOfMax { fraction } => fraction * max,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(led);
            let normal = Normal::new(noise.systematic_offset, var.sqrt()).unwrap();
            exposed
                .iter()
                .map(|&v| (v + normal.sample(&mut rng)).max(0.0))
                .collect()
        }
    };
    // Back to normalized intensity: divide out exposure, subtract the
    // recorded constant offset, keep nonnegative.
    RealField2D {
        rows: clean.rows,
        cols: clean.cols,
        data: measured
            .iter()
            .map(|&v| ((v - noise.systematic_offset) / exposure).max(0.0))
            .collect(),
    }
}

/// Per-image threshold rule for dark-field preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    Fixed { value: f64 },
    /// Threshold at the q-quantile of each plane, q in [0,1].
    Quantile { q: f64 },
}

/// Zero out values below the threshold, on dark-field planes only
/// (LEDs whose direction sine exceeds the objective NA).
pub fn threshold_denoise(dataset: &FpmDataset, rule: ThresholdRule) -> Result<FpmDataset> {
    dataset.validate()?;
    let table = dataset.wave_vectors()?;
    let na = dataset.config.objective_na;
    let mut out = dataset.clone();
    for (i, plane) in out.planes.iter_mut().enumerate() {
        if table.entries[i].sine_norm() <= na {
            continue;
        }
        let threshold = match rule {
            ThresholdRule::Fixed { value } => value,
            ThresholdRule::Quantile { q } => quantile(&plane.data, q),
        };
        for v in plane.data.iter_mut() {
            if *v < threshold {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

fn quantile(data: &[f64], q: f64) -> f64 {
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    sorted[idx]
}
