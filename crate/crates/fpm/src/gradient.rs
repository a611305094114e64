//! Losses and analytic adjoint gradients of the forward model with respect to
//! every optimizable parameter.
//!
//! Complex gradient convention (Wirtinger, fixed here): for a complex
//! parameter u the stored gradient is the conjugate cogradient dL/d(conj u),
//! so a small step along minus the gradient decreases the loss and the real
//! partials are `dL/dRe(u) = 2 Re g`, `dL/dIm(u) = 2 Im g`. The
//! finite-difference oracle checks exactly those real partials.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};
use crate::field::{crop_window, scatter_add_window, spatial_from_spectrum, spectrum_adjoint, ComplexField2D, RealField2D};
use crate::forward::FpmDataset;
use crate::optics::{
    build_ideal_pupil, defocus_kernel, defocus_kernel_dz, PupilGrid, SystemConfig, WaveVectorTable,
};

/// Jointly optimized non-object parameters: pupil transmission, defocus
/// distance and per-LED illumination intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParameters {
    pub pupil: PupilGrid,
    pub defocus_um: f64,
    /// Per-LED illumination intensity gamma, positive, indexed in dataset order.
    pub intensities: Vec<f64>,
}

impl SystemParameters {
    /// Ideal pupil, in-focus, unit intensities.
    pub fn ideal(cfg: &SystemConfig) -> Result<Self> {
        Ok(Self {
            pupil: build_ideal_pupil(cfg)?,
            defocus_um: 0.0,
            intensities: vec![1.0; cfg.led_count()],
        })
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if self.pupil.size != cfg.lr_size {
            return Err(FpmError::Config(format!(
                "pupil grid {} does not match lr_size {}",
                self.pupil.size, cfg.lr_size
            )));
        }
        if self.intensities.len() != cfg.led_count() {
            return Err(FpmError::Config(format!(
                "{} intensities for {} LEDs",
                self.intensities.len(),
                cfg.led_count()
            )));
        }
        if self.intensities.iter().any(|&g| !(g > 0.0)) {
            return Err(FpmError::Config("illumination intensities must be positive".into()));
        }
        if !self.defocus_um.is_finite() {
            return Err(FpmError::Config("defocus must be finite".into()));
        }
        Ok(())
    }
}

/// Which parameter classes participate in updates. The HR spectrum is always
/// optimized; the rest are opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamFlags {
    pub pupil: bool,
    pub defocus: bool,
    pub gamma: bool,
}

impl ParamFlags {
    pub fn spectrum_only() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            pupil: true,
            defocus: true,
            gamma: true,
        }
    }
}

/// Pluggable per-plane loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sum of squared intensity differences (the default Euclidean loss).
    L2Intensity,
    /// Sum of absolute intensity differences.
    L1Intensity,
    /// Sum of squared amplitude (sqrt-intensity) differences.
    L2Amplitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::L2Intensity,
        }
    }
}

const AMP_EPS: f64 = 1e-12;

/// Loss between a predicted and a measured intensity plane.
pub fn loss(pred: &RealField2D, meas: &RealField2D, spec: LossSpec) -> Result<f64> {
    if pred.rows != meas.rows || pred.cols != meas.cols {
        return Err(FpmError::DimensionMismatch {
            expected: format!("{}x{}", meas.rows, meas.cols),
            actual: format!("{}x{}", pred.rows, pred.cols),
        });
    }
    let v = pred
        .data
        .iter()
        .zip(meas.data.iter())
        .map(|(&p, &m)| match spec.kind {
            LossKind::L2Intensity => (p - m) * (p - m),
            LossKind::L1Intensity => (p - m).abs(),
            LossKind::L2Amplitude => {
                let d = p.max(0.0).sqrt() - m.max(0.0).sqrt();
                d * d
            }
        })
        .sum();
    Ok(v)
}

/// dLoss/dIntensity at one pixel.
#[inline]
fn intensity_adjoint(pred: f64, meas: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::L2Intensity => 2.0 * (pred - meas),
        LossKind::L1Intensity => {
            if pred > meas {
                1.0
            } else if pred < meas {
                -1.0
            } else {
                0.0
            }
        }
        LossKind::L2Amplitude => 1.0 - (meas.max(0.0) / pred.max(AMP_EPS)).sqrt(),
    }
}

/// Gradient of a batch loss with respect to every enabled parameter.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// Gradient w.r.t. the HR spectrum; nonzero only on the union of the
    /// batch windows.
    pub spectrum: ComplexField2D,
    /// Gradient w.r.t. the pupil on its support grid; all-zero when disabled.
    pub pupil: Vec<Complex64>,
    /// Gradient w.r.t. the defocus distance, 1/um.
    pub defocus: f64,
    /// Gradient w.r.t. the per-LED intensities; nonzero only at batch indices.
    pub gamma: Vec<f64>,
    /// Which classes were enabled when this bundle was computed.
    pub flags: ParamFlags,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.spectrum.is_finite()
            && self.pupil.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            && self.defocus.is_finite()
            && self.gamma.iter().all(|g| g.is_finite())
    }
}

struct ImagePartial {
    led: usize,
    window_grad: ComplexField2D,
    window_center: (i64, i64),
    pupil_grad: Option<Vec<Complex64>>,
    defocus_grad: f64,
    gamma_grad: f64,
    loss: f64,
}

/// Exact gradient of the summed batch loss via the adjoint chain through the
/// forward model. Accumulation over batch members is in ascending LED index,
/// so results are bit-reproducible under any parallel execution.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    spectrum: &ComplexField2D,
    params: &SystemParameters,
    flags: ParamFlags,
    dataset: &FpmDataset,
    table: &WaveVectorTable,
    batch: &[usize],
    spec: LossSpec,
) -> Result<(GradientBundle, f64)> {
    if batch.is_empty() {
        return Err(FpmError::Dataset("empty batch".into()));
    }
    let mut order: Vec<usize> = batch.to_vec();
    order.sort_unstable();
    if order.windows(2).any(|w| w[0] == w[1]) {
        return Err(FpmError::Dataset("batch indices must be distinct".into()));
    }
    if *order.last().unwrap() >= dataset.led_count() {
        return Err(FpmError::Dataset(format!(
            "batch index {} out of range ({} LEDs)",
            order.last().unwrap(),
            dataset.led_count()
        )));
    }

    let cfg = &dataset.config;
    let n = cfg.lr_size;
    let hr_half = cfg.hr_size() as i64 / 2;
    let kernel = defocus_kernel(cfg, params.defocus_um)?;
    let dkdz = if flags.defocus {
        Some(defocus_kernel_dz(cfg, params.defocus_um)?)
    } else {
        None
    };

    let partials: Result<Vec<ImagePartial>> = order
        .par_iter()
        .map(|&i| {
            let entry = &table.entries[i];
            let center = (hr_half - entry.pixel_shift.0, hr_half - entry.pixel_shift.1);
            let window = crop_window(spectrum, center.0, center.1, n)?;
            let gamma = params.intensities[i];

            let mut filtered = window.clone();
            for j in 0..n * n {
                filtered.data[j] *= params.pupil.data[j] * kernel.data[j];
            }
            let field = spatial_from_spectrum(&filtered);

            let meas = &dataset.planes[i];
            let mut loss_i = 0.0;
            let mut gamma_grad = 0.0;
            let mut g_field = ComplexField2D::zeros(n, n);
            for j in 0..n * n {
                let intensity = field.data[j].norm_sqr();
                let pred = gamma * intensity;
                let m = meas.data[j];
                loss_i += match spec.kind {
                    LossKind::L2Intensity => (pred - m) * (pred - m),
                    LossKind::L1Intensity => (pred - m).abs(),
                    LossKind::L2Amplitude => {
                        let d = pred.max(0.0).sqrt() - m.max(0.0).sqrt();
                        d * d
                    }
                };
                let a = intensity_adjoint(pred, m, spec.kind);
                g_field.data[j] = a * gamma * field.data[j];
                gamma_grad += a * intensity;
            }

            // Adjoint of the inverse window transform.
            let g_w = spectrum_adjoint(&g_field);

            let mut window_grad = ComplexField2D::zeros(n, n);
            for j in 0..n * n {
                window_grad.data[j] = g_w.data[j] * (params.pupil.data[j] * kernel.data[j]).conj();
            }

            let pupil_grad = if flags.pupil {
                let mut g = vec![Complex64::new(0.0, 0.0); n * n];
                for j in 0..n * n {
                    if params.pupil.support[j] {
                        g[j] = g_w.data[j] * (window.data[j] * kernel.data[j]).conj();
                    }
                }
                Some(g)
            } else {
                None
            };

            let defocus_grad = if let Some(dk) = &dkdz {
                let mut acc = 0.0;
                for j in 0..n * n {
                    let dw = window.data[j] * params.pupil.data[j] * dk[j];
                    acc += 2.0 * (g_w.data[j].conj() * dw).re;
                }
                acc
            } else {
                0.0
            };

            Ok(ImagePartial {
                led: i,
                window_grad,
                window_center: center,
                pupil_grad,
                defocus_grad,
                gamma_grad,
                loss: loss_i,
            })
        })
        .collect();
    let partials = partials?;

    // Deterministic fixed-order reduction (ascending LED index).
    let mut bundle = GradientBundle {
        spectrum: ComplexField2D::zeros(cfg.hr_size(), cfg.hr_size()),
        pupil: vec![Complex64::new(0.0, 0.0); n * n],
        defocus: 0.0,
        gamma: vec![0.0; dataset.led_count()],
        flags,
    };
    let mut total_loss = 0.0;
    for p in &partials {
        scatter_add_window(&mut bundle.spectrum, &p.window_grad, p.window_center.0, p.window_center.1);
        if let Some(pg) = &p.pupil_grad {
            for (acc, g) in bundle.pupil.iter_mut().zip(pg.iter()) {
                *acc += g;
            }
        }
        bundle.defocus += p.defocus_grad;
        if flags.gamma {
            bundle.gamma[p.led] = p.gamma_grad;
        }
        total_loss += p.loss;
    }
    Ok((bundle, total_loss))
}

/// Forward-only batch loss (used by the finite-difference oracle and traces).
pub fn batch_loss(
    spectrum: &ComplexField2D,
    params: &SystemParameters,
    dataset: &FpmDataset,
    table: &WaveVectorTable,
    batch: &[usize],
    spec: LossSpec,
) -> Result<f64> {
    let cfg = &dataset.config;
    let kernel = defocus_kernel(cfg, params.defocus_um)?;
    let mut total = 0.0;
    for &i in batch {
        let pred = crate::forward::forward_image_with_kernel(spectrum, params, table, i, &kernel)?;
        total += loss(&pred, &dataset.planes[i], spec)?;
    }
    Ok(total)
}

/// One scalar coordinate of one parameter, for numeric differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdTarget {
    SpectrumRe(usize),
    SpectrumIm(usize),
    PupilRe(usize),
    PupilIm(usize),
    Defocus,
    Gamma(usize),
}

/// Central-difference derivative of the batch loss along one coordinate.
/// Test-side trust anchor for the analytic adjoints; also usable as a numeric
/// fallback for the defocus scalar.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_oracle(
    spectrum: &ComplexField2D,
    params: &SystemParameters,
    dataset: &FpmDataset,
    table: &WaveVectorTable,
    batch: &[usize],
    spec: LossSpec,
    target: FdTarget,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(FpmError::Config(format!("perturbation must be positive, got {step}")));
    }
    let eval = |delta: f64| -> Result<f64> {
        let mut s = spectrum.clone();
        let mut p = params.clone();
        match target {
            FdTarget::SpectrumRe(i) => s.data[i].re += delta,
            FdTarget::SpectrumIm(i) => s.data[i].im += delta,
            FdTarget::PupilRe(i) => p.pupil.data[i].re += delta,
            FdTarget::PupilIm(i) => p.pupil.data[i].im += delta,
            FdTarget::Defocus => p.defocus_um += delta,
            FdTarget::Gamma(i) => p.intensities[i] += delta,
        }
        batch_loss(&s, &p, dataset, table, batch, spec)
    };
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}

/// Central difference of an arbitrary scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, at: f64, step: f64) -> f64 {
    (f(at + step) - f(at - step)) / (2.0 * step)
}

/// Analytic partial along an FD target, read out of a gradient bundle using
/// the documented Wirtinger convention.
pub fn analytic_partial(bundle: &GradientBundle, target: FdTarget) -> f64 {
    match target {
        FdTarget::SpectrumRe(i) => 2.0 * bundle.spectrum.data[i].re,
        FdTarget::SpectrumIm(i) => 2.0 * bundle.spectrum.data[i].im,
        FdTarget::PupilRe(i) => 2.0 * bundle.pupil[i].re,
        FdTarget::PupilIm(i) => 2.0 * bundle.pupil[i].im,
        FdTarget::Defocus => bundle.defocus,
        FdTarget::Gamma(i) => bundle.gamma[i],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::spectrum_from_spatial;
    use crate::forward::{generate_dataset, GroundTruth, NoiseModel};

    fn instance(seed: u64) -> (SystemConfig, ComplexField2D, SystemParameters, FpmDataset, WaveVectorTable) {
        let cfg = SystemConfig {
            lr_size: 16,
            upsample_factor: 2,
            grid_side: 3,
            ..SystemConfig::desk_scale()
        };
        let truth = GroundTruth::synthetic(&cfg, seed).unwrap();
        let params = SystemParameters::ideal(&cfg).unwrap();
        let ds = generate_dataset(&truth, &cfg, &params, &NoiseModel::none()).unwrap();
        let table = ds.wave_vectors().unwrap();
        let spectrum = spectrum_from_spatial(&truth.complex_object());
        (cfg, spectrum, params, ds, table)
    }

    #[test]
    fn loss_basics() {
        let a = RealField2D::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(loss(&a, &a, LossSpec::default()).unwrap(), 0.0);
        let b = RealField2D::from_vec(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        // Constant offset 1 on a 4-pixel plane.
        assert_eq!(loss(&b, &a, LossSpec::default()).unwrap(), 4.0);
        assert_eq!(
            loss(&b, &a, LossSpec { kind: LossKind::L1Intensity }).unwrap(),
            4.0
        );
        let c = RealField2D::zeros(3, 3);
        assert!(loss(&a, &c, LossSpec::default()).is_err());
    }

    #[test]
    fn loss_matches_summation_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let p: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 3.0).collect();
        let m: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 3.0).collect();
        let pf = RealField2D::from_vec(8, 8, p.clone()).unwrap();
        let mf = RealField2D::from_vec(8, 8, m.clone()).unwrap();
        let got = loss(&pf, &mf, LossSpec::default()).unwrap();
        let mut expect = 0.0;
        for i in 0..64 {
            expect += (p[i] - m[i]) * (p[i] - m[i]);
        }
        assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn stationary_point_has_zero_gradients() {
        let (_, spectrum, params, ds, table) = instance(21);
        let batch: Vec<usize> = (0..ds.led_count()).collect();
        let (bundle, l) = batch_gradient(
            &spectrum,
            &params,
            ParamFlags::all(),
            &ds,
            &table,
            &batch,
            LossSpec::default(),
        )
        .unwrap();
        assert!(l < 1e-18);
        assert!(bundle.spectrum.data.iter().all(|z| z.norm() < 1e-12));
        assert!(bundle.pupil.iter().all(|z| z.norm() < 1e-12));
        assert!(bundle.defocus.abs() < 1e-9);
        assert!(bundle.gamma.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn batch_linearity() {
        let (_, mut spectrum, params, ds, table) = instance(22);
        // Perturb the state so gradients are nonzero.
        for z in spectrum.data.iter_mut() {
            *z *= 1.05;
        }
        let spec = LossSpec::default();
        let (ga, _) = batch_gradient(&spectrum, &params, ParamFlags::all(), &ds, &table, &[2], spec).unwrap();
        let (gb, _) = batch_gradient(&spectrum, &params, ParamFlags::all(), &ds, &table, &[5], spec).unwrap();
        let (gab, _) = batch_gradient(&spectrum, &params, ParamFlags::all(), &ds, &table, &[5, 2], spec).unwrap();
        let scale = gab.spectrum.data.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        for i in 0..gab.spectrum.data.len() {
            let sum = ga.spectrum.data[i] + gb.spectrum.data[i];
            assert!((gab.spectrum.data[i] - sum).norm() <= 1e-12 * scale);
        }
        assert!((gab.defocus - (ga.defocus + gb.defocus)).abs() <= 1e-12 * gab.defocus.abs().max(1.0));
        assert!((gab.gamma[2] - ga.gamma[2]).abs() <= 1e-12 * ga.gamma[2].abs().max(1.0));
        assert!((gab.gamma[5] - gb.gamma[5]).abs() <= 1e-12 * gb.gamma[5].abs().max(1.0));
    }

    #[test]
    fn pupil_gradient_zero_outside_support() {
        let (_, mut spectrum, params, ds, table) = instance(23);
        for z in spectrum.data.iter_mut() {
            *z *= 1.1;
        }
        let (g, _) = batch_gradient(
            &spectrum,
            &params,
            ParamFlags::all(),
            &ds,
            &table,
            &[0, 3, 7],
            LossSpec::default(),
        )
        .unwrap();
        for (i, &s) in params.pupil.support.iter().enumerate() {
            if !s {
                assert_eq!(g.pupil[i], Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn disabled_classes_have_zero_gradients() {
        let (_, mut spectrum, params, ds, table) = instance(24);
        for z in spectrum.data.iter_mut() {
            *z *= 1.1;
        }
        let (g, _) = batch_gradient(
            &spectrum,
            &params,
            ParamFlags::spectrum_only(),
            &ds,
            &table,
            &[1, 4],
            LossSpec::default(),
        )
        .unwrap();
        assert!(g.pupil.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        assert_eq!(g.defocus, 0.0);
        assert!(g.gamma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descent_direction_decreases_loss() {
        let (_, mut spectrum, params, ds, table) = instance(25);
        for z in spectrum.data.iter_mut() {
            *z *= 1.07;
        }
        let spec = LossSpec::default();
        let batch: Vec<usize> = (0..ds.led_count()).collect();
        let (g, l0) = batch_gradient(&spectrum, &params, ParamFlags::spectrum_only(), &ds, &table, &batch, spec).unwrap();
        let gnorm = g.spectrum.norm_sqr_sum().sqrt();
        let step = 1e-6 / gnorm.max(1e-30);
        let mut stepped = spectrum.clone();
        for (s, gz) in stepped.data.iter_mut().zip(g.spectrum.data.iter()) {
            *s -= step * gz;
        }
        let l1 = batch_loss(&stepped, &params, &ds, &table, &batch, spec).unwrap();
        assert!(l1 < l0, "step along -gradient must decrease loss: {l0} -> {l1}");
    }

    #[test]
    fn quadratic_toy_central_difference() {
        let d = central_difference(|w| w * w, 3.0, 1e-4);
        assert!((d - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_agreement_spot_check() {
        // Full-coverage FD validation lives in the acceptance suite; this is
        // a fast smoke check of one coordinate per class.
        let (_, mut spectrum, mut params, ds, table) = instance(26);
        for z in spectrum.data.iter_mut() {
            *z *= 1.04;
        }
        params.defocus_um = 3.0;
        let spec = LossSpec::default();
        let batch = vec![0, 2, 6];
        let (g, _) = batch_gradient(&spectrum, &params, ParamFlags::all(), &ds, &table, &batch, spec).unwrap();
        let n = spectrum.rows;
        let dc = n / 2 * n + n / 2;
        let p_dc = params.pupil.size / 2 * params.pupil.size + params.pupil.size / 2;
        for target in [
            FdTarget::SpectrumRe(dc),
            FdTarget::SpectrumIm(dc + 1),
            FdTarget::PupilRe(p_dc),
            FdTarget::PupilIm(p_dc + 2),
            FdTarget::Gamma(2),
            FdTarget::Defocus,
        ] {
            let h = if matches!(target, FdTarget::Defocus) { 1e-3 } else { 1e-5 };
            let fd = finite_difference_oracle(&spectrum, &params, &ds, &table, &batch, spec, target, h).unwrap();
            let an = analytic_partial(&g, target);
            let tol = if matches!(target, FdTarget::Defocus) { 1e-2 } else { 1e-4 };
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < tol, "{target:?}: fd={fd} analytic={an}");
        }
    }

    #[test]
    fn fd_richardson_second_order() {
        // Error of the central difference shrinks ~4x when the step halves.
        let (_, mut spectrum, params, ds, table) = instance(27);
        for z in spectrum.data.iter_mut() {
            *z *= 1.05;
        }
        let spec = LossSpec::default();
        let batch = vec![1, 3];
        let (g, _) = batch_gradient(&spectrum, &params, ParamFlags::spectrum_only(), &ds, &table, &batch, spec).unwrap();
        let n = spectrum.rows;
        let target = FdTarget::SpectrumRe(n / 2 * n + n / 2 + 3);
        let an = analytic_partial(&g, target);
        let e1 = (finite_difference_oracle(&spectrum, &params, &ds, &table, &batch, spec, target, 2e-3).unwrap() - an).abs();
        let e2 = (finite_difference_oracle(&spectrum, &params, &ds, &table, &batch, spec, target, 1e-3).unwrap() - an).abs();
        // Allow slack around the ideal factor of 4; rounding floors the ratio
        // when both errors are tiny.
        assert!(e2 < e1 * 0.5 || e1 < 1e-10, "e1={e1} e2={e2}");
    }

    #[test]
    fn empty_and_duplicate_batches_rejected() {
        let (_, spectrum, params, ds, table) = instance(28);
        let spec = LossSpec::default();
        assert!(batch_gradient(&spectrum, &params, ParamFlags::all(), &ds, &table, &[], spec).is_err());
        assert!(batch_gradient(&spectrum, &params, ParamFlags::all(), &ds, &table, &[1, 1], spec).is_err());
        assert!(batch_gradient(&spectrum, &params, ParamFlags::all(), &ds, &table, &[99], spec).is_err());
    }
}
