//! First-order update rules applied to gradient bundles: plain SGD, momentum,
//! and an adaptive-moment optimizer, with per-parameter-class step sizes and
//! step-size schedules.
//!
//! Complex parameters are updated as pairs of independent real coordinates;
//! the intensities are updated in log space to preserve positivity and
//! reported in linear space.

use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};
use crate::field::ComplexField2D;
use crate::gradient::{GradientBundle, SystemParameters};
use crate::optics::SystemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    AdaptiveMoment,
}

/// Base step size per parameter class. The heterogeneous parameter scales
/// (dense spectrum vs one defocus scalar) need separate steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSizes {
    pub spectrum: f64,
    pub pupil: f64,
    pub defocus: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Step multiplied by `factor^epoch`.
    ExponentialDecay { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub alpha: StepSizes,
    /// Velocity decay for `momentum`.
    #[serde(default = "default_momentum_beta")]
    pub momentum_beta: f64,
    /// First-moment decay for `adaptive_moment`.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    /// Second-moment decay for `adaptive_moment`.
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub schedule: Schedule,
}

fn default_momentum_beta() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerSpec {
    /// Default for batch-style updates (random batch and global).
    pub fn default_batch() -> Self {
        Self {
            kind: OptimizerKind::AdaptiveMoment,
            alpha: StepSizes {
                spectrum: 5e-3,
                pupil: 2e-3,
                defocus: 10.0,
                gamma: 5e-2,
            },
            momentum_beta: default_momentum_beta(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            schedule: Schedule::ExponentialDecay { factor: 0.9 },
        }
    }

    /// Default for the sequential baseline: one-image updates need a step
    /// about 10x smaller than the batch default to stay stable.
    pub fn default_sequential() -> Self {
        let batch = Self::default_batch();
        Self {
            alpha: StepSizes {
                spectrum: batch.alpha.spectrum / 10.0,
                pupil: batch.alpha.pupil / 10.0,
                defocus: batch.alpha.defocus / 10.0,
                gamma: batch.alpha.gamma / 10.0,
            },
            ..batch
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.alpha;
        for (name, v) in [
            ("spectrum", a.spectrum),
            ("pupil", a.pupil),
            ("defocus", a.defocus),
            ("gamma", a.gamma),
        ] {
            if !(v > 0.0) {
                return Err(FpmError::Config(format!("step size for {name} must be positive, got {v}")));
            }
        }
        if let Schedule::ExponentialDecay { factor } = self.schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(FpmError::Config(format!("decay factor must be in (0,1], got {factor}")));
            }
        }
        Ok(())
    }
}

/// Effective step sizes at a given epoch.
pub fn step_schedule(epoch: usize, spec: &OptimizerSpec) -> StepSizes {
    let f = match spec.schedule {
        Schedule::Constant => 1.0,
        Schedule::ExponentialDecay { factor } => factor.powi(epoch as i32),
    };
    StepSizes {
        spectrum: spec.alpha.spectrum * f,
        pupil: spec.alpha.pupil * f,
        defocus: spec.alpha.defocus * f,
        gamma: spec.alpha.gamma * f,
    }
}

/// First/second moment accumulators for one parameter class (real view).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied to this class.
    pub k: u64,
}

impl MomentPair {
    fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            k: 0,
        }
    }
}

/// Optimizer state for every parameter class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMoments {
    pub spectrum: MomentPair,
    pub pupil: MomentPair,
    pub defocus: MomentPair,
    /// Moments over log-gamma coordinates.
    pub gamma: MomentPair,
}

impl OptimizerMoments {
    pub fn new(cfg: &SystemConfig) -> Self {
        let hr = cfg.hr_size();
        let lr = cfg.lr_size;
        Self {
            spectrum: MomentPair::zeros(2 * hr * hr),
            pupil: MomentPair::zeros(2 * lr * lr),
            defocus: MomentPair::zeros(1),
            gamma: MomentPair::zeros(cfg.led_count()),
        }
    }
}

/// One step of the configured rule over a realified coordinate slice.
fn update_real(
    vals: &mut [f64],
    grads: &[f64],
    mom: &mut MomentPair,
    alpha: f64,
    spec: &OptimizerSpec,
) {
    debug_assert_eq!(vals.len(), grads.len());
    debug_assert_eq!(vals.len(), mom.m.len());
    mom.k += 1;
    match spec.kind {
        OptimizerKind::Sgd => {
            for (w, &g) in vals.iter_mut().zip(grads.iter()) {
                *w -= alpha * g;
            }
        }
        OptimizerKind::Momentum => {
            for i in 0..vals.len() {
                mom.m[i] = spec.momentum_beta * mom.m[i] + grads[i];
                vals[i] -= alpha * mom.m[i];
            }
        }
        OptimizerKind::AdaptiveMoment => {
            let b1 = spec.beta1;
            let b2 = spec.beta2;
            let bc1 = 1.0 - b1.powi(mom.k as i32);
            let bc2 = 1.0 - b2.powi(mom.k as i32);
            for i in 0..vals.len() {
                let g = grads[i];
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                vals[i] -= alpha * mh / (vh.sqrt() + spec.epsilon);
            }
        }
    }
}

fn complex_as_real(data: &mut [num_complex::Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * data.len());
    for z in data.iter() {
        out.push(z.re);
        out.push(z.im);
    }
    out
}

fn real_into_complex(reals: &[f64], data: &mut [num_complex::Complex64]) {
    for (i, z) in data.iter_mut().enumerate() {
        z.re = reals[2 * i];
        z.im = reals[2 * i + 1];
    }
}

/// Apply one update to the spectrum and every enabled system parameter.
///
/// Classes whose gradient class is disabled in the bundle are skipped
/// entirely, moments included. A non-finite gradient aborts with a
/// divergence diagnostic before anything is modified.
pub fn apply_update(
    spectrum: &mut ComplexField2D,
    params: &mut SystemParameters,
    moments: &mut OptimizerMoments,
    grads: &GradientBundle,
    spec: &OptimizerSpec,
    epoch: usize,
) -> Result<()> {
    spec.validate()?;
    if !grads.is_finite() {
        return Err(FpmError::Diverged(
            "non-finite gradient encountered; reduce the step size".into(),
        ));
    }
    let alpha = step_schedule(epoch, spec);

    // Spectrum is always optimized.
    {
        let mut vals = complex_as_real(&mut spectrum.data);
        let grads_r = {
            let mut g = Vec::with_capacity(vals.len());
            for z in grads.spectrum.data.iter() {
                // Real partials are twice the stored Wirtinger gradient.
                g.push(2.0 * z.re);
                g.push(2.0 * z.im);
            }
            g
        };
        update_real(&mut vals, &grads_r, &mut moments.spectrum, alpha.spectrum, spec);
        real_into_complex(&vals, &mut spectrum.data);
    }

    if grads.flags.pupil {
        let mut vals = complex_as_real(&mut params.pupil.data);
        let mut g = Vec::with_capacity(vals.len());
        for z in grads.pupil.iter() {
            g.push(2.0 * z.re);
            g.push(2.0 * z.im);
        }
        update_real(&mut vals, &g, &mut moments.pupil, alpha.pupil, spec);
        real_into_complex(&vals, &mut params.pupil.data);
        params.pupil.enforce_support();
    }

    if grads.flags.defocus {
        let mut z = [params.defocus_um];
        update_real(&mut z, &[grads.defocus], &mut moments.defocus, alpha.defocus, spec);
        params.defocus_um = z[0];
    }

    if grads.flags.gamma {
        // Log-space step preserves positivity: d/d(ln g) = g * d/dg.
        let mut u: Vec<f64> = params.intensities.iter().map(|g| g.ln()).collect();
        let gu: Vec<f64> = params
            .intensities
            .iter()
            .zip(grads.gamma.iter())
            .map(|(&g, &d)| g * d)
            .collect();
        update_real(&mut u, &gu, &mut moments.gamma, alpha.gamma, spec);
        for (g, &ui) in params.intensities.iter_mut().zip(u.iter()) {
            // Clamp the log value so exp never under- or overflows; a zero
            // intensity would be absorbing (its gradient scales with g).
            *g = ui.clamp(-700.0, 700.0).exp();
        }
    }

    Ok(())
}
