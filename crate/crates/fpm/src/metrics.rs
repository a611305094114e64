//! Quantitative evaluation: PSNR against ground truth and the Monte-Carlo
//! noise-accumulation statistics contrasting global and incremental updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};
use crate::field::{wrap_phase, RealField2D};
use crate::forward::GroundTruth;

/// Defined cap for zero-MSE comparisons; keeps CSV free of infinities.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB, peak referenced to the ground truth:
/// 10 log10(max(truth)^2 / MSE), capped at [`PSNR_CAP_DB`].
pub fn psnr(estimate: &RealField2D, truth: &RealField2D) -> Result<f64> {
    if estimate.rows != truth.rows || estimate.cols != truth.cols {
        return Err(FpmError::DimensionMismatch {
            expected: format!("{}x{}", truth.rows, truth.cols),
            actual: format!("{}x{}", estimate.rows, estimate.cols),
        });
    }
    let peak = truth.max();
    if !(peak > 0.0) {
        return Err(FpmError::Config(format!("truth peak must be positive, got {peak}")));
    }
    let mse = estimate
        .data
        .iter()
        .zip(truth.data.iter())
        .map(|(&e, &t)| (e - t) * (e - t))
        .sum::<f64>()
        / truth.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Global phase offset that best aligns an estimated phase map with the
/// truth, weighted by squared truth amplitude (absolute phase is
/// unobservable).
pub fn global_phase_offset(est_phase: &RealField2D, truth: &GroundTruth) -> f64 {
    let mut acc = num_complex::Complex64::new(0.0, 0.0);
    for i in 0..est_phase.data.len() {
        let w = truth.amplitude.data[i] * truth.amplitude.data[i];
        let d = est_phase.data[i] - truth.phase.data[i];
        acc += w * num_complex::Complex64::from_polar(1.0, d);
    }
    acc.arg()
}

/// Phase map after removing the global offset, wrapped to [-pi, pi).
pub fn align_phase(est_phase: &RealField2D, truth: &GroundTruth) -> RealField2D {
    let offset = global_phase_offset(est_phase, truth);
    RealField2D {
        rows: est_phase.rows,
        cols: est_phase.cols,
        data: est_phase.data.iter().map(|&p| wrap_phase(p - offset)).collect(),
    }
}

/// Amplitude and phase PSNR of a reconstructed complex object against truth.
pub fn reconstruction_psnr(
    amplitude: &RealField2D,
    phase: &RealField2D,
    truth: &GroundTruth,
) -> Result<(f64, f64)> {
    let amp_db = psnr(amplitude, &truth.amplitude)?;
    let aligned = align_phase(phase, truth);
    let phase_db = psnr(&aligned, &truth.phase)?;
    Ok((amp_db, phase_db))
}

/// Squared norms of summed vs individually-accumulated noise vectors:
/// (|sum eps_i|^2, sum |eps_i|^2). The first is the per-round noise offset of
/// a global update, the second of an incremental sweep.
pub fn noise_norms(vectors: &[Vec<f64>]) -> (f64, f64) {
    if vectors.is_empty() {
        return (0.0, 0.0);
    }
    let dim = vectors[0].len();
    let mut summed = vec![0.0; dim];
    let mut incremental = 0.0;
    for v in vectors {
        for (s, &x) in summed.iter_mut().zip(v.iter()) {
            *s += x;
        }
        incremental += v.iter().map(|x| x * x).sum::<f64>();
    }
    let global = summed.iter().map(|x| x * x).sum();
    (global, incremental)
}

/// Monte-Carlo comparison of the two accumulation modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseAccumulationReport {
    pub n: usize,
    pub dim: usize,
    pub trials: usize,
    pub mean_global: f64,
    pub mean_incremental: f64,
    /// mean_global / mean_incremental; 1 in expectation for i.i.d. zero-mean
    /// noise.
    pub mean_ratio: f64,
    /// Fraction of trials where the global norm was strictly smaller.
    pub fraction_global_smaller: f64,
}

/// Draw `n` i.i.d. zero-mean unit-variance Gaussian vectors per trial and
/// report the Monte-Carlo means of both accumulation modes.
///
/// For zero-mean independent noise the two means agree in expectation; the
/// often-quoted deterministic inequality between them does not hold for
/// arbitrary vectors (n identical vectors break it), which is why this is a
/// statistical report rather than a hard invariant.
pub fn noise_accumulation_demo(n: usize, trials: usize, seed: u64) -> Result<NoiseAccumulationReport> {
    noise_accumulation_demo_dim(n, 64, trials, seed)
}

pub fn noise_accumulation_demo_dim(
    n: usize,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<NoiseAccumulationReport> {
    if n < 2 {
        return Err(FpmError::Config(format!("need at least 2 noise vectors, got {n}")));
    }
    if trials < 1000 {
        return Err(FpmError::Config(format!("need at least 1000 trials, got {trials}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut sum_global = 0.0;
    let mut sum_incremental = 0.0;
    let mut smaller = 0usize;
    for _ in 0..trials {
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let (g, i) = noise_norms(&vectors);
        sum_global += g;
        sum_incremental += i;
        if g < i {
            smaller += 1;
        }
    }
    let mean_global = sum_global / trials as f64;
    let mean_incremental = sum_incremental / trials as f64;
    Ok(NoiseAccumulationReport {
        n,
        dim,
        trials,
        mean_global,
        mean_incremental,
        mean_ratio: mean_global / mean_incremental,
        fraction_global_smaller: smaller as f64 / trials as f64,
    })
}
