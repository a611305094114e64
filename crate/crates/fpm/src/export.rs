//! Result export: 16-bit grayscale PNGs with JSON scale sidecars, a
//! parameter dump, and the convergence trace CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};
use crate::field::RealField2D;
use crate::reconstruct::{ConvergenceTrace, ReconstructionState, TraceRow};

pub const TRACE_HEADER: &[&str] = &[
    "epoch",
    "update",
    "batch_digest",
    "loss",
    "seconds",
    "amplitude_psnr_db",
    "phase_psnr_db",
];

/// Min/max values mapped to 0 and 65535 in one exported PNG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PngScale {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportScales {
    pub amplitude: PngScale,
    pub phase: PngScale,
    pub spectrum_log_magnitude: PngScale,
    pub pupil_amplitude: PngScale,
    pub pupil_phase: PngScale,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterDump {
    pub defocus_um: f64,
    pub intensities: Vec<f64>,
    pub epochs_run: usize,
    pub diverged: Option<String>,
}

/// Write a field as a 16-bit grayscale PNG, min-max scaled. A constant field
/// maps to all zeros with min == max recorded in the returned scale.
pub fn write_png16(field: &RealField2D, path: &Path) -> Result<PngScale> {
    let min = field.min();
    let max = field.max();
    let span = max - min;
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        field.cols as u32,
        field.rows as u32,
    );
    for r in 0..field.rows {
        for c in 0..field.cols {
            let v = if span > 0.0 {
                ((field.get(r, c) - min) / span * 65535.0).round() as u16
            } else {
                0
            };
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(PngScale { min, max })
}

/// Read a PNG written by [`write_png16`] back to physical units using its
/// recorded scale.
pub fn read_png16(path: &Path, scale: PngScale) -> Result<RealField2D> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let span = scale.max - scale.min;
    let mut out = RealField2D::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let v = img.get_pixel(c as u32, r as u32).0[0] as f64 / 65535.0;
            out.set(r, c, scale.min + v * span);
        }
    }
    Ok(out)
}

/// Write the convergence trace with a fixed header. Optional PSNR cells are
/// left empty.
pub fn write_trace_csv(trace: &ConvergenceTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for row in &trace.rows {
        w.write_record(&[
            row.epoch.to_string(),
            row.update.to_string(),
            format!("{:016x}", row.batch_digest),
            format!("{:.17e}", row.loss),
            format!("{:.6}", row.seconds),
            row.amplitude_psnr_db.map_or(String::new(), |v| format!("{v:.6}")),
            row.phase_psnr_db.map_or(String::new(), |v| format!("{v:.6}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace CSV back; the header must match [`TRACE_HEADER`] exactly.
pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TRACE_HEADER {
        return Err(FpmError::Integrity(format!(
            "trace header {header:?} does not match {TRACE_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| FpmError::Integrity(format!("bad trace cell {s}: {e}")))
            }
        };
        let cell = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| FpmError::Integrity("short trace row".into()))
        };
        rows.push(TraceRow {
            epoch: cell(0)?.parse().map_err(|e| FpmError::Integrity(format!("bad epoch: {e}")))?,
            update: cell(1)?.parse().map_err(|e| FpmError::Integrity(format!("bad update: {e}")))?,
            batch_digest: u64::from_str_radix(cell(2)?, 16)
                .map_err(|e| FpmError::Integrity(format!("bad digest: {e}")))?,
            loss: cell(3)?.parse().map_err(|e| FpmError::Integrity(format!("bad loss: {e}")))?,
            seconds: cell(4)?.parse().map_err(|e| FpmError::Integrity(format!("bad seconds: {e}")))?,
            amplitude_psnr_db: opt(cell(5)?)?,
            phase_psnr_db: opt(cell(6)?)?,
        });
    }
    Ok(rows)
}

/// Write the full result set of a reconstruction run into `dir`:
/// amplitude/phase/spectrum/pupil PNGs, `scales.json`, `parameters.json`,
/// and `trace.csv`.
pub fn export_results(
    state: &ReconstructionState,
    trace: &ConvergenceTrace,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let object = state.spatial_object();
    let amplitude = write_png16(&object.amplitude(), &dir.join("amplitude.png"))?;
    let phase = write_png16(&object.phase(), &dir.join("phase.png"))?;

    let hr = state.spectrum.rows;
    let mut log_mag = RealField2D::zeros(hr, hr);
    for i in 0..log_mag.data.len() {
        log_mag.data[i] = (1.0 + state.spectrum.data[i].norm()).log10();
    }
    let spectrum_log_magnitude = write_png16(&log_mag, &dir.join("spectrum_magnitude.png"))?;

    let p = &state.params.pupil;
    let pupil_amp = RealField2D {
        rows: p.size,
        cols: p.size,
        data: p.data.iter().map(|v| v.norm()).collect(),
    };
    let pupil_ph = RealField2D {
        rows: p.size,
        cols: p.size,
        data: p.data.iter().map(|v| if v.norm() > 0.0 { v.arg() } else { 0.0 }).collect(),
    };
    let pupil_amplitude = write_png16(&pupil_amp, &dir.join("pupil_amplitude.png"))?;
    let pupil_phase = write_png16(&pupil_ph, &dir.join("pupil_phase.png"))?;

    let scales = ExportScales {
        amplitude,
        phase,
        spectrum_log_magnitude,
        pupil_amplitude,
        pupil_phase,
    };
    fs::write(dir.join("scales.json"), serde_json::to_string_pretty(&scales)?)?;

    let dump = ParameterDump {
        defocus_um: state.params.defocus_um,
        intensities: state.params.intensities.clone(),
        epochs_run: state.epoch,
        diverged: trace.diverged.clone(),
    };
    fs::write(dir.join("parameters.json"), serde_json::to_string_pretty(&dump)?)?;

    write_trace_csv(trace, &dir.join("trace.csv"))?;
    Ok(())
}
