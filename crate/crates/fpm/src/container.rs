//! Dataset container: a JSON metadata document plus a raw plane blob.
//!
//! Layout for prefix `name`:
//! - `name.fpmmeta.json` — metadata (config, LED order, gamma/exposure and
//!   noise records, format version).
//! - `name.planes.f32` — all intensity planes, 32-bit little-endian floats,
//!   row-major, plane order equal to the LED order.
//! - `name.truth_amplitude.f32` / `name.truth_phase.f32` — optional HR ground
//!   truth, same element encoding.
//!
//! Planes are quantized to f32 by the format, so `load(save(x))` is the
//! identity once a dataset has passed through the container.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FpmError, Result};
use crate::field::RealField2D;
use crate::forward::{FpmDataset, GroundTruth, NoiseRecord};
use crate::optics::SystemConfig;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMetadata {
    version: u32,
    config: SystemConfig,
    led_order: Vec<(i32, i32)>,
    plane_count: usize,
    /// True when the planes were exposure-normalized and offset-corrected
    /// before saving (always the case for data written by this crate).
    /// Raw third-party captures may set this false to request correction at
    /// load time.
    planes_normalized: bool,
    exposures: Option<Vec<f64>>,
    true_gamma: Option<Vec<f64>>,
    true_defocus_um: Option<f64>,
    noise: Option<NoiseRecord>,
    note: Option<String>,
    has_truth: bool,
}

fn meta_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".fpmmeta.json")
}

fn planes_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".planes.f32")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_f32_blob(path: &Path, fields: &[&RealField2D]) -> Result<()> {
    let mut bytes = Vec::new();
    for f in fields {
        for &v in &f.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_blob(path: &Path, expected_elems: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected_elems * 4 {
        return Err(FpmError::Integrity(format!(
            "{} is {} bytes, expected {} ({} f32 elements)",
            path.display(),
            bytes.len(),
            expected_elems * 4,
            expected_elems
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Write a dataset under the given path prefix.
pub fn save_dataset(dataset: &FpmDataset, prefix: &Path) -> Result<()> {
    dataset.validate()?;
    let meta = DatasetMetadata {
        version: CONTAINER_VERSION,
        config: dataset.config.clone(),
        led_order: dataset.led_order.clone(),
        plane_count: dataset.planes.len(),
        planes_normalized: true,
        exposures: dataset.exposures.clone(),
        true_gamma: dataset.true_gamma.clone(),
        true_defocus_um: dataset.true_defocus_um,
        noise: dataset.noise.clone(),
        note: dataset.note.clone(),
        has_truth: dataset.truth.is_some(),
    };
    fs::write(meta_path(prefix), serde_json::to_string_pretty(&meta)?)?;
    let refs: Vec<&RealField2D> = dataset.planes.iter().collect();
    write_f32_blob(&planes_path(prefix), &refs)?;
    if let Some(truth) = &dataset.truth {
        write_f32_blob(&with_suffix(prefix, ".truth_amplitude.f32"), &[&truth.amplitude])?;
        write_f32_blob(&with_suffix(prefix, ".truth_phase.f32"), &[&truth.phase])?;
    }
    Ok(())
}

/// Read a dataset written by [`save_dataset`], applying exposure
/// normalization and systematic-offset subtraction when the metadata marks
/// the planes as raw.
pub fn load_dataset(prefix: &Path) -> Result<FpmDataset> {
    let meta_file = meta_path(prefix);
    let meta: DatasetMetadata = serde_json::from_str(&fs::read_to_string(&meta_file)?)?;
    if meta.version != CONTAINER_VERSION {
        return Err(FpmError::UnsupportedVersion {
            found: meta.version,
            supported: CONTAINER_VERSION,
        });
    }
    meta.config.validate()?;
    if meta.plane_count != meta.led_order.len() {
        return Err(FpmError::Integrity(format!(
            "metadata declares {} planes for {} LEDs",
            meta.plane_count,
            meta.led_order.len()
        )));
    }
    let lr = meta.config.lr_size;
    let elems = meta.plane_count * lr * lr;
    let raw = read_f32_blob(&planes_path(prefix), elems)?;

    let offset = meta
        .noise
        .as_ref()
        .map_or(0.0, |n| n.model.systematic_offset);
    let mut planes = Vec::with_capacity(meta.plane_count);
    for i in 0..meta.plane_count {
        let mut data = raw[i * lr * lr..(i + 1) * lr * lr].to_vec();
        if !meta.planes_normalized {
            let exposure = meta.exposures.as_ref().map_or(1.0, |e| e[i]);
            for v in data.iter_mut() {
                *v = ((*v - offset) / exposure).max(0.0);
            }
        }
        planes.push(RealField2D {
            rows: lr,
            cols: lr,
            data,
        });
    }

    let truth = if meta.has_truth {
        let hr = meta.config.hr_size();
        let amp = read_f32_blob(&with_suffix(prefix, ".truth_amplitude.f32"), hr * hr)?;
        let phase = read_f32_blob(&with_suffix(prefix, ".truth_phase.f32"), hr * hr)?;
        Some(GroundTruth {
            amplitude: RealField2D {
                rows: hr,
                cols: hr,
                data: amp,
            },
            phase: RealField2D {
                rows: hr,
                cols: hr,
                data: phase,
            },
        })
    } else {
        None
    };

    let dataset = FpmDataset {
        config: meta.config,
        led_order: meta.led_order,
        planes,
        exposures: meta.exposures,
        true_gamma: meta.true_gamma,
        true_defocus_um: meta.true_defocus_um,
        noise: meta.noise,
        note: meta.note,
        truth,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{generate_dataset, NoiseModel};
    use crate::gradient::SystemParameters;

    fn sample_dataset() -> FpmDataset {
        let cfg = SystemConfig {
            lr_size: 16,
            upsample_factor: 2,
            grid_side: 3,
            ..SystemConfig::desk_scale()
        };
        let truth = GroundTruth::synthetic(&cfg, 12).unwrap();
        let params = SystemParameters::ideal(&cfg).unwrap();
        generate_dataset(&truth, &cfg, &params, &NoiseModel::gaussian_fraction(0.05, 9)).unwrap()
    }

    #[test]
    fn round_trip_identity_after_quantization() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a");
        save_dataset(&ds, &p1).unwrap();
        let once = load_dataset(&p1).unwrap();
        let p2 = dir.path().join("b");
        save_dataset(&once, &p2).unwrap();
        let twice = load_dataset(&p2).unwrap();
        // f32 quantization happens exactly once.
        assert_eq!(once, twice);
        assert_eq!(
            fs::read(planes_path(&p1)).unwrap(),
            fs::read(planes_path(&p2)).unwrap()
        );
        assert_eq!(once.led_order, ds.led_order);
        assert_eq!(once.true_gamma, ds.true_gamma);
    }

    #[test]
    fn truncated_blob_reports_lengths() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        save_dataset(&ds, &p).unwrap();
        let blob = planes_path(&p);
        let mut bytes = fs::read(&blob).unwrap();
        bytes.pop();
        fs::write(&blob, bytes).unwrap();
        match load_dataset(&p) {
            Err(FpmError::Integrity(msg)) => {
                assert!(msg.contains("expected"), "{msg}");
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        save_dataset(&ds, &p).unwrap();
        let meta_file = meta_path(&p);
        let text = fs::read_to_string(&meta_file)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        fs::write(&meta_file, text).unwrap();
        assert!(matches!(
            load_dataset(&p),
            Err(FpmError::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn unknown_metadata_keys_rejected() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k");
        save_dataset(&ds, &p).unwrap();
        let meta_file = meta_path(&p);
        let text = fs::read_to_string(&meta_file)
            .unwrap()
            .replacen("{", "{\n  \"surprise\": true,", 1);
        fs::write(&meta_file, text).unwrap();
        assert!(load_dataset(&p).is_err());
    }

    #[test]
    fn raw_planes_normalized_at_load() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw");
        save_dataset(&ds, &p).unwrap();
        // Rewrite metadata as a raw capture with exposure 2 on every plane.
        let meta_file = meta_path(&p);
        let mut meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&meta_file).unwrap()).unwrap();
        meta["planes_normalized"] = serde_json::Value::Bool(false);
        meta["exposures"] = serde_json::json!(vec![2.0; ds.led_count()]);
        fs::write(&meta_file, serde_json::to_string(&meta).unwrap()).unwrap();
        let loaded = load_dataset(&p).unwrap();
        let direct = load_dataset_unnormalized_reference(&p);
        for (a, b) in loaded.planes.iter().zip(direct.iter()) {
            for (x, y) in a.data.iter().zip(b.iter()) {
                assert!((x - y / 2.0).abs() < 1e-12);
            }
        }
    }

    // Reference read of the blob without normalization, for the test above.
    fn load_dataset_unnormalized_reference(prefix: &Path) -> Vec<Vec<f64>> {
        let meta: DatasetMetadata =
            serde_json::from_str(&fs::read_to_string(meta_path(prefix)).unwrap()).unwrap();
        let lr = meta.config.lr_size;
        let raw = read_f32_blob(&planes_path(prefix), meta.plane_count * lr * lr).unwrap();
        raw.chunks_exact(lr * lr).map(|c| c.to_vec()).collect()
    }
}
