//! Portable on-disk sample format.
//!
//! A sample `<name>` is a pair of files: `<name>.bin` holds the image as
//! little-endian `f32` values in `[C, H, W]` order, `<name>.json` is the
//! sidecar. A mask, when present, lives in `<name>.mask.bin` with the same
//! encoding and shape `[num_classes, H, W]`. A dataset root is a flat
//! directory of such pairs plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DomainSpec, Sample, SyntheticTask, Tensor3};
use crate::error::{Error, Result};
use crate::pseudo::PseudoInfo;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub patient_id: String,
    pub domain: String,
    /// Mask path relative to the sidecar, or `null` for unlabeled samples.
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pseudo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub domain: DomainSpec,
    pub samples: Vec<String>,
}

fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_le(path: &Path, shape: [usize; 3]) -> Result<Tensor3> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    let expected: usize = shape.iter().product();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::data(
            path,
            format!(
                "sidecar declares shape {:?} ({} values) but the binary holds {} bytes",
                shape,
                expected,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor3::from_vec(shape, data)
}

/// Writes `<root>/<name>.bin`, `<root>/<name>.json` and the mask file if any.
/// Returns the sidecar path.
pub fn save_sample(sample: &Sample, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let bin = root.join(format!("{}.bin", sample.name));
    write_f32_le(&bin, sample.image.data())?;
    let mask = match &sample.mask {
        Some(m) => {
            let rel = format!("{}.mask.bin", sample.name);
            write_f32_le(&root.join(&rel), m.data())?;
            Some(rel)
        }
        None => None,
    };
    let sidecar = Sidecar {
        shape: sample.image.shape(),
        patient_id: sample.patient_id.clone(),
        domain: sample.domain.clone(),
        mask,
        pseudo: sample.pseudo.is_some(),
        threshold: sample.pseudo.map(|p| p.threshold),
        coverage: sample.pseudo.map(|p| p.coverage),
    };
    let json = root.join(format!("{}.json", sample.name));
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(json)
}

/// Loads one sample from its sidecar. `num_classes` fixes the mask shape.
pub fn load_sample(sidecar_path: &Path, num_classes: usize) -> Result<Sample> {
    let text =
        fs::read_to_string(sidecar_path).map_err(|e| Error::data(sidecar_path, e.to_string()))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::data(sidecar_path, e.to_string()))?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let name = sidecar_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(sidecar_path, "sidecar has no file stem"))?
        .to_string();
    let image = read_f32_le(&dir.join(format!("{name}.bin")), sidecar.shape)?;
    let mask = match &sidecar.mask {
        Some(rel) => {
            let [_, h, w] = sidecar.shape;
            let path = dir.join(rel);
            let m = read_f32_le(&path, [num_classes, h, w])?;
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::data(path, "mask values must be exactly 0.0 or 1.0"));
            }
            Some(m)
        }
        None => None,
    };
    let pseudo = if sidecar.pseudo {
        Some(PseudoInfo {
            threshold: sidecar.threshold.unwrap_or(f64::NAN),
            coverage: sidecar.coverage.unwrap_or(f64::NAN),
        })
    } else {
        None
    };
    Ok(Sample {
        name,
        patient_id: sidecar.patient_id,
        domain: sidecar.domain,
        image,
        mask,
        pseudo,
    })
}

/// Writes every sample and the manifest into `root`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    for s in &dataset.samples {
        save_sample(s, root)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        domain: dataset.spec.clone(),
        samples: dataset.samples.iter().map(|s| s.name.clone()).collect(),
    };
    fs::write(
        root.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads every sidecar in `root`, ordered by file name.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(&manifest_path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::data(&manifest_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::data(
            &manifest_path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let mut sidecars: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n != MANIFEST_FILE)
        })
        .collect();
    sidecars.sort();
    let mut samples = Vec::with_capacity(sidecars.len());
    for path in &sidecars {
        let sample = load_sample(path, manifest.domain.num_classes)?;
        sample
            .validate(&manifest.domain)
            .map_err(|e| Error::data(path, e.to_string()))?;
        samples.push(sample);
    }
    let mut listed = manifest.samples.clone();
    listed.sort();
    let found: Vec<String> = samples.iter().map(|s| s.name.clone()).collect();
    if listed != found {
        return Err(Error::data(
            &manifest_path,
            format!(
                "manifest lists {} samples but the directory holds {}",
                listed.len(),
                found.len()
            ),
        ));
    }
    Dataset::new(manifest.domain, samples)
}

/// Subdirectories of a task directory.
pub const TASK_PARTS: [&str; 3] = ["source", "target_unlabeled", "target_heldout"];

/// Writes the three datasets of `task` under `root`.
pub fn save_task(task: &SyntheticTask, root: &Path) -> Result<()> {
    let parts = [
        &task.source_labeled,
        &task.target_unlabeled,
        &task.target_heldout,
    ];
    for (name, ds) in TASK_PARTS.iter().zip(parts) {
        save_dataset(ds, &root.join(name))?;
    }
    Ok(())
}

pub fn load_task(root: &Path) -> Result<SyntheticTask> {
    let [s, u, h] = TASK_PARTS.map(|n| root.join(n));
    Ok(SyntheticTask {
        source_labeled: load_dataset(&s)?,
        target_unlabeled: load_dataset(&u)?,
        target_heldout: load_dataset(&h)?,
    })
}
