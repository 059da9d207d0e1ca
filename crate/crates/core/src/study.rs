//! On-disk layout for studies and tracking runs.
//!
//! A study directory holds a `manifest.json`, a `planes.json` with the plane
//! geometry (masks are re-rasterized on load), and per-frame volumes under
//! `frames/`: image, labels, ground-truth field and the 3D myocardial edge
//! map, all in the mvol format. The manifest carries a sha256 per payload so
//! reruns are verifiable byte-for-byte.
//!
//! A run directory (tracker or baseline output) holds per-frame fields
//! `t###.field.mvol`, a `trace.csv` and a `run_metadata.json`.

use crate::error::{Error, Result};
use crate::grid::DisplacementField;
use crate::io;
use crate::multiview::{PlaneSet, PlaneSpec};
use crate::phantom::{PhantomConfig, PhantomStudy};
use crate::tracker::TraceRow;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub frame: usize,
    pub kind: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyManifest {
    pub subject: String,
    pub config: PhantomConfig,
    pub frames: usize,
    pub es_index: usize,
    pub slice_offsets_mm: Vec<[f64; 2]>,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn subject_name(config: &PhantomConfig) -> String {
    format!("phantom-{}", config.seed)
}

/// Write a study directory; returns the manifest.
pub fn save_study(study: &PhantomStudy, dir: &Path) -> Result<StudyManifest> {
    fs::create_dir_all(dir.join("frames"))?;
    let specs = study.planes.specs();
    fs::write(dir.join("planes.json"), serde_json::to_string_pretty(&specs)?)?;

    let mut artifacts = Vec::new();
    for t in 0..study.frames() {
        for kind in ["image", "labels", "field_gt", "edges"] {
            let rel = format!("frames/t{t:03}_{kind}.mvol");
            let path = dir.join(&rel);
            match kind {
                "image" => io::write_scalar_volume(&path, &study.images[t])?,
                "labels" => io::write_label_volume(&path, &study.labels[t])?,
                "field_gt" => io::write_field(&path, &study.gt_fields[t])?,
                _ => io::write_scalar_volume(&path, &study.edges[t])?,
            }
            artifacts.push(ArtifactEntry {
                frame: t,
                kind: kind.to_string(),
                path: rel,
                sha256: hash_file(&path)?,
            });
        }
    }

    let manifest = StudyManifest {
        subject: subject_name(&study.config),
        config: study.config.clone(),
        frames: study.frames(),
        es_index: study.es_index(),
        slice_offsets_mm: study.slice_offsets_mm.clone(),
        artifacts,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<StudyManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Format(format!(
            "{} is not a study directory (missing manifest.json)",
            dir.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Load a study directory back into memory. Plane masks are re-rasterized
/// from the stored geometry.
pub fn load_study(dir: &Path) -> Result<PhantomStudy> {
    let manifest = load_manifest(dir)?;
    let (dims, spacing) = manifest.config.validate()?;
    let specs: Vec<PlaneSpec> = serde_json::from_str(&fs::read_to_string(dir.join("planes.json"))?)?;
    let planes = PlaneSet::from_specs(&specs, dims, spacing)?;

    let frames = manifest.frames;
    let mut images = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    let mut gt_fields = Vec::with_capacity(frames);
    let mut edges = Vec::with_capacity(frames);
    for t in 0..frames {
        images.push(io::read_scalar_volume(
            &dir.join(format!("frames/t{t:03}_image.mvol")),
        )?);
        labels.push(io::read_label_volume(
            &dir.join(format!("frames/t{t:03}_labels.mvol")),
        )?);
        gt_fields.push(io::read_field(
            &dir.join(format!("frames/t{t:03}_field_gt.mvol")),
        )?);
        edges.push(io::read_scalar_volume(
            &dir.join(format!("frames/t{t:03}_edges.mvol")),
        )?);
    }
    let mut offsets = manifest.slice_offsets_mm.clone();
    offsets.resize(dims.d, [0.0, 0.0]);
    Ok(PhantomStudy {
        config: manifest.config,
        dims,
        spacing,
        images,
        labels,
        gt_fields,
        edges,
        planes,
        slice_offsets_mm: offsets,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub method: String,
    pub subject: String,
    pub config_sha256: String,
    pub app_version: String,
    pub frames: usize,
    pub iterations: Vec<usize>,
    pub failures: Vec<Option<String>>,
}

pub fn field_file_name(t: usize) -> String {
    format!("t{t:03}.field.mvol")
}

/// Write a run directory: per-frame fields, optimizer trace and metadata.
/// Wall-clock timing is deliberately not part of the metadata so reruns are
/// byte-identical.
pub fn save_run(
    dir: &Path,
    fields: &[DisplacementField],
    traces: &[Vec<TraceRow>],
    metadata: &RunMetadata,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, field) in fields.iter().enumerate() {
        io::write_field(&dir.join(field_file_name(t)), field)?;
    }
    let mut csv = String::from("frame,level,iter,sim,smooth,shape,total\n");
    for (t, rows) in traces.iter().enumerate() {
        for r in rows {
            csv.push_str(&format!(
                "{t},{},{},{},{},{},{}\n",
                r.level, r.iter, r.sim, r.smooth, r.shape, r.total
            ));
        }
    }
    fs::write(dir.join("trace.csv"), csv)?;
    fs::write(
        dir.join("run_metadata.json"),
        serde_json::to_string_pretty(metadata)?,
    )?;
    Ok(())
}

pub fn load_run_metadata(dir: &Path) -> Result<RunMetadata> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.join("run_metadata.json"),
    )?)?)
}

pub fn load_run_field(dir: &Path, t: usize) -> Result<DisplacementField> {
    io::read_field(&dir.join(field_file_name(t)))
}

/// Run directories under `fields_dir`: either the directory itself (when it
/// holds a run_metadata.json) or its immediate subdirectories, sorted by
/// method name then path for stable output ordering.
pub fn discover_runs(fields_dir: &Path) -> Result<Vec<(PathBuf, RunMetadata)>> {
    let mut runs = Vec::new();
    if fields_dir.join("run_metadata.json").exists() {
        let meta = load_run_metadata(fields_dir)?;
        runs.push((fields_dir.to_path_buf(), meta));
    } else {
        let mut entries: Vec<PathBuf> = fs::read_dir(fields_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join("run_metadata.json").exists())
            .collect();
        entries.sort();
        for path in entries {
            let meta = load_run_metadata(&path)?;
            runs.push((path, meta));
        }
    }
    if runs.is_empty() {
        return Err(Error::Format(format!(
            "no run directories under {}",
            fields_dir.display()
        )));
    }
    runs.sort_by(|a, b| a.1.method.cmp(&b.1.method).then(a.0.cmp(&b.0)));
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomConfig};

    fn tiny_config() -> PhantomConfig {
        PhantomConfig {
            dims: [24, 24, 12],
            spacing_mm: [2.0, 2.0, 3.0],
            endo_radii_mm: [8.0, 8.0, 9.0],
            epi_radii_mm: [12.0, 12.0, 13.5],
            center_mm: [24.0, 24.0, 20.0],
            frames: 3,
            contraction: 0.1,
            shortening: 0.05,
            twist: 0.0,
            noise_sigma: 0.01,
            misalignment_mm: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn study_roundtrip_preserves_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let study = generate(&tiny_config()).unwrap();
        let manifest = save_study(&study, dir.path()).unwrap();
        assert_eq!(manifest.artifacts.len(), 3 * 4);
        assert_eq!(manifest.es_index, 2);

        let back = load_study(dir.path()).unwrap();
        assert_eq!(back.frames(), 3);
        assert_eq!(back.labels[1].data, study.labels[1].data);
        assert_eq!(back.planes.sax.len(), 9);
        assert!(back.planes.two_ch.is_some());
        // Images go through f32 narrowing; compare at that precision.
        for (a, b) in back.images[2].data.iter().zip(&study.images[2].data) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let study = generate(&tiny_config()).unwrap();
        save_study(&study, d1.path()).unwrap();
        save_study(&study, d2.path()).unwrap();
        for name in ["manifest.json", "planes.json", "frames/t001_image.mvol"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn manifest_hashes_match_files() {
        let dir = tempfile::tempdir().unwrap();
        let study = generate(&tiny_config()).unwrap();
        let manifest = save_study(&study, dir.path()).unwrap();
        for a in &manifest.artifacts {
            let actual = hash_file(&dir.path().join(&a.path)).unwrap();
            assert_eq!(actual, a.sha256, "{}", a.path);
        }
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_study(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
