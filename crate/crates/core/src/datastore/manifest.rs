//! JSONL cohort manifests with DGPF sidecar files.
//!
//! Each manifest line describes one slide. An optional `cohort.json` next to
//! the manifest carries the cohort name, dimension, class names and task
//! kind; without it class names are inferred from the lines.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dgpf::{read_feature_file, write_feature_file};
use super::types::{Cohort, SlideBag, SurvivalRecord, TaskKind};
use crate::error::{Error, Result};

pub const COHORT_HEADER_FILE: &str = "cohort.json";

fn default_site() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalJson {
    pub time_days: f64,
    pub event: u8,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub feature_file: String,
    #[serde(default)]
    pub label: Option<i64>,
    #[serde(default)]
    pub class_name: Option<String>,
    #[serde(default = "default_site")]
    pub site: String,
    #[serde(default)]
    pub fold: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival: Option<SurvivalJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_tumor_probs_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortHeader {
    pub name: String,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub task_kind: TaskKind,
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

/// Reads a JSONL file of per-patch probabilities (one number per line).
pub fn read_probs_file(path: &Path) -> Result<Vec<f64>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: f64 = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_probs_file(path: &Path, probs: &[f64]) -> Result<()> {
    let mut s = String::with_capacity(probs.len() * 12);
    for p in probs {
        s.push_str(&serde_json::to_string(p).expect("finite f64"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Loads and validates a cohort from a JSONL manifest.
pub fn load_cohort(manifest_path: impl AsRef<Path>) -> Result<Cohort> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let header_path = base.join(COHORT_HEADER_FILE);
    let header: Option<CohortHeader> = if header_path.exists() {
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| {
            Error::InvalidInput(format!("{}: {e}", header_path.display()))
        })?)
    } else {
        None
    };

    let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut slides = Vec::new();
    let mut ids = HashSet::new();
    let mut dim = header.as_ref().map(|h| h.dim);
    let mut inferred_names: BTreeMap<usize, String> = BTreeMap::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| schema(lineno, e.to_string()))?;
        if entry.slide_id.is_empty() {
            return Err(schema(lineno, "empty slide_id"));
        }
        if !ids.insert(entry.slide_id.clone()) {
            return Err(Error::DuplicateId {
                line: lineno,
                slide_id: entry.slide_id,
            });
        }
        let label = match entry.label {
            None => None,
            Some(l) if l < 0 => return Err(schema(lineno, format!("negative label {l}"))),
            Some(l) => {
                let l = l as usize;
                if let Some(h) = &header {
                    if l >= h.class_names.len() {
                        return Err(schema(
                            lineno,
                            format!("label {l} out of range for {} classes", h.class_names.len()),
                        ));
                    }
                    if let Some(name) = &entry.class_name {
                        if name != &h.class_names[l] {
                            return Err(schema(
                                lineno,
                                format!("class_name {name:?} disagrees with label {l} ({:?})", h.class_names[l]),
                            ));
                        }
                    }
                } else if let Some(name) = &entry.class_name {
                    match inferred_names.get(&l) {
                        Some(existing) if existing != name => {
                            return Err(schema(
                                lineno,
                                format!("label {l} named both {existing:?} and {name:?}"),
                            ))
                        }
                        _ => {
                            inferred_names.insert(l, name.clone());
                        }
                    }
                }
                Some(l)
            }
        };
        let fold = match entry.fold {
            None => None,
            Some(f) if f < 0 => return Err(schema(lineno, format!("negative fold {f}"))),
            Some(f) => Some(f as usize),
        };
        let survival = match &entry.survival {
            None => None,
            Some(s) => {
                if s.event > 1 {
                    return Err(schema(lineno, format!("survival.event must be 0 or 1, got {}", s.event)));
                }
                Some(
                    SurvivalRecord::new(s.time_days, s.event == 1)
                        .map_err(|e| schema(lineno, e.to_string()))?,
                )
            }
        };

        let feature_path = base.join(&entry.feature_file);
        if !feature_path.is_file() {
            return Err(Error::MissingFeatureFile {
                line: lineno,
                path: feature_path,
            });
        }
        let payload = read_feature_file(&feature_path).map_err(|e| schema(lineno, e.to_string()))?;
        match dim {
            None => dim = Some(payload.dim),
            Some(d) if d != payload.dim => {
                return Err(schema(
                    lineno,
                    format!("feature dim {} differs from cohort dim {d}", payload.dim),
                ))
            }
            _ => {}
        }
        let roi_tumor_probs = match &entry.roi_tumor_probs_file {
            None => None,
            Some(p) => Some(read_probs_file(&base.join(p)).map_err(|e| schema(lineno, e.to_string()))?),
        };

        let mut slide = SlideBag {
            slide_id: entry.slide_id,
            patches: payload.patches,
            label,
            site: entry.site,
            fold,
            survival,
            roi_tumor_probs,
        };
        slide
            .validate(payload.dim)
            .map_err(|e| schema(lineno, e.to_string()))?;
        slide.sort_patches();
        slides.push(slide);
    }

    let dim = dim.ok_or_else(|| Error::InvalidInput(format!("{}: empty manifest", manifest_path.display())))?;
    let (name, class_names, task_kind) = match header {
        Some(h) => (h.name, h.class_names, h.task_kind),
        None => {
            let n_classes = slides.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1);
            let names = (0..n_classes)
                .map(|c| inferred_names.get(&c).cloned().unwrap_or_else(|| format!("class_{c}")))
                .collect();
            let kind = if n_classes == 0 && slides.iter().any(|s| s.survival.is_some()) {
                TaskKind::Survival
            } else {
                TaskKind::Classification
            };
            let name = manifest_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (name, names, kind)
        }
    };
    let cohort = Cohort {
        name,
        dim,
        class_names,
        slides,
        task_kind,
    };
    cohort.validate()?;
    Ok(cohort)
}

fn manifest_entry(slide: &SlideBag, cohort: &Cohort, feature_file: String, probs_file: Option<String>) -> ManifestEntry {
    ManifestEntry {
        slide_id: slide.slide_id.clone(),
        feature_file,
        label: slide.label.map(|l| l as i64),
        class_name: slide.label.and_then(|l| cohort.class_names.get(l).cloned()),
        site: slide.site.clone(),
        fold: slide.fold.map(|f| f as i64),
        survival: slide.survival.map(|s| SurvivalJson {
            time_days: s.time_days,
            event: s.event as u8,
        }),
        roi_tumor_probs_file: probs_file,
    }
}

/// Writes `cohort` into `dir` as `manifest.jsonl`, `cohort.json` and one
/// DGPF file per slide. Returns the manifest path.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    cohort.validate()?;
    fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
    if cohort.slides.iter().any(|s| s.roi_tumor_probs.is_some()) {
        fs::create_dir_all(dir.join("probs")).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = Vec::new();
    for (i, slide) in cohort.slides.iter().enumerate() {
        let rel = format!("features/{i:06}.dgpf");
        write_feature_file(slide, dir.join(&rel))?;
        let probs_rel = match &slide.roi_tumor_probs {
            Some(p) => {
                let rel = format!("probs/{i:06}.jsonl");
                write_probs_file(&dir.join(&rel), p)?;
                Some(rel)
            }
            None => None,
        };
        let entry = manifest_entry(slide, cohort, rel, probs_rel);
        serde_json::to_writer(&mut manifest, &entry).expect("serializable");
        manifest.push(b'\n');
    }
    let manifest_path = dir.join("manifest.jsonl");
    fs::write(&manifest_path, &manifest).map_err(|e| Error::io(&manifest_path, e))?;
    write_header(cohort, dir)?;
    Ok(manifest_path)
}

fn write_header(cohort: &Cohort, dir: &Path) -> Result<()> {
    let header = CohortHeader {
        name: cohort.name.clone(),
        dim: cohort.dim,
        class_names: cohort.class_names.clone(),
        task_kind: cohort.task_kind,
    };
    let path = dir.join(COHORT_HEADER_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &header).expect("serializable");
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))
}

/// Writes a manifest (plus header) for `cohort` that points at feature files
/// already on disk, e.g. after fold assignment. `feature_files[i]` is
/// relative to `dir` or absolute.
pub fn write_manifest_only(
    cohort: &Cohort,
    dir: &Path,
    feature_files: &[String],
    probs_files: &[Option<String>],
) -> Result<PathBuf> {
    let mut manifest = Vec::new();
    for (i, slide) in cohort.slides.iter().enumerate() {
        let entry = manifest_entry(slide, cohort, feature_files[i].clone(), probs_files[i].clone());
        serde_json::to_writer(&mut manifest, &entry).expect("serializable");
        manifest.push(b'\n');
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.jsonl");
    fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    write_header(cohort, dir)?;
    Ok(path)
}

/// Reads manifest entries without loading features, so callers can recover
/// the sidecar paths.
pub fn read_manifest_entries(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| schema(idx + 1, e.to_string()))?);
    }
    Ok(out)
}
