//! JSON-lines manifests: one record per line with `id`, `image`,
//! `masks` (label to path), `edge` and `split`. Paths are relative to the
//! manifest file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::imageio;
use crate::error::{Error, Result, ValidationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub id: String,
    pub image: String,
    pub masks: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<String>,
    pub split: Split,
}

/// A validated record with resolved paths and normalized labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    /// Normalized label to mask path.
    pub masks: BTreeMap<String, PathBuf>,
    pub edge_path: Option<PathBuf>,
    pub split: Split,
}

impl SampleRecord {
    pub fn labels(&self) -> Vec<&str> {
        self.masks.keys().map(String::as_str).collect()
    }
}

/// One `(image, label, mask)` training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub id: String,
    pub image_path: PathBuf,
    pub label: String,
    pub mask_path: PathBuf,
}

/// Lowercases and collapses internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn invalid(id: &str, kind: ValidationKind) -> Error {
    Error::Validation {
        id: id.to_string(),
        kind,
    }
}

fn check_size(id: &str, what: &str, path: &Path, rel: &str, iw: u32, ih: u32) -> Result<()> {
    if !path.is_file() {
        return Err(invalid(id, ValidationKind::MissingFile(rel.to_string())));
    }
    let (w, h) = imageio::dimensions(path).map_err(|e| {
        invalid(
            id,
            ValidationKind::Unreadable {
                path: rel.to_string(),
                reason: e.to_string(),
            },
        )
    })?;
    if (w, h) != (iw, ih) {
        return Err(invalid(
            id,
            ValidationKind::SizeMismatch {
                what: what.to_string(),
                image_w: iw,
                image_h: ih,
                w,
                h,
            },
        ));
    }
    Ok(())
}

/// Resolves and validates one line. Masks are fully decoded to check that
/// they only contain 0 and 255.
pub fn validate_line(line: &ManifestLine, root: &Path) -> Result<SampleRecord> {
    let id = line.id.as_str();
    if line.masks.is_empty() {
        return Err(invalid(id, ValidationKind::NoLabels));
    }
    let image_path = root.join(&line.image);
    if !image_path.is_file() {
        return Err(invalid(id, ValidationKind::MissingFile(line.image.clone())));
    }
    let (iw, ih) = imageio::dimensions(&image_path).map_err(|e| {
        invalid(
            id,
            ValidationKind::Unreadable {
                path: line.image.clone(),
                reason: e.to_string(),
            },
        )
    })?;
    let mut masks = BTreeMap::new();
    for (raw, rel) in &line.masks {
        let label = normalize_label(raw);
        if label.is_empty() {
            return Err(invalid(id, ValidationKind::EmptyLabel));
        }
        let path = root.join(rel);
        if !path.is_file() {
            return Err(invalid(
                id,
                ValidationKind::MissingMask {
                    label,
                    path: rel.clone(),
                },
            ));
        }
        check_size(id, &format!("mask `{label}`"), &path, rel, iw, ih)?;
        let (pixels, _, _) = imageio::load_gray(&path)?;
        if let Some(&value) = pixels.iter().find(|&&v| v != 0 && v != 255) {
            return Err(invalid(id, ValidationKind::NonBinaryMask { label, value }));
        }
        if masks.insert(label.clone(), path).is_some() {
            return Err(invalid(id, ValidationKind::DuplicateLabel(label)));
        }
    }
    let edge_path = match &line.edge {
        Some(rel) => {
            let path = root.join(rel);
            check_size(id, "edge map", &path, rel, iw, ih)?;
            Some(path)
        }
        None => None,
    };
    Ok(SampleRecord {
        id: line.id.clone(),
        image_path,
        masks,
        edge_path,
        split: line.split,
    })
}

pub fn read_lines(path: &Path) -> Result<Vec<ManifestLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Loads and validates every record of a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let root = path.parent().unwrap_or(Path::new("."));
    read_lines(path)?.iter().map(|l| validate_line(l, root)).collect()
}

pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{}", serde_json::to_string(l)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One triple per label, in record order then label order.
pub fn expand(records: &[SampleRecord]) -> Vec<Triple> {
    records
        .iter()
        .flat_map(|r| {
            r.masks.iter().map(|(label, mask)| Triple {
                id: r.id.clone(),
                image_path: r.image_path.clone(),
                label: label.clone(),
                mask_path: mask.clone(),
            })
        })
        .collect()
}
