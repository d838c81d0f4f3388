//! On-disk dataset layout: a `manifest.jsonl` with one record per sample
//! and an `images/` directory of binary PPM files.
//!
//! Record schema (one JSON object per line):
//! `{"id", "image", "references": [..], "oracle"?}` — `image` is a path
//! relative to the manifest, references are whitespace-joined token strings,
//! and `oracle` appears only in oracle-view manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::RasterImage;
use super::{PoisonRecord, Sample};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle: Option<PoisonRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn poisoned_count(&self) -> usize {
        self.samples.iter().filter(|s| s.oracle.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.samples {
            if s.id.is_empty() {
                return Err(Error::contract("sample id must not be empty"));
            }
            if !ids.insert(&s.id) {
                return Err(Error::contract(format!("duplicate sample id {:?}", s.id)));
            }
            if s.references.is_empty() {
                return Err(Error::contract(format!(
                    "sample {:?} has no reference captions",
                    s.id
                )));
            }
            for r in &s.references {
                for tok in r {
                    if tok.is_empty() || tok.chars().any(|c| c.is_whitespace()) {
                        return Err(Error::contract(format!(
                            "sample {:?}: caption token {tok:?} is empty or contains whitespace",
                            s.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Write `manifest.jsonl` plus `images/<id>.ppm` under `dir`. Output is
    /// byte-identical for identical in-memory datasets.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let images = dir.join("images");
        fs::create_dir_all(&images)
            .map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
        let mut lines = String::new();
        for s in &self.samples {
            let rel = format!("images/{}.ppm", s.id);
            let img_path = dir.join(&rel);
            fs::write(&img_path, s.image.to_ppm_bytes())
                .map_err(|e| Error::io(format!("writing {}", img_path.display()), e))?;
            let record = Record {
                id: s.id.clone(),
                image: rel,
                references: s.references.iter().map(|r| r.join(" ")).collect(),
                oracle: s.oracle.clone(),
            };
            let json = serde_json::to_string(&record)
                .map_err(|e| Error::contract(format!("serializing record {:?}: {e}", s.id)))?;
            lines.push_str(&json);
            lines.push('\n');
        }
        let manifest_path = dir.join("manifest.jsonl");
        fs::write(&manifest_path, lines)
            .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line).map_err(|e| {
                Error::contract(format!("manifest line {}: bad record: {e}", lineno + 1))
            })?;
            let img_path: PathBuf = dir.join(&record.image);
            let bytes = fs::read(&img_path)
                .map_err(|e| Error::io(format!("reading {}", img_path.display()), e))?;
            let image = RasterImage::from_ppm_bytes(&bytes)?;
            let references: Vec<Vec<String>> = record
                .references
                .iter()
                .map(|r| r.split_whitespace().map(|t| t.to_string()).collect())
                .collect();
            let mut sample = Sample::new(record.id, image, references)?;
            sample.oracle = record.oracle;
            samples.push(sample);
        }
        let manifest = DatasetManifest { samples };
        manifest.validate()?;
        Ok(manifest)
    }
}

impl FromIterator<Sample> for DatasetManifest {
    fn from_iter<T: IntoIterator<Item = Sample>>(iter: T) -> Self {
        DatasetManifest {
            samples: iter.into_iter().collect(),
        }
    }
}
