//! Trace manifest and the raw binary layouts it points at.
//!
//! `labels_file`: M little-endian u32. `logits_file`: M*N little-endian f32,
//! row-major. Lengths must match exactly; trailing bytes are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PredictionTrace, TraceSet};
use crate::error::{Error, Result};
use crate::partition::DomainSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub name: String,
    pub logits_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub domain: DomainSet,
    pub name: String,
    pub logits_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub num_classes: usize,
    pub num_samples: usize,
    pub labels_file: PathBuf,
    pub edge: TraceEntry,
    pub experts: Vec<ExpertEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generalist: Option<TraceEntry>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_exact_len(path: &Path, what: &str, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Shape {
            what: format!("{what} {}", path.display()),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub fn read_labels(path: &Path, num_samples: usize, num_classes: usize) -> Result<Vec<u32>> {
    let bytes = read_exact_len(path, "labels file", num_samples as u64 * 4)?;
    let labels: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = labels.iter().position(|&y| y as usize >= num_classes) {
        return Err(Error::validation(format!(
            "{}: label {} at byte offset {} out of range [0, {num_classes})",
            path.display(),
            labels[i],
            i * 4
        )));
    }
    Ok(labels)
}

pub fn read_logits(path: &Path, num_samples: usize, num_classes: usize) -> Result<Vec<f32>> {
    let expected = num_samples as u64 * num_classes as u64 * 4;
    let bytes = read_exact_len(path, "logits file", expected)?;
    let mut out = Vec::with_capacity(num_samples * num_classes);
    for (i, b) in bytes.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(b.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::NonFinite {
                file: path.display().to_string(),
                offset: i as u64 * 4,
            });
        }
        out.push(x);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|y| y.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn write_logits(path: &Path, logits: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = logits.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

impl TraceManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Loads every referenced file. Paths resolve relative to `base`.
    pub fn load_traces(&self, base: &Path) -> Result<TraceSet> {
        let (m, n) = (self.num_samples, self.num_classes);
        let labels = read_labels(&resolve(base, &self.labels_file), m, n)?;
        let load = |name: &str, file: &Path| -> Result<PredictionTrace> {
            let logits = read_logits(&resolve(base, file), m, n)?;
            PredictionTrace::new(name, n, logits, labels.clone())
        };
        let edge = load(&self.edge.name, &self.edge.logits_file)?;
        let mut experts = BTreeMap::new();
        for e in &self.experts {
            let t = load(&e.name, &e.logits_file)?;
            if experts.insert(e.domain.clone(), t).is_some() {
                return Err(Error::validation(format!(
                    "expert domain {} listed twice",
                    e.domain
                )));
            }
        }
        let generalist = match &self.generalist {
            Some(g) => Some(load(&g.name, &g.logits_file)?),
            None => None,
        };
        TraceSet::new(edge, experts, generalist)
    }

    /// Writes a trace set as `<dir>/manifest.json` plus binary files.
    pub fn write_trace_set(dir: &Path, ts: &TraceSet) -> Result<TraceManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        write_labels(&dir.join("labels.u32"), ts.edge.labels())?;
        let edge_file = PathBuf::from("edge.f32");
        write_logits(&dir.join(&edge_file), ts.edge.logits())?;
        let mut experts = Vec::new();
        for (d, t) in &ts.experts {
            let file = PathBuf::from(format!("expert_{d}.f32"));
            write_logits(&dir.join(&file), t.logits())?;
            experts.push(ExpertEntry {
                domain: d.clone(),
                name: t.name().to_string(),
                logits_file: file,
            });
        }
        let generalist = match &ts.generalist {
            Some(g) => {
                let file = PathBuf::from("generalist.f32");
                write_logits(&dir.join(&file), g.logits())?;
                Some(TraceEntry {
                    name: g.name().to_string(),
                    logits_file: file,
                })
            }
            None => None,
        };
        let manifest = TraceManifest {
            num_classes: ts.num_classes(),
            num_samples: ts.num_samples(),
            labels_file: PathBuf::from("labels.u32"),
            edge: TraceEntry {
                name: ts.edge.name().to_string(),
                logits_file: edge_file,
            },
            experts,
            generalist,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json("manifest", e))?;
        fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
        Ok(manifest)
    }
}

impl TraceSet {
    /// Reads a manifest and the files it references.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = TraceManifest::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.load_traces(base)
    }
}
