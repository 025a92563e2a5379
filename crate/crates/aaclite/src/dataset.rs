//! Dataset manifests, loading and synthetic dataset generation.
//!
//! A manifest is line-delimited JSON: a header record
//! `{"format":"aaclite-manifest","version":1,"count":N}` followed by one
//! record per sample,
//! `{"id":..,"image":..,"granular":[8 ints],"cumulative":..,"risk":..}`,
//! with image paths relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use aaclite_core::data::{
    generate_synthetic_dataset, granular_to_cumulative, preprocess, render_scan, score_to_risk,
    AacLabel, Layout, RawScan, Risk, Sample, ScoreDistribution,
};
use aaclite_core::model::NUM_GROUPS;
use aaclite_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::formats::{read_image, write_image};
use crate::par::par_map;

pub const MANIFEST_FORMAT: &str = "aaclite-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

/// One manifest line as written; integers are wide so that out-of-range
/// values reach label validation instead of failing to parse.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    granular: Vec<i64>,
    cumulative: i64,
    risk: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub label: AacLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

fn data_err(msg: String) -> Error {
    Error::Core(CoreError::Data(msg))
}

fn record_label(r: &Record) -> aaclite_core::Result<AacLabel> {
    let cumulative = granular_to_cumulative(&r.granular)?;
    if i64::from(cumulative) != r.cumulative {
        return Err(CoreError::Data(format!(
            "cumulative {} != sum of segment scores {}",
            r.cumulative, cumulative
        )));
    }
    let risk = Risk::parse(&r.risk)
        .ok_or_else(|| CoreError::Data(format!("unknown risk {:?}", r.risk)))?;
    let expect = score_to_risk(r.cumulative)?;
    if risk != expect {
        return Err(CoreError::Data(format!(
            "risk {} does not match cumulative {} ({})",
            risk, r.cumulative, expect
        )));
    }
    let granular: [u8; NUM_GROUPS] = core::array::from_fn(|i| r.granular[i] as u8);
    AacLabel::from_granular(granular)
}

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            entries,
        }
    }

    /// Parses and validates manifest text: header, every label invariant,
    /// unique ids. Stops at the first violation.
    pub fn parse(text: &str) -> aaclite_core::Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((_, first)) = lines.next() else {
            return Err(CoreError::Format("empty manifest".into()));
        };
        let header: Header = serde_json::from_str(first)
            .map_err(|e| CoreError::Format(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(CoreError::Format(format!(
                "not a manifest: format {:?}",
                header.format
            )));
        }
        if header.version != MANIFEST_VERSION {
            return Err(CoreError::Version {
                found: header.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(header.count);
        for (lineno, line) in lines {
            let r: Record = serde_json::from_str(line)
                .map_err(|e| CoreError::Data(format!("manifest line {}: {e}", lineno + 1)))?;
            let label =
                record_label(&r).map_err(|e| CoreError::Data(format!("sample {}: {e}", r.id)))?;
            if !seen.insert(r.id.clone()) {
                return Err(CoreError::Data(format!("duplicate sample id {}", r.id)));
            }
            entries.push(ManifestEntry {
                id: r.id,
                image: PathBuf::from(r.image),
                label,
            });
        }
        if entries.len() != header.count {
            return Err(CoreError::Data(format!(
                "manifest header promises {} samples, found {}",
                header.count,
                entries.len()
            )));
        }
        Ok(Self {
            version: header.version,
            entries,
        })
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: self.version,
            count: self.entries.len(),
        };
        let mut out = serde_json::to_string(&header).expect("plain struct serializes");
        out.push('\n');
        for e in &self.entries {
            let r = Record {
                id: e.id.clone(),
                image: e.image.to_string_lossy().replace('\\', "/"),
                granular: e.label.granular.iter().map(|&g| i64::from(g)).collect(),
                cumulative: i64::from(e.label.cumulative),
                risk: e.label.risk.name().into(),
            };
            out.push_str(&serde_json::to_string(&r).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(Self::parse(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(&path, self.to_text()).at(path)
    }

    /// Samples per risk category.
    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for e in &self.entries {
            h[e.label.risk.index()] += 1;
        }
        h
    }
}

/// Preprocessed samples and the manifest they came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<AacLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Reads a manifest, then every image, validating and preprocessing each to
/// `[3, input_size, input_size]`. Reports the first failure in manifest order.
pub fn load_dataset(
    manifest_path: impl AsRef<Path>,
    input_size: usize,
    threads: usize,
) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path
        .parent()
        .unwrap_or(Path::new(""))
        .to_path_buf();
    let loaded = par_map(&manifest.entries, threads, |_, e| -> Result<Sample> {
        let pixels = read_image(root.join(&e.image))?;
        let scan = RawScan {
            id: e.id.clone(),
            source: "file".into(),
            pixels,
        };
        let image = preprocess(&scan, input_size)
            .map_err(|err| data_err(format!("sample {}: {err}", e.id)))?;
        Ok(Sample {
            id: e.id.clone(),
            label: e.label,
            image,
        })
    });
    let samples = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root,
        manifest,
        samples,
    })
}

/// Renders `n` synthetic scans into `out/images` and writes
/// `out/manifest.jsonl`. Output bytes depend only on the arguments.
pub fn write_synthetic_dataset(
    out: impl AsRef<Path>,
    n: usize,
    seed: u64,
    dist: &ScoreDistribution,
    layout: &Layout,
    threads: usize,
) -> Result<Manifest> {
    let out = out.as_ref();
    let specs = generate_synthetic_dataset(n, seed, dist, layout)?;
    let images = out.join(IMAGE_DIR);
    fs::create_dir_all(&images).at(&images)?;
    let written = par_map(&specs, threads, |_, s| -> Result<ManifestEntry> {
        let scan = render_scan(s, layout)?;
        let rel = PathBuf::from(IMAGE_DIR).join(format!("{}.aaci", s.id));
        write_image(out.join(&rel), &scan.pixels)?;
        Ok(ManifestEntry {
            id: s.id.clone(),
            image: rel,
            label: s.label,
        })
    });
    let manifest = Manifest::from_entries(written.into_iter().collect::<Result<Vec<_>>>()?);
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
