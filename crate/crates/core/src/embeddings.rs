//! Labeled embedding datasets: the `EMB v1` text format and a synthetic
//! class-conditional generator.
//!
//! File layout:
//!
//! ```text
//! EMB v1 dim=4
//! # comment lines and blank lines are skipped
//! a0,0,0.1,0.2,0.3,0.4
//! ```
//!
//! Each data line is `id,label,v1,...,vD`. The writer emits every value
//! with 17 significant digits so a save/load round trip is exact.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{derive_seed, Rng};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: malformed header, expected `EMB v1 dim=<D>`")]
    MalformedHeader { line: usize },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },
    #[error("dataset has no records")]
    Empty,
    #[error("base and novel splits share labels {labels:?}")]
    OverlappingLabels { labels: Vec<u32> },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: u32,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    split: Split,
    records: Vec<EmbeddingRecord>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl EmbeddingDataset {
    /// Validates dimensions, finiteness and id uniqueness.
    pub fn new(
        dim: usize,
        split: Split,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self, EmbeddingError> {
        if records.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        let mut seen = HashSet::new();
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            // Row numbers here are 1-based record positions, not file lines.
            if r.vector.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    line: i + 1,
                    expected: dim,
                    found: r.vector.len(),
                });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::BadRow {
                    line: i + 1,
                    message: "non-finite value".into(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(EmbeddingError::DuplicateId {
                    line: i + 1,
                    id: r.id.clone(),
                });
            }
            class_index.entry(r.label).or_default().push(i);
        }
        Ok(Self {
            dim,
            split,
            records,
            class_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        self.class_index.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Record indices of one class, in file order.
    pub fn class_records(&self, label: u32) -> &[usize] {
        self.class_index.get(&label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.class_index
    }

    pub fn parse(text: &str, split: Split) -> Result<Self, EmbeddingError> {
        let mut lines = text.lines().enumerate();
        let dim = loop {
            match lines.next() {
                None => return Err(EmbeddingError::MalformedHeader { line: 1 }),
                Some((i, l)) => {
                    if i == 0 {
                        break parse_header(l).ok_or(EmbeddingError::MalformedHeader { line: 1 })?;
                    }
                }
            }
        };
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in lines {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            if fields.len() < 2 {
                return Err(EmbeddingError::BadRow {
                    line,
                    message: "expected `id,label,values...`".into(),
                });
            }
            let id = fields[0];
            if id.is_empty() {
                return Err(EmbeddingError::BadRow {
                    line,
                    message: "empty id".into(),
                });
            }
            let label: u32 = fields[1].parse().map_err(|_| EmbeddingError::BadRow {
                line,
                message: format!("label `{}` is not a non-negative integer", fields[1]),
            })?;
            let values = &fields[2..];
            if values.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    line,
                    expected: dim,
                    found: values.len(),
                });
            }
            let mut vector = Vec::with_capacity(dim);
            for v in values {
                let x: f64 = v.parse().map_err(|_| EmbeddingError::BadRow {
                    line,
                    message: format!("`{v}` is not a number"),
                })?;
                if !x.is_finite() {
                    return Err(EmbeddingError::BadRow {
                        line,
                        message: format!("non-finite value `{v}`"),
                    });
                }
                vector.push(x);
            }
            if !seen.insert(id.to_string()) {
                return Err(EmbeddingError::DuplicateId {
                    line,
                    id: id.to_string(),
                });
            }
            records.push(EmbeddingRecord {
                id: id.to_string(),
                label,
                vector,
            });
        }
        Self::new(dim, split, records)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("EMB v1 dim={}\n", self.dim);
        for r in &self.records {
            let _ = write!(out, "{},{}", r.id, r.label);
            for v in &r.vector {
                let _ = write!(out, ",{}", format_real(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn parse_header(line: &str) -> Option<usize> {
    let mut parts = line.split_whitespace();
    if parts.next()? != "EMB" || parts.next()? != "v1" {
        return None;
    }
    let dim: usize = parts.next()?.strip_prefix("dim=")?.parse().ok()?;
    if parts.next().is_some() || dim == 0 {
        return None;
    }
    Some(dim)
}

/// 17 significant digits, scientific notation.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Fails when base and novel splits share any label.
pub fn check_disjoint(base: &EmbeddingDataset, novel: &EmbeddingDataset) -> Result<(), EmbeddingError> {
    let b: BTreeSet<u32> = base.class_index.keys().copied().collect();
    let shared: Vec<u32> = novel
        .class_index
        .keys()
        .filter(|l| b.contains(l))
        .copied()
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(EmbeddingError::OverlappingLabels { labels: shared })
    }
}

/// Class-conditional Gaussian generator.
///
/// Class `k` gets a mean with i.i.d. `N(0, mean_scale²)` coordinates and a
/// noise scale drawn uniformly from `[noise_lo, noise_hi]`; each sample is
/// the mean plus isotropic `N(0, scale_k²)` noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub mean_scale: f64,
    pub noise_lo: f64,
    pub noise_hi: f64,
    pub seed: u64,
}

/// Per-class generative parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub label: u32,
    pub mean: Vec<f64>,
    pub noise_scale: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |m: &str| Err(EmbeddingError::InvalidSpec(m.to_string()));
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return bad("num_classes, dim and samples_per_class must be positive");
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return bad("mean_scale must be positive");
        }
        if !(self.noise_lo >= 0.0 && self.noise_lo <= self.noise_hi && self.noise_hi.is_finite()) {
            return bad("noise range must satisfy 0 <= noise_lo <= noise_hi");
        }
        Ok(())
    }

    /// Means and noise scales, a pure function of the seed.
    pub fn class_profiles(&self) -> Vec<ClassProfile> {
        let mut rng = Rng::new(derive_seed(self.seed, "synth-classes"));
        (0..self.num_classes)
            .map(|k| {
                let mean = (0..self.dim).map(|_| self.mean_scale * rng.normal()).collect();
                let noise_scale = rng.uniform_range(self.noise_lo, self.noise_hi);
                ClassProfile {
                    label: k as u32,
                    mean,
                    noise_scale,
                }
            })
            .collect()
    }

    pub fn generate(&self) -> Result<EmbeddingDataset, EmbeddingError> {
        self.validate()?;
        let profiles = self.class_profiles();
        let records = self.sample_records(&profiles, "synth-samples");
        EmbeddingDataset::new(self.dim, Split::Base, records)
    }

    /// Fresh draws from the same class profiles, e.g. for held-out checks.
    pub fn generate_heldout(&self) -> Result<EmbeddingDataset, EmbeddingError> {
        self.validate()?;
        let profiles = self.class_profiles();
        let records = self.sample_records(&profiles, "synth-heldout");
        EmbeddingDataset::new(self.dim, Split::Novel, records)
    }

    /// Splits the classes into base labels `0..base_classes` and novel
    /// labels `base_classes..num_classes`.
    pub fn generate_split(
        &self,
        base_classes: usize,
    ) -> Result<(EmbeddingDataset, EmbeddingDataset), EmbeddingError> {
        if base_classes == 0 || base_classes >= self.num_classes {
            return Err(EmbeddingError::InvalidSpec(format!(
                "base_classes must lie in 1..{}, got {base_classes}",
                self.num_classes
            )));
        }
        let all = self.generate()?;
        let (base, novel): (Vec<_>, Vec<_>) = all
            .records
            .into_iter()
            .partition(|r| (r.label as usize) < base_classes);
        Ok((
            EmbeddingDataset::new(self.dim, Split::Base, base)?,
            EmbeddingDataset::new(self.dim, Split::Novel, novel)?,
        ))
    }

    fn sample_records(&self, profiles: &[ClassProfile], purpose: &str) -> Vec<EmbeddingRecord> {
        let seed = derive_seed(self.seed, purpose);
        let mut records = Vec::with_capacity(profiles.len() * self.samples_per_class);
        for p in profiles {
            // One stream per class keeps a class's samples independent of
            // how many classes precede it.
            let mut rng = Rng::substream(seed, u64::from(p.label));
            for s in 0..self.samples_per_class {
                let vector = p
                    .mean
                    .iter()
                    .map(|m| m + p.noise_scale * rng.normal())
                    .collect();
                records.push(EmbeddingRecord {
                    id: format!("c{}s{}", p.label, s),
                    label: p.label,
                    vector,
                });
            }
        }
        records
    }
}
