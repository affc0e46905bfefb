//! Cleaning a candidate image pool into a balanced evaluation set:
//! outlier removal, embedding de-duplication, operator exclusions,
//! perceptual-hash de-duplication and class balancing.

mod pgm;
mod phash;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trend_stats::Embeddings;

pub use pgm::{decode_pgm, read_pgm, GrayImage};
pub use phash::{compute_phash, hamming};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("image {0:?} has no embedding")]
    MissingEmbedding(String),
    #[error("image {0:?} has neither a hash nor pixels")]
    MissingPhash(String),
    #[error("outlier removal needs at least 2 images, got {0}")]
    PoolTooSmall(usize),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("classes below the target of {target}: {}", format_deficient(.classes))]
    DeficientClasses {
        target: usize,
        classes: Vec<(String, usize)>,
    },
    #[error("embedding dimension {found} differs from {expected} (image {image_id:?})")]
    DimensionMismatch {
        image_id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("cannot decode {path}: {reason}")]
    Undecodable { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn format_deficient(classes: &[(String, usize)]) -> String {
    classes
        .iter()
        .map(|(c, n)| format!("{c} ({n})"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateImage {
    pub image_id: String,
    pub class_name: String,
    pub embedding: Option<Vec<f32>>,
    pub phash: Option<u64>,
    pub pixels: Option<GrayImage>,
    /// Row of the source embedding file, kept so curated pools can be written back.
    pub embedding_row: Option<usize>,
}

impl CandidateImage {
    pub fn new(image_id: impl Into<String>, class_name: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            class_name: class_name.into(),
            embedding: None,
            phash: None,
            pixels: None,
            embedding_row: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f32>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn with_phash(mut self, phash: u64) -> Self {
        self.phash = Some(phash);
        self
    }

    pub fn with_pixels(mut self, pixels: GrayImage) -> Self {
        self.pixels = Some(pixels);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub outlier_fraction: f64,
    pub dedup_threshold_common: f64,
    pub dedup_threshold_finegrained: f64,
    pub phash_hamming_threshold: u32,
    /// Images kept per class; the smallest class size when unset.
    pub target_per_class: Option<usize>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            outlier_fraction: 0.05,
            dedup_threshold_common: 0.9,
            dedup_threshold_finegrained: 0.95,
            phash_hamming_threshold: 10,
            target_per_class: None,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |m: String| Err(CurationError::BadConfig(m));
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!(
                "outlier_fraction {} not in [0, 1)",
                self.outlier_fraction
            ));
        }
        for (name, t) in [
            ("dedup_threshold_common", self.dedup_threshold_common),
            (
                "dedup_threshold_finegrained",
                self.dedup_threshold_finegrained,
            ),
        ] {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("{name} {t} not in (0, 1]"));
            }
        }
        if self.phash_hamming_threshold > 64 {
            return bad(format!(
                "phash_hamming_threshold {} exceeds 64",
                self.phash_hamming_threshold
            ));
        }
        if self.target_per_class == Some(0) {
            return bad("target_per_class must be positive".into());
        }
        Ok(())
    }
}

/// Output of one stage. `kept` preserves input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub kept: Vec<CandidateImage>,
    pub removed: Vec<CandidateImage>,
}

fn split(pool: Vec<CandidateImage>, remove: &HashSet<usize>) -> Partition {
    let mut out = Partition::default();
    for (i, img) in pool.into_iter().enumerate() {
        if remove.contains(&i) {
            out.removed.push(img);
        } else {
            out.kept.push(img);
        }
    }
    out
}

fn unit_embeddings(pool: &[CandidateImage]) -> Result<Vec<Vec<f64>>, CurationError> {
    let mut dim = None;
    pool.iter()
        .map(|img| {
            let e = img
                .embedding
                .as_ref()
                .ok_or_else(|| CurationError::MissingEmbedding(img.image_id.clone()))?;
            let expected = *dim.get_or_insert(e.len());
            if e.len() != expected {
                return Err(CurationError::DimensionMismatch {
                    image_id: img.image_id.clone(),
                    expected,
                    found: e.len(),
                });
            }
            let norm = e
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            Ok(e.iter().map(|&x| f64::from(x) * inv).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Order in which greedy scans visit the pool.
fn by_image_id(pool: &[CandidateImage]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool[a].image_id.cmp(&pool[b].image_id).then(a.cmp(&b)));
    order
}

/// Each image's mean cosine similarity to every other image in the pool.
pub fn mean_similarities(pool: &[CandidateImage]) -> Result<Vec<f64>, CurationError> {
    if pool.len() < 2 {
        return Err(CurationError::PoolTooSmall(pool.len()));
    }
    let units = unit_embeddings(pool)?;
    let others = (units.len() - 1) as f64;
    Ok((0..units.len())
        .into_par_iter()
        .map(|i| {
            let total: f64 = units
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, u)| dot(&units[i], u))
                .sum();
            total / others
        })
        .collect())
}

/// Removes the `floor(fraction · n)` images least similar, on average, to
/// the rest of the pool. Ties go by image_id.
pub fn remove_outliers(
    pool: Vec<CandidateImage>,
    fraction: f64,
) -> Result<Partition, CurationError> {
    let scores = mean_similarities(&pool)?;
    let count = (fraction * pool.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then_with(|| pool[a].image_id.cmp(&pool[b].image_id))
            .then(a.cmp(&b))
    });
    let remove: HashSet<usize> = order.into_iter().take(count).collect();
    Ok(split(pool, &remove))
}

/// Greedy de-duplication in ascending image_id order: an image is dropped
/// when its cosine similarity to any already kept image is strictly above
/// the threshold for its class.
pub fn soft_dedup_with(
    pool: Vec<CandidateImage>,
    threshold_for: impl Fn(&str) -> f64,
) -> Result<Partition, CurationError> {
    let units = unit_embeddings(&pool)?;
    let mut kept_idx: Vec<usize> = Vec::new();
    let mut remove = HashSet::new();
    for i in by_image_id(&pool) {
        let threshold = threshold_for(&pool[i].class_name);
        if kept_idx
            .par_iter()
            .any(|&k| dot(&units[i], &units[k]) > threshold)
        {
            remove.insert(i);
        } else {
            kept_idx.push(i);
        }
    }
    Ok(split(pool, &remove))
}

pub fn soft_dedup(pool: Vec<CandidateImage>, threshold: f64) -> Result<Partition, CurationError> {
    soft_dedup_with(pool, |_| threshold)
}

/// Soft de-duplication over the whole pool, using the fine-grained
/// threshold for classes in `fine_grained` and the common one otherwise.
pub fn soft_dedup_by_class(
    pool: Vec<CandidateImage>,
    config: &CurationConfig,
    fine_grained: &BTreeSet<String>,
) -> Result<Partition, CurationError> {
    soft_dedup_with(pool, |class| {
        if fine_grained.contains(class) {
            config.dedup_threshold_finegrained
        } else {
            config.dedup_threshold_common
        }
    })
}

/// Fills in missing hashes from pixels.
pub fn ensure_phashes(pool: &mut [CandidateImage]) -> Result<(), CurationError> {
    pool.par_iter_mut().try_for_each(|img| {
        if img.phash.is_none() {
            let pixels = img
                .pixels
                .as_ref()
                .ok_or_else(|| CurationError::MissingPhash(img.image_id.clone()))?;
            img.phash = Some(compute_phash(pixels));
        }
        Ok(())
    })
}

/// Within each class, greedily drops images whose hash is within
/// `max_distance` bits of an already kept image of that class.
pub fn phash_dedup(
    pool: Vec<CandidateImage>,
    max_distance: u32,
) -> Result<Partition, CurationError> {
    let hashes: Vec<u64> = pool
        .iter()
        .map(|img| {
            img.phash
                .ok_or_else(|| CurationError::MissingPhash(img.image_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in by_image_id(&pool) {
        classes
            .entry(pool[i].class_name.as_str())
            .or_default()
            .push(i);
    }
    let remove: HashSet<usize> = classes
        .into_par_iter()
        .flat_map_iter(|(_, members)| {
            let mut kept: Vec<u64> = Vec::new();
            let mut dropped = Vec::new();
            for i in members {
                if kept.iter().any(|&h| hamming(h, hashes[i]) <= max_distance) {
                    dropped.push(i);
                } else {
                    kept.push(hashes[i]);
                }
            }
            dropped
        })
        .collect();
    Ok(split(pool, &remove))
}

/// Drops every image named in `excluded`.
pub fn apply_exclusions(pool: Vec<CandidateImage>, excluded: &BTreeSet<String>) -> Partition {
    let remove: HashSet<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, img)| excluded.contains(&img.image_id))
        .map(|(i, _)| i)
        .collect();
    split(pool, &remove)
}

pub fn class_sizes(pool: &[CandidateImage]) -> BTreeMap<String, usize> {
    let mut sizes = BTreeMap::new();
    for img in pool {
        *sizes.entry(img.class_name.clone()).or_insert(0) += 1;
    }
    sizes
}

/// Keeps the first `target` images of each class by image_id.
pub fn balance_classes(
    pool: Vec<CandidateImage>,
    target: usize,
) -> Result<Partition, CurationError> {
    let deficient: Vec<(String, usize)> = class_sizes(&pool)
        .into_iter()
        .filter(|&(_, n)| n < target)
        .collect();
    if !deficient.is_empty() {
        return Err(CurationError::DeficientClasses {
            target,
            classes: deficient,
        });
    }
    let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
    let mut remove = HashSet::new();
    for i in by_image_id(&pool) {
        let n = taken.entry(pool[i].class_name.as_str()).or_insert(0);
        if *n < target {
            *n += 1;
        } else {
            remove.insert(i);
        }
    }
    Ok(split(pool, &remove))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub kept: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub kept: usize,
    pub removed: usize,
    pub per_class: BTreeMap<String, StageCounts>,
}

impl StageReport {
    fn from_partition(stage: &str, part: &Partition) -> Self {
        let mut per_class: BTreeMap<String, StageCounts> = BTreeMap::new();
        for img in &part.kept {
            per_class.entry(img.class_name.clone()).or_default().kept += 1;
        }
        for img in &part.removed {
            per_class.entry(img.class_name.clone()).or_default().removed += 1;
        }
        Self {
            stage: stage.into(),
            kept: part.kept.len(),
            removed: part.removed.len(),
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOutcome {
    pub images: Vec<CandidateImage>,
    pub target_per_class: usize,
    pub stages: Vec<StageReport>,
}

/// Runs every stage in order: outliers, soft de-duplication, exclusions,
/// perceptual-hash de-duplication, balancing.
pub fn run_pipeline(
    pool: Vec<CandidateImage>,
    config: &CurationConfig,
    fine_grained: &BTreeSet<String>,
    excluded: &BTreeSet<String>,
) -> Result<CurationOutcome, CurationError> {
    config.validate()?;
    let mut seen = HashSet::new();
    if let Some(dup) = pool.iter().find(|img| !seen.insert(img.image_id.as_str())) {
        return Err(CurationError::DuplicateImageId(dup.image_id.clone()));
    }
    let mut stages = Vec::new();
    let mut record = |name: &str, part: Partition| {
        stages.push(StageReport::from_partition(name, &part));
        part.kept
    };
    let pool = record("outliers", remove_outliers(pool, config.outlier_fraction)?);
    let pool = record(
        "soft_dedup",
        soft_dedup_by_class(pool, config, fine_grained)?,
    );
    let mut pool = record("exclusions", apply_exclusions(pool, excluded));
    ensure_phashes(&mut pool)?;
    let pool = record(
        "phash_dedup",
        phash_dedup(pool, config.phash_hamming_threshold)?,
    );
    let target = match config.target_per_class {
        Some(t) => t,
        None => class_sizes(&pool).values().copied().min().unwrap_or(0),
    };
    let images = record("balance", balance_classes(pool, target)?);
    Ok(CurationOutcome {
        images,
        target_per_class: target,
        stages,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CurationError + '_ {
    move |source| CurationError::Io {
        path: path.to_owned(),
        source,
    }
}

/// One image_id per line; blank lines ignored.
pub fn load_id_list(path: &Path) -> Result<BTreeSet<String>, CurationError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

#[derive(Debug, Deserialize, Serialize)]
struct PoolRow {
    image_id: String,
    class_name: String,
    embedding_row: Option<usize>,
    phash_hex: Option<String>,
}

/// Reads a pool CSV (`image_id,class_name,embedding_row,phash_hex`).
/// Embedding rows index into `embeddings`; images without a hash are looked
/// up as `<image_dir>/<image_id>.pgm` when a directory is given.
pub fn read_pool(
    path: &Path,
    embeddings: Option<&Embeddings>,
    image_dir: Option<&Path>,
) -> Result<Vec<CandidateImage>, CurationError> {
    let malformed = |reason: String| CurationError::Malformed {
        path: path.to_owned(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let mut pool = Vec::new();
    for (line, row) in reader.deserialize::<PoolRow>().enumerate() {
        let row = row.map_err(|e| malformed(e.to_string()))?;
        let mut img = CandidateImage::new(row.image_id, row.class_name);
        if let Some(r) = row.embedding_row {
            let emb = embeddings
                .ok_or_else(|| malformed("embedding_row given but no embedding file".into()))?;
            if r >= emb.rows {
                return Err(malformed(format!(
                    "row {}: embedding_row {r} out of range ({} rows)",
                    line + 2,
                    emb.rows
                )));
            }
            img.embedding = Some(emb.row(r).to_vec());
            img.embedding_row = Some(r);
        }
        match row
            .phash_hex
            .as_deref()
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            Some(hex) => {
                let h = u64::from_str_radix(hex, 16)
                    .map_err(|e| malformed(format!("row {}: bad phash {hex:?}: {e}", line + 2)))?;
                img.phash = Some(h);
            }
            None => {
                if let Some(dir) = image_dir {
                    let file = dir.join(format!("{}.pgm", img.image_id));
                    let pixels = read_pgm(&file)
                        .map_err(|reason| CurationError::Undecodable { path: file, reason })?;
                    img.pixels = Some(pixels);
                }
            }
        }
        pool.push(img);
    }
    Ok(pool)
}

/// Writes a pool in the same CSV layout.
pub fn write_pool(path: &Path, images: &[CandidateImage]) -> Result<(), CurationError> {
    let malformed = |reason: String| CurationError::Malformed {
        path: path.to_owned(),
        reason,
    };
    let mut writer = csv::Writer::from_path(path).map_err(|e| malformed(e.to_string()))?;
    for img in images {
        writer
            .serialize(PoolRow {
                image_id: img.image_id.clone(),
                class_name: img.class_name.clone(),
                embedding_row: img.embedding_row,
                phash_hex: img.phash.map(|h| format!("{h:016x}")),
            })
            .map_err(|e| malformed(e.to_string()))?;
    }
    writer.flush().map_err(io_err(path))
}
