//! Cumulative matching characteristic for retrieval of generated images
//! against real ones.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmcError {
    #[error("dimension mismatch: query {query}, gallery {gallery}")]
    DimensionMismatch { query: usize, gallery: usize },
    #[error("empty gallery")]
    EmptyGallery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{rows} embeddings but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("query label {0:?} does not occur in the gallery")]
    UnknownLabel(String),
    #[error("bad embedding file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CmcError + '_ {
    move |source| CmcError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Embeddings {
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, CmcError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(CmcError::DimensionMismatch {
                    query: r.len(),
                    gallery: dim,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    count: usize,
    dim: usize,
    dtype: String,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    let mut name = bin.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Reads `<path>` (raw little-endian f32) described by `<path>.json`.
pub fn load_embeddings(path: &Path) -> Result<Embeddings, CmcError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let malformed = |reason: String| CmcError::Malformed {
        path: path.to_owned(),
        reason,
    };
    let header: Sidecar = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(malformed(format!("unsupported dtype {:?}", header.dtype)));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = header.count * header.dim * 4;
    if bytes.len() != expected {
        return Err(malformed(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Embeddings {
        rows: header.count,
        dim: header.dim,
        data,
    })
}

pub fn save_embeddings(path: &Path, emb: &Embeddings) -> Result<(), CmcError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(emb.data.len() * 4);
    for v in &emb.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let header = Sidecar {
        count: emb.rows,
        dim: emb.dim,
        dtype: "f32".into(),
    };
    fs::write(
        &side,
        serde_json::to_string(&header).expect("sidecar serializes"),
    )
    .map_err(io_err(&side))
}

/// One label per line; trailing whitespace trimmed.
pub fn load_labels(path: &Path) -> Result<Vec<String>, CmcError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(|l| l.trim_end().to_owned()).collect())
}

pub struct CmcInputs<'a> {
    pub queries: &'a Embeddings,
    pub query_labels: &'a [String],
    pub gallery: &'a Embeddings,
    pub gallery_labels: &'a [String],
}

impl CmcInputs<'_> {
    fn validate(&self) -> Result<(), CmcError> {
        if self.gallery.rows == 0 {
            return Err(CmcError::EmptyGallery);
        }
        if self.queries.dim != self.gallery.dim {
            return Err(CmcError::DimensionMismatch {
                query: self.queries.dim,
                gallery: self.gallery.dim,
            });
        }
        if self.queries.rows != self.query_labels.len() {
            return Err(CmcError::LabelCount {
                rows: self.queries.rows,
                labels: self.query_labels.len(),
            });
        }
        if self.gallery.rows != self.gallery_labels.len() {
            return Err(CmcError::LabelCount {
                rows: self.gallery.rows,
                labels: self.gallery_labels.len(),
            });
        }
        if let Some(l) = self
            .query_labels
            .iter()
            .find(|l| !self.gallery_labels.contains(l))
        {
            return Err(CmcError::UnknownLabel(l.clone()));
        }
        Ok(())
    }

    /// 1-based rank of the first same-label gallery item for each query,
    /// ordering by descending cosine similarity then gallery index.
    fn first_match_ranks(&self) -> Vec<usize> {
        let norms: Vec<f64> = (0..self.gallery.rows)
            .map(|g| norm(self.gallery.row(g)))
            .collect();
        (0..self.queries.rows)
            .into_par_iter()
            .map(|q| {
                let query = self.queries.row(q);
                let qn = norm(query);
                let sims: Vec<f64> = (0..self.gallery.rows)
                    .map(|g| cosine(query, qn, self.gallery.row(g), norms[g]))
                    .collect();
                let label = &self.query_labels[q];
                // best same-label item under the (−sim, index) order
                let best = (0..self.gallery.rows)
                    .filter(|&g| &self.gallery_labels[g] == label)
                    .min_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)))
                    .expect("label present in gallery");
                let ahead = (0..self.gallery.rows)
                    .filter(|&g| sims[g] > sims[best] || (sims[g] == sims[best] && g < best))
                    .count();
                ahead + 1
            })
            .collect()
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

fn cosine(a: &[f32], an: f64, b: &[f32], bn: f64) -> f64 {
    if an == 0.0 || bn == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum::<f64>()
        / (an * bn)
}

/// CMC at each k, in input order.
pub fn cmc_curve(inputs: &CmcInputs, ks: &[usize]) -> Result<Vec<f64>, CmcError> {
    inputs.validate()?;
    if ks.contains(&0) {
        return Err(CmcError::ZeroK);
    }
    let ranks = inputs.first_match_ranks();
    let n = ranks.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect())
}

/// Fraction of queries with a same-label item among their top-k neighbours.
pub fn cmc_at_k(inputs: &CmcInputs, k: usize) -> Result<f64, CmcError> {
    Ok(cmc_curve(inputs, &[k])?[0])
}

/// Head minus tail CMC@k for each k, in percentage points.
pub fn delta_cmc(head: &CmcInputs, tail: &CmcInputs, ks: &[usize]) -> Result<Vec<f64>, CmcError> {
    let h = cmc_curve(head, ks)?;
    let t = cmc_curve(tail, ks)?;
    Ok(h.iter().zip(&t).map(|(a, b)| 100.0 * (a - b)).collect())
}
