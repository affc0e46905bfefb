//! Matched image-text frequencies, misalignment degree, and cross-corpus
//! frequency correlation.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_tags::ImageIndex;
use crate::inverted_index::{intersect, PostingList, TextIndex};
use crate::text_pipeline::Concept;
use crate::trend_stats::{pearson, StatsError};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("corpus mismatch: text index {text_name:?} ({text_count} samples) vs image index {image_name:?} ({image_count} samples)")]
    CorpusMismatch {
        text_name: String,
        text_count: u64,
        image_name: String,
        image_count: u64,
    },
    #[error("stream length mismatch: {image} image sets vs {text} text sets")]
    LengthMismatch { image: u64, text: u64 },
    #[error("no pairs to evaluate")]
    NoPairs,
    #[error("need at least two corpora, got {0}")]
    TooFewCorpora(usize),
    #[error("concept sets differ between {first:?} and {other:?}")]
    ConceptSetMismatch { first: String, other: String },
    #[error("field {field} is missing for concept {concept:?} in {corpus:?}")]
    MissingField {
        corpus: String,
        concept: String,
        field: FrequencyField,
    },
    #[error("correlation between {a:?} and {b:?}: {source}")]
    Correlation {
        a: String,
        b: String,
        #[source]
        source: StatsError,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Which count of a [`FrequencyRecord`] an analysis reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyField {
    Text,
    Image,
    Matched,
}

impl fmt::Display for FrequencyField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrequencyField::Text => "text",
            FrequencyField::Image => "image",
            FrequencyField::Matched => "matched",
        })
    }
}

impl FromStr for FrequencyField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            "matched" => Ok(Self::Matched),
            other => Err(format!(
                "unknown field {other:?} (expected text, image or matched)"
            )),
        }
    }
}

/// Per-concept counts for one corpus. Image and matched counts are absent in
/// text-only analyses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyRecord {
    pub concept: String,
    pub text_count: u64,
    pub image_count: Option<u64>,
    pub matched_count: Option<u64>,
}

impl FrequencyRecord {
    pub fn get(&self, field: FrequencyField) -> Option<u64> {
        match field {
            FrequencyField::Text => Some(self.text_count),
            FrequencyField::Image => self.image_count,
            FrequencyField::Matched => self.matched_count,
        }
    }
}

/// Samples where both caption and image show the concept.
pub fn matched_frequency(
    text_hits: &PostingList,
    image_hits: &PostingList,
) -> (usize, PostingList) {
    let hits = intersect(&[text_hits, image_hits]).expect("two lists");
    (hits.len(), hits)
}

fn check_same_corpus(text: &TextIndex, image: &ImageIndex) -> Result<(), MatchError> {
    if text.corpus_name != image.corpus_name || text.sample_count != image.sample_count {
        return Err(MatchError::CorpusMismatch {
            text_name: text.corpus_name.clone(),
            text_count: text.sample_count,
            image_name: image.corpus_name.clone(),
            image_count: image.sample_count,
        });
    }
    Ok(())
}

/// One record per concept, in input order. Without an image index only text
/// counts are filled.
pub fn frequency_table(
    text_index: &TextIndex,
    image_index: Option<&ImageIndex>,
    concepts: &[Concept],
) -> Result<Vec<FrequencyRecord>, MatchError> {
    if let Some(image) = image_index {
        check_same_corpus(text_index, image)?;
    }
    Ok(concepts
        .iter()
        .map(|concept| {
            let (text_count, text_hits) = text_index.text_frequency(concept);
            let (image_count, matched_count) = match image_index {
                Some(image) => {
                    let (n, image_hits) = image.image_frequency(concept);
                    let (m, _) = matched_frequency(&text_hits, image_hits);
                    (Some(n as u64), Some(m as u64))
                }
                None => (None, None),
            };
            FrequencyRecord {
                concept: concept.name.clone(),
                text_count: text_count as u64,
                image_count,
                matched_count,
            }
        })
        .collect())
}

const FREQ_HEADER: [&str; 4] = ["concept", "text_count", "image_count", "matched_count"];

pub fn write_frequency_csv(writer: impl Write, records: &[FrequencyRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FREQ_HEADER)?;
    let opt = |v: Option<u64>| v.map(|n| n.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.concept.clone(),
            r.text_count.to_string(),
            opt(r.image_count),
            opt(r.matched_count),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a frequency CSV. Accepts the full four-column layout or the
/// text-only `concept,text_count` layout.
pub fn read_frequency_csv(path: impl AsRef<Path>) -> Result<Vec<FrequencyRecord>, MatchError> {
    let path = path.as_ref();
    let bad = |reason: String| MatchError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|source| MatchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers != FREQ_HEADER[..headers.len().min(4)] || headers.len() < 2 {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        let num = |col: usize| -> Result<Option<u64>, MatchError> {
            match row.get(col).unwrap_or("") {
                "" => Ok(None),
                v => v
                    .parse()
                    .map(Some)
                    .map_err(|_| bad(format!("line {line}: bad count {v:?}"))),
            }
        };
        let text_count = num(1)?.ok_or_else(|| bad(format!("line {line}: missing text_count")))?;
        out.push(FrequencyRecord {
            concept: row[0].to_string(),
            text_count,
            image_count: num(2)?,
            matched_count: num(3)?,
        });
    }
    Ok(out)
}

/// Misalignment summary for a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentReport {
    pub corpus_name: String,
    pub total_pairs: u64,
    pub misaligned_pairs: u64,
    /// Misaligned pairs where the image set, the text set, or both are empty.
    pub empty_either_side: u64,
    pub degree: f64,
}

impl MisalignmentReport {
    /// Degree as a percentage with two decimals, e.g. `16.81%`.
    pub fn degree_percent(&self) -> String {
        format!("{:.2}%", self.degree * 100.0)
    }
}

impl fmt::Display for MisalignmentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} misaligned of {} pairs ({})",
            self.corpus_name,
            self.misaligned_pairs,
            self.total_pairs,
            self.degree_percent()
        )
    }
}

/// Running misalignment counts. Passes over disjoint sample ranges can be
/// merged in any order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MisalignmentPass {
    pub total: u64,
    pub misaligned: u64,
    pub empty_either_side: u64,
}

impl MisalignmentPass {
    /// Records one pair; returns whether it is misaligned.
    pub fn push<T: Ord>(&mut self, image: &BTreeSet<T>, text: &BTreeSet<T>) -> bool {
        self.total += 1;
        let misaligned = image.intersection(text).next().is_none();
        if misaligned {
            self.misaligned += 1;
            if image.is_empty() || text.is_empty() {
                self.empty_either_side += 1;
            }
        }
        misaligned
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            total: self.total + other.total,
            misaligned: self.misaligned + other.misaligned,
            empty_either_side: self.empty_either_side + other.empty_either_side,
        }
    }

    pub fn report(self, corpus_name: &str) -> Result<MisalignmentReport, MatchError> {
        if self.total == 0 {
            return Err(MatchError::NoPairs);
        }
        Ok(MisalignmentReport {
            corpus_name: corpus_name.to_string(),
            total_pairs: self.total,
            misaligned_pairs: self.misaligned,
            empty_either_side: self.empty_either_side,
            degree: self.misaligned as f64 / self.total as f64,
        })
    }
}

/// A pair is misaligned when its image and text concept sets share nothing,
/// including when either is empty.
pub fn misalignment_degree<T, I, J>(
    corpus_name: &str,
    image_sets: I,
    text_sets: J,
) -> Result<MisalignmentReport, MatchError>
where
    T: Ord,
    I: IntoIterator<Item = BTreeSet<T>>,
    J: IntoIterator<Item = BTreeSet<T>>,
{
    let mut pass = MisalignmentPass::default();
    let mut images = image_sets.into_iter();
    let mut texts = text_sets.into_iter();
    loop {
        match (images.next(), texts.next()) {
            (Some(i), Some(t)) => {
                pass.push(&i, &t);
            }
            (None, None) => break,
            (i, t) => {
                let extra_i = u64::from(i.is_some()) + images.count() as u64;
                let extra_t = u64::from(t.is_some()) + texts.count() as u64;
                return Err(MatchError::LengthMismatch {
                    image: pass.total + extra_i,
                    text: pass.total + extra_t,
                });
            }
        }
    }
    pass.report(corpus_name)
}

/// Per-sample sets of concepts whose text hits include the sample.
pub fn per_sample_text_concepts(index: &TextIndex, concepts: &[Concept]) -> Vec<BTreeSet<String>> {
    let mut out = vec![BTreeSet::new(); index.sample_count as usize];
    for concept in concepts {
        let (_, hits) = index.text_frequency(concept);
        for i in hits.iter() {
            out[i as usize].insert(concept.name.clone());
        }
    }
    out
}

/// Writes `sample_id,image_concepts,text_concepts` rows for every misaligned
/// pair; concept sets are `;`-joined. Returns the number of rows.
pub fn export_misaligned<'a>(
    output_path: impl AsRef<Path>,
    pairs: impl IntoIterator<Item = (u64, &'a BTreeSet<String>, &'a BTreeSet<String>)>,
) -> Result<u64, MatchError> {
    let path = output_path.as_ref();
    let io = |e: io::Error| MatchError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(io::BufWriter::new(file));
    let csv_err = |e: csv::Error| MatchError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(["sample_id", "image_concepts", "text_concepts"])
        .map_err(csv_err)?;
    let join = |s: &BTreeSet<String>| s.iter().map(String::as_str).collect::<Vec<_>>().join(";");
    let mut written = 0;
    for (sample_id, image, text) in pairs {
        if image.intersection(text).next().is_none() {
            w.write_record([sample_id.to_string(), join(image), join(text)])
                .map_err(csv_err)?;
            written += 1;
        }
    }
    w.flush().map_err(io)?;
    Ok(written)
}

/// Symmetric matrix of Pearson correlations of `log10(count + 1)` between
/// corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub corpora: Vec<String>,
    pub field: FrequencyField,
    pub matrix: Vec<Vec<f64>>,
}

pub fn cross_corpus_correlation(
    tables: &[(String, Vec<FrequencyRecord>)],
    field: FrequencyField,
) -> Result<CorrelationMatrix, MatchError> {
    if tables.len() < 2 {
        return Err(MatchError::TooFewCorpora(tables.len()));
    }
    let (first_name, first) = &tables[0];
    for (name, records) in &tables[1..] {
        let same = records.len() == first.len()
            && records
                .iter()
                .zip(first)
                .all(|(a, b)| a.concept == b.concept);
        if !same {
            return Err(MatchError::ConceptSetMismatch {
                first: first_name.clone(),
                other: name.clone(),
            });
        }
    }
    let logs: Vec<Vec<f64>> = tables
        .iter()
        .map(|(name, records)| {
            records
                .iter()
                .map(|r| {
                    r.get(field)
                        .map(|c| (c as f64 + 1.0).log10())
                        .ok_or_else(|| MatchError::MissingField {
                            corpus: name.clone(),
                            concept: r.concept.clone(),
                            field,
                        })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let n = tables.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let rho = pearson(&logs[i], &logs[j]).map_err(|source| MatchError::Correlation {
                a: tables[i].0.clone(),
                b: tables[j].0.clone(),
                source,
            })?;
            matrix[i][j] = rho;
            matrix[j][i] = rho;
        }
    }
    Ok(CorrelationMatrix {
        corpora: tables.iter().map(|(n, _)| n.clone()).collect(),
        field,
        matrix,
    })
}
