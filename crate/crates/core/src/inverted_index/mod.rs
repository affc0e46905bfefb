//! Inverted unigram dictionaries over caption nouns.
//!
//! Each lemmatized noun maps to the sorted set of samples whose caption
//! contains it. A multi-word concept's text hits are the intersection of its
//! unigrams' lists: co-occurrence anywhere in the caption, not adjacency.
//! [`exact_phrase_count`] covers the adjacency reading with a linear scan.

mod codec;
mod posting;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus_io::{CorpusError, CorpusManifest, SampleRecord, StreamOptions};
use crate::text_pipeline::{
    tokenize_surfaces, Concept, TaggerAnnotations, TextError, TextPipeline,
};

pub use codec::{decode, encode, read_varint, write_varint, CodecError, IndexPayload, Section};
pub use posting::{intersect, PostingList, SampleIndex};

/// Records handed to the worker pool at once during a build.
const BATCH: usize = 8192;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: CodecError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus has more than {} samples", SampleIndex::MAX)]
    TooManySamples,
    #[error("phrase has no tokens")]
    EmptyPhrase,
}

/// Lemmatized noun → samples containing it, for one corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextIndex {
    pub corpus_name: String,
    pub sample_count: u64,
    pub pipeline_fingerprint: String,
    pub vocabulary: BTreeMap<String, PostingList>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub samples: u64,
    pub skipped_lines: u64,
    /// Distinct (sample, noun) pairs emitted by the pipeline.
    pub noun_pairs: u64,
}

impl TextIndex {
    pub fn empty(corpus_name: impl Into<String>, pipeline_fingerprint: impl Into<String>) -> Self {
        Self {
            corpus_name: corpus_name.into(),
            sample_count: 0,
            pipeline_fingerprint: pipeline_fingerprint.into(),
            vocabulary: BTreeMap::new(),
        }
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn postings(&self, unigram: &str) -> Option<&PostingList> {
        self.vocabulary.get(unigram)
    }

    /// Number of samples whose caption contains every unigram of `concept`,
    /// and those samples.
    ///
    /// A missing unigram yields no hits. Single-unigram concepts borrow the
    /// stored list.
    pub fn text_frequency(&self, concept: &Concept) -> (usize, Cow<'_, PostingList>) {
        let mut lists = Vec::with_capacity(concept.unigrams.len());
        for unigram in &concept.unigrams {
            match self.vocabulary.get(unigram) {
                Some(list) => lists.push(list),
                None => return (0, Cow::Owned(PostingList::new())),
            }
        }
        let hits = match lists.as_slice() {
            [] => Cow::Owned(PostingList::new()),
            [single] => Cow::Borrowed(*single),
            many => Cow::Owned(intersect(many).expect("non-empty")),
        };
        (hits.len(), hits)
    }

    /// Serializes to the CFIX container.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&IndexPayload {
            section: Section::Text,
            corpus_name: self.corpus_name.clone(),
            sample_count: self.sample_count,
            fingerprint: self.pipeline_fingerprint.clone(),
            threshold: None,
            lists: self.vocabulary.clone(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let p = decode(bytes, Section::Text)?;
        Ok(Self {
            corpus_name: p.corpus_name,
            sample_count: p.sample_count,
            pipeline_fingerprint: p.fingerprint,
            vocabulary: p.lists,
        })
    }
}

/// Free-function form of [`TextIndex::text_frequency`].
pub fn text_frequency<'a>(
    index: &'a TextIndex,
    concept: &Concept,
) -> (usize, Cow<'a, PostingList>) {
    index.text_frequency(concept)
}

pub fn save_index(index: &TextIndex, path: impl AsRef<Path>) -> Result<(), IndexError> {
    let path = path.as_ref();
    std::fs::write(path, index.to_bytes()).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_index(path: impl AsRef<Path>) -> Result<TextIndex, IndexError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TextIndex::from_bytes(&bytes).map_err(|source| IndexError::Codec {
        path: path.to_path_buf(),
        source,
    })
}

/// Fingerprint recorded in an index: lexicon digest, plus a marker when
/// external annotations replaced the heuristic tagger.
pub fn index_fingerprint(
    pipeline: &TextPipeline<'_>,
    annotations: Option<&TaggerAnnotations>,
) -> String {
    match annotations {
        Some(_) => format!("{}+annotations", pipeline.fingerprint()),
        None => pipeline.fingerprint().to_string(),
    }
}

fn extract(
    pipeline: &TextPipeline<'_>,
    annotations: Option<&TaggerAnnotations>,
    record: &SampleRecord,
) -> Result<Vec<String>, TextError> {
    let annotation = annotations
        .and_then(|a| a.get(record.sample_id))
        .map(|tags| (record.sample_id, tags));
    Ok(pipeline
        .extract_concept_nouns(&record.caption, annotation)?
        .into_iter()
        .collect())
}

/// Builds the text index of a corpus.
///
/// Records are streamed in corpus order and extracted in parallel batches on
/// the current rayon pool; postings are appended in stream order, so the
/// result does not depend on the number of workers.
pub fn build_text_index(
    manifest: &CorpusManifest,
    pipeline: &TextPipeline<'_>,
    annotations: Option<&TaggerAnnotations>,
    options: StreamOptions,
) -> Result<(TextIndex, BuildStats), IndexError> {
    let mut vocabulary: HashMap<String, Vec<SampleIndex>> = HashMap::new();
    let mut stats = BuildStats::default();
    let mut next_index: u64 = 0;
    let mut stream = manifest.stream_with(options);
    let mut batch: Vec<SampleRecord> = Vec::with_capacity(BATCH);
    loop {
        batch.clear();
        for record in stream.by_ref().take(BATCH) {
            batch.push(record?);
        }
        if batch.is_empty() {
            break;
        }
        let nouns: Vec<Vec<String>> = batch
            .par_iter()
            .map(|r| extract(pipeline, annotations, r))
            .collect::<Result<_, _>>()?;
        for noun_set in nouns {
            let index =
                SampleIndex::try_from(next_index).map_err(|_| IndexError::TooManySamples)?;
            stats.noun_pairs += noun_set.len() as u64;
            for noun in noun_set {
                vocabulary.entry(noun).or_default().push(index);
            }
            next_index += 1;
        }
    }
    stats.skipped_lines = stream.skipped();
    if !options.lenient {
        stream.finish()?;
    }
    stats.samples = next_index;

    let vocabulary = vocabulary
        .into_iter()
        .map(|(k, v)| {
            (
                k,
                PostingList::from_sorted(v).expect("appended in stream order"),
            )
        })
        .collect();
    let index = TextIndex {
        corpus_name: manifest.corpus_name.clone(),
        sample_count: next_index,
        pipeline_fingerprint: index_fingerprint(pipeline, annotations),
        vocabulary,
    };
    Ok((index, stats))
}

/// Number of samples whose normalized caption tokens contain the phrase's
/// tokens contiguously. Surface tokens only: no noun filter, no lemmas.
pub fn exact_phrase_count(
    manifest: &CorpusManifest,
    phrase: &str,
    options: StreamOptions,
) -> Result<u64, IndexError> {
    let needle = tokenize_surfaces(phrase);
    if needle.is_empty() {
        return Err(IndexError::EmptyPhrase);
    }
    let mut count = 0u64;
    let mut stream = manifest.stream_with(options);
    let mut batch: Vec<SampleRecord> = Vec::with_capacity(BATCH);
    loop {
        batch.clear();
        for record in stream.by_ref().take(BATCH) {
            batch.push(record?);
        }
        if batch.is_empty() {
            break;
        }
        count += batch
            .par_iter()
            .filter(|r| contains_phrase(&tokenize_surfaces(&r.caption), &needle))
            .count() as u64;
    }
    Ok(count)
}

fn contains_phrase(haystack: &[String], needle: &[String]) -> bool {
    haystack.len() >= needle.len() && haystack.windows(needle.len()).any(|w| w == needle)
}
