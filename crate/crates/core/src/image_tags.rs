//! Image-side concept hits from precomputed open-set tagger scores.
//!
//! Scores arrive as `sample_index,concept,score` CSV rows. A sample counts as
//! showing a concept when its score is at or above the threshold; duplicate
//! rows for one (sample, concept) pair keep the maximum score.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::corpus_io::normalize_concept_name;
use crate::inverted_index::{
    decode, encode, CodecError, IndexPayload, PostingList, SampleIndex, Section,
};
use crate::text_pipeline::Concept;

pub const DEFAULT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("tag for sample {index} but corpus has {sample_count} samples")]
    SampleOutOfRange { index: u64, sample_count: u64 },
    #[error("score {score} for sample {index}, concept {concept:?} is outside [0, 1]")]
    ScoreOutOfRange {
        index: u64,
        concept: String,
        score: f64,
    },
    #[error("threshold {0} is outside [0, 1]")]
    BadThreshold(f64),
    #[error("empty concept name for sample {0}")]
    EmptyConcept(u64),
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: CodecError,
    },
}

/// One tagger output: probability that `concept_name` is in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct TagRecord {
    pub sample_index: u64,
    pub concept_name: String,
    pub score: f64,
}

impl TagRecord {
    pub fn new(sample_index: u64, concept_name: &str, score: f64) -> Self {
        Self {
            sample_index,
            concept_name: normalize_concept_name(concept_name),
            score,
        }
    }
}

#[derive(Deserialize)]
struct RawTag {
    sample_index: u64,
    concept: String,
    score: f64,
}

/// Reads a tag CSV with header `sample_index,concept,score`.
pub fn read_tag_file(path: impl AsRef<Path>) -> Result<Vec<TagRecord>, TagError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TagError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let bad = |reason: String| TagError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["sample_index", "concept", "score"] {
        return Err(bad("expected header `sample_index,concept,score`".into()));
    }
    rdr.deserialize::<RawTag>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            Ok(TagRecord::new(row.sample_index, &row.concept, row.score))
        })
        .collect()
}

/// Maximum score per (concept, sample), ready to be binarized at any threshold.
#[derive(Debug, Clone, Default)]
pub struct TagTable {
    corpus_name: String,
    sample_count: u64,
    scores: HashMap<String, HashMap<SampleIndex, f64>>,
}

impl TagTable {
    pub fn new(corpus_name: impl Into<String>, sample_count: u64) -> Self {
        Self {
            corpus_name: corpus_name.into(),
            sample_count,
            scores: HashMap::new(),
        }
    }

    pub fn insert(&mut self, record: TagRecord) -> Result<(), TagError> {
        if record.sample_index >= self.sample_count
            || record.sample_index > u64::from(SampleIndex::MAX)
        {
            return Err(TagError::SampleOutOfRange {
                index: record.sample_index,
                sample_count: self.sample_count,
            });
        }
        if !(0.0..=1.0).contains(&record.score) {
            return Err(TagError::ScoreOutOfRange {
                index: record.sample_index,
                concept: record.concept_name,
                score: record.score,
            });
        }
        let concept = normalize_concept_name(&record.concept_name);
        if concept.is_empty() {
            return Err(TagError::EmptyConcept(record.sample_index));
        }
        let index = record.sample_index as SampleIndex;
        let slot = self
            .scores
            .entry(concept)
            .or_default()
            .entry(index)
            .or_insert(record.score);
        *slot = slot.max(record.score);
        Ok(())
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = TagRecord>) -> Result<(), TagError> {
        records.into_iter().try_for_each(|r| self.insert(r))
    }

    /// Merges another table over the same corpus, keeping maximum scores.
    pub fn merge(&mut self, other: TagTable) {
        for (concept, samples) in other.scores {
            let dst = self.scores.entry(concept).or_default();
            for (index, score) in samples {
                let slot = dst.entry(index).or_insert(score);
                *slot = slot.max(score);
            }
        }
    }

    pub fn binarize(&self, threshold: f64) -> Result<ImageIndex, TagError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(TagError::BadThreshold(threshold));
        }
        let concepts = self
            .scores
            .iter()
            .filter_map(|(concept, samples)| {
                let hits: Vec<SampleIndex> = samples
                    .iter()
                    .filter(|(_, &s)| s >= threshold)
                    .map(|(&i, _)| i)
                    .collect();
                (!hits.is_empty()).then(|| (concept.clone(), PostingList::from_unsorted(hits)))
            })
            .collect();
        Ok(ImageIndex {
            corpus_name: self.corpus_name.clone(),
            sample_count: self.sample_count,
            threshold_used: threshold,
            concepts,
        })
    }
}

/// Concept → samples whose image shows it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageIndex {
    pub corpus_name: String,
    pub sample_count: u64,
    pub threshold_used: f64,
    pub concepts: BTreeMap<String, PostingList>,
}

/// Binarizes a tag stream at `threshold` (inclusive).
pub fn build_image_index(
    corpus_name: &str,
    tags: impl IntoIterator<Item = TagRecord>,
    threshold: f64,
    sample_count: u64,
) -> Result<ImageIndex, TagError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(TagError::BadThreshold(threshold));
    }
    let mut table = TagTable::new(corpus_name, sample_count);
    table.extend(tags)?;
    table.binarize(threshold)
}

impl ImageIndex {
    pub fn image_frequency(&self, concept: &Concept) -> (usize, &PostingList) {
        static EMPTY: PostingList = PostingList::EMPTY;
        match self.concepts.get(&concept.name) {
            Some(list) => (list.len(), list),
            None => (0, &EMPTY),
        }
    }

    /// Sample → set of concept names, for every sample in the corpus.
    /// Only concepts in `restrict_to` are kept when it is given.
    pub fn per_sample_concepts(
        &self,
        restrict_to: Option<&BTreeSet<String>>,
    ) -> Vec<BTreeSet<String>> {
        let mut out = vec![BTreeSet::new(); self.sample_count as usize];
        for (concept, list) in &self.concepts {
            if restrict_to.is_some_and(|r| !r.contains(concept)) {
                continue;
            }
            for i in list {
                out[i as usize].insert(concept.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&IndexPayload {
            section: Section::Image,
            corpus_name: self.corpus_name.clone(),
            sample_count: self.sample_count,
            fingerprint: String::new(),
            threshold: Some(self.threshold_used),
            lists: self.concepts.clone(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let p = decode(bytes, Section::Image)?;
        Ok(Self {
            corpus_name: p.corpus_name,
            sample_count: p.sample_count,
            threshold_used: p.threshold.unwrap_or(f64::NAN),
            concepts: p.lists,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TagError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| TagError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TagError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| TagError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|source| TagError::Codec {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn image_frequency<'a>(index: &'a ImageIndex, concept: &Concept) -> (usize, &'a PostingList) {
    index.image_frequency(concept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn concept(name: &str) -> Concept {
        Concept {
            name: name.into(),
            unigrams: vec![name.into()],
            downstream_count: 0,
        }
    }

    fn dogs() -> Vec<TagRecord> {
        vec![
            TagRecord::new(1, "dog", 0.71),
            TagRecord::new(2, "dog", 0.70),
            TagRecord::new(3, "dog", 0.69),
        ]
    }

    #[test]
    fn inclusive_threshold() {
        let idx = build_image_index("c", dogs(), 0.7, 10).unwrap();
        let (n, hits) = idx.image_frequency(&concept("dog"));
        assert_eq!((n, hits.as_slice()), (2, &[1, 2][..]));
        assert_eq!(idx.image_frequency(&concept("cat")).0, 0);

        let all = build_image_index("c", dogs(), 0.0, 10).unwrap();
        assert_eq!(all.image_frequency(&concept("dog")).0, 3);
    }

    #[test]
    fn threshold_sweep_is_monotone() {
        let mut table = TagTable::new("c", 10);
        table.extend(dogs()).unwrap();
        let counts: Vec<usize> = [0.5, 0.6, 0.7]
            .iter()
            .map(|&t| {
                table
                    .binarize(t)
                    .unwrap()
                    .image_frequency(&concept("dog"))
                    .0
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
        let lo = table.binarize(0.5).unwrap();
        let hi = table.binarize(0.7).unwrap();
        assert!(hi.concepts["dog"].is_subset(&lo.concepts["dog"]));
    }

    #[test]
    fn rejects_bad_records() {
        assert!(matches!(
            build_image_index("c", [TagRecord::new(10, "dog", 0.9)], 0.7, 10),
            Err(TagError::SampleOutOfRange { index: 10, .. })
        ));
        assert!(matches!(
            build_image_index("c", [TagRecord::new(0, "dog", 1.5)], 0.7, 10),
            Err(TagError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            build_image_index("c", [TagRecord::new(0, "dog", f64::NAN)], 0.7, 10),
            Err(TagError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            build_image_index("c", [], 1.2, 10),
            Err(TagError::BadThreshold(_))
        ));
    }

    #[test]
    fn duplicate_pairs_keep_max_and_names_normalize() {
        let recs = vec![
            TagRecord::new(4, " Dog", 0.2),
            TagRecord::new(4, "dog ", 0.9),
            TagRecord::new(4, "DOG", 0.1),
        ];
        let idx = build_image_index("c", recs, 0.7, 5).unwrap();
        assert_eq!(idx.concepts["dog"].as_slice(), [4]);
    }

    #[test]
    fn persistence_and_inversion() {
        let idx = build_image_index("c", dogs(), 0.7, 4).unwrap();
        assert_eq!(ImageIndex::from_bytes(&idx.to_bytes()).unwrap(), idx);
        let per = idx.per_sample_concepts(None);
        assert_eq!(per.len(), 4);
        assert!(per[1].contains("dog") && per[3].is_empty());
    }

    proptest! {
        #[test]
        fn order_independent_and_monotone(
            raw in proptest::collection::vec((0u64..50, 0usize..4, 0.0f64..=1.0), 0..200),
            seed in any::<u64>(),
            t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0,
        ) {
            let names = ["dog", "cat", "tree", "car"];
            let recs: Vec<TagRecord> = raw.iter().map(|&(i, c, s)| TagRecord::new(i, names[c], s)).collect();
            let mut shuffled = recs.clone();
            // deterministic shuffle from the seed
            let n = shuffled.len();
            let mut state = seed | 1;
            for i in (1..n).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                shuffled.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let a = build_image_index("c", recs.clone(), t1, 50).unwrap();
            let b = build_image_index("c", shuffled, t1, 50).unwrap();
            prop_assert_eq!(&a, &b);

            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let lo_idx = build_image_index("c", recs.clone(), lo, 50).unwrap();
            let hi_idx = build_image_index("c", recs.clone(), hi, 50).unwrap();
            for (c, list) in &hi_idx.concepts {
                prop_assert!(list.is_subset(&lo_idx.concepts[c]));
            }
            // count equals distinct samples with max score >= threshold
            for name in names {
                let mut best: HashMap<u64, f64> = HashMap::new();
                for r in recs.iter().filter(|r| r.concept_name == name) {
                    let e = best.entry(r.sample_index).or_insert(r.score);
                    *e = e.max(r.score);
                }
                let expect = best.values().filter(|&&s| s >= t1).count();
                prop_assert_eq!(a.image_frequency(&concept(name)).0, expect);
            }
        }
    }
}
