//! Caption corpora on disk: manifests, JSONL shards and per-concept score tables.
//!
//! A corpus is a JSON manifest naming one or more JSONL shards. Records are
//! enumerated in lexicographic shard order, then line order; the position of a
//! record in that enumeration is its global sample index.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The only manifest layout this crate understands.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("unknown version {found} in {path} (expected {FORMAT_VERSION})")]
    UnknownVersion { path: PathBuf, found: u32 },
    #[error("missing shard {0}")]
    MissingShard(PathBuf),
    #[error("{path}:{line}: invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 {
        path: PathBuf,
        line: u64,
        offset: u64,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("duplicate sample_id {id}: first in {first}, again in {second}")]
    DuplicateSampleId {
        id: u64,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("manifest declares {declared} samples but shards hold {found}")]
    CountMismatch { declared: u64, found: u64 },
    #[error("{path}: {reason}")]
    MalformedTable { path: PathBuf, reason: String },
    #[error("duplicate concept {concept:?} in {path}")]
    DuplicateConcept { path: PathBuf, concept: String },
    #[error("empty file {0}")]
    EmptyFile(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One image-text pair from a caption shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(rename = "id")]
    pub sample_id: u64,
    pub caption: String,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl SampleRecord {
    pub fn new(sample_id: u64, caption: impl Into<String>) -> Self {
        Self {
            sample_id,
            caption: caption.into(),
            image_ref: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    corpus_name: String,
    format_version: u32,
    shards: Vec<String>,
    sample_count: u64,
}

/// A validated corpus manifest. Shard paths are resolved relative to the
/// manifest's directory and sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub corpus_name: String,
    pub shard_paths: Vec<PathBuf>,
    pub sample_count: u64,
    pub format_version: u32,
}

/// Reads and validates a manifest. No shard contents are read.
pub fn open_corpus(manifest_path: impl AsRef<Path>) -> Result<CorpusManifest, CorpusError> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let raw: ManifestFile =
        serde_json::from_str(&text).map_err(|e| CorpusError::MalformedManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if raw.format_version != FORMAT_VERSION {
        return Err(CorpusError::UnknownVersion {
            path: path.to_path_buf(),
            found: raw.format_version,
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut shard_paths: Vec<PathBuf> = raw.shards.iter().map(|s| base.join(s)).collect();
    shard_paths.sort();
    for shard in &shard_paths {
        if !shard.is_file() {
            return Err(CorpusError::MissingShard(shard.clone()));
        }
    }
    Ok(CorpusManifest {
        corpus_name: raw.corpus_name,
        shard_paths,
        sample_count: raw.sample_count,
        format_version: raw.format_version,
    })
}

impl CorpusManifest {
    /// Writes a manifest next to its shards. Shard paths are stored relative
    /// to the manifest directory when possible.
    pub fn write(&self, manifest_path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = manifest_path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let shards = self
            .shard_paths
            .iter()
            .map(|p| {
                p.strip_prefix(base)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        let raw = ManifestFile {
            corpus_name: self.corpus_name.clone(),
            format_version: self.format_version,
            shards,
            sample_count: self.sample_count,
        };
        let body = serde_json::to_string_pretty(&raw).expect("manifest serializes");
        std::fs::write(path, body).map_err(io_err(path))
    }

    pub fn stream(&self) -> SampleStream {
        self.stream_with(StreamOptions::default())
    }

    pub fn stream_with(&self, options: StreamOptions) -> SampleStream {
        stream_samples(self, options)
    }

    /// Full scan checking that every record parses and the declared
    /// sample count matches.
    pub fn verify(&self) -> Result<u64, CorpusError> {
        let mut stream = self.stream();
        for record in stream.by_ref() {
            record?;
        }
        stream.finish()
    }
}

/// Writes records as a JSONL caption shard.
pub fn write_shard<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a SampleRecord>,
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StreamOptions {
    /// Skip and count malformed lines instead of failing.
    pub lenient: bool,
}

/// Iterator over every record of a corpus, in shard order then line order.
///
/// After an error is yielded the stream is exhausted.
pub struct SampleStream {
    shards: std::vec::IntoIter<PathBuf>,
    current: Option<(PathBuf, BufReader<File>)>,
    options: StreamOptions,
    line_no: u64,
    byte_offset: u64,
    seen: HashMap<u64, usize>,
    shard_names: Vec<PathBuf>,
    declared: u64,
    yielded: u64,
    skipped: u64,
    failed: bool,
    buf: Vec<u8>,
}

pub fn stream_samples(manifest: &CorpusManifest, options: StreamOptions) -> SampleStream {
    SampleStream {
        shards: manifest.shard_paths.clone().into_iter(),
        current: None,
        options,
        line_no: 0,
        byte_offset: 0,
        seen: HashMap::new(),
        shard_names: Vec::new(),
        declared: manifest.sample_count,
        yielded: 0,
        skipped: 0,
        failed: false,
        buf: Vec::new(),
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: u64,
    caption: String,
    #[serde(default)]
    image: Option<String>,
}

impl SampleStream {
    /// Malformed lines dropped so far (lenient mode only).
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn yielded(&self) -> u64 {
        self.yielded
    }

    /// Checks the declared sample count once the stream is drained.
    pub fn finish(self) -> Result<u64, CorpusError> {
        if self.yielded != self.declared {
            return Err(CorpusError::CountMismatch {
                declared: self.declared,
                found: self.yielded,
            });
        }
        Ok(self.yielded)
    }

    fn fail(&mut self, err: CorpusError) -> Option<Result<SampleRecord, CorpusError>> {
        self.failed = true;
        Some(Err(err))
    }

    fn parse_line(&self, path: &Path, bytes: &[u8]) -> Result<SampleRecord, CorpusError> {
        let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::InvalidUtf8 {
            path: path.to_path_buf(),
            line: self.line_no,
            offset: self.byte_offset + e.valid_up_to() as u64,
        })?;
        let raw: RawRecord =
            serde_json::from_str(text).map_err(|e| CorpusError::MalformedRecord {
                path: path.to_path_buf(),
                line: self.line_no,
                reason: e.to_string(),
            })?;
        Ok(SampleRecord {
            sample_id: raw.id,
            caption: raw.caption,
            image_ref: raw.image,
        })
    }
}

impl Iterator for SampleStream {
    type Item = Result<SampleRecord, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if self.current.is_none() {
                let path = self.shards.next()?;
                match File::open(&path) {
                    Ok(f) => {
                        self.shard_names.push(path.clone());
                        self.current = Some((path, BufReader::new(f)));
                        self.line_no = 0;
                        self.byte_offset = 0;
                    }
                    Err(source) => return self.fail(CorpusError::Io { path, source }),
                }
            }
            let (path, reader) = self.current.as_mut().expect("shard open");
            let path = path.clone();
            self.buf.clear();
            let n = match reader.read_until(b'\n', &mut self.buf) {
                Ok(n) => n,
                Err(source) => return self.fail(CorpusError::Io { path, source }),
            };
            if n == 0 {
                self.current = None;
                continue;
            }
            self.line_no += 1;
            let mut line = std::mem::take(&mut self.buf);
            while matches!(line.last(), Some(b'\n' | b'\r')) {
                line.pop();
            }
            let parsed = if line.iter().all(u8::is_ascii_whitespace) {
                None
            } else {
                Some(self.parse_line(&path, &line))
            };
            self.byte_offset += n as u64;
            self.buf = line;
            match parsed {
                None => continue,
                Some(Err(_)) if self.options.lenient => {
                    self.skipped += 1;
                    continue;
                }
                Some(Err(e)) => return self.fail(e),
                Some(Ok(record)) => {
                    let shard_idx = self.shard_names.len() - 1;
                    if let Some(&first) = self.seen.get(&record.sample_id) {
                        let err = CorpusError::DuplicateSampleId {
                            id: record.sample_id,
                            first: self.shard_names[first].clone(),
                            second: path,
                        };
                        return self.fail(err);
                    }
                    self.seen.insert(record.sample_id, shard_idx);
                    self.yielded += 1;
                    return Some(Ok(record));
                }
            }
        }
    }
}

/// Per-concept scores (accuracy, recall, aesthetic score, ...) keyed by
/// normalized concept name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerformanceTable {
    pub entries: BTreeMap<String, f64>,
}

impl PerformanceTable {
    pub fn get(&self, concept: &str) -> Option<f64> {
        self.entries.get(&normalize_concept_name(concept)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lowercases, trims, and collapses internal whitespace runs to one space.
pub fn normalize_concept_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Loads a `concept,score` CSV with a header row.
pub fn load_performance(path: impl AsRef<Path>) -> Result<PerformanceTable, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_performance(file, path)
}

fn read_performance(reader: impl Read, path: &Path) -> Result<PerformanceTable, CorpusError> {
    let bad = |reason: String| CorpusError::MalformedTable {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(CorpusError::EmptyFile(path.to_path_buf()));
    }
    if headers.len() != 2 || &headers[0] != "concept" || &headers[1] != "score" {
        return Err(bad(format!(
            "expected header `concept,score`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        if row.len() != 2 {
            return Err(bad(format!("line {line}: expected 2 columns")));
        }
        let concept = normalize_concept_name(&row[0]);
        if concept.is_empty() {
            return Err(bad(format!("line {line}: empty concept name")));
        }
        let score: f64 = row[1]
            .parse()
            .map_err(|_| bad(format!("line {line}: non-numeric score {:?}", &row[1])))?;
        if !score.is_finite() {
            return Err(bad(format!("line {line}: non-finite score {:?}", &row[1])));
        }
        if entries.insert(concept.clone(), score).is_some() {
            return Err(CorpusError::DuplicateConcept {
                path: path.to_path_buf(),
                concept,
            });
        }
    }
    if entries.is_empty() {
        return Err(CorpusError::EmptyFile(path.to_path_buf()));
    }
    Ok(PerformanceTable { entries })
}
