//! Caption → lemmatized noun set.
//!
//! Tokens are tagged either from an external annotation file or by a lexicon
//! heuristic: a token is a noun unless it appears in the stopword list or in
//! the verb/adjective exclusion list. Nouns are then lemmatized with an
//! irregular-form table followed by ordered suffix rules.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus_io::normalize_concept_name;

/// Bumped whenever tokenizer or lemmatizer rules change; part of the fingerprint.
pub const RULES_VERSION: &str = "tokenize-v1/lemma-v1";

/// Minimum number of downstream samples a mined noun must appear in.
pub const MIN_DOWNSTREAM_COUNT: u64 = 5;

const BUILTIN_STOPWORDS: &str = include_str!("../data/stopwords.txt");
const BUILTIN_EXCLUSIONS: &str = include_str!("../data/exclusions.txt");
const BUILTIN_IRREGULAR: &str = include_str!("../data/irregular_plurals.txt");

#[derive(Debug, Error)]
pub enum TextError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Lexicon {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(
        "annotation for sample {sample_id} covers {annotated} tokens but caption has {actual}"
    )]
    AnnotationMismatch {
        sample_id: u64,
        annotated: usize,
        actual: usize,
    },
    #[error("{path}:{line}: malformed annotation: {reason}")]
    MalformedAnnotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate annotation for sample {0}")]
    DuplicateAnnotation(u64),
    #[error("no downstream samples or class names given")]
    EmptyConceptInput,
    #[error("concept name {0:?} has no tokens")]
    EmptyConcept(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub lemma: String,
    pub is_noun: bool,
}

impl Token {
    fn raw(surface: String) -> Self {
        Self {
            surface,
            lemma: String::new(),
            is_noun: false,
        }
    }
}

/// Splits a caption into normalized tokens.
///
/// NFKC, lowercase, split on whitespace and punctuation. Hyphens and
/// apostrophes inside a word are kept; leading/trailing ones are trimmed.
pub fn tokenize(caption: &str) -> Vec<Token> {
    tokenize_surfaces(caption)
        .into_iter()
        .map(Token::raw)
        .collect()
}

pub(crate) fn tokenize_surfaces(caption: &str) -> Vec<String> {
    let normalized: String = if caption.is_ascii() {
        caption.to_ascii_lowercase()
    } else {
        caption.nfkc().collect::<String>().to_lowercase()
    };
    let mut out = Vec::new();
    let mut current = String::new();
    let mut flush = |current: &mut String| {
        let trimmed = current.trim_matches(|c| c == '-' || c == '\'');
        if trimmed.chars().any(char::is_alphanumeric) {
            out.push(trimmed.to_string());
        }
        current.clear();
    };
    for c in normalized.chars() {
        match c {
            '\u{2019}' | '\u{2018}' => current.push('\''),
            c if c.is_alphanumeric() || c == '-' || c == '\'' => current.push(c),
            _ => flush(&mut current),
        }
    }
    flush(&mut current);
    out
}

/// Stopwords, verb/adjective exclusions and irregular noun forms.
#[derive(Debug, Clone)]
pub struct Lexicons {
    stopwords: HashSet<String>,
    exclusions: HashSet<String>,
    irregular: HashMap<String, String>,
    fingerprint: String,
}

fn parse_word_list(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

impl Lexicons {
    /// The lexicons shipped with the crate.
    pub fn builtin() -> &'static Lexicons {
        static BUILTIN: OnceLock<Lexicons> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            Lexicons::parse(
                BUILTIN_STOPWORDS,
                BUILTIN_EXCLUSIONS,
                BUILTIN_IRREGULAR,
                Path::new("<builtin>"),
            )
            .expect("builtin lexicons are well formed")
        })
    }

    /// Loads three lexicon files: stopwords and exclusions are one token per
    /// line; the irregular table is `<form> <lemma>` per line.
    pub fn load(
        stopwords: impl AsRef<Path>,
        exclusions: impl AsRef<Path>,
        irregular: impl AsRef<Path>,
    ) -> Result<Self, TextError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| TextError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        let irregular = irregular.as_ref();
        Self::parse(
            &read(stopwords.as_ref())?,
            &read(exclusions.as_ref())?,
            &read(irregular)?,
            irregular,
        )
    }

    fn parse(
        stopwords: &str,
        exclusions: &str,
        irregular: &str,
        irregular_path: &Path,
    ) -> Result<Self, TextError> {
        let norm = |w: &str| w.nfkc().collect::<String>().to_lowercase();
        let stopwords: HashSet<String> = parse_word_list(stopwords).map(|(_, w)| norm(w)).collect();
        let exclusions: HashSet<String> =
            parse_word_list(exclusions).map(|(_, w)| norm(w)).collect();
        let mut table = BTreeMap::new();
        for (line, entry) in parse_word_list(irregular) {
            let bad = |reason: String| TextError::Lexicon {
                path: irregular_path.to_path_buf(),
                line,
                reason,
            };
            let mut parts = entry.split_whitespace();
            let (Some(form), Some(lemma), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("expected `<form> <lemma>`, got {entry:?}")));
            };
            let (form, lemma) = (norm(form), norm(lemma));
            if let Some(prev) = table.insert(form.clone(), lemma.clone()) {
                if prev != lemma {
                    return Err(bad(format!("{form:?} maps to both {prev:?} and {lemma:?}")));
                }
            }
        }

        let mut hasher = Sha256::new();
        hasher.update(RULES_VERSION.as_bytes());
        for (tag, set) in [(b"S", &stopwords), (b"X", &exclusions)] {
            let mut sorted: Vec<_> = set.iter().collect();
            sorted.sort();
            hasher.update(tag);
            for w in sorted {
                hasher.update(w.as_bytes());
                hasher.update(b"\n");
            }
        }
        hasher.update(b"I");
        for (form, lemma) in &table {
            hasher.update(form.as_bytes());
            hasher.update(b" ");
            hasher.update(lemma.as_bytes());
            hasher.update(b"\n");
        }
        let fingerprint = hex::encode(&hasher.finalize()[..16]);

        Ok(Self {
            stopwords,
            exclusions,
            irregular: table.into_iter().collect(),
            fingerprint,
        })
    }

    /// Digest of lexicon contents plus tokenizer/lemmatizer rule version.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    pub fn is_excluded(&self, token: &str) -> bool {
        self.exclusions.contains(token)
    }

    /// Built-in noun heuristic.
    pub fn looks_like_noun(&self, token: &str) -> bool {
        !self.is_stopword(token) && !self.is_excluded(token)
    }

    /// Reduces a lowercase token to its lemma.
    ///
    /// Irregular table first, then suffix rules; applied until the form
    /// stops changing, so the result is always a fixed point.
    pub fn lemmatize(&self, token: &str) -> String {
        let mut current = token.to_string();
        // every suffix rule shortens the word; the cap only guards table cycles
        for _ in 0..32 {
            let next = self.lemmatize_once(&current);
            if next == current {
                break;
            }
            current = next;
        }
        current
    }

    fn lemmatize_once(&self, token: &str) -> String {
        if let Some(lemma) = self.irregular.get(token) {
            return lemma.clone();
        }
        let word = token
            .strip_suffix("'s")
            .or_else(|| token.strip_suffix('\''))
            .filter(|w| !w.is_empty())
            .unwrap_or(token);
        if word.len() != token.len() {
            return word.to_string();
        }
        if let Some(stem) = word.strip_suffix("ies") {
            if stem.chars().count() >= 2 {
                return format!("{stem}y");
            }
        }
        if let Some(stem) = word.strip_suffix("ves") {
            if stem.chars().count() >= 2 {
                return format!("{stem}f");
            }
        }
        for suffix in ["ses", "xes", "zes", "ches", "shes"] {
            if word.ends_with(suffix) && word.len() > suffix.len() + 1 {
                return word[..word.len() - 2].to_string();
            }
        }
        if word.ends_with('s')
            && !word.ends_with("ss")
            && !word.ends_with("us")
            && !word.ends_with("is")
            && word.chars().count() > 3
        {
            return word[..word.len() - 1].to_string();
        }
        word.to_string()
    }
}

/// [`Lexicons::lemmatize`] with the built-in lexicons.
pub fn lemmatize(token: &str) -> String {
    Lexicons::builtin().lemmatize(token)
}

/// Externally produced POS tags, keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct TaggerAnnotations {
    by_sample: HashMap<u64, Vec<(String, bool)>>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    tags: Vec<(String, serde_json::Value)>,
}

impl TaggerAnnotations {
    /// Reads `{"id": .., "tags": [[surface, 0|1], ...]}` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let path = path.as_ref();
        let io = |source| TextError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut out = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| TextError::MalformedAnnotation {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let raw: RawAnnotation = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let mut tags = Vec::with_capacity(raw.tags.len());
            for (surface, flag) in raw.tags {
                let is_noun = match flag {
                    serde_json::Value::Bool(b) => b,
                    serde_json::Value::Number(n) if n.as_u64() == Some(0) => false,
                    serde_json::Value::Number(n) if n.as_u64() == Some(1) => true,
                    other => return Err(bad(format!("tag flag must be 0 or 1, got {other}"))),
                };
                tags.push((surface, is_noun));
            }
            out.insert(raw.id, tags)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, sample_id: u64, tags: Vec<(String, bool)>) -> Result<(), TextError> {
        if self.by_sample.insert(sample_id, tags).is_some() {
            return Err(TextError::DuplicateAnnotation(sample_id));
        }
        Ok(())
    }

    pub fn get(&self, sample_id: u64) -> Option<&[(String, bool)]> {
        self.by_sample.get(&sample_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_sample.is_empty()
    }
}

/// Noun extraction with a fixed set of lexicons.
#[derive(Debug, Clone, Copy)]
pub struct TextPipeline<'a> {
    lexicons: &'a Lexicons,
}

impl Default for TextPipeline<'static> {
    fn default() -> Self {
        Self::new(Lexicons::builtin())
    }
}

impl<'a> TextPipeline<'a> {
    pub fn new(lexicons: &'a Lexicons) -> Self {
        Self { lexicons }
    }

    pub fn lexicons(&self) -> &'a Lexicons {
        self.lexicons
    }

    pub fn fingerprint(&self) -> &'a str {
        self.lexicons.fingerprint()
    }

    /// Marks nouns, either from the sample's annotation (each annotated
    /// surface is tokenized and its flag applies to every piece) or from the
    /// lexicon heuristic.
    pub fn tag_nouns(
        &self,
        mut tokens: Vec<Token>,
        annotation: Option<(u64, &[(String, bool)])>,
    ) -> Result<Vec<Token>, TextError> {
        match annotation {
            Some((sample_id, tags)) => {
                let expanded: Vec<(String, bool)> = tags
                    .iter()
                    .flat_map(|(surface, noun)| {
                        tokenize_surfaces(surface)
                            .into_iter()
                            .map(move |s| (s, *noun))
                    })
                    .collect();
                let aligned = expanded.len() == tokens.len()
                    && expanded
                        .iter()
                        .zip(&tokens)
                        .all(|((s, _), t)| *s == t.surface);
                if !aligned {
                    return Err(TextError::AnnotationMismatch {
                        sample_id,
                        annotated: expanded.len(),
                        actual: tokens.len(),
                    });
                }
                for (token, (_, noun)) in tokens.iter_mut().zip(expanded) {
                    token.is_noun = noun;
                }
            }
            None => {
                for token in &mut tokens {
                    token.is_noun = self.lexicons.looks_like_noun(&token.surface);
                }
            }
        }
        Ok(tokens)
    }

    pub fn lemmatize(&self, token: &str) -> String {
        self.lexicons.lemmatize(token)
    }

    /// tokenize → tag → lemmatize → dedup.
    pub fn extract_concept_nouns(
        &self,
        caption: &str,
        annotation: Option<(u64, &[(String, bool)])>,
    ) -> Result<BTreeSet<String>, TextError> {
        let tokens = self.tag_nouns(tokenize(caption), annotation)?;
        Ok(tokens
            .into_iter()
            .filter(|t| t.is_noun)
            .map(|t| self.lexicons.lemmatize(&t.surface))
            .collect())
    }

    /// Tokens with lemma and noun flag filled in.
    pub fn analyze(
        &self,
        caption: &str,
        annotation: Option<(u64, &[(String, bool)])>,
    ) -> Result<Vec<Token>, TextError> {
        let mut tokens = self.tag_nouns(tokenize(caption), annotation)?;
        for t in &mut tokens {
            t.lemma = self.lexicons.lemmatize(&t.surface);
        }
        Ok(tokens)
    }

    /// Builds a concept from a class name or mined noun. Every token of the
    /// name becomes a lemmatized unigram; no noun filter is applied.
    pub fn concept(&self, name: &str) -> Result<Concept, TextError> {
        let canonical = normalize_concept_name(name);
        let unigrams: Vec<String> = tokenize_surfaces(&canonical)
            .iter()
            .map(|s| self.lexicons.lemmatize(s))
            .collect();
        if unigrams.is_empty() {
            return Err(TextError::EmptyConcept(name.to_string()));
        }
        Ok(Concept {
            name: canonical,
            unigrams,
            downstream_count: 0,
        })
    }

    /// Compiles the concept list: curated class names (kept unconditionally,
    /// in input order) followed by nouns mined from downstream captions or
    /// prompts that occur in at least [`MIN_DOWNSTREAM_COUNT`] samples
    /// (sorted by name).
    ///
    /// A class concept's `downstream_count` is the number of mined sets that
    /// contain all of its unigrams.
    pub fn compile_concepts(
        &self,
        downstream_noun_sets: &[BTreeSet<String>],
        class_names: &[String],
    ) -> Result<Vec<Concept>, TextError> {
        if downstream_noun_sets.is_empty() && class_names.is_empty() {
            return Err(TextError::EmptyConceptInput);
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for set in downstream_noun_sets {
            for noun in set {
                *counts.entry(noun.as_str()).or_default() += 1;
            }
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for name in class_names {
            let mut concept = self.concept(name)?;
            if !seen.insert(concept.name.clone()) {
                continue;
            }
            concept.downstream_count = downstream_noun_sets
                .iter()
                .filter(|s| concept.unigrams.iter().all(|u| s.contains(u)))
                .count() as u64;
            out.push(concept);
        }
        for (noun, count) in counts {
            if count < MIN_DOWNSTREAM_COUNT || !seen.insert(noun.to_string()) {
                continue;
            }
            out.push(Concept {
                name: noun.to_string(),
                unigrams: vec![noun.to_string()],
                downstream_count: count,
            });
        }
        Ok(out)
    }
}

/// A downstream class name or caption noun with its unigram decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub name: String,
    pub unigrams: Vec<String>,
    pub downstream_count: u64,
}

/// Reads a concept list file: one concept per line, `#` comments allowed.
pub fn load_concept_names(path: impl AsRef<Path>) -> Result<Vec<String>, TextError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_word_list(&text).map(|(_, w)| w.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn surfaces(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            surfaces(&tokenize("A man is wearing a hat")),
            ["a", "man", "is", "wearing", "a", "hat"]
        );
        assert_eq!(
            surfaces(&tokenize("tropical-kingbird's nest!")),
            ["tropical-kingbird's", "nest"]
        );
        assert!(tokenize("").is_empty());
        assert!(tokenize(" -- ... '' ").is_empty());
        // NFKC folds the ligature and full-width letters
        assert_eq!(surfaces(&tokenize("ﬁsh ＤＯＧ")), ["fish", "dog"]);
        assert_eq!(surfaces(&tokenize("dog’s bone")), ["dog's", "bone"]);
    }

    #[test]
    fn heuristic_tags() {
        let p = TextPipeline::default();
        let tagged = p
            .tag_nouns(tokenize("A man is wearing a hat"), None)
            .unwrap();
        let nouns: Vec<_> = tagged
            .iter()
            .filter(|t| t.is_noun)
            .map(|t| t.surface.as_str())
            .collect();
        assert_eq!(nouns, ["man", "hat"]);

        let tagged = p.tag_nouns(tokenize("the fox"), None).unwrap();
        assert_eq!(
            tagged.iter().map(|t| t.is_noun).collect::<Vec<_>>(),
            [false, true]
        );
    }

    #[test]
    fn annotation_passthrough_and_mismatch() {
        let p = TextPipeline::default();
        let tags = vec![("morning".to_string(), false), ("run".to_string(), true)];
        let tagged = p
            .tag_nouns(tokenize("morning run"), Some((7, &tags)))
            .unwrap();
        assert!(tagged[1].is_noun);
        assert!(!tagged[0].is_noun);
        // without annotation the heuristic excludes "run"
        let plain = p.tag_nouns(tokenize("morning run"), None).unwrap();
        assert!(!plain[1].is_noun);

        let short = vec![("morning".to_string(), false)];
        let err = p
            .tag_nouns(tokenize("morning run"), Some((7, &short)))
            .unwrap_err();
        assert!(matches!(
            err,
            TextError::AnnotationMismatch {
                sample_id: 7,
                annotated: 1,
                actual: 2
            }
        ));
    }

    #[test]
    fn lemmatize_examples() {
        assert_eq!(lemmatize("hats"), "hat");
        assert_eq!(lemmatize("geese"), "goose");
        assert_eq!(lemmatize("glass"), "glass");
        assert_eq!(lemmatize("cities"), "city");
        assert_eq!(lemmatize("wolves"), "wolf");
        assert_eq!(lemmatize("boxes"), "box");
        assert_eq!(lemmatize("churches"), "church");
        assert_eq!(lemmatize("dishes"), "dish");
        assert_eq!(lemmatize("buses"), "bus");
        assert_eq!(lemmatize("kingbird's"), "kingbird");
        assert_eq!(lemmatize("dog"), "dog");
    }

    #[test]
    fn irregular_table_is_closed() {
        let lex = Lexicons::builtin();
        for lemma in lex.irregular.values() {
            assert_eq!(
                &lex.lemmatize(lemma),
                lemma,
                "lemma {lemma} is not a fixed point"
            );
        }
    }

    #[test]
    fn lexicon_sizes() {
        let lex = Lexicons::builtin();
        assert!(lex.stopwords.len() >= 200);
        assert!(lex.exclusions.len() >= 1500);
        assert!(lex.irregular.len() >= 100);
        assert_eq!(lex.fingerprint().len(), 32);
    }

    #[test]
    fn extract_examples() {
        let p = TextPipeline::default();
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(
            p.extract_concept_nouns("A man is wearing a hat", None)
                .unwrap(),
            set(&["man", "hat"])
        );
        assert_eq!(
            p.extract_concept_nouns("hats and more hats", None).unwrap(),
            set(&["hat"])
        );
        assert!(p.extract_concept_nouns("", None).unwrap().is_empty());
        assert_eq!(
            p.extract_concept_nouns("a red fox", None).unwrap(),
            set(&["fox"])
        );
        assert_eq!(
            p.extract_concept_nouns("the fox jumps", None).unwrap(),
            set(&["fox"])
        );
    }

    #[test]
    fn compile_concepts_filters_mined_nouns() {
        let p = TextPipeline::default();
        let mut sets = vec![BTreeSet::new(); 100];
        for s in sets.iter_mut().take(7) {
            s.insert("hat".to_string());
        }
        for s in sets.iter_mut().skip(50).take(3) {
            s.insert("doohickey".to_string());
        }
        let classes = vec!["Tropical  Kingbird".to_string()];
        let concepts = p.compile_concepts(&sets, &classes).unwrap();
        assert_eq!(concepts.len(), 2);
        assert_eq!(concepts[0].name, "tropical kingbird");
        assert_eq!(concepts[0].unigrams, ["tropical", "kingbird"]);
        assert_eq!(
            concepts[1],
            Concept {
                name: "hat".into(),
                unigrams: vec!["hat".into()],
                downstream_count: 7
            }
        );
        assert!(matches!(
            p.compile_concepts(&[], &[]),
            Err(TextError::EmptyConceptInput)
        ));
    }

    #[test]
    fn custom_lexicon_rejects_conflicts() {
        let err = Lexicons::parse("", "", "mice mouse\nmice rat\n", Path::new("t")).unwrap_err();
        assert!(matches!(err, TextError::Lexicon { line: 2, .. }));
        let ok = Lexicons::parse("the\n# comment\n", "red\n", "", Path::new("t")).unwrap();
        assert!(ok.is_stopword("the") && ok.is_excluded("red") && ok.looks_like_noun("fox"));
        assert_ne!(ok.fingerprint(), Lexicons::builtin().fingerprint());
    }

    proptest! {
        #[test]
        fn lemmatize_is_idempotent(word in "[a-z]{1,12}(s|es|ies|ves|'s)?") {
            let once = lemmatize(&word);
            prop_assert_eq!(lemmatize(&once), once);
        }

        #[test]
        fn nouns_are_lemmas_of_caption_tokens(caption in "[a-zA-Z ,.!'-]{0,60}") {
            let p = TextPipeline::default();
            let nouns = p.extract_concept_nouns(&caption, None).unwrap();
            let lemmas: BTreeSet<String> = tokenize(&caption).iter().map(|t| lemmatize(&t.surface)).collect();
            prop_assert!(nouns.is_subset(&lemmas));
        }

        #[test]
        fn case_and_whitespace_invariant(words in proptest::collection::vec("[a-z]{1,8}", 0..8), upper in any::<bool>()) {
            let p = TextPipeline::default();
            let a = words.join(" ");
            let mut b = words.join("  \t ");
            if upper { b = b.to_uppercase(); }
            prop_assert_eq!(p.extract_concept_nouns(&a, None).unwrap(), p.extract_concept_nouns(&b, None).unwrap());
        }
    }
}
