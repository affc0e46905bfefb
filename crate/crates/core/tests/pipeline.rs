use std::collections::BTreeSet;
use std::fs;

use conceptscope::corpus_io::{
    open_corpus, write_shard, CorpusManifest, SampleRecord, StreamOptions, FORMAT_VERSION,
};
use conceptscope::image_tags::{build_image_index, TagRecord};
use conceptscope::inverted_index::{build_text_index, exact_phrase_count, load_index, save_index};
use conceptscope::matched_freq::{
    frequency_table, misalignment_degree, per_sample_text_concepts, read_frequency_csv,
    write_frequency_csv,
};
use conceptscope::text_pipeline::{TaggerAnnotations, TextPipeline};

fn corpus(dir: &std::path::Path, captions: &[&str]) -> CorpusManifest {
    let records: Vec<SampleRecord> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| SampleRecord::new(i as u64, *c))
        .collect();
    let (a, b) = records.split_at(records.len() / 2);
    write_shard(dir.join("part-0.jsonl"), a).unwrap();
    write_shard(dir.join("part-1.jsonl"), b).unwrap();
    let manifest = CorpusManifest {
        corpus_name: "e2e".into(),
        shard_paths: vec![dir.join("part-1.jsonl"), dir.join("part-0.jsonl")],
        sample_count: captions.len() as u64,
        format_version: FORMAT_VERSION,
    };
    manifest.write(dir.join("corpus.json")).unwrap();
    open_corpus(dir.join("corpus.json")).unwrap()
}

const CAPTIONS: &[&str] = &[
    "Two dogs playing in the park",
    "a dog and a cat on a sofa",
    "A red sports car parked near the beach",
    "children flying kites at the beach",
    "a plate of pizza on a table",
    "the cat's bowl next to the table",
];

#[test]
fn captions_to_frequencies_and_misalignment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), CAPTIONS);
    let pipeline = TextPipeline::default();
    let (index, stats) =
        build_text_index(&manifest, &pipeline, None, StreamOptions::default()).unwrap();
    assert_eq!(stats.samples, 6);
    assert_eq!(index.postings("dog").unwrap().as_slice(), [0, 1]);
    assert_eq!(index.postings("cat").unwrap().as_slice(), [1, 5]);
    assert_eq!(index.postings("kite").unwrap().as_slice(), [3]);

    let path = dir.path().join("e2e.cfix");
    save_index(&index, &path).unwrap();
    let index = load_index(&path).unwrap();

    let concepts = pipeline
        .compile_concepts(
            &[],
            &[
                "dog".into(),
                "cat".into(),
                "beach".into(),
                "sports car".into(),
                "table".into(),
            ],
        )
        .unwrap();
    let tags = [
        TagRecord::new(0, "dog", 0.95),
        TagRecord::new(1, "cat", 0.72),
        TagRecord::new(1, "dog", 0.4),
        TagRecord::new(2, "beach", 0.9),
        TagRecord::new(3, "beach", 0.69),
        TagRecord::new(4, "table", 0.8),
        TagRecord::new(5, "dog", 0.99),
    ];
    let image = build_image_index("e2e", tags, 0.7, 6).unwrap();
    let table = frequency_table(&index, Some(&image), &concepts).unwrap();
    let rows: Vec<(&str, u64, Option<u64>, Option<u64>)> = table
        .iter()
        .map(|r| {
            (
                r.concept.as_str(),
                r.text_count,
                r.image_count,
                r.matched_count,
            )
        })
        .collect();
    assert_eq!(
        rows,
        [
            ("dog", 2, Some(2), Some(1)),
            ("cat", 2, Some(1), Some(1)),
            ("beach", 2, Some(1), Some(1)),
            ("sports car", 1, Some(0), Some(0)),
            ("table", 2, Some(1), Some(1)),
        ]
    );

    let csv_path = dir.path().join("freq.csv");
    write_frequency_csv(fs::File::create(&csv_path).unwrap(), &table).unwrap();
    assert_eq!(read_frequency_csv(&csv_path).unwrap(), table);

    let names: BTreeSet<String> = concepts.iter().map(|c| c.name.clone()).collect();
    let report = misalignment_degree(
        "e2e",
        image.per_sample_concepts(Some(&names)),
        per_sample_text_concepts(&index, &concepts),
    )
    .unwrap();
    // samples 3 (beach below threshold) and 5 (dog vs cat, table) share nothing
    assert_eq!((report.misaligned_pairs, report.total_pairs), (2, 6));
    assert_eq!(report.degree_percent(), "33.33%");
}

#[test]
fn annotations_phrases_and_lenient_streaming() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), CAPTIONS);
    assert_eq!(
        exact_phrase_count(&manifest, "the beach", StreamOptions::default()).unwrap(),
        2
    );
    assert_eq!(
        exact_phrase_count(&manifest, "beach the", StreamOptions::default()).unwrap(),
        0
    );

    let ann_path = dir.path().join("ann.jsonl");
    fs::write(&ann_path, "{\"id\": 4, \"tags\": [[\"a\", 0], [\"plate\", 0], [\"of\", 0], [\"pizza\", 1], [\"on\", 0], [\"a\", 0], [\"table\", 0]]}\n").unwrap();
    let annotations = TaggerAnnotations::load(&ann_path).unwrap();
    let pipeline = TextPipeline::default();
    let (index, _) = build_text_index(
        &manifest,
        &pipeline,
        Some(&annotations),
        StreamOptions::default(),
    )
    .unwrap();
    assert!(index.postings("plate").is_none());
    assert_eq!(index.postings("table").unwrap().as_slice(), [5]);
    assert!(index.pipeline_fingerprint.ends_with("+annotations"));

    let mut shard = fs::read_to_string(&manifest.shard_paths[0]).unwrap();
    shard.push_str("{not json}\n");
    fs::write(&manifest.shard_paths[0], shard).unwrap();
    assert!(build_text_index(&manifest, &pipeline, None, StreamOptions::default()).is_err());
    let (lenient, stats) =
        build_text_index(&manifest, &pipeline, None, StreamOptions { lenient: true }).unwrap();
    assert_eq!((lenient.sample_count, stats.skipped_lines), (6, 1));
}
