use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde_json::json;

use conceptscope::corpus_io::{
    load_performance, normalize_concept_name, open_corpus, CorpusManifest, StreamOptions,
};
use conceptscope::curation::{self, CurationConfig};
use conceptscope::image_tags::{read_tag_file, ImageIndex, TagTable, DEFAULT_THRESHOLD};
use conceptscope::inverted_index::{build_text_index, load_index, save_index, TextIndex};
use conceptscope::matched_freq::{
    export_misaligned, frequency_table, misalignment_degree, per_sample_text_concepts,
    read_frequency_csv, write_frequency_csv, FrequencyField, FrequencyRecord,
};
use conceptscope::text_pipeline::{
    load_concept_names, Concept, Lexicons, TaggerAnnotations, TextPipeline,
};
use conceptscope::trend_stats::{
    cmc_curve, fit_log_linear, load_embeddings, load_labels, min_across_corpora, tail_summary,
    CmcInputs, TrendPoint, DEFAULT_BINS,
};

use crate::config::FileConfig;
use crate::report::{digest, digests, emit, envelope, InputDigest};
use crate::{CmcArgs, CurateArgs, FrequencyArgs, IndexArgs, MisalignmentArgs, TailArgs, TrendArgs};

/// Bottom-k list length when `--k` is not given (clipped to the table size).
const DEFAULT_TAIL_K: usize = 290;
const DEFAULT_CMC_KS: [usize; 3] = [1, 2, 5];

pub struct Context {
    pub file: FileConfig,
    pub workers: Option<usize>,
}

fn builtin_fingerprint() -> &'static str {
    Lexicons::builtin().fingerprint()
}

fn corpus_digests(manifest_path: &Path, manifest: &CorpusManifest) -> Result<Vec<InputDigest>> {
    let mut out = vec![digest(manifest_path)?];
    out.extend(digests(manifest.shard_paths.iter().map(PathBuf::as_path))?);
    Ok(out)
}

fn load_concepts(path: &Path) -> Result<Vec<Concept>> {
    let names = load_concept_names(path)?;
    if names.is_empty() {
        bail!("concept list {} is empty", path.display());
    }
    Ok(TextPipeline::default().compile_concepts(&[], &names)?)
}

fn check_threshold(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        bail!("threshold {t} is outside [0, 1]");
    }
    Ok(t)
}

fn image_index_from_tags(text: &TextIndex, tags: &[PathBuf], threshold: f64) -> Result<ImageIndex> {
    let mut table = TagTable::new(text.corpus_name.clone(), text.sample_count);
    for path in tags {
        let records = read_tag_file(path)?;
        table
            .extend(records)
            .with_context(|| format!("loading tags from {}", path.display()))?;
    }
    Ok(table.binarize(threshold)?)
}

fn parse_field(raw: Option<&str>, records: &[FrequencyRecord]) -> Result<FrequencyField> {
    match raw {
        Some(s) => s.parse().map_err(anyhow::Error::msg),
        None if records.iter().all(|r| r.matched_count.is_some()) => Ok(FrequencyField::Matched),
        None => Ok(FrequencyField::Text),
    }
}

pub fn index(ctx: &Context, args: IndexArgs) -> Result<()> {
    let lenient = args.lenient || ctx.file.lenient.unwrap_or(false);
    let manifest = open_corpus(&args.corpus)?;
    let mut inputs = corpus_digests(&args.corpus, &manifest)?;
    let annotations = match &args.annotations {
        Some(path) => {
            inputs.push(digest(path)?);
            Some(TaggerAnnotations::load(path)?)
        }
        None => None,
    };
    let pipeline = TextPipeline::default();
    let (index, stats) = build_text_index(
        &manifest,
        &pipeline,
        annotations.as_ref(),
        StreamOptions { lenient },
    )?;
    if index.sample_count == 0 {
        eprintln!(
            "warning: corpus {:?} has no samples; writing an empty index",
            index.corpus_name
        );
    }
    save_index(&index, &args.out)?;
    let config = json!({ "lenient": lenient, "workers": ctx.workers, "annotations": args.annotations, "out": args.out });
    let result = json!({
        "corpus_name": index.corpus_name,
        "sample_count": index.sample_count,
        "vocabulary_size": index.vocabulary_size(),
        "skipped_lines": stats.skipped_lines,
        "noun_pairs": stats.noun_pairs,
    });
    emit(
        &envelope("index", &index.pipeline_fingerprint, config, inputs, result),
        None,
    )
}

pub fn frequency(ctx: &Context, args: FrequencyArgs) -> Result<()> {
    let threshold = check_threshold(
        args.threshold
            .or(ctx.file.frequency.threshold)
            .unwrap_or(DEFAULT_THRESHOLD),
    )?;
    let text = load_index(&args.index)?;
    let concepts = load_concepts(&args.concepts)?;
    let mut inputs = vec![digest(&args.index)?, digest(&args.concepts)?];
    inputs.extend(digests(args.tags.iter().map(PathBuf::as_path))?);
    let image = if args.tags.is_empty() {
        None
    } else {
        Some(image_index_from_tags(&text, &args.tags, threshold)?)
    };
    if let (Some(image), Some(path)) = (&image, &args.image_index_out) {
        image.save(path)?;
    }
    let records = frequency_table(&text, image.as_ref(), &concepts)?;
    let file =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_frequency_csv(BufWriter::new(file), &records)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let config = json!({
        "threshold": image.as_ref().map(|_| threshold),
        "text_only": image.is_none(),
        "out": args.out,
        "image_index_out": args.image_index_out,
    });
    let result = json!({
        "corpus_name": text.corpus_name,
        "sample_count": text.sample_count,
        "concepts": records.len(),
        "zero_text_count": records.iter().filter(|r| r.text_count == 0).count(),
    });
    emit(
        &envelope(
            "frequency",
            &text.pipeline_fingerprint,
            config,
            inputs,
            result,
        ),
        None,
    )
}

pub fn misalignment(ctx: &Context, args: MisalignmentArgs) -> Result<()> {
    let lenient = args.lenient || ctx.file.lenient.unwrap_or(false);
    let threshold = check_threshold(
        args.threshold
            .or(ctx.file.misalignment.threshold)
            .unwrap_or(DEFAULT_THRESHOLD),
    )?;
    let manifest = open_corpus(&args.corpus)?;
    let mut inputs = corpus_digests(&args.corpus, &manifest)?;
    let text = load_index(&args.index)?;
    let concepts = load_concepts(&args.concepts)?;
    inputs.push(digest(&args.index)?);
    inputs.push(digest(&args.concepts)?);
    let image = match &args.image_index {
        Some(path) => {
            inputs.push(digest(path)?);
            ImageIndex::load(path)?
        }
        None => {
            inputs.extend(digests(args.tags.iter().map(PathBuf::as_path))?);
            image_index_from_tags(&text, &args.tags, threshold)?
        }
    };
    if image.sample_count != text.sample_count || image.corpus_name != text.corpus_name {
        bail!(
            "corpus mismatch: caption index {:?} ({} samples) vs image index {:?} ({} samples)",
            text.corpus_name,
            text.sample_count,
            image.corpus_name,
            image.sample_count
        );
    }
    let names: BTreeSet<String> = concepts.iter().map(|c| c.name.clone()).collect();
    let text_sets = per_sample_text_concepts(&text, &concepts);
    let image_sets = image.per_sample_concepts(Some(&names));
    let report = misalignment_degree(
        &text.corpus_name,
        image_sets.iter().cloned(),
        text_sets.iter().cloned(),
    )?;

    let exported = match &args.export {
        Some(path) => {
            let mut stream = manifest.stream_with(StreamOptions { lenient });
            let mut ids = Vec::with_capacity(text_sets.len());
            for record in stream.by_ref() {
                ids.push(record?.sample_id);
            }
            if ids.len() != text_sets.len() {
                bail!(
                    "corpus yields {} samples but the index has {}",
                    ids.len(),
                    text_sets.len()
                );
            }
            let pairs = ids
                .iter()
                .zip(image_sets.iter().zip(&text_sets))
                .map(|(&id, (i, t))| (id, i, t));
            Some(export_misaligned(path, pairs)?)
        }
        None => None,
    };

    let config = json!({
        "threshold": args.image_index.is_none().then_some(threshold),
        "image_index_threshold": args.image_index.as_ref().map(|_| image.threshold_used),
        "lenient": lenient,
        "export": args.export,
    });
    let result = json!({
        "corpus_name": report.corpus_name,
        "total_pairs": report.total_pairs,
        "misaligned_pairs": report.misaligned_pairs,
        "empty_either_side": report.empty_either_side,
        "degree": report.degree,
        "degree_percent": report.degree_percent(),
        "exported_rows": exported,
    });
    eprintln!("{report}");
    emit(
        &envelope(
            "misalignment",
            &text.pipeline_fingerprint,
            config,
            inputs,
            result,
        ),
        args.out.as_deref(),
    )
}

pub fn trend(ctx: &Context, args: TrendArgs) -> Result<()> {
    let bins = args.bins.or(ctx.file.trend.bins).unwrap_or(DEFAULT_BINS);
    let records = read_frequency_csv(&args.frequencies)?;
    let field = parse_field(
        args.field.as_deref().or(ctx.file.trend.field.as_deref()),
        &records,
    )?;
    let performance = load_performance(&args.performance)?;
    let inputs = vec![digest(&args.frequencies)?, digest(&args.performance)?];

    let mut points = Vec::new();
    let mut unmatched = Vec::new();
    for r in &records {
        let Some(frequency) = r.get(field) else {
            bail!("frequency table has no {field} count for {:?}", r.concept);
        };
        match performance.get(&normalize_concept_name(&r.concept)) {
            Some(performance) => points.push(TrendPoint {
                concept: r.concept.clone(),
                frequency,
                performance,
            }),
            None => unmatched.push(r.concept.clone()),
        }
    }
    let fit = fit_log_linear(&points, bins)?;
    let config = json!({ "bins": bins, "field": field });
    let result = json!({
        "points": points.len(),
        "unmatched_concepts": unmatched,
        "bin_edges": fit.trend.bin_edges,
        "bin_mean_performance": fit.trend.bin_mean_performance,
        "bin_mean_log_frequency": fit.trend.bin_mean_log_frequency,
        "bin_concept_counts": fit.trend.bin_concept_counts,
        "pruned_bins": fit.trend.pruned_bins,
        "dropped_zero_frequency": fit.trend.dropped_zero_frequency,
        "binned": fit.binned,
        "per_concept": fit.per_concept,
    });
    emit(
        &envelope("trend", builtin_fingerprint(), config, inputs, result),
        args.out.as_deref(),
    )
}

pub fn tail(ctx: &Context, args: TailArgs) -> Result<()> {
    let tables: Vec<Vec<FrequencyRecord>> = args
        .frequencies
        .iter()
        .map(read_frequency_csv)
        .collect::<Result<_, _>>()?;
    let inputs = digests(args.frequencies.iter().map(PathBuf::as_path))?;
    let records = if tables.len() == 1 {
        tables.into_iter().next().unwrap()
    } else {
        min_across_corpora(&tables)?
    };
    let field = parse_field(
        args.field.as_deref().or(ctx.file.tail.field.as_deref()),
        &records,
    )?;
    let k = args
        .k
        .or(ctx.file.tail.k)
        .unwrap_or(DEFAULT_TAIL_K.min(records.len()));
    let summary = tail_summary(&records, field, k)?;
    let config = json!({ "k": k, "field": field, "aggregation": if args.frequencies.len() > 1 { "min" } else { "none" } });
    emit(
        &envelope(
            "tail",
            builtin_fingerprint(),
            config,
            inputs,
            serde_json::to_value(&summary)?,
        ),
        args.out.as_deref(),
    )
}

pub fn curate(ctx: &Context, args: CurateArgs) -> Result<()> {
    let file = &ctx.file.curate;
    let defaults = CurationConfig::default();
    let config = CurationConfig {
        outlier_fraction: args
            .outlier_fraction
            .or(file.outlier_fraction)
            .unwrap_or(defaults.outlier_fraction),
        dedup_threshold_common: args
            .dedup_common
            .or(file.dedup_threshold_common)
            .unwrap_or(defaults.dedup_threshold_common),
        dedup_threshold_finegrained: args
            .dedup_finegrained
            .or(file.dedup_threshold_finegrained)
            .unwrap_or(defaults.dedup_threshold_finegrained),
        phash_hamming_threshold: args
            .hamming
            .or(file.phash_hamming_threshold)
            .unwrap_or(defaults.phash_hamming_threshold),
        target_per_class: args.target.or(file.target_per_class),
    };
    config.validate()?;

    let embeddings = load_embeddings(&args.embeddings)?;
    let pool = curation::read_pool(&args.pool, Some(&embeddings), args.images.as_deref())?;
    let mut inputs = vec![digest(&args.pool)?, digest(&args.embeddings)?];
    let mut id_list = |path: &Option<PathBuf>| -> Result<BTreeSet<String>> {
        match path {
            Some(p) => {
                inputs.push(digest(p)?);
                Ok(curation::load_id_list(p)?)
            }
            None => Ok(BTreeSet::new()),
        }
    };
    let excluded = id_list(&args.exclude)?;
    let fine_grained = id_list(&args.fine_grained)?;
    let input_size = pool.len();
    let outcome = curation::run_pipeline(pool, &config, &fine_grained, &excluded)?;
    curation::write_pool(&args.out, &outcome.images)?;

    let effective = json!({
        "outlier_fraction": config.outlier_fraction,
        "dedup_threshold_common": config.dedup_threshold_common,
        "dedup_threshold_finegrained": config.dedup_threshold_finegrained,
        "phash_hamming_threshold": config.phash_hamming_threshold,
        "target_per_class": outcome.target_per_class,
        "target_from_smallest_class": config.target_per_class.is_none(),
        "fine_grained_classes": fine_grained,
        "workers": ctx.workers,
        "out": args.out,
    });
    let result = json!({
        "input_images": input_size,
        "output_images": outcome.images.len(),
        "stages": outcome.stages,
    });
    emit(
        &envelope("curate", builtin_fingerprint(), effective, inputs, result),
        args.report.as_deref(),
    )
}

pub fn cmc(ctx: &Context, args: CmcArgs) -> Result<()> {
    let ks: Vec<usize> = if !args.k.is_empty() {
        args.k.clone()
    } else {
        ctx.file
            .cmc
            .k
            .clone()
            .unwrap_or_else(|| DEFAULT_CMC_KS.to_vec())
    };
    let queries = load_embeddings(&args.queries)?;
    let query_labels = load_labels(&args.query_labels)?;
    let gallery = load_embeddings(&args.gallery)?;
    let gallery_labels = load_labels(&args.gallery_labels)?;
    let mut inputs = digests(
        [
            &args.queries,
            &args.query_labels,
            &args.gallery,
            &args.gallery_labels,
        ]
        .map(PathBuf::as_path),
    )?;
    let head = CmcInputs {
        queries: &queries,
        query_labels: &query_labels,
        gallery: &gallery,
        gallery_labels: &gallery_labels,
    };
    let head_curve = cmc_curve(&head, &ks)?;

    let tail = match (&args.tail_queries, &args.tail_query_labels) {
        (Some(q), Some(l)) => {
            inputs.extend(digests([q.as_path(), l.as_path()])?);
            Some((load_embeddings(q)?, load_labels(l)?))
        }
        _ => None,
    };
    let mut result = json!({ "k": ks, "cmc": head_curve });
    if let Some((tq, tl)) = &tail {
        let tail_inputs = CmcInputs {
            queries: tq,
            query_labels: tl,
            gallery: &gallery,
            gallery_labels: &gallery_labels,
        };
        let tail_curve = cmc_curve(&tail_inputs, &ks)?;
        let delta: Vec<f64> = head_curve
            .iter()
            .zip(&tail_curve)
            .map(|(h, t)| 100.0 * (h - t))
            .collect();
        result["tail_cmc"] = json!(tail_curve);
        result["delta_cmc_points"] = json!(delta);
    }
    let config = json!({ "k": ks, "similarity": "cosine" });
    emit(
        &envelope("cmc", builtin_fingerprint(), config, inputs, result),
        args.out.as_deref(),
    )
}
