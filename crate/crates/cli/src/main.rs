mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(
    name = "conceptscope",
    version,
    about = "Concept frequency analysis for image-text pretraining corpora"
)]
struct Cli {
    /// TOML file with default parameters; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "CONCEPTSCOPE_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a caption index from a corpus manifest.
    Index(IndexArgs),
    /// Count text, image and matched frequencies for a concept list.
    Frequency(FrequencyArgs),
    /// Measure how many pairs share no concept between caption and image.
    Misalignment(MisalignmentArgs),
    /// Fit downstream performance against log frequency.
    Trend(TrendArgs),
    /// Summarize the long tail of a frequency table.
    Tail(TailArgs),
    /// Clean and balance a candidate image pool.
    Curate(CurateArgs),
    /// Cumulative matching characteristic of generated vs real images.
    Cmc(CmcArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Corpus manifest (JSON).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Per-sample noun annotations (JSONL) overriding the built-in tagger.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    pub lenient: bool,
    /// Index file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FrequencyArgs {
    /// Caption index built by `index`.
    #[arg(long)]
    pub index: PathBuf,
    /// Image tag score CSVs (`sample_index,concept,score`); repeatable.
    #[arg(long)]
    pub tags: Vec<PathBuf>,
    /// Minimum tag score counted as present.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Concept list, one per line.
    #[arg(long)]
    pub concepts: PathBuf,
    /// Also save the binarized image index here.
    #[arg(long)]
    pub image_index_out: Option<PathBuf>,
    /// Frequency CSV to write (stdout report either way).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MisalignmentArgs {
    /// Corpus manifest; supplies sample ids for the export.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Caption index built from the same corpus.
    #[arg(long)]
    pub index: PathBuf,
    /// Image tag score CSVs; repeatable.
    #[arg(long, required_unless_present = "image_index")]
    pub tags: Vec<PathBuf>,
    /// Saved image index, instead of tag files.
    #[arg(long, conflicts_with = "tags")]
    pub image_index: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Restrict both sides to this concept list.
    #[arg(long)]
    pub concepts: PathBuf,
    /// Write misaligned pairs to this CSV.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long)]
    pub lenient: bool,
    /// Report path (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrendArgs {
    /// Frequency CSV.
    #[arg(long)]
    pub frequencies: PathBuf,
    /// Performance CSV (`concept,score`).
    #[arg(long)]
    pub performance: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Count to use: text, image or matched (default matched when present).
    #[arg(long)]
    pub field: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TailArgs {
    /// Frequency CSVs; several are reduced to the per-concept minimum.
    #[arg(long, required = true)]
    pub frequencies: Vec<PathBuf>,
    /// Number of rarest concepts to list.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub field: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Pool CSV (`image_id,class_name,embedding_row,phash_hex`).
    #[arg(long)]
    pub pool: PathBuf,
    /// Embedding matrix (raw f32 with a `.json` sidecar).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Directory of `<image_id>.pgm` files for images without a hash.
    /// Convert other formats to 8-bit PGM first.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Image ids rejected during manual review, one per line.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Class names that use the fine-grained dedup threshold.
    #[arg(long)]
    pub fine_grained: Option<PathBuf>,
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    #[arg(long)]
    pub dedup_common: Option<f64>,
    #[arg(long)]
    pub dedup_finegrained: Option<f64>,
    #[arg(long)]
    pub hamming: Option<u32>,
    /// Images per class (default: size of the smallest class).
    #[arg(long)]
    pub target: Option<usize>,
    /// Curated pool CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage report path (default stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CmcArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub query_labels: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub gallery_labels: PathBuf,
    /// Tail-concept queries; when given, head-minus-tail deltas are reported.
    #[arg(long, requires = "tail_query_labels")]
    pub tail_queries: Option<PathBuf>,
    #[arg(long)]
    pub tail_query_labels: Option<PathBuf>,
    /// Ranks to evaluate; repeatable (default 1, 2, 5).
    #[arg(long)]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Index(_) => "index",
        Command::Frequency(_) => "frequency",
        Command::Misalignment(_) => "misalignment",
        Command::Trend(_) => "trend",
        Command::Tail(_) => "tail",
        Command::Curate(_) => "curate",
        Command::Cmc(_) => "cmc",
    };
    let result = config::load(cli.config.as_deref()).and_then(|file| {
        let workers = cli.workers.or(file.workers);
        if let Some(n) = workers {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()?;
        }
        let ctx = commands::Context { file, workers };
        match cli.command {
            Command::Index(a) => commands::index(&ctx, a),
            Command::Frequency(a) => commands::frequency(&ctx, a),
            Command::Misalignment(a) => commands::misalignment(&ctx, a),
            Command::Trend(a) => commands::trend(&ctx, a),
            Command::Tail(a) => commands::tail(&ctx, a),
            Command::Curate(a) => commands::curate(&ctx, a),
            Command::Cmc(a) => commands::cmc(&ctx, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let causes: Vec<String> = err.chain().skip(1).map(ToString::to_string).collect();
            let body = json!({ "error": { "command": name, "message": err.to_string(), "causes": causes } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
