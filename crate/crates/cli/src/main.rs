use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefixcap::audio::write_mel_dump;
use prefixcap::config::RunConfig;
use prefixcap::dataset::{filter_split, load_manifest, CaptionRecord, Normalization, Split};
use prefixcap::decoder::{import_gpt2, Decoding, Strategy};
use prefixcap::eval::{evaluate, load_candidates, load_gold, load_spice, recall_at_k, EvalCorpus, Metric, RetrievalIndex};
use prefixcap::fixture::write_synthetic_dataset;
use prefixcap::pipeline::{self, LoadedModel};
use prefixcap::{Error, Result};
use serde::Serialize;

/// Audio captioning with a frozen language model and learned audio prefixes.
#[derive(Parser)]
#[command(name = "prefixcap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder and mappers against a frozen decoder, then score the test set.
    Train(TrainArgs),
    /// Generate captions for a manifest or individual audio files.
    Caption(CaptionArgs),
    /// Score candidate captions against manifest references.
    Evaluate(EvaluateArgs),
    /// Caption a manifest and build a text-to-audio retrieval index.
    RetrieveIndex(IndexArgs),
    /// Query a retrieval index, or measure recall@k on gold queries.
    RetrieveQuery(QueryArgs),
    /// Summarize a checkpoint, metric report, retrieval index or run summary.
    Inspect {
        path: PathBuf,
    },
    /// Write a synthetic dataset and a matching toy config.
    Fixture(FixtureArgs),
    /// Convert GPT-2 weights (safetensors) into a decoder checkpoint.
    ImportGpt2 {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long)]
        n_heads: Option<usize>,
    },
    /// Print a complete config file with default values.
    ConfigTemplate {
        /// Toy-scale values instead of full-scale ones.
        #[arg(long)]
        toy: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DecodingArgs {
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl DecodingArgs {
    fn apply(&self, mut d: Decoding) -> Decoding {
        if let Some(w) = self.beam {
            d.strategy = Strategy::Beam(w);
        }
        if let Some(n) = self.max_len {
            d.max_len = n;
        }
        d
    }
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "audio")]
    manifest: Option<PathBuf>,
    /// Only records of this split (train, val or test).
    #[arg(long, requires = "manifest")]
    split: Option<String>,
    #[arg(long, num_args = 1..)]
    audio: Vec<PathBuf>,
    /// Captions as JSON lines; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each input's log-mel spectrogram here.
    #[arg(long, value_name = "DIR")]
    dump_mel: Option<PathBuf>,
    #[command(flatten)]
    decoding: DecodingArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON lines of `{"audio_id", "caption"}`.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// JSON lines of `{"audio_id", "spice"}` from an external SPICE run.
    #[arg(long)]
    spice: Option<PathBuf>,
    /// Comma-separated subset of bleu, rouge_l, cider, meteor_lite, spider.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Option<String>,
    /// Precomputed sentence embeddings (`{"text", "embedding"}` lines) to use
    /// instead of the built-in TF-IDF embedder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decoding: DecodingArgs,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, required_unless_present = "gold", conflicts_with = "gold")]
    query: Option<String>,
    /// Gold queries (`{"query", "gold_audio_id"}` lines) for recall@k.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Result count for --query; cut-offs for --gold.
    #[arg(short, long, value_delimiter = ',', default_values_t = vec![10])]
    k: Vec<usize>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    val: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: Option<&str>) -> Result<Option<Split>> {
    s.map(|s| {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::InvalidArgument(format!("unknown split {s:?}; expected train, val or test")))
    })
    .transpose()
}

fn manifest_records(path: &Path, split: Option<&str>) -> Result<Vec<CaptionRecord>> {
    let records = load_manifest(path)?;
    Ok(match parse_split(split)? {
        Some(s) => filter_split(&records, s),
        None => records,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn caption(args: CaptionArgs) -> Result<()> {
    let loaded = LoadedModel::load(&args.checkpoint)?;
    let (records, base) = match &args.manifest {
        Some(m) => (manifest_records(m, args.split.as_deref())?, base_dir(m)),
        None if args.audio.is_empty() => {
            return Err(Error::InvalidArgument("give --manifest or --audio".into()));
        }
        None => {
            let records = args
                .audio
                .iter()
                .map(|p| CaptionRecord {
                    audio_id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    audio_path: p.clone(),
                    captions: Vec::new(),
                    split: Split::Test,
                })
                .collect();
            (records, PathBuf::new())
        }
    };
    let collator = loaded.collator(base)?;
    if let Some(dir) = &args.dump_mel {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for r in &records {
            write_mel_dump(dir.join(format!("{}.mel", r.audio_id)), &collator.spectrogram(r)?)?;
        }
    }
    let decoding = args.decoding.apply(loaded.decoding());
    let captions = pipeline::caption_records(&loaded.model, &collator, &records, &decoding)?;
    match &args.out {
        Some(path) => pipeline::write_captions(path, &captions)?,
        None => {
            for (id, c) in &captions {
                println!("{}", serde_json::json!({"audio_id": id, "caption": c}));
            }
        }
    }
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let candidates = load_candidates(&args.candidates)?;
    let references = manifest_records(&args.references, args.split.as_deref())?;
    let corpus = EvalCorpus::align(&candidates, &references)?;
    let metrics: Vec<Metric> = if args.metrics.is_empty() {
        Metric::ALL.to_vec()
    } else {
        args.metrics.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    let spice = args.spice.as_ref().map(load_spice).transpose()?;
    let report = evaluate(&corpus, &metrics, spice.as_ref(), Normalization::default())?;
    if let Some(out) = &args.out {
        report.save(out)?;
    }
    print_json(&report.scores)?;
    if !report.partial_flags.is_empty() {
        log::warn!("partial results: {}", report.partial_flags.join(", "));
    }
    Ok(())
}

fn retrieve_index(args: IndexArgs) -> Result<()> {
    let loaded = LoadedModel::load(&args.checkpoint)?;
    let records = manifest_records(&args.manifest, args.split.as_deref())?;
    let collator = loaded.collator(base_dir(&args.manifest))?;
    let decoding = args.decoding.apply(loaded.decoding());
    let index = pipeline::build_retrieval_index(&loaded, &collator, &records, &decoding, args.embeddings.as_deref())?;
    index.save(&args.out)?;
    print_json(&serde_json::json!({"entries": index.len(), "embedder": index.embedder_id, "index": args.out}))
}

fn retrieve_query(args: QueryArgs) -> Result<()> {
    let index = RetrievalIndex::load(&args.index)?;
    match (&args.query, &args.gold) {
        (Some(q), _) => {
            let k = args.k.first().copied().unwrap_or(10);
            let hits: Vec<_> = pipeline::query_index(&index, q, k)?
                .into_iter()
                .map(|(id, score)| serde_json::json!({"audio_id": id, "score": score}))
                .collect();
            print_json(&hits)
        }
        (None, Some(gold)) => {
            let queries = load_gold(gold)?;
            let embedder = index.embedder.instantiate()?;
            let mut out = BTreeMap::new();
            for &k in &args.k {
                out.insert(format!("R@{k}"), recall_at_k(&queries, &index, embedder.as_ref(), k)?);
            }
            print_json(&out)
        }
        (None, None) => Err(Error::InvalidArgument("give --query or --gold".into())),
    }
}

fn fixture(args: FixtureArgs) -> Result<()> {
    let data = args.out.join("data");
    let counts = [(Split::Train, args.train), (Split::Val, args.val), (Split::Test, args.test)];
    let records = write_synthetic_dataset(&data, &counts, args.seconds, 8_000, args.seed)?;
    let mut cfg = RunConfig::toy();
    cfg.train.audio_seconds = Some(args.seconds);
    cfg.paths.train_manifests = vec![PathBuf::from("data/manifest.jsonl")];
    cfg.paths.out_dir = PathBuf::from("run");
    let config_path = args.out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::Io {
        path: config_path.clone(),
        source: e,
    })?;
    print_json(&serde_json::json!({"records": records.len(), "manifest": data.join("manifest.jsonl"), "config": config_path}))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = RunConfig::load(&args.config, &args.overrides)?;
            print_json(&pipeline::train_run(&cfg)?)
        }
        Command::Caption(args) => caption(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::RetrieveIndex(args) => retrieve_index(args),
        Command::RetrieveQuery(args) => retrieve_query(args),
        Command::Inspect { path } => print_json(&pipeline::inspect(&path)?),
        Command::Fixture(args) => fixture(args),
        Command::ImportGpt2 { src, dst, n_heads } => print_json(&import_gpt2(&src, &dst, n_heads)?),
        Command::ConfigTemplate { toy } => {
            let cfg = if toy { RunConfig::toy() } else { RunConfig::default() };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({"error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()});
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
