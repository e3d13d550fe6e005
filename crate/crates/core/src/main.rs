use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use catrobust::classify::{
    write_predictions, Approach, ClassificationInput, Classifier, ClassifyOptions,
};
use catrobust::corpus::{
    load_dataset, save_dataset, stratified_sample, DatasetSplit, SplitRole, Taxonomy,
};
use catrobust::metrics::{
    compute_delta_r, compute_kl, compute_prf_with, DistributionStats, MacroScope,
};
use catrobust::perturb::{
    llm_perturb_many, perturb_split, read_perturbed, write_perturbed, AbbreviationLexicon,
    AttackKind, PerturbationConfig, PerturbationMode,
};
use catrobust::pipeline::{
    build_embedder, chat_client, classifier_backend, load_report, plan, read_metrics_file,
    run_pipeline, BackendConfig, Overrides, RunConfig,
};
use catrobust::retrieval::{
    mean_pairwise_similarity, EmbeddingBackend, EmbeddingIndex, HashedBagBackend,
};
use catrobust::util::{header_line, ArtifactHeader};

#[derive(Parser)]
#[command(
    name = "catrobust",
    version,
    about = "Data-attack simulation and robustness scoring for product classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect and sample datasets.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Attack a dataset.
    #[command(subcommand)]
    Perturb(PerturbCmd),
    /// Build and query embedding indexes.
    #[command(subcommand)]
    Retrieval(RetrievalCmd),
    /// Classify records with a configured backend.
    #[command(subcommand)]
    Classify(ClassifyCmd),
    /// Score predictions and compare runs.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Run the full pipeline from a config file.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Check a dataset against its taxonomy and print class counts.
    Validate(DatasetArgs),
    /// Draw a stratified sample.
    Sample {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PerturbCmd {
    Run {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        attack: AttackKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "deterministic")]
        mode: String,
        /// Tab-separated lexicon file; the built-in lexicon otherwise.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        rule_fallback: bool,
        #[arg(long, default_value_t = 5)]
        keep: usize,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        /// Config file defining the chat backend for llm mode.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RetrievalCmd {
    /// Embed a labelled split into an index file.
    Build {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the nearest index entries to a text.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
    /// Mean cosine similarity between clean and attacked descriptions.
    Similarity {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        attacked: PathBuf,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
}

#[derive(Subcommand)]
enum ClassifyCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        approach: Approach,
        #[arg(long)]
        attack: AttackKind,
        #[arg(long)]
        reason_note: bool,
        #[arg(long)]
        backend: String,
        /// Dataset (clean) or perturbed file (attacked); the config's test split by default.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Score a prediction file against a gold dataset.
    Score {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// `gold` or `all-classes`.
        #[arg(long, default_value = "gold")]
        macro_scope: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative drop between a clean and an attacked metrics report.
    Robustness {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        attacked: PathBuf,
    },
    /// KL divergence between token-count histograms of two datasets.
    Kl {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Validate the config and inputs, print planned artifacts, run nothing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the report of a finished run.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        csv: bool,
    },
}

/// Failure with its exit code: 1 validation, 2 stage failure, 3 backend exhaustion.
struct Failure {
    code: u8,
    message: String,
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn failed(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

impl From<catrobust::pipeline::PipelineError> for Failure {
    fn from(e: catrobust::pipeline::PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Corpus(c) => corpus(c),
        Command::Perturb(c) => perturb(c),
        Command::Retrieval(c) => retrieval(c),
        Command::Classify(c) => classify(c),
        Command::Metrics(c) => metrics(c),
        Command::Pipeline(c) => pipeline(c),
    }
}

fn load_split(args: &DatasetArgs, role: SplitRole) -> Result<(Taxonomy, DatasetSplit), Failure> {
    let taxonomy = Taxonomy::load(&args.taxonomy).map_err(invalid)?;
    let split = load_dataset(&args.data, &taxonomy, role).map_err(invalid)?;
    Ok((taxonomy, split))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(failed)?;
    }
    std::fs::write(path, bytes).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn with_header(kind: &str, seed: u64, note: Option<String>, body: Vec<u8>) -> Vec<u8> {
    let mut out = header_line(&ArtifactHeader {
        kind: kind.into(),
        seed,
        note,
    })
    .into_bytes();
    out.push(b'\n');
    out.extend(body);
    out
}

fn corpus(cmd: CorpusCmd) -> Result<(), Failure> {
    match cmd {
        CorpusCmd::Validate(args) => {
            let (taxonomy, split) = load_split(&args, SplitRole::Test)?;
            let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
            for r in &split.records {
                *counts.entry(r.leaf_label.as_str()).or_default() += 1;
            }
            println!(
                "{} records, {} of {} leaves present",
                split.len(),
                counts.len(),
                taxonomy.leaves().len()
            );
            for (label, n) in counts {
                println!("{n:>8}  {label}");
            }
            Ok(())
        }
        CorpusCmd::Sample {
            dataset,
            size,
            seed,
            out,
        } => {
            let (_, split) = load_split(&dataset, SplitRole::Test)?;
            let sample = stratified_sample(&split, size, seed).map_err(invalid)?;
            save_dataset(&sample, &out).map_err(failed)?;
            println!("wrote {} records to {}", sample.len(), out.display());
            Ok(())
        }
    }
}

fn perturb(cmd: PerturbCmd) -> Result<(), Failure> {
    let PerturbCmd::Run {
        dataset,
        attack,
        seed,
        mode,
        lexicon,
        rule_fallback,
        keep,
        fraction,
        config,
        backend,
        parallelism,
        out,
    } = cmd;
    let mode: PerturbationMode =
        serde_json::from_value(serde_json::Value::String(mode)).map_err(invalid)?;
    let (_, split) = load_split(&dataset, SplitRole::Test)?;
    let lex = match &lexicon {
        Some(p) => AbbreviationLexicon::load(p).map_err(invalid)?,
        None => AbbreviationLexicon::seed(),
    }
    .with_rule_fallback(rule_fallback);
    let cfg = PerturbationConfig {
        mode,
        max_keep_tokens: keep,
        max_abbrev_fraction: fraction,
        seed,
        lowercase_output: true,
    };
    cfg.validate().map_err(invalid)?;
    let records = match mode {
        PerturbationMode::Deterministic => {
            perturb_split(&split, attack, &lex, &cfg).map_err(failed)?
        }
        PerturbationMode::Llm => {
            let (Some(config), Some(backend)) = (config, backend) else {
                return Err(invalid("llm mode needs --config and --backend"));
            };
            let run_cfg = RunConfig::load(&config)?;
            let client = chat_client(&run_cfg, &Overrides::default(), &backend)?;
            let results = llm_perturb_many(
                &split.records,
                attack,
                client.as_ref(),
                &lex,
                &cfg,
                parallelism,
            );
            let mut out = Vec::with_capacity(results.len());
            for r in results {
                out.push(r.map_err(|e| match e {
                    catrobust::perturb::PerturbError::Llm(
                        l @ catrobust::llm::LlmError::Exhausted { .. },
                    ) => Failure {
                        code: 3,
                        message: l.to_string(),
                    },
                    other => failed(other),
                })?);
            }
            out
        }
    };
    let mut body = Vec::new();
    write_perturbed(&records, &mut body).map_err(failed)?;
    write_file(
        &out,
        &with_header("perturbed", seed, Some(attack.to_string()), body),
    )?;
    let degraded = records.iter().filter(|r| r.degraded).count();
    println!(
        "wrote {} records to {} ({degraded} degraded)",
        records.len(),
        out.display()
    );
    Ok(())
}

fn read_index(path: &Path) -> Result<EmbeddingIndex, Failure> {
    let f = File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    EmbeddingIndex::read(BufReader::new(f)).map_err(invalid)
}

fn read_attacked(
    path: &Path,
    taxonomy: &Taxonomy,
) -> Result<Vec<catrobust::perturb::PerturbedRecord>, Failure> {
    let f = File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    read_perturbed(BufReader::new(f), taxonomy).map_err(invalid)
}

fn retrieval(cmd: RetrievalCmd) -> Result<(), Failure> {
    match cmd {
        RetrievalCmd::Build { dataset, dim, out } => {
            if dim == 0 {
                return Err(invalid("--dim must be positive"));
            }
            let (_, split) = load_split(&dataset, SplitRole::Train)?;
            let backend = HashedBagBackend::new(dim);
            let index = EmbeddingIndex::build(&split.records, &backend, 4).map_err(failed)?;
            let mut bytes = Vec::new();
            index.write(&mut bytes).map_err(failed)?;
            write_file(&out, &bytes)?;
            println!("indexed {} records ({})", index.len(), index.fingerprint());
            Ok(())
        }
        RetrievalCmd::Query {
            index,
            text,
            k,
            dim,
        } => {
            let index = read_index(&index)?;
            let backend = HashedBagBackend::new(dim.max(1));
            for n in index.query(&backend, &text, k, None).map_err(invalid)? {
                let e = index.get(&n.id).expect("neighbor in index");
                println!("{:.4}\t{}\t{}\t{}", n.similarity, n.id, e.label, e.text);
            }
            Ok(())
        }
        RetrievalCmd::Similarity {
            taxonomy,
            clean,
            attacked,
            dim,
        } => {
            let tax = Taxonomy::load(&taxonomy).map_err(invalid)?;
            let clean = load_dataset(&clean, &tax, SplitRole::Test).map_err(invalid)?;
            let attacked = read_attacked(&attacked, &tax)?;
            let backend = HashedBagBackend::new(dim.max(1));
            let s =
                mean_pairwise_similarity(&clean.records, &attacked, &backend).map_err(invalid)?;
            println!("{s:.4}");
            Ok(())
        }
    }
}

fn classify(cmd: ClassifyCmd) -> Result<(), Failure> {
    let ClassifyCmd::Run {
        config,
        approach,
        attack,
        reason_note,
        backend,
        input,
        out,
    } = cmd;
    let cfg = RunConfig::load(&config)?;
    let overrides = Overrides::default();
    let taxonomy = Taxonomy::load(&cfg.taxonomy).map_err(invalid)?;
    let gold = load_dataset(&cfg.test, &taxonomy, SplitRole::Test).map_err(invalid)?;
    let input_path = input.unwrap_or_else(|| cfg.test.clone());
    let inputs: Vec<ClassificationInput> = if attack == AttackKind::Clean {
        load_dataset(&input_path, &taxonomy, SplitRole::Test)
            .map_err(invalid)?
            .records
            .iter()
            .map(Into::into)
            .collect()
    } else {
        read_attacked(&input_path, &taxonomy)?
            .iter()
            .map(Into::into)
            .collect()
    };
    let mut gold_records = gold.records.clone();
    if let Some(t) = &cfg.train {
        gold_records.extend(
            load_dataset(t, &taxonomy, SplitRole::Train)
                .map_err(invalid)?
                .records,
        );
    }
    let b = classifier_backend(&cfg, &overrides, &backend, attack, &gold_records)?;
    let options = ClassifyOptions {
        reason_note,
        completion_suffix: matches!(
            cfg.backends.get(&backend),
            Some(BackendConfig::Chat {
                completion_suffix: true,
                ..
            })
        ),
        class_order: cfg.classify.class_order,
        few_shot_k: cfg.classify.few_shot_k,
    };
    let embedder: std::sync::Arc<dyn EmbeddingBackend> = build_embedder(&cfg, &overrides)?;
    let index = if approach == Approach::FewShot {
        let train = cfg
            .train
            .as_ref()
            .ok_or_else(|| invalid("few-shot needs a train split in the config"))?;
        let split = load_dataset(train, &taxonomy, SplitRole::Train).map_err(invalid)?;
        Some(
            EmbeddingIndex::build(&split.records, embedder.as_ref(), cfg.parallelism)
                .map_err(failed)?,
        )
    } else {
        None
    };
    let mut classifier = Classifier::new(b.as_ref(), &taxonomy, options);
    if cfg.classify.label_embeddings {
        classifier = classifier
            .with_label_embeddings(embedder.as_ref())
            .map_err(failed)?;
    }
    if let Some(idx) = &index {
        classifier = classifier.with_few_shot(idx, embedder.as_ref());
    }
    let run = classifier
        .classify_all(approach, &inputs, cfg.parallelism)
        .map_err(invalid)?;
    let mut body = Vec::new();
    write_predictions(&run.predictions, &mut body).map_err(failed)?;
    let note = format!(
        "{backend}__{approach}__{attack}{}",
        if reason_note { "__reason" } else { "" }
    );
    write_file(
        &out,
        &with_header("predictions", cfg.seed, Some(note), body),
    )?;
    let invalid_n = run.predictions.iter().filter(|p| p.is_invalid()).count();
    println!(
        "classified {} records: {invalid_n} invalid, {} backend failures",
        run.predictions.len(),
        run.backend_failures
    );
    if run.exhausted > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{} requests exhausted their retries", run.exhausted),
        });
    }
    Ok(())
}

fn metrics(cmd: MetricsCmd) -> Result<(), Failure> {
    match cmd {
        MetricsCmd::Score {
            taxonomy,
            gold,
            pred,
            macro_scope,
            out,
        } => {
            let scope: MacroScope =
                serde_json::from_value(serde_json::Value::String(macro_scope)).map_err(invalid)?;
            let tax = Taxonomy::load(&taxonomy).map_err(invalid)?;
            let gold = load_dataset(&gold, &tax, SplitRole::Test).map_err(invalid)?;
            let f = File::open(&pred).map_err(|e| invalid(format!("{}: {e}", pred.display())))?;
            let preds =
                catrobust::classify::read_predictions(BufReader::new(f)).map_err(invalid)?;
            let by_id: HashMap<&str, &str> = preds
                .iter()
                .map(|p| (p.source_id.as_str(), p.normalized_label.as_str()))
                .collect();
            if by_id.len() != preds.len() {
                return Err(invalid("prediction file repeats an id"));
            }
            let mut g = Vec::new();
            let mut p = Vec::new();
            for r in &gold.records {
                let label = by_id
                    .get(r.id.as_str())
                    .ok_or_else(|| invalid(format!("no prediction for '{}'", r.id)))?;
                g.push(r.leaf_label.as_str());
                p.push(*label);
            }
            if preds.len() != gold.len() {
                return Err(invalid(
                    "prediction file has ids missing from the gold dataset",
                ));
            }
            let report = compute_prf_with(&g, &p, tax.leaves(), scope).map_err(invalid)?;
            let json = serde_json::to_string_pretty(&report).map_err(failed)?;
            if let Some(path) = out {
                write_file(&path, format!("{json}\n").as_bytes())?;
            }
            for (name, v) in ["ma-P", "ma-R", "ma-F1", "we-P", "we-R", "we-F1"]
                .iter()
                .zip(report.values())
            {
                println!("{name:<6} {:.1}", v * 100.0);
            }
            Ok(())
        }
        MetricsCmd::Robustness { clean, attacked } => {
            let c = read_metrics_file(&clean)?;
            let a = read_metrics_file(&attacked)?;
            print!("{}", compute_delta_r(&c, &a).to_text());
            Ok(())
        }
        MetricsCmd::Kl { a, b } => {
            let hist = |path: &Path| -> Result<DistributionStats, Failure> {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
                let mut counts = Vec::new();
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() || catrobust::util::parse_header_line(line).is_some()
                    {
                        continue;
                    }
                    let v: serde_json::Value = serde_json::from_str(line)
                        .map_err(|e| invalid(format!("{} line {}: {e}", path.display(), i + 1)))?;
                    let d = v
                        .get("description")
                        .and_then(|d| d.as_str())
                        .ok_or_else(|| {
                            invalid(format!("{} line {}: no description", path.display(), i + 1))
                        })?;
                    counts.push(d.split_whitespace().count());
                }
                DistributionStats::from_counts(counts).map_err(invalid)
            };
            let p = hist(&a)?;
            let q = hist(&b)?;
            println!("{:.4}", compute_kl(&p, &q).map_err(invalid)?);
            Ok(())
        }
    }
}

fn pipeline(cmd: PipelineCmd) -> Result<(), Failure> {
    match cmd {
        PipelineCmd::Run { config, dry_run } => {
            let cfg = RunConfig::load(&config)?;
            if dry_run {
                let planned = plan(&cfg, &Overrides::default())?;
                println!(
                    "config ok; {} cells, artifacts under {}:",
                    cfg.cells.len(),
                    cfg.output_dir.display()
                );
                for p in planned {
                    println!("  {p}");
                }
                return Ok(());
            }
            let manifest = run_pipeline(&cfg)?;
            let report = load_report(&cfg.output_dir)?;
            print!("{}", report.to_text());
            let cached = manifest.artifacts.iter().filter(|a| a.cached).count();
            let stdout = std::io::stdout();
            let _ = writeln!(
                stdout.lock(),
                "# {} artifacts ({cached} cached) in {}",
                manifest.artifacts.len(),
                cfg.output_dir.display()
            );
            Ok(())
        }
        PipelineCmd::Report { dir, csv } => {
            let report = load_report(&dir)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.to_text());
            }
            Ok(())
        }
    }
}
