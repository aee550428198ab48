use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use semlog::downstream::synth::{generate, read_session_labels, GeneratorSpec, SessionLabel};
use semlog::downstream::{
    build_sessions, eval_binary, eval_ci_pairs, extract_features, recall_at_k, stratified_split,
    train_session_classifier, ClassifierConfig, DownstreamError, FeatureMode, Sample,
    SessionClassifier, SessionFeatures,
};
use semlog::features::{train_skipgram, EmbeddingTable, SkipGramConfig};
use semlog::jparser::{parse_stream, read_parse_results, write_parse_results, ParseResult};
use semlog::knowledge::KnowledgeBase;
use semlog::logio::{read_annotations, read_raw_logs, FieldPattern};
use semlog::miner::{miner_gradient_check, train_miner, MinerCheckpoint, MinerConfig};
use semlog::neuralcore::{GradCheckConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "semlog",
    version,
    about = "Semantic log parsing and session analysis"
)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, env = "SEMLOG_SEED", default_value_t = 42, global = true)]
    seed: u64,
    /// TOML file overriding hyper-parameters ([skipgram], [miner], [train], [classifier]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train skip-gram word vectors on raw logs.
    TrainEmbeddings {
        #[arg(long)]
        input: PathBuf,
        /// Leading whitespace-separated header columns to drop from each line.
        #[arg(long, default_value_t = 0)]
        header_columns: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the concept-instance miner on annotated messages.
    TrainMiner {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Checkpoint to fine-tune instead of starting fresh.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse raw logs into templates and concept-instance pairs.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Knowledge base to continue from; starts empty when omitted.
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Where to write the updated knowledge base [default: <out>.kb.tsv].
        #[arg(long)]
        kb_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        header_columns: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report pair precision, recall and F1 of a miner on annotated messages.
    EvalMiner {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Train and evaluate an anomaly detector over parsed sessions.
    Detect {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Train and evaluate a failure-class ranker over anomalous sessions.
    Diagnose {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Generate a synthetic annotated corpus from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of a miner checkpoint's gradients.
    Gradcheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Randomly chosen messages in the checked batch.
        #[arg(long, default_value_t = 5)]
        messages: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 25)]
        samples_per_group: usize,
    },
}

#[derive(clap::Args, Debug)]
struct SessionArgs {
    /// Parse results (JSONL) of the session stream.
    #[arg(long)]
    parsed: PathBuf,
    /// Session labels (JSONL with key, anomalous, class).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    features: Mode,
    /// Concept whose instance identifies a session.
    #[arg(long, default_value = "request")]
    key_concept: String,
    /// Share of each class used for training; the rest is evaluated.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Classifier checkpoint to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Full,
    TemplateOnly,
}

impl From<Mode> for FeatureMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => FeatureMode::Full,
            Mode::TemplateOnly => FeatureMode::TemplateOnly,
        }
    }
}

/// Hyper-parameters; a `--config` file overrides any subset of them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Settings {
    skipgram: SkipGramConfig,
    miner: MinerConfig,
    train: TrainConfig,
    classifier: ClassifierConfig,
}

impl Settings {
    fn load(path: Option<&Path>, seed: u64) -> Result<Self> {
        let defaults = Settings {
            skipgram: SkipGramConfig::default(),
            miner: MinerConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
        };
        let mut settings = match path {
            None => defaults,
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("config: reading {}", p.display()))?;
                let overrides: toml::Table = toml::from_str(&text)
                    .with_context(|| format!("config: parsing {}", p.display()))?;
                let mut merged = toml::Table::try_from(&defaults)?;
                merge(&mut merged, overrides, "")?;
                merged.try_into().context("config: invalid value")?
            }
        };
        settings.skipgram.seed = seed;
        settings.train.seed = seed;
        settings.classifier.train.seed = seed;
        Ok(settings)
    }
}

/// Overlays `overrides` onto `base`, rejecting keys the base does not have.
fn merge(base: &mut toml::Table, overrides: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in overrides {
        let name = format!("{prefix}{key}");
        match (base.get_mut(&key), value) {
            (None, _) => bail!("config: unknown key `{name}`"),
            (Some(toml::Value::Table(inner)), toml::Value::Table(over)) => {
                merge(inner, over, &format!("{name}."))?
            }
            (Some(slot), value) => *slot = value,
        }
    }
    Ok(())
}

/// Writes the reproduction record that sits next to an artifact.
fn write_manifest(artifact: &Path, manifest: &Value) -> Result<()> {
    let mut name = artifact
        .file_name()
        .context("artifact path has no file name")?
        .to_os_string();
    name.push(".manifest.json");
    let path = artifact.with_file_name(name);
    let mut w =
        BufWriter::new(File::create(&path).with_context(|| format!("writing {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn manifest(command: &str, seed: u64, inputs: Value, settings: Value) -> Value {
    json!({
        "tool": "semlog",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "inputs": inputs,
        "settings": settings,
    })
}

fn print_json(v: &Value) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_table(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path)
        .with_context(|| format!("features: loading embedding table {}", path.display()))
}

fn load_miner(path: &Path) -> Result<MinerCheckpoint> {
    MinerCheckpoint::load(path)
        .with_context(|| format!("miner: loading checkpoint {}", path.display()))
}

fn ensure_distinct(input: &Path, output: &Path) -> Result<()> {
    let same = match (fs::canonicalize(input), fs::canonicalize(output)) {
        (Ok(a), Ok(b)) => a == b,
        _ => input == output,
    };
    ensure!(!same, "refusing to overwrite input {}", input.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let settings = Settings::load(cli.config.as_deref(), seed)?;
    match cli.command {
        Command::TrainEmbeddings {
            input,
            header_columns,
            out,
        } => {
            let messages = read_raw_logs(&input, &FieldPattern::new(header_columns))
                .with_context(|| format!("logio: reading {}", input.display()))?;
            let sentences: Vec<Vec<String>> = messages.into_iter().map(|m| m.tokens).collect();
            let table = train_skipgram(&sentences, &settings.skipgram)
                .context("features: training skip-gram")?;
            table
                .save(&out)
                .with_context(|| format!("features: writing {}", out.display()))?;
            log::info!(
                "{} vectors of dimension {} written to {}",
                table.rows(),
                table.dim(),
                out.display()
            );
            write_manifest(
                &out,
                &manifest(
                    "train-embeddings",
                    seed,
                    json!({ "input": input, "header_columns": header_columns }),
                    json!({ "skipgram": settings.skipgram }),
                ),
            )
        }
        Command::TrainMiner {
            annotations,
            embeddings,
            base,
            out,
        } => {
            let data = read_annotations(&annotations)
                .with_context(|| format!("logio: reading annotations {}", annotations.display()))?;
            let table = load_table(&embeddings)?;
            let base_ck = base.as_deref().map(load_miner).transpose()?;
            let ck = train_miner(
                &data,
                &table,
                &settings.train,
                &settings.miner,
                base_ck.as_ref(),
            )
            .context("miner: training")?;
            ck.save(&out)
                .with_context(|| format!("miner: writing {}", out.display()))?;
            if let Some(loss) = ck.final_loss() {
                log::info!("final epoch loss {loss:.6}");
            }
            write_manifest(
                &out,
                &manifest(
                    "train-miner",
                    seed,
                    json!({ "annotations": annotations, "embeddings": embeddings, "base": base }),
                    json!({ "miner": settings.miner, "train": settings.train }),
                ),
            )
        }
        Command::Parse {
            input,
            model,
            embeddings,
            kb,
            kb_out,
            header_columns,
            out,
        } => {
            let kb_out = kb_out.unwrap_or_else(|| {
                let mut name = out.file_name().unwrap_or_default().to_os_string();
                name.push(".kb.tsv");
                out.with_file_name(name)
            });
            for source in [&input, &model, &embeddings].into_iter().chain(kb.as_ref()) {
                ensure_distinct(source, &out)?;
                ensure_distinct(source, &kb_out)?;
            }
            let messages = read_raw_logs(&input, &FieldPattern::new(header_columns))
                .with_context(|| format!("logio: reading {}", input.display()))?;
            let ck = load_miner(&model)?;
            let table = load_table(&embeddings)?;
            let mut knowledge = match &kb {
                Some(p) => KnowledgeBase::load(p)
                    .with_context(|| format!("knowledge: loading {}", p.display()))?,
                None => KnowledgeBase::new(),
            };
            let results = parse_stream(&messages, &ck.model, &table, &mut knowledge)
                .context("jparser: parsing")?;
            let w = BufWriter::new(
                File::create(&out).with_context(|| format!("writing {}", out.display()))?,
            );
            write_parse_results(w, &results).context("jparser: writing results")?;
            knowledge
                .save(&kb_out)
                .with_context(|| format!("knowledge: writing {}", kb_out.display()))?;
            log::info!(
                "{} messages parsed; knowledge base holds {} instances",
                results.len(),
                knowledge.len()
            );
            let m = manifest(
                "parse",
                seed,
                json!({
                    "input": input, "model": model, "embeddings": embeddings,
                    "kb": kb, "header_columns": header_columns,
                }),
                json!({}),
            );
            write_manifest(&out, &m)?;
            write_manifest(&kb_out, &m)
        }
        Command::EvalMiner {
            annotations,
            model,
            embeddings,
        } => {
            let data = read_annotations(&annotations)
                .with_context(|| format!("logio: reading annotations {}", annotations.display()))?;
            let ck = load_miner(&model)?;
            let table = load_table(&embeddings)?;
            let mut predicted = Vec::with_capacity(data.len());
            for m in &data {
                let out = ck
                    .model
                    .infer_message(&m.message, &table)
                    .context("miner: inference")?;
                predicted.push(out.oriented_pairs());
            }
            let gold: Vec<_> = data.iter().map(|m| m.gold_pairs.clone()).collect();
            let prf = eval_ci_pairs(&predicted, &gold).context("downstream: scoring pairs")?;
            print_json(&json!({ "messages": data.len(), "pairs": prf }))
        }
        Command::Detect { session } => {
            let labelled = labelled_sessions(&session, |l| Some(usize::from(l.anomalous)))?;
            let (test_y, preds, cfg) = train_and_predict(
                &session,
                &settings,
                seed,
                labelled,
                2,
                "detect",
                |clf, f| Ok(vec![clf.predict(f)?]),
            )?;
            let predictions: Vec<bool> = preds.iter().map(|p| p[0] == 1).collect();
            let labels: Vec<bool> = test_y.iter().map(|&y| y == 1).collect();
            let prf = eval_binary(&predictions, &labels)?;
            print_json(
                &json!({ "test_sessions": labels.len(), "anomaly": prf, "features": session.features, "classifier": cfg }),
            )
        }
        Command::Diagnose { session } => {
            let labelled =
                labelled_sessions(&session, |l| if l.anomalous { l.class } else { None })?;
            let classes = labelled.iter().map(|(y, _)| y + 1).max().unwrap_or(0);
            ensure!(
                classes >= 2,
                "downstream: diagnosis needs at least two failure classes, found {classes}"
            );
            let k = classes.min(3);
            let (test_y, rankings, cfg) = train_and_predict(
                &session,
                &settings,
                seed,
                labelled,
                classes,
                "diagnose",
                |clf, f| clf.predict_topk(f, k),
            )?;
            let mut recall = serde_json::Map::new();
            for at in 1..=k {
                recall.insert(
                    format!("recall@{at}"),
                    json!(recall_at_k(&rankings, &test_y, at)?),
                );
            }
            print_json(&json!({
                "test_sessions": test_y.len(), "classes": classes, "recall": recall,
                "features": session.features, "classifier": cfg,
            }))
        }
        Command::Synth { spec, out } => {
            let parsed = GeneratorSpec::load(&spec)
                .with_context(|| format!("downstream: loading spec {}", spec.display()))?;
            let corpus = generate(&parsed, seed).context("downstream: generating corpus")?;
            let written = corpus
                .write_to_dir(&out)
                .with_context(|| format!("downstream: writing {}", out.display()))?;
            log::info!(
                "{} messages in {} sessions written to {}",
                corpus.messages.len(),
                corpus.sessions.len(),
                out.display()
            );
            let m = manifest(
                "synth",
                seed,
                json!({ "spec": spec }),
                json!({ "generator": parsed }),
            );
            for path in &written {
                write_manifest(path, &m)?;
            }
            Ok(())
        }
        Command::Gradcheck {
            model,
            annotations,
            embeddings,
            messages,
            eps,
            samples_per_group,
        } => {
            let mut data = read_annotations(&annotations)
                .with_context(|| format!("logio: reading annotations {}", annotations.display()))?;
            ensure!(
                !data.is_empty() && messages > 0,
                "gradcheck needs at least one annotated message"
            );
            data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            data.truncate(messages);
            let mut ck = load_miner(&model)?;
            let table = load_table(&embeddings)?;
            let cfg = GradCheckConfig {
                eps,
                samples_per_group,
                seed,
            };
            let report = miner_gradient_check(&mut ck.model, &data, &table, &cfg)
                .context("miner: gradient check")?;
            print_json(&json!({ "messages": data.len(), "eps": eps, "report": report }))
        }
    }
}

/// Sessions of the parsed stream joined with their labels; sessions the
/// label file does not know or `label` rejects are skipped.
fn labelled_sessions(
    args: &SessionArgs,
    label: impl Fn(&SessionLabel) -> Option<usize>,
) -> Result<Vec<(usize, Vec<ParseResult>)>> {
    let file =
        File::open(&args.parsed).with_context(|| format!("reading {}", args.parsed.display()))?;
    let results =
        read_parse_results(BufReader::new(file)).context("jparser: reading parse results")?;
    let labels = read_session_labels(&args.labels).context("downstream: reading session labels")?;
    let by_key: HashMap<&str, &SessionLabel> = labels.iter().map(|l| (l.key.as_str(), l)).collect();
    let sessions = build_sessions(&results, &args.key_concept);
    if !sessions.unkeyed.is_empty() {
        log::warn!(
            "{} messages carry no `{}` instance and are ignored",
            sessions.unkeyed.len(),
            args.key_concept
        );
    }
    let mut out = Vec::new();
    let mut unknown = 0;
    for s in sessions.keyed {
        match by_key.get(s.key.as_str()) {
            Some(l) => {
                if let Some(y) = label(l) {
                    out.push((y, s.results));
                }
            }
            None => unknown += 1,
        }
    }
    if unknown > 0 {
        log::warn!("{unknown} sessions have no label and are ignored");
    }
    ensure!(!out.is_empty(), "downstream: no labelled sessions");
    Ok(out)
}

/// Splits per class, trains on one part, writes the classifier and returns
/// the held-out labels with `predict` applied to each held-out session.
fn train_and_predict<T>(
    args: &SessionArgs,
    settings: &Settings,
    seed: u64,
    labelled: Vec<(usize, Vec<ParseResult>)>,
    classes: usize,
    command: &str,
    predict: impl Fn(&SessionClassifier, &SessionFeatures) -> Result<T, DownstreamError>,
) -> Result<(Vec<usize>, Vec<T>, ClassifierConfig)> {
    let table = load_table(&args.embeddings)?;
    let mut samples = Vec::with_capacity(labelled.len());
    for (y, results) in &labelled {
        let features = extract_features(results, &table, args.features.into())
            .context("downstream: features")?;
        samples.push(Sample {
            features,
            label: *y,
        });
    }
    let ys: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (train_idx, test_idx) = stratified_split(&ys, args.train_fraction, seed);
    ensure!(
        !train_idx.is_empty() && !test_idx.is_empty(),
        "downstream: split leaves an empty side"
    );
    let train: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let cfg = settings.classifier;
    let clf = train_session_classifier(&train, classes, &cfg)
        .context("downstream: training classifier")?;
    clf.save(&args.out)
        .with_context(|| format!("downstream: writing {}", args.out.display()))?;
    write_manifest(
        &args.out,
        &manifest(
            command,
            seed,
            json!({
                "parsed": args.parsed, "labels": args.labels, "embeddings": args.embeddings,
                "features": args.features, "key_concept": args.key_concept, "train_fraction": args.train_fraction,
            }),
            json!({ "classifier": cfg }),
        ),
    )?;
    let mut preds = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        preds.push(predict(&clf, &samples[i].features)?);
    }
    Ok((test_idx.iter().map(|&i| ys[i]).collect(), preds, cfg))
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
