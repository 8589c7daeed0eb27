use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relgraph::checkpoint::Checkpoint;
use relgraph::config::{Ablations, ModelConfig};
use relgraph::data::{generate_synthetic, load_pretrained_file, read_corpus, write_corpus, Instance, SyntheticConfig};
use relgraph::gradcheck::{check_network, GradCheckOptions};
use relgraph::graph::{self, DepTree, Pruning};
use relgraph::model::{format_matrix, Featurizer, Sizes};
use relgraph::train::{self, data_size_study, format_size_curve, Session, DEFAULT_FRACTIONS};

#[derive(Parser)]
#[command(name = "relgraph", version, about = "Relation extraction over dependency graphs")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Label a corpus; optionally export attention matrices.
    Predict(PredictArgs),
    /// Dependency-graph utilities.
    Graph {
        #[command(subcommand)]
        cmd: GraphCmd,
    },
    /// Finite-difference check of the model's gradients on a small batch.
    Gradcheck(GradcheckArgs),
    /// Dev metric as a function of training-set size.
    Datasize(DatasizeArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Print kept nodes, kept edges and Ã for each instance.
    Dump {
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "1")]
        k: String,
        /// Only the instance with this id.
        #[arg(long)]
        id: Option<String>,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// key=value config file, applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point for the config: `default` or `desk`.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Pruning distance: a number of hops or `full`.
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated ablation flags.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Generate train and dev data instead (two thirds train).
    #[arg(long, conflicts_with_all = ["train", "dev"])]
    synthetic_config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Pre-trained word vectors, one `token v1 … vd` per line.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the per-epoch log here.
    #[arg(long)]
    log_file: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Machine-readable rows instead of the table.
    #[arg(long)]
    tsv: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Directory for `<id>.head<a>.txt` attention matrices.
    #[arg(long)]
    export_attention: Option<PathBuf>,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Labelled corpus to draw the batch from; a tiny synthetic one otherwise.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates sampled per parameter (all if omitted).
    #[arg(long)]
    coords: Option<usize>,
}

#[derive(Args)]
struct DatasizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Comma-separated fractions of the training corpus.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    synthetic_config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<relgraph::Error> for Failure {
    fn from(e: relgraph::Error) -> Self {
        use relgraph::Error as E;
        match e {
            E::Usage(_) | E::Config(_) => Failure::Usage(e.into()),
            E::Numerical(_) | E::EmptyPool => Failure::Numerical(e.into()),
            E::Parse { .. } | E::VectorFormat { .. } | E::Instance(_) | E::Checkpoint(_) | E::Io { .. } => {
                Failure::Data(e.into())
            }
            E::Dimension { .. } | E::Shape { .. } => Failure::Data(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<relgraph::Error>() {
            Ok(e) => e.into(),
            Err(e) => Failure::Usage(e),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(anyhow::Error::new(e).context(format!("writing {}", path.display())))
}

fn build_config(a: &ModelArgs) -> Outcome<ModelConfig> {
    let mut cfg = match a.preset.as_str() {
        "default" => ModelConfig::default(),
        "desk" => ModelConfig::desk(),
        other => return Err(Failure::Usage(anyhow::anyhow!("unknown preset {other:?}"))),
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Data)?;
        cfg.apply_kv(&text)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(k) = &a.k {
        cfg.pruning = Pruning::parse(k)?;
    }
    if let Some(list) = &a.ablate {
        cfg.ablations = Ablations::parse_list(list)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpora(c: &CorpusArgs, seed: u64) -> Outcome<(Vec<Instance>, Vec<Instance>)> {
    if let Some(path) = &c.synthetic_config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::Data)?;
        let data = generate_synthetic(&SyntheticConfig::from_kv(&text)?, seed)?;
        let split = data.len() * 2 / 3;
        return Ok((data[..split].to_vec(), data[split..].to_vec()));
    }
    let (Some(tr), Some(dv)) = (&c.train, &c.dev) else {
        return Err(Failure::Usage(anyhow::anyhow!(
            "give --train and --dev, or --synthetic-config"
        )));
    };
    Ok((read_corpus(tr)?, read_corpus(dv)?))
}

fn run_train(a: TrainArgs) -> Outcome {
    let cfg = build_config(&a.model)?;
    let (train_set, dev_set) = load_corpora(&a.corpus, cfg.seed)?;
    let (features, tr, dv) = train::prepare(&cfg, &train_set, &dev_set)?;
    let word_table = match &a.vectors {
        Some(path) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7665_6374);
            let (table, cov) = load_pretrained_file(path, &features.vocab, cfg.d_word, false, &mut rng)?;
            log::info!("vector coverage {}/{} ({:.1}%)", cov.found, cov.total, 100.0 * cov.ratio());
            Some(table)
        }
        None => None,
    };
    log::info!(
        "{} train / {} dev instances, {} words, {} labels",
        tr.len(),
        dv.len(),
        features.vocab.len(),
        features.labels.len()
    );
    let mut session = Session::new(&cfg, features, word_table)?;
    let mut log_file = match &a.log_file {
        Some(p) => Some((p.clone(), fs::File::create(p).map_err(|e| io_failure(p, e))?)),
        None => None,
    };
    let mut write_err = None;
    session.train(&tr, &dv, &mut |_, line| {
        println!("{line}");
        if let Some((p, f)) = &mut log_file {
            if let Err(e) = writeln!(f, "{line}") {
                write_err = Some(io_failure(p, e));
                return true;
            }
        }
        false
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Checkpoint::from_session(&session).save(&a.checkpoint)?;
    if let Some(b) = &session.best {
        log::info!("best dev {:.4} at epoch {}; saved {}", b.metric, b.epoch, a.checkpoint.display());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let corpus = read_corpus(&a.test)?;
    let report = train::evaluate(&model, &corpus)?;
    print!("{}", if a.tsv { report.to_tsv() } else { report.to_table() });
    Ok(())
}

/// Keeps ids usable as file names.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn run_predict(a: PredictArgs) -> Outcome {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let corpus = read_corpus(&a.test)?;
    let examples = model.featurize(&corpus, false)?;
    let preds = model.predict(&examples, a.export_attention.is_some())?;
    let mut out = String::new();
    for p in &preds {
        out.push_str(&format!("{}\t{}\t{:.6}\n", p.id, model.features.labels.name(p.label), p.probability()));
    }
    if let Some(dir) = &a.export_attention {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        for p in &preds {
            for (h, m) in p.attention.iter().enumerate() {
                let path = dir.join(format!("{}.head{h}.txt", file_stem(&p.id)));
                fs::write(&path, format_matrix(m)).map_err(|e| io_failure(&path, e))?;
            }
        }
    }
    match &a.out {
        Some(path) => fs::write(path, out).map_err(|e| io_failure(path, e))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn run_graph_dump(test: &Path, k: &str, id: Option<&str>) -> Outcome {
    let k = Pruning::parse(k)?;
    let corpus = read_corpus(test)?;
    let mut found = false;
    for inst in corpus.iter().filter(|i| id.map_or(true, |id| i.id == id)) {
        found = true;
        let tree = DepTree::from_instance(inst)?;
        let pg = tree.prune(&inst.entity_spans(), k);
        print!("{}", graph::dump(inst, &pg));
    }
    if let (Some(id), false) = (id, found) {
        return Err(Failure::Usage(anyhow::anyhow!("no instance with id {id:?}")));
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    let cfg = build_config(&a.model)?;
    let corpus = match &a.train {
        Some(path) => read_corpus(path)?,
        None => {
            let syn = SyntheticConfig {
                instances: a.batch.max(1),
                min_len: 6,
                max_len: 8,
                min_distance: 3,
                max_distance: 4,
                vocab_size: 10,
                ..SyntheticConfig::default()
            };
            generate_synthetic(&syn, cfg.seed)?
        }
    };
    let batch_len = a.batch.min(corpus.len());
    if batch_len == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("empty batch")));
    }
    let features = Featurizer::build(&corpus, &cfg);
    let examples = features.featurize_all(&corpus[..batch_len], cfg.pruning, true)?;
    let opts = GradCheckOptions {
        step: a.step,
        max_coords_per_param: a.coords,
        seed: cfg.seed,
        kink_tolerance: Some(a.tolerance),
    };
    let report = check_network(&cfg, Sizes::of(&features), &examples, cfg.seed, 0.1, &opts)?;
    println!(
        "coords={} max_rel_error={:.3e} kinks={}",
        report.coords_checked,
        report.max_rel_error,
        report.kinks.len()
    );
    if let Some(w) = &report.worst {
        println!(
            "worst {}[{}] analytic={:e} numeric={:e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.max_rel_error >= a.tolerance {
        return Err(Failure::Numerical(anyhow::anyhow!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            a.tolerance
        )));
    }
    Ok(())
}

fn run_datasize(a: DatasizeArgs) -> Outcome {
    let cfg = build_config(&a.model)?;
    let (train_set, dev_set) = load_corpora(&a.corpus, cfg.seed)?;
    let fractions = a.fractions.unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    let points = data_size_study(&cfg, &train_set, &dev_set, &fractions, cfg.seed)?;
    let table = format_size_curve(&points);
    match &a.out {
        Some(path) => fs::write(path, table).map_err(|e| io_failure(path, e))?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Outcome {
    let cfg = match &a.synthetic_config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Data)?;
            SyntheticConfig::from_kv(&text)?
        }
        None => SyntheticConfig::default(),
    };
    write_corpus(&a.out, &generate_synthetic(&cfg, a.seed)?)?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Predict(a) => run_predict(a),
        Cmd::Graph {
            cmd: GraphCmd::Dump { test, k, id },
        } => run_graph_dump(&test, &k, id.as_deref()),
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::Datasize(a) => run_datasize(a),
        Cmd::Synth(a) => run_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Numerical(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

