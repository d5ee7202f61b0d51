use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use bytefuse::bytes_tok::{self, word_spans};
use bytefuse::config::RunConfig;
use bytefuse::data::{read_lines, train_bpe, utf8_lines, BpeModel};
use bytefuse::eval::{self, bleu, bucket_accuracy, fertility, BucketAxis, EvalReport};
use bytefuse::model::checkpoint::Checkpoint;
use bytefuse::model::{EmbeddingMode, FusionKind, Seq2Seq};
use bytefuse::train::{evaluate_loss, Trainer};

/// Environment variable naming the directory that holds run directories.
const RUN_ROOT_VAR: &str = "BYTEFUSE_RUN_ROOT";

#[derive(Parser)]
#[command(name = "bytefuse", version, about = "Byte-level translation with local byte fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print byte token ids (or word spans) for each input line.
    Tokenize(TokenizeArgs),
    /// Train a model; writes a run directory with config echo, loss log and checkpoints.
    Train(TrainArgs),
    /// Translate input lines with a checkpoint.
    Translate(TranslateArgs),
    /// Score hypotheses against references with corpus BLEU.
    Evaluate(EvaluateArgs),
    /// Continue training a checkpoint on a new corpus with a fresh schedule.
    Finetune(FinetuneArgs),
    /// Word accuracy bucketed by fertility or word length.
    Analyze(AnalyzeArgs),
    /// Learn a BPE merge list from a text file.
    TrainBpe(TrainBpeArgs),
}

#[derive(Args)]
struct TokenizeArgs {
    /// Wrap each line in BOS/EOS.
    #[arg(long)]
    specials: bool,
    /// Print `start:end:kind` word spans instead of ids.
    #[arg(long, conflicts_with = "specials")]
    spans: bool,
    /// Input file (stdin when omitted).
    input: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fusion: Option<FusionKind>,
    #[arg(long)]
    embedding: Option<EmbeddingMode>,
    /// Shallow layers before n-gram fusion.
    #[arg(long)]
    ls: Option<usize>,
    /// Block-masked layers for word-span fusion.
    #[arg(long)]
    lw: Option<usize>,
    /// Per-side sentence length cap in bytes.
    #[arg(long)]
    max_bytes: Option<usize>,
}

impl Overrides {
    fn touches_model(&self) -> bool {
        self.fusion.is_some() || self.embedding.is_some() || self.ls.is_some() || self.lw.is_some()
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if let Some(e) = self.embedding {
            cfg.model.embedding = e;
        }
        if let Some(n) = self.ls {
            cfg.model.shallow_layers = n;
        }
        if let Some(n) = self.lw {
            cfg.model.word_layers = n;
        }
        if let Some(n) = self.max_bytes {
            cfg.data.max_bytes = n;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory name under the run root.
    #[arg(long)]
    run_name: Option<String>,
    /// Continue from a checkpoint, writing into its directory.
    #[arg(long, conflicts_with = "run_name")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 2.0)]
    max_len_factor: f64,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    /// Input file (stdin when omitted).
    input: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference translations, one per line.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypotheses to score.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    hyp: Option<PathBuf>,
    /// Translate `--src` with this checkpoint and score the output.
    #[arg(long, requires = "src")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 2.0)]
    max_len_factor: f64,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config providing the new corpus and training settings.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "word_length")]
    axis: BucketAxis,
    /// Comma-separated, strictly increasing bucket edges.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0, 6.0, 8.0])]
    edges: Vec<f64>,
    /// BPE merge list used for fertility.
    #[arg(long)]
    bpe: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBpeArgs {
    #[arg(long)]
    merges: usize,
    #[arg(long, short)]
    output: PathBuf,
    input: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.command {
        Command::Tokenize(a) => tokenize(a, &mut out)?,
        Command::Train(a) => train(a, &mut out)?,
        Command::Translate(a) => translate(a, &mut out)?,
        Command::Evaluate(a) => evaluate(a, &mut out)?,
        Command::Finetune(a) => finetune(a, &mut out)?,
        Command::Analyze(a) => analyze(a, &mut out)?,
        Command::TrainBpe(a) => {
            let lines = read_lines(&a.input)?;
            let model = train_bpe(&lines, a.merges);
            write_atomic(&a.output, model.to_string().as_bytes())?;
            writeln!(out, "{} merges written to {}", model.merges().len(), a.output.display())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_input(path: Option<&Path>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match path {
        Some(p) => buf = fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            io::stdin().lock().read_to_end(&mut buf)?;
        }
    }
    Ok(buf)
}

fn input_lines(path: Option<&Path>) -> Result<Vec<String>> {
    let raw = read_input(path)?;
    let name = path.map_or("<stdin>".to_string(), |p| p.display().to_string());
    utf8_lines(&raw).map_err(|line| anyhow::anyhow!("{name}: line {line} is not valid UTF-8"))
}

fn tokenize(a: TokenizeArgs, out: &mut impl Write) -> Result<()> {
    for line in input_lines(a.input.as_deref())? {
        if a.spans {
            writeln!(out, "{}", word_spans(&line))?;
        } else {
            writeln!(out, "{}", bytes_tok::tokenize(&line, a.specials))?;
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// A fresh directory under the run root; `-2`, `-3`, ... are appended when
/// the name is taken.
fn new_run_dir(name: &str) -> Result<PathBuf> {
    let root = run_root();
    fs::create_dir_all(&root).with_context(|| format!("creating run root {}", root.display()))?;
    let mut dir = root.join(name);
    let mut n = 2;
    while dir.exists() {
        dir = root.join(format!("{name}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn default_run_name(cfg: &RunConfig, prefix: &str) -> String {
    let fusion = match cfg.model.fusion {
        FusionKind::None => "byte",
        FusionKind::Ncf => "ncf",
        FusionKind::Wsf => "wsf",
    };
    let emb = match cfg.model.embedding {
        EmbeddingMode::OneHot => "onehot",
        EmbeddingMode::Dense => "dense",
    };
    format!("{prefix}{fusion}-{emb}-seed{}", cfg.seed)
}

fn warn_degenerate_spans(cfg: &RunConfig, sources: &[&str]) {
    if cfg.model.fusion == FusionKind::Wsf && sources.iter().all(|s| word_spans(s).word_count() <= 1) {
        log::warn!("no source sentence contains more than one word; every sentence is a single attention block");
    }
}

fn finish_run(trainer: &mut Trainer, cfg: &RunConfig, dir: &Path, out: &mut impl Write) -> Result<()> {
    let records = trainer.run(Some(dir))?;
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    writeln!(out, "run directory: {}", dir.display())?;
    writeln!(out, "steps: {} final loss: {last:.6}", trainer.step())?;
    if let Some(valid) = cfg.validation_corpus()? {
        let loss = evaluate_loss(
            trainer.model(),
            &valid,
            cfg.train.token_budget,
            cfg.train.label_smoothing,
        )?;
        writeln!(out, "validation loss: {loss:.6}")?;
    }
    Ok(())
}

fn train(a: TrainArgs, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let corpus = cfg.training_corpus()?;
    if corpus.dropped > 0 {
        log::info!(
            "dropped {} pairs longer than {} bytes",
            corpus.dropped,
            cfg.data.max_bytes
        );
    }
    warn_degenerate_spans(&cfg, &corpus.sources());
    let (mut trainer, dir) = match &a.resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
            ensure!(
                ckpt.config.same_architecture(&cfg.model),
                "checkpoint architecture differs from the config"
            );
            let dir = ckpt_path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (Trainer::resume(&ckpt, corpus, cfg.train.clone(), cfg.seed)?, dir)
        }
        None => {
            let dir = new_run_dir(&a.run_name.clone().unwrap_or_else(|| default_run_name(&cfg, "")))?;
            let model = Seq2Seq::<f32>::new(cfg.model.clone(), cfg.seed)?;
            log::info!("model with {} parameters", model.num_parameters());
            (Trainer::new(model, corpus, cfg.train.clone(), cfg.seed)?, dir)
        }
    };
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    finish_run(&mut trainer, &cfg, &dir, out)
}

fn finetune(a: FinetuneArgs, out: &mut impl Write) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let names_model = text
        .parse::<toml::Table>()
        .map(|t| t.contains_key("model"))
        .unwrap_or(false);
    let mut cfg = load_config(&a.config, &a.overrides)?;
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let expected = (names_model || a.overrides.touches_model()).then(|| cfg.model.clone());
    let corpus = cfg.training_corpus()?;
    let mut trainer = Trainer::finetune(&ckpt, expected.as_ref(), corpus, cfg.train.clone(), cfg.seed)?;
    cfg.model = ckpt.config.clone();
    let dir = new_run_dir(
        &a.run_name
            .clone()
            .unwrap_or_else(|| default_run_name(&cfg, "finetune-")),
    )?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    finish_run(&mut trainer, &cfg, &dir, out)
}

fn load_model(path: &Path) -> Result<Seq2Seq<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

fn translate_lines(model: &Seq2Seq<f32>, lines: &[String], cfg: &eval::DecodeConfig) -> Result<Vec<String>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            eval::translate(model, line, cfg)
                .map(|h| h.text)
                .with_context(|| format!("line {}", i + 1))
        })
        .collect()
}

fn translate(a: TranslateArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cfg = eval::DecodeConfig {
        beam: a.beam,
        max_len_factor: a.max_len_factor,
        length_penalty: a.length_penalty,
    };
    let lines = input_lines(a.input.as_deref())?;
    for text in translate_lines(&model, &lines, &cfg)? {
        writeln!(out, "{text}")?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, out: &mut impl Write) -> Result<()> {
    let refs = read_lines(&a.reference)?;
    let hyps = match (&a.hyp, &a.checkpoint, &a.src) {
        (Some(h), _, _) => read_lines(h)?,
        (None, Some(ckpt), Some(src)) => {
            let model = load_model(ckpt)?;
            let cfg = eval::DecodeConfig {
                beam: a.beam,
                max_len_factor: a.max_len_factor,
                ..Default::default()
            };
            translate_lines(&model, &read_lines(src)?, &cfg)?
        }
        _ => bail!("either --hyp or --checkpoint with --src is required"),
    };
    let report = EvalReport {
        bleu: bleu(&hyps, &refs)?,
        buckets: None,
    };
    write!(out, "{report}")?;
    Ok(())
}

fn analyze(a: AnalyzeArgs, out: &mut impl Write) -> Result<()> {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let bpe = match &a.bpe {
        Some(p) => Some(
            fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .parse::<BpeModel>()?,
        ),
        None => None,
    };
    if let Some(bpe) = &bpe {
        let f = fertility(bpe, &refs);
        writeln!(out, "fertility\t{:.4}\t{} words", f.mean, f.words)?;
    }
    let report = bucket_accuracy(&hyps, &refs, a.axis, &a.edges, bpe.as_ref())?;
    write!(out, "{report}")?;
    Ok(())
}
