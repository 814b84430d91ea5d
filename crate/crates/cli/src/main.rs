use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use nnlm::classes::read_class_file;
use nnlm::exchange::{run_exchange, ExchangeOptions, InitScheme};
use nnlm::network::Network;
use nnlm::optim::{Algorithm, OptimizerConfig};
use nnlm::persist::{load_model, save_model};
use nnlm::rescore::{self, GridSpec, InterpolationParams};
use nnlm::sample::sample_text;
use nnlm::score::{perplexity_of, score_sentences, UnkPolicy};
use nnlm::train::{train, TrainingConfig};
use nnlm::vocab::{read_corpus, Vocabulary};
use nnlm::Precision;

#[derive(Parser)]
#[command(
    name = "nnlm",
    version,
    about = "Class-factored recurrent neural network language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster words into classes with the exchange algorithm.
    Classes(ClassesArgs),
    /// Train a network and write the best checkpoint.
    Train(Box<TrainArgs>),
    /// Per-sentence log-probabilities and corpus perplexity.
    Score(ScoreArgs),
    /// Rerank n-best lists with interpolated language model scores.
    Rescore(RescoreArgs),
    /// Generate sentences.
    Sample(SampleArgs),
}

#[derive(Args)]
struct ClassesArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 2000)]
    num_classes: usize,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_passes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `striped` (by frequency rank) or `random`.
    #[arg(long, default_value = "striped")]
    init: InitScheme,
    /// Keep only this many most frequent words.
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    /// Class file; without it every word is its own class.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Vocabulary limit when no class file is given.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, default_value = "adagrad")]
    optimizer: Algorithm,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Global gradient norm limit; 0 disables clipping.
    #[arg(long, default_value_t = nnlm::optim::DEFAULT_CLIP_NORM)]
    clip_norm: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    max_sequence_length: usize,
    /// Batches between validations; defaults to once per epoch.
    #[arg(long)]
    validation_interval: Option<usize>,
    #[arg(long, default_value_t = 2)]
    patience: usize,
    #[arg(long, default_value_t = 0.5)]
    annealing_factor: f64,
    #[arg(long, default_value_t = 0.001)]
    min_improvement: f64,
    #[arg(long, default_value_t = 10)]
    max_epochs: usize,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `double` or `single`.
    #[arg(long, default_value = "double")]
    precision: Precision,
    /// `0` excludes unknown words from dev perplexity.
    #[arg(long)]
    unk_penalty: Option<f64>,
    #[arg(long)]
    output_model: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// `0` excludes unknown words.
    #[arg(long)]
    unk_penalty: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RescoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    s_bo: f64,
    #[arg(long, default_value_t = 1.0)]
    s_nn: f64,
    /// Choose lambda and s_nn by word error rate against --refs.
    #[arg(long, requires = "refs")]
    tune: bool,
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Search grid, e.g. `lambda=0:1:0.1;s_nn=0.5,1,2`.
    #[arg(long)]
    grid: Option<GridSpec>,
    #[arg(long)]
    unk_penalty: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 100)]
    max_tokens: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn policy(penalty: Option<f64>) -> Result<UnkPolicy> {
    Ok(match penalty {
        None => UnkPolicy::Include,
        Some(p) => UnkPolicy::from_penalty(p)?,
    })
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_classes(args: ClassesArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus)?;
    let vocab = Vocabulary::build(&corpus, args.vocab_size)?;
    let options = ExchangeOptions {
        num_classes: args.num_classes,
        max_passes: args.max_passes,
        scheme: args.init,
        seed: args.seed,
    };
    let result = run_exchange(&vocab, &corpus, &options)?;
    result.classes.write_class_file(&vocab, &args.output)?;
    let mut out = io::stdout().lock();
    for (pass, ll) in result.trace.iter().enumerate() {
        writeln!(out, "{pass}\t{ll}")?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let train_corpus = read_corpus(&args.train)?;
    let dev_corpus = read_corpus(&args.dev)?;
    let arch = std::fs::read_to_string(&args.arch).with_context(|| format!("cannot read {}", args.arch.display()))?;
    let (vocab, classes) = match &args.classes {
        Some(path) => {
            if args.vocab_size.is_some() {
                bail!("--vocab-size cannot be combined with --classes");
            }
            let (mut vocab, classes) = read_class_file(path)?;
            vocab.recount(&train_corpus);
            (vocab, Some(classes))
        }
        None => (Vocabulary::build(&train_corpus, args.vocab_size)?, None),
    };
    let mut network =
        Network::from_text(&arch, vocab, classes, args.seed, args.precision).map_err(|e| e.in_file(&args.arch))?;

    let mut optimizer = OptimizerConfig::new(args.optimizer);
    if let Some(v) = args.learning_rate {
        optimizer.learning_rate = v;
    }
    if let Some(v) = args.momentum {
        optimizer.momentum = v;
    }
    if let Some(v) = args.epsilon {
        optimizer.epsilon = v;
    }
    if let Some(v) = args.decay {
        optimizer.decay = v;
    }
    optimizer.clip_norm = (args.clip_norm > 0.0).then_some(args.clip_norm);
    let config = TrainingConfig {
        batch_size: args.batch_size,
        max_sequence_length: args.max_sequence_length,
        optimizer,
        validation_interval: args.validation_interval,
        patience: args.patience,
        annealing_factor: args.annealing_factor,
        min_improvement: args.min_improvement,
        max_epochs: args.max_epochs,
        max_batches: args.max_batches,
        seed: args.seed,
        unk_policy: policy(args.unk_penalty)?,
    };
    info!(
        "training {} parameters on {} sentences, {} words, {} classes",
        network.params().iter().map(|(_, t)| t.len()).sum::<usize>(),
        train_corpus.len(),
        network.vocab().len(),
        network.num_classes()
    );
    let state = train(&mut network, &train_corpus, &dev_corpus, &config)?;
    save_model(&network, Some(&state), &args.output_model)?;
    if state.diverged() {
        eprintln!(
            "error: training diverged; the last good checkpoint was written to {}",
            args.output_model.display()
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let network = load_model(&args.model)?.network;
    let corpus = read_corpus(&args.input)?;
    let results = score_sentences(&network, &corpus, policy(args.unk_penalty)?)?;
    let ppl = perplexity_of(&results)?;
    let mut out = writer(args.output.as_deref())?;
    for (i, r) in results.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}", i + 1, r.total, r.counted)?;
    }
    writeln!(out, "perplexity\t{ppl}")?;
    out.flush()?;
    Ok(())
}

fn cmd_rescore(args: RescoreArgs) -> Result<()> {
    let network = load_model(&args.model)?.network;
    let lists = rescore::read_nbest(&args.nbest)?;
    let policy = policy(args.unk_penalty)?;
    let nnlm = rescore::nnlm_scores(&lists, &network, policy)?;
    let mut params = InterpolationParams {
        lambda: args.lambda,
        s_bo: args.s_bo,
        s_nn: args.s_nn,
    };
    if args.tune {
        let refs = rescore::read_references(args.refs.as_ref().expect("clap enforces --refs"))?;
        let grid = args.grid.unwrap_or_default();
        let tuned = rescore::optimize_interpolation_with_scores(&lists, &nnlm, &refs, &grid, args.s_bo)?;
        params = tuned.params;
        eprintln!(
            "tuned\tlambda={}\ts_nn={}\twer={}",
            params.lambda,
            params.s_nn,
            tuned.word_error_rate()
        );
    }
    let ranked = rescore::rerank(&lists, &nnlm, &params)?;
    let mut out = writer(args.output.as_deref())?;
    for list in &ranked {
        for r in list {
            let h = &r.hypothesis;
            writeln!(
                out,
                "{} {} {} {} {} {}",
                h.utterance,
                r.total,
                h.acoustic,
                h.backoff,
                r.nnlm,
                h.tokens.join(" ")
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let network = load_model(&args.model)?.network;
    let sentences = sample_text(&network, args.seed, args.max_tokens, args.count)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for s in sentences {
        writeln!(out, "{}", s.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Classes(a) => cmd_classes(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(*a),
        Command::Score(a) => cmd_score(a).map(|_| ExitCode::SUCCESS),
        Command::Rescore(a) => cmd_rescore(a).map(|_| ExitCode::SUCCESS),
        Command::Sample(a) => cmd_sample(a).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
