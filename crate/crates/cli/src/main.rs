//! `bridgepath` command line: corpus synthesis, training, generation,
//! evaluation, path dumps and gradient checks.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use bridgepath::bridge::{sample_paths, write_paths_csv, BridgeParams};
use bridgepath::checkpoint;
use bridgepath::corpus::{
    load_corpus, prefix_key, synth_corpus, window_corpus, write_continuations, read_continuations, SynthSpec,
    Utterance, Vocab,
};
use bridgepath::distill::{train, CheckpointSink, TrainState, LOG_HEADER};
use bridgepath::gradcheck::{gradcheck, GradcheckOptions, Precision};
use bridgepath::infer::{diverse_generate, generate, GenerationRequest};
use bridgepath::metrics::{continuation_rate, evaluate, perplexity, EvalReport};
use bridgepath::model::DialogModel;
use bridgepath::params::ParamGroup;
use bridgepath::seq2seq::ModelConfig;

use config::RunConfig;

/// Invalid invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "bridgepath", version, about = "Dialogue path sampling on an extended Brownian bridge")]
struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, env = "BRIDGEPATH_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) from a TOML run config.
    Train(TrainArgs),
    /// Generate responses for JSONL contexts.
    Generate(GenerateArgs),
    /// Score generations against a JSONL corpus.
    Eval(EvalArgs),
    /// Dump sampled latent paths for one dialogue as CSV.
    SamplePaths(SamplePathsArgs),
    /// Compare analytic and finite-difference gradients per parameter group.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic many-to-many corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from the checkpoint in `checkpoint_dir` if there is one.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct DecodeArgs {
    /// `expectation` or `sampled`.
    #[arg(long, default_value = "expectation")]
    mode: String,
    /// `greedy`, `beam:<width>` or `topk:<k>`.
    #[arg(long, default_value = "topk:5")]
    decoding: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL, one `{"context": ["...", ...]}` per line.
    #[arg(long)]
    contexts: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Generate this many times per context (seeds seed..seed+n) and emit
    /// a response frequency table.
    #[arg(long)]
    n: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL corpus; the last turn is the reference, `references` adds more.
    #[arg(long)]
    corpus: PathBuf,
    /// Continuation sets (as written by `synth`) for the valid-continuation rate.
    #[arg(long)]
    continuations: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Pretty JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV file to append the scores to.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SamplePathsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL corpus file; the dialogue is record `--index`.
    #[arg(long)]
    dialogue: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(short = 'k', long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Min-max scale every dimension to [0, 1].
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config supplying model sizes, K and the corpus; a built-in tiny
    /// setup is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
    /// Finite-difference step (default 1e-5 for f64, 3e-3 for f32).
    #[arg(long)]
    h: Option<f64>,
    /// Pass threshold on the max relative error (default 1e-4 / 1e-2).
    #[arg(long)]
    tol: Option<f64>,
    /// Relative-error denominator floor (default 1e-6 / 1e-2).
    #[arg(long)]
    floor: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check only the first n entries of every tensor.
    #[arg(long)]
    max_per_tensor: Option<usize>,
    /// Test hook: perturb the analytic gradient of this group.
    #[arg(long, value_parser = parse_group)]
    corrupt: Option<ParamGroup>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_group(s: &str) -> Result<ParamGroup, String> {
    ParamGroup::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ParamGroup::ALL.iter().map(|g| g.as_str()).collect();
        format!("unknown group `{s}`; expected one of {}", names.join(", "))
    })
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML file with synth parameters; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    holdout_templates: Option<usize>,
    #[arg(long)]
    turns: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = setup_threads(cli.threads).and_then(|_| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SamplePaths(a) => cmd_sample_paths(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn setup_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn load_model(dir: &Path) -> anyhow::Result<(TrainState, Vocab)> {
    if !dir.join(checkpoint::MANIFEST).is_file() {
        bail!(UsageError(format!("no checkpoint in {}", dir.display())));
    }
    let (state, vocab) = checkpoint::load(dir)?;
    let vocab = vocab.with_context(|| format!("checkpoint {} carries no vocabulary", dir.display()))?;
    Ok((state, vocab))
}

fn require_file(flag: &str, p: &Path) -> anyhow::Result<()> {
    if !p.is_file() {
        bail!(UsageError(format!("{flag}: no such file {}", p.display())));
    }
    Ok(())
}

// ------------------------------------------------------------------ train

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(&a.config)?;
    let resume = a.resume && cfg.checkpoint_dir.join(checkpoint::MANIFEST).is_file();
    let (mut state, vocab) = if resume {
        let (mut state, vocab) = load_model(&cfg.checkpoint_dir)?;
        state.cfg.max_steps = cfg.max_steps;
        log::info!("resuming from step {}", state.step);
        (state, vocab)
    } else {
        let vocab = {
            let raw = load_corpus(&cfg.train_corpus, None)?;
            let texts: Vec<String> = raw.dialogues.iter().flat_map(|d| d.texts()).collect();
            Vocab::build(texts.iter().map(String::as_str), cfg.min_freq)
        };
        (TrainState::new(&cfg.train_config(vocab.len()))?, vocab)
    };

    let train_set = window_corpus(&load_corpus(&cfg.train_corpus, Some(&vocab))?.dialogues, cfg.window)?;
    let valid_set = match &cfg.valid_corpus {
        Some(p) => window_corpus(&load_corpus(p, Some(&vocab))?.dialogues, cfg.window)?,
        None => Vec::new(),
    };
    log::info!(
        "{} training windows, {} validation windows, vocabulary {}",
        train_set.len(),
        valid_set.len(),
        vocab.len()
    );

    fs::create_dir_all(&cfg.checkpoint_dir)
        .with_context(|| format!("creating {}", cfg.checkpoint_dir.display()))?;
    let report = train(
        &mut state,
        &train_set,
        &valid_set,
        CheckpointSink {
            dir: Some(&cfg.checkpoint_dir),
            vocab: Some(&vocab),
        },
    )?;

    if !report.log.is_empty() {
        let path = cfg.metrics_path();
        let fresh = !resume || !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        if fresh {
            writeln!(f, "{LOG_HEADER}")?;
        }
        for l in &report.log {
            writeln!(f, "{}", l.csv_row())?;
        }
    }
    if report.early_stopped {
        log::info!("early stop after {} steps", state.step);
    }
    if valid_set.is_empty() {
        println!("final training perplexity {:.4}", perplexity(&state.model, &train_set)?);
    } else {
        println!("final validation perplexity {:.4}", perplexity(&state.model, &valid_set)?);
    }
    Ok(ExitCode::SUCCESS)
}

// --------------------------------------------------------------- generate

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextRecord {
    context: Vec<String>,
}

fn read_contexts(path: &Path, vocab: &Vocab) -> anyhow::Result<Vec<(Vec<String>, Vec<Utterance>)>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ContextRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let utts = rec
            .context
            .iter()
            .map(|t| Utterance::new(t, vocab))
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if utts.is_empty() {
            bail!("{}:{}: empty context", path.display(), i + 1);
        }
        out.push((rec.context, utts));
    }
    Ok(out)
}

fn request(d: &DecodeArgs, context: Vec<Utterance>, delta: f64) -> GenerationRequest {
    GenerationRequest {
        seed: d.seed,
        max_new_tokens: d.max_new_tokens,
        delta,
        ..GenerationRequest::new(context, &d.mode, &d.decoding)
    }
}

fn check_decode(d: &DecodeArgs) -> anyhow::Result<()> {
    bridgepath::infer::latent_sources()
        .build(&d.mode)
        .map_err(|e| UsageError(format!("--mode: {e}")))?;
    bridgepath::decode::decoders()
        .build(&d.decoding)
        .map_err(|e| UsageError(format!("--decoding: {e}")))?;
    if d.max_new_tokens == 0 {
        bail!(UsageError("--max-new-tokens must be at least 1".into()));
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<ExitCode> {
    check_decode(&a.decode)?;
    require_file("--contexts", &a.contexts)?;
    if a.n == Some(0) {
        bail!(UsageError("--n must be at least 1".into()));
    }
    let (state, vocab) = load_model(&a.checkpoint)?;
    let contexts = read_contexts(&a.contexts, &vocab)?;
    let mut out = output(a.out.as_deref())?;
    for (texts, utts) in contexts {
        let req = request(&a.decode, utts, state.cfg.delta);
        let line = match a.n {
            None => {
                let g = generate(&state.model, &req)?;
                json!({
                    "context": texts,
                    "response": vocab.decode(&g.tokens),
                    "mode": a.decode.mode,
                    "seed": a.decode.seed,
                    "logprob": g.logprob,
                })
            }
            Some(n) => {
                let table = diverse_generate(&state.model, &req, n)?;
                let rows: Vec<_> = table
                    .iter()
                    .map(|r| json!({"response": vocab.decode(&r.tokens), "count": r.count}))
                    .collect();
                json!({
                    "context": texts,
                    "mode": a.decode.mode,
                    "seed": a.decode.seed,
                    "n": n,
                    "responses": rows,
                })
            }
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------- eval

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    check_decode(&a.decode)?;
    require_file("--corpus", &a.corpus)?;
    if let Some(c) = &a.continuations {
        require_file("--continuations", c)?;
    }
    let (state, vocab) = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus, Some(&vocab))?;
    if corpus.dialogues.is_empty() {
        bail!("{}: no usable dialogues", a.corpus.display());
    }
    let template = request(&a.decode, Vec::new(), state.cfg.delta);
    let (report, texts) = evaluate(&state.model, &vocab, &corpus.dialogues, &template)?;

    let mut value = serde_json::to_value(&report)?;
    if let Some(path) = &a.continuations {
        let map = read_continuations(path)?;
        let contexts: Vec<Vec<String>> = corpus
            .dialogues
            .iter()
            .map(|d| d.texts()[..d.horizon()].to_vec())
            .collect();
        value["continuation_rate"] = json!(continuation_rate(&contexts, &texts, &map)?);
    }
    let mut out = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &value)?;
    out.write_all(b"\n")?;
    out.flush()?;

    if let Some(path) = &a.csv {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        if fresh {
            writeln!(f, "{}", EvalReport::CSV_HEADER)?;
        }
        writeln!(f, "{}", report.csv_row())?;
    }
    Ok(ExitCode::SUCCESS)
}

// ----------------------------------------------------------- sample-paths

fn cmd_sample_paths(a: SamplePathsArgs) -> anyhow::Result<ExitCode> {
    require_file("--dialogue", &a.dialogue)?;
    if a.k == 0 {
        bail!(UsageError("-k must be at least 1".into()));
    }
    let (state, vocab) = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.dialogue, Some(&vocab))?;
    let Some(d) = corpus.dialogues.get(a.index) else {
        bail!(
            "{}: no dialogue with at least 2 utterances at index {}",
            a.dialogue.display(),
            a.index
        );
    };
    let bridge = BridgeParams::new(state.model.mus(&d.utterances)?, state.cfg.delta)?;
    let paths = sample_paths(&bridge, a.k, a.seed);
    let mut out = output(a.out.as_deref())?;
    write_paths_csv(&mut out, &paths, a.normalize)?;
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

// -------------------------------------------------------------- gradcheck

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let (model, batch, k) = match &a.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let corpus = load_corpus(&cfg.train_corpus, None)?;
            let batch = window_corpus(&corpus.dialogues, cfg.window)?;
            if batch.is_empty() {
                bail!("{}: no usable dialogues", cfg.train_corpus.display());
            }
            let tc = cfg.train_config(corpus.vocab.len());
            let model = DialogModel::new(&tc.model, cfg.seed)?;
            (model, batch.into_iter().take(2).collect::<Vec<_>>(), cfg.k)
        }
        None => {
            let c = synth_corpus(&SynthSpec {
                templates: 1,
                vocab_size: 20,
                seed: a.seed,
                ..SynthSpec::default()
            })?;
            let cfg = ModelConfig {
                vocab_size: 32.max(c.vocab.len()),
                d_model: 16,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ff_mult: 2,
                mapper_hidden: 16,
                max_len: 32,
                dropout: 0.0,
                encode_per_utterance: false,
            };
            (DialogModel::new(&cfg, a.seed)?, c.train[..2].to_vec(), 2)
        }
    };
    let defaults = GradcheckOptions::default();
    let (precision, h, tol, floor) = match a.precision {
        PrecisionArg::F64 => (Precision::F64, defaults.h, defaults.tol, defaults.floor),
        // single precision needs a larger step and looser bounds; see README
        PrecisionArg::F32 => (Precision::F32, 3e-3, 1e-2, 1e-2),
    };
    let opts = GradcheckOptions {
        h: a.h.unwrap_or(h),
        tol: a.tol.unwrap_or(tol),
        floor: a.floor.unwrap_or(floor),
        precision,
        loss: bridgepath::distill::LossOptions { k, ..defaults.loss },
        seed: a.seed,
        max_per_tensor: a.max_per_tensor,
        corrupt: a.corrupt,
        ..defaults
    };
    let report = gradcheck(&model, &batch, &opts)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for g in &report.groups {
            println!(
                "{:<13} {:>6} checked  max rel err {:.3e}  {}",
                g.group.as_str(),
                g.checked,
                g.max_rel_err,
                if g.pass { "pass" } else { "FAIL" }
            );
        }
        println!(
            "{} (tolerance {:.0e}, {:?})",
            if report.pass() { "all groups pass" } else { "gradient check failed" },
            report.tol,
            report.precision
        );
    }
    Ok(if report.pass() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

// ------------------------------------------------------------------ synth

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let mut spec = match &a.spec {
        Some(p) => {
            require_file("--spec", p)?;
            let text = fs::read_to_string(p)?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| UsageError(format!("spec {}: {}", p.display(), e.message())))?
        }
        None => SynthSpec::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    over!(branching, templates, holdout_templates, turns, vocab_size, pool_size, seed);
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let corpus = synth_corpus(&spec)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    bridgepath::corpus::write_corpus(&a.out_dir.join("train.jsonl"), &corpus.train)?;
    // held-out records carry the other valid continuations as references
    let mut held = Vec::new();
    for d in &corpus.heldout {
        let texts = d.texts();
        let gold = &texts[d.horizon()];
        let refs: Vec<&String> = corpus
            .continuations
            .get(&prefix_key(&texts[..d.horizon()]))
            .map(|s| s.iter().filter(|r| *r != gold).collect())
            .unwrap_or_default();
        serde_json::to_writer(&mut held, &json!({"turns": texts, "references": refs}))?;
        held.push(b'\n');
    }
    fs::write(a.out_dir.join("heldout.jsonl"), held)?;
    write_continuations(&a.out_dir.join("continuations.json"), &corpus.continuations)?;
    let contexts: BTreeMap<String, ()> = corpus
        .heldout
        .iter()
        .map(|d| (prefix_key(&d.texts()[..d.horizon()]), ()))
        .collect();
    println!(
        "wrote {} training and {} held-out dialogues ({} distinct held-out contexts) to {}",
        corpus.train.len(),
        corpus.heldout.len(),
        contexts.len(),
        a.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
