//! Command-line driver: training, evaluation, gradient checks, ablations and
//! the stack-depth sweep.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csran::csra::write_affinity_dump;
use csran::data::{
    build_char_vocab, build_word_vocab, gen_synthetic, load_embeddings, read_pairs, tokenize_pairs, Batch,
    RawPair, SyntheticKind, TaskKind, TokenizedPair, Vocab,
};
use csran::model::{check_gradients, peek_precision, GRADIENT_STEPS, CsranModel, ModelConfig};
use csran::tensor::Graph;
use csran::train::{evaluate, train, write_history, DevMetric, TrainOutcome};
use csran::{Error, Precision, Result, Scalar};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "csran", version, about = "Train and evaluate CSRAN text matching models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and dev report
    Train(CommandArgs),
    /// Evaluate a checkpoint on a pair file
    Eval(CommandArgs),
    /// Finite-difference gradient check of a tiny 64-bit model
    Gradcheck(CommandArgs),
    /// Train the four MAR/CSRA ablation variants
    Ablate(CommandArgs),
    /// Compare CSRAN with the plain stacked baseline across stack depths
    DepthSweep(CommandArgs),
}

#[derive(Debug, clap::Args)]
#[command(after_help = config::keys_help())]
struct CommandArgs {
    /// File of `key = value` lines, applied before the flags
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (name, args) = match &cli.command {
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
        Command::Gradcheck(a) => ("gradcheck", a),
        Command::Ablate(a) => ("ablate", a),
        Command::DepthSweep(a) => ("depth-sweep", a),
    };
    let result = load_config(args).and_then(|cfg| match cli.command {
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::DepthSweep(_) => cmd_depth_sweep(&cfg),
    });
    match result {
        Ok(Outcome::Passed) => EXIT_OK,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("csran {name}: {msg}");
            EXIT_FAILURE
        }
        Err(e) => {
            eprintln!("csran {name}: {e}");
            exit_code(&e)
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    /// A check or tolerance was not met.
    Failed(String),
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Checkpoint(_)
        | Error::Data(_)
        | Error::Vocabulary { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Applies the config file, wherever `--config` appeared, then the flags.
fn load_config(args: &CommandArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut files: Vec<PathBuf> = args.config.iter().cloned().collect();
    let mut rest = Vec::with_capacity(args.overrides.len());
    let mut it = args.overrides.iter();
    while let Some(a) = it.next() {
        if a == "--config" || a == "-c" {
            let path = it.next().ok_or_else(|| Error::config("config", "missing value"))?;
            files.push(PathBuf::from(path));
        } else if let Some(path) = a.strip_prefix("--config=") {
            files.push(PathBuf::from(path));
        } else {
            rest.push(a.clone());
        }
    }
    for path in &files {
        cfg.apply_file(path)?;
    }
    cfg.apply_args(&rest)?;
    Ok(cfg)
}

fn print_seeds(cfg: &RunConfig) {
    println!("init_seed={} shuffle_seed={}", cfg.init_seed, cfg.train.shuffle_seed);
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Corpus {
    train: Vec<RawPair>,
    dev: Vec<RawPair>,
    test: Option<Vec<RawPair>>,
}

fn synthetic_dev(kind: SyntheticKind, cfg: &RunConfig) -> Vec<RawPair> {
    gen_synthetic(kind, cfg.synthetic_dev_size, cfg.data_seed.wrapping_add(1))
}

fn max_class(pairs: &[&[RawPair]]) -> usize {
    pairs.iter().flat_map(|p| p.iter()).map(|p| p.label).max().unwrap_or(0)
}

/// Reads or generates the corpus and settles the class count.
fn load_corpus(cfg: &mut RunConfig) -> Result<Corpus> {
    let corpus = match cfg.synthetic {
        Some(kind) => Corpus {
            train: gen_synthetic(kind, cfg.synthetic_size, cfg.data_seed),
            dev: synthetic_dev(kind, cfg),
            test: None,
        },
        None => {
            let read = |p: &Option<PathBuf>| p.as_deref().map(|p| read_pairs(p, cfg.task)).transpose();
            Corpus {
                train: read(&cfg.train_path)?.unwrap_or_default(),
                dev: read(&cfg.dev_path)?.unwrap_or_default(),
                test: read(&cfg.test_path)?,
            }
        }
    };
    let mut sets: Vec<&[RawPair]> = vec![&corpus.train, &corpus.dev];
    if let Some(t) = &corpus.test {
        sets.push(t);
    }
    let top = max_class(&sets);
    if cfg.task == TaskKind::Classification && !cfg.is_set("num_classes") && cfg.synthetic.is_none() {
        cfg.model.num_classes = (top + 1).max(2);
    }
    if top >= cfg.model.num_classes {
        return Err(Error::config(
            "num_classes",
            format!("label {top} found but the model has {} classes", cfg.model.num_classes),
        ));
    }
    Ok(corpus)
}

struct Prepared {
    words: Vocab,
    chars: Vocab,
    train: Vec<TokenizedPair>,
    dev: Vec<TokenizedPair>,
    test: Option<Vec<TokenizedPair>>,
}

fn prepare(cfg: &RunConfig, corpus: &Corpus) -> Prepared {
    let words = build_word_vocab(&corpus.train, cfg.min_count);
    let chars = build_char_vocab(&corpus.train);
    let tok = |p: &[RawPair]| tokenize_pairs(p, &words, &chars);
    Prepared {
        train: tok(&corpus.train),
        dev: tok(&corpus.dev),
        test: corpus.test.as_deref().map(tok),
        words: words.clone(),
        chars: chars.clone(),
    }
}

/// One training run with explicit seeds.
fn fit<T: Scalar>(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    data: &Prepared,
    init_seed: u64,
    shuffle_seed: u64,
    verbose: bool,
) -> Result<(CsranModel<T>, TrainOutcome)> {
    let mut model = CsranModel::<T>::new(model_cfg.clone(), data.words.clone(), data.chars.clone(), init_seed)?;
    if let Some(path) = &cfg.embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let table = load_embeddings::<T>(path, &data.words, model_cfg.word_dim, &mut rng)?;
        if verbose {
            println!("embeddings: {} of {} words found ({:.1}%)", table.found, data.words.len() - 2, 100.0 * table.coverage());
        }
        model.set_embeddings(table)?;
    }
    let mut tc = cfg.train.clone();
    tc.shuffle_seed = shuffle_seed;
    let outcome = train(&mut model, &data.train, &data.dev, cfg.task, &tc, |r| {
        if verbose {
            println!(
                "epoch {:>3}  loss {:.6}  dev {:.6}  {:.2}s",
                r.epoch, r.train_loss, r.dev_metric, r.seconds
            );
        }
    })?;
    Ok((model, outcome))
}

fn dev_metric(cfg: &RunConfig) -> DevMetric {
    cfg.train.dev_metric.unwrap_or(DevMetric::default_for(cfg.task))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    cfg.validate_training()?;
    print_seeds(&cfg);
    let corpus = load_corpus(&mut cfg)?;
    cfg.model.validate()?;
    create_dir(&cfg.out_dir)?;
    let data = prepare(&cfg, &corpus);
    println!(
        "train={} dev={} words={} chars={} precision={}",
        data.train.len(),
        data.dev.len(),
        data.words.len(),
        data.chars.len(),
        cfg.model.precision.name()
    );
    match cfg.model.precision {
        Precision::F32 => train_and_write::<f32>(&cfg, &data),
        Precision::F64 => train_and_write::<f64>(&cfg, &data),
    }
}

fn train_and_write<T: Scalar>(cfg: &RunConfig, data: &Prepared) -> Result<Outcome> {
    let (model, outcome) = fit::<T>(cfg, &cfg.model, data, cfg.init_seed, cfg.train.shuffle_seed, true)?;
    println!("parameters={}", model.parameter_count());
    if outcome.truncated > 0 {
        println!("truncated_sequences={}", outcome.truncated);
    }
    let out = &cfg.out_dir;
    model.save(&out.join("checkpoint.json"))?;
    write_history(&out.join("history.tsv"), &outcome.history)?;
    if let Some(best) = outcome.best_epoch {
        println!("best_epoch={best} {}={:.6}", dev_metric(cfg), outcome.best_dev.unwrap_or(f64::NAN));
    }
    let dev = evaluate(&model, &data.dev, cfg.task, &cfg.train.batch)?;
    write_text(&out.join("dev_report.txt"), &dev.to_string())?;
    print!("{dev}");
    if let Some(test) = &data.test {
        let report = evaluate(&model, test, cfg.task, &cfg.train.batch)?;
        write_text(&out.join("test_report.txt"), &report.to_string())?;
    }
    if cfg.dump_affinity > 0 {
        dump_affinities(&model, &data.dev[..cfg.dump_affinity.min(data.dev.len())], cfg, &out.join("affinity"))?;
    }
    Ok(Outcome::Passed)
}

fn dump_affinities<T: Scalar>(model: &CsranModel<T>, pairs: &[TokenizedPair], cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for (i, pair) in pairs.iter().enumerate() {
        let mut truncated = 0;
        let batch = Batch::from_pairs(&[pair], &cfg.train.batch, &mut truncated);
        let mut g = Graph::with_params(&model.params);
        let fwd = model.net.forward::<T, ChaCha8Rng>(&mut g, &batch, None)?;
        let path = dir.join(format!("pair{i}.tsv"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_affinity_dump(&mut w, &g, &fwd.affinities[0], &batch.a.mask[0], &batch.b.mask[0])
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    cfg.validate_eval()?;
    let checkpoint = cfg.checkpoint.clone().expect("validated");
    match peek_precision(&checkpoint)? {
        Precision::F32 => eval_checkpoint::<f32>(&cfg, &checkpoint),
        Precision::F64 => eval_checkpoint::<f64>(&cfg, &checkpoint),
    }
}

fn eval_checkpoint<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<Outcome> {
    let model = CsranModel::<T>::load(checkpoint)?;
    let classes = model.config.num_classes;
    let pairs = match (cfg.synthetic, cfg.data_path.as_ref().or(cfg.test_path.as_ref())) {
        (Some(kind), _) => synthetic_dev(kind, cfg),
        (None, Some(path)) => read_pairs(path, cfg.task)?,
        (None, None) => unreachable!("validated"),
    };
    let expected = if cfg.is_set("num_classes") || cfg.synthetic.is_some() || cfg.task == TaskKind::Ranking {
        cfg.model.num_classes
    } else {
        (max_class(&[&pairs]) + 1).max(2)
    };
    if expected != classes {
        return Err(Error::config(
            "num_classes",
            format!("the data has {expected} classes but the checkpoint was trained on {classes}"),
        ));
    }
    let tokens = tokenize_pairs(&pairs, &model.words, &model.chars);
    let report = evaluate(&model, &tokens, cfg.task, &cfg.train.batch)?;
    print!("{report}");
    if cfg.is_set("out_dir") {
        create_dir(&cfg.out_dir)?;
        write_text(&cfg.out_dir.join("eval_report.txt"), &report.to_string())?;
    }
    Ok(Outcome::Passed)
}

/// The tiny model checked by `gradcheck`; explicitly set keys override it.
fn gradcheck_config(cfg: &RunConfig) -> ModelConfig {
    let mut m = ModelConfig {
        word_dim: 8,
        use_chars: true,
        char_dim: 4,
        char_hidden: 4,
        char_out: Some(4),
        use_highway: true,
        highway_depth: 1,
        encoder_hidden: 6,
        stack_depth: 2,
        agg_hidden: Some(4),
        agg_depth: 1,
        prediction_layers: 1,
        prediction_hidden: 8,
        num_classes: 2,
        fm_factors: 4,
        ..ModelConfig::default()
    };
    let src = &cfg.model;
    macro_rules! overlay {
        ($($field:ident),*) => {$(
            if cfg.is_set(stringify!($field)) {
                m.$field = src.$field.clone();
            }
        )*};
    }
    overlay!(
        word_dim, use_chars, char_dim, char_hidden, char_out, use_highway, highway_depth, encoder_hidden,
        stack_depth, agg_hidden, agg_depth, prediction_layers, prediction_hidden, use_mar, use_csra, fm_factors
    );
    m.dropout = 0.0;
    m.precision = Precision::F64;
    m
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let model_cfg = gradcheck_config(cfg);
    model_cfg.validate()?;
    let batch_size = if cfg.is_set("batch_size") { cfg.train.batch.batch_size } else { 2 };
    let max_len = if cfg.is_set("max_len") { cfg.train.batch.max_len } else { 5 };
    if batch_size == 0 || max_len == 0 {
        return Err(Error::config("batch_size", "batch size and max_len must be at least 1"));
    }
    print_seeds(cfg);
    let raw = gen_synthetic(SyntheticKind::Paraphrase, batch_size, cfg.data_seed);
    let words = build_word_vocab(&raw, 1);
    let chars = build_char_vocab(&raw);
    let pairs = tokenize_pairs(&raw, &words, &chars);
    let refs: Vec<&TokenizedPair> = pairs.iter().collect();
    let batch_cfg = csran::data::BatchConfig {
        batch_size,
        max_len,
        max_word_len: cfg.train.batch.max_word_len,
    };
    let mut truncated = 0;
    let batch = Batch::from_pairs(&refs, &batch_cfg, &mut truncated);
    let mut model = CsranModel::<f64>::new(model_cfg, words, chars, cfg.init_seed)?;
    println!("parameters={} fault={}", model.parameter_count(), cfg.fault.map_or("none".into(), |f| format!("{f:?}").to_lowercase()));
    let checks = check_gradients(&mut model, &batch, cfg.fault)?;
    println!("steps={}", GRADIENT_STEPS.map(|e| format!("{e:e}")).join(","));
    println!("group\tparams\telements\tkinks\ttolerance\tmax_rel_error\tworst_param\tstatus");
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{}\t{}\t{}\t{}\t{:e}\t{:.3e}\t{}\t{}",
            c.group,
            c.params,
            c.elements,
            c.kinks,
            c.tolerance,
            c.max_relative_error,
            c.worst_param,
            if c.passed() { "ok" } else { "FAIL" }
        );
        if !c.passed() {
            failed.push(c.group);
        }
    }
    if failed.is_empty() {
        Ok(Outcome::Passed)
    } else {
        Ok(Outcome::Failed(format!("gradient tolerance exceeded in {}", failed.join(", "))))
    }
}

/// Ablation variants as `(name, use_mar, use_csra)`.
pub const ABLATIONS: [(&str, bool, bool); 4] = [
    ("original", true, true),
    ("no_mar", false, true),
    ("no_csra", true, false),
    ("no_both", false, false),
];

/// Result of one training run inside a comparison.
#[derive(Debug, Clone, PartialEq)]
struct RunResult {
    params: usize,
    best_epoch: usize,
    dev: f64,
}

fn fit_summary(cfg: &RunConfig, model_cfg: &ModelConfig, data: &Prepared, seed: u64, shuffle: u64) -> Result<RunResult> {
    let run = |(params, outcome): (usize, TrainOutcome)| RunResult {
        params,
        best_epoch: outcome.best_epoch.unwrap_or(0),
        dev: outcome.best_dev.unwrap_or(f64::NAN),
    };
    Ok(match model_cfg.precision {
        Precision::F32 => fit::<f32>(cfg, model_cfg, data, seed, shuffle, false).map(|(m, o)| run((m.parameter_count(), o)))?,
        Precision::F64 => fit::<f64>(cfg, model_cfg, data, seed, shuffle, false).map(|(m, o)| run((m.parameter_count(), o)))?,
    })
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    cfg.validate_training()?;
    print_seeds(&cfg);
    let corpus = load_corpus(&mut cfg)?;
    cfg.model.validate()?;
    create_dir(&cfg.out_dir)?;
    let data = prepare(&cfg, &corpus);
    let metric = dev_metric(&cfg);
    let mut table = format!("variant\tuse_mar\tuse_csra\tparams\tbest_epoch\tdev_{metric}\n");
    let mut counts = Vec::new();
    for (name, mar, csra) in ABLATIONS {
        let mut m = cfg.model.clone();
        m.use_mar = mar;
        m.use_csra = csra;
        let r = fit_summary(&cfg, &m, &data, cfg.init_seed, cfg.train.shuffle_seed)?;
        eprintln!("{name}: {metric}={:.6} params={}", r.dev, r.params);
        writeln!(table, "{name}\t{mar}\t{csra}\t{}\t{}\t{:.6}", r.params, r.best_epoch, r.dev).unwrap();
        counts.push(r.params);
    }
    write_text(&cfg.out_dir.join("ablation.tsv"), &table)?;
    print!("{table}");
    let (original, no_mar, no_csra) = (counts[0], counts[1], counts[2]);
    let mut problems = Vec::new();
    if no_mar >= original {
        problems.push(format!("no_mar has {no_mar} parameters, original {original}"));
    }
    if no_csra != original {
        problems.push(format!("no_csra has {no_csra} parameters, original {original}"));
    }
    println!("parameter_audit={}", if problems.is_empty() { "ok" } else { "failed" });
    if problems.is_empty() {
        Ok(Outcome::Passed)
    } else {
        Ok(Outcome::Failed(problems.join("; ")))
    }
}

/// Depth-sweep variants as `(name, use_mar, use_csra)`.
pub const SWEEP_VARIANTS: [(&str, bool, bool); 2] = [("csran", true, true), ("baseline", false, false)];

pub fn cmd_depth_sweep(cfg: &RunConfig) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    cfg.validate_sweep()?;
    println!(
        "init_seed=shuffle_seed in {{{}}}",
        cfg.sweep_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    let corpus = load_corpus(&mut cfg)?;
    cfg.model.validate()?;
    create_dir(&cfg.out_dir)?;
    let data = prepare(&cfg, &corpus);

    let mut jobs = Vec::new();
    for &depth in &cfg.depths {
        for (name, mar, csra) in SWEEP_VARIANTS {
            for &seed in &cfg.sweep_seeds {
                let mut m = cfg.model.clone();
                m.stack_depth = depth;
                m.use_mar = mar;
                m.use_csra = csra;
                jobs.push((depth, name, seed, m));
            }
        }
    }
    let run = |(depth, name, seed, m): &(usize, &str, u64, ModelConfig)| {
        let r = fit_summary(&cfg, m, &data, *seed, *seed);
        if let Ok(r) = &r {
            eprintln!("depth {depth} {name} seed {seed}: {:.6}", r.dev);
        }
        r
    };
    let results: Result<Vec<RunResult>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || run(j))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
        })
    } else {
        jobs.iter().map(run).collect()
    };
    let results = results?;

    let metric = dev_metric(&cfg);
    let mut per_seed = format!("depth\tvariant\tseed\tdev_{metric}\n");
    let mut table = format!("depth\tvariant\tdev_{metric}\n");
    let n = cfg.sweep_seeds.len();
    for (chunk, results) in jobs.chunks(n).zip(results.chunks(n)) {
        let (depth, name) = (chunk[0].0, chunk[0].1);
        let mut sum = 0.0;
        for (job, r) in chunk.iter().zip(results) {
            let dev = r.dev;
            writeln!(per_seed, "{depth}\t{name}\t{}\t{dev:.6}", job.2).unwrap();
            sum += dev;
        }
        writeln!(table, "{depth}\t{name}\t{:.6}", sum / n as f64).unwrap();
    }
    write_text(&cfg.out_dir.join("depth_sweep.tsv"), &table)?;
    write_text(&cfg.out_dir.join("depth_sweep_seeds.tsv"), &per_seed)?;
    print!("{per_seed}");
    print!("{table}");
    Ok(Outcome::Passed)
}
