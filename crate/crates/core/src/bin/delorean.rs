//! Batch CLI for corpus generation, model training, constrained decoding,
//! and evaluation. Every command writes a manifest with content hashes so a
//! run can be verified later.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing file,
//! 4 parse/schema error, 5 training failure, 6 decode failure, 7 internal.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use delorean::checkpoint;
use delorean::corpus::{
    self, generate_corpus, make_abductive, make_counterfactual, GoldSpan, RuleTable, TaskKind,
};
use delorean::error::Error;
use delorean::metrics;
use delorean::pipeline::{self, evaluate, run_pipeline, Manifest, PipelineConfig, RunMode};
use delorean::ranker::{train_ranker, CoherenceModel};
use delorean::train::train_lm;
use delorean::vocab::TokenSeq;

const CONFIG_ENV: &str = "DELOREAN_CONFIG";

#[derive(Parser)]
#[command(
    name = "delorean",
    about = "Constrained decoding by forward/backward logit refinement",
    after_help = "Exit codes:\n  0  success\n  2  configuration error\n  3  missing input file\n  \
4  parse or schema error\n  5  training failure\n  6  decode failure\n  7  internal error\n\n\
The default --config path may be set via the DELOREAN_CONFIG environment variable."
)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic story corpus and task instances.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Train the language model.
    Lm {
        #[command(subcommand)]
        action: LmAction,
    },
    /// Train the coherence ranker.
    Ranker {
        #[command(subcommand)]
        action: RankerAction,
    },
    /// Decode task instances and rank candidates.
    Decode(DecodeArgs),
    /// Score decoded outputs against gold references.
    Eval(EvalArgs),
    /// Print the metric table and the configuration echo of a finished run.
    Report {
        /// Run directory containing report.json and config.snapshot.toml.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Re-hash a run's outputs against its manifest.
    Verify {
        /// Path to a manifest.json.
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    Gen(CorpusGenArgs),
}

#[derive(Subcommand)]
enum LmAction {
    Train(TrainArgs),
}

#[derive(Subcommand)]
enum RankerAction {
    Train(TrainArgs),
}

#[derive(Args)]
struct CorpusGenArgs {
    /// Task instances to derive: abductive or counterfactual.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    n_stories: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint output path override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// abductive or counterfactual; defaults to the dataset's mix.
    #[arg(long)]
    task: Option<String>,
    /// delorean, zeroshot, or zeroshot-ranked.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Where to write decode traces (JSON). Default: <out-dir>/traces/traces.json.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Dataset JSONL override.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset JSONL override.
    #[arg(long)]
    data: Option<PathBuf>,
    /// outputs.jsonl to score; defaults to <out-dir>/outputs.jsonl.
    #[arg(long)]
    outputs: Option<PathBuf>,
}

// ---------------------------------------------------------------- config --

use delorean::config::{parse_run_config, RunConfig};

fn load_config(cli: &Cli) -> Result<(RunConfig, String), Error> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var(CONFIG_ENV).ok().map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("config file {} not found", p.display()),
                )));
            }
            parse_run_config(&fs::read_to_string(&p)?)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    let snapshot = cfg.to_toml()?;
    Ok((cfg, snapshot))
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::ConfigError(_) => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Error::ParseError { .. }
        | Error::SchemaError { .. }
        | Error::CheckpointVersion { .. }
        | Error::UnknownToken(_) => 4,
        Error::DivergedTraining { .. } => 5,
        Error::NonFiniteGradient(_) | Error::ContextOverflow { .. } | Error::LengthMismatch { .. } => 6,
        _ => 7,
    }
}

fn ensure_dir(p: &Path) -> Result<(), Error> {
    fs::create_dir_all(p)?;
    Ok(())
}

fn require_file(p: &Path) -> Result<(), Error> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", p.display()),
        )))
    }
}

// -------------------------------------------------------------- commands --

fn cmd_corpus_gen(cfg: &RunConfig, snapshot: &str, args: &CorpusGenArgs) -> Result<(), Error> {
    let started = Instant::now();
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let n = args.n_stories.unwrap_or(cfg.corpus.n_stories);
    let stories = generate_corpus(&table, n, cfg.corpus.seed);
    let task: TaskKind = match args.task.as_deref().unwrap_or("abductive") {
        "abductive" => TaskKind::Abductive,
        "counterfactual" => TaskKind::Counterfactual,
        other => return Err(Error::ConfigError(format!("unknown task '{other}'"))),
    };
    let mut instances = Vec::with_capacity(stories.len());
    for (i, s) in stories.iter().enumerate() {
        instances.push(match task {
            TaskKind::Abductive => make_abductive(&vocab, s, i, GoldSpan::Middle3),
            TaskKind::Counterfactual => {
                make_counterfactual(&table, &vocab, s, i, cfg.corpus.seed.wrapping_add(i as u64))
            }
        });
    }
    if let Some(dir) = cfg.paths.dataset.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    corpus::write_jsonl_file(&cfg.paths.dataset, &instances)?;
    let manifest = Manifest::build(
        snapshot.as_bytes(),
        cfg.corpus.seed,
        &[],
        &[&cfg.paths.dataset],
        started,
    )?;
    manifest.save(&manifest_path(&cfg.paths.dataset))?;
    println!(
        "wrote {} {} instances to {}",
        instances.len(),
        match task {
            TaskKind::Abductive => "abductive",
            TaskKind::Counterfactual => "counterfactual",
        },
        cfg.paths.dataset.display()
    );
    Ok(())
}

fn manifest_path(output: &Path) -> PathBuf {
    output.with_extension("manifest.json")
}

fn training_stories(cfg: &RunConfig) -> Vec<corpus::Story> {
    let table = RuleTable::standard();
    // The ranker needs combination diversity more than event coverage, so it
    // trains on fully independent draws rather than the framed corpus.
    corpus::generate_stories_iid(&table, cfg.corpus.n_stories, cfg.corpus.seed)
}

fn cmd_lm_train(cfg: &RunConfig, snapshot: &str, args: &TrainArgs) -> Result<(), Error> {
    let started = Instant::now();
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let stories: Vec<TokenSeq> = generate_corpus(&table, cfg.corpus.n_stories, cfg.corpus.seed)
        .iter()
        .map(|s| s.full())
        .collect();
    let shape = delorean::model::LMShape::desk(vocab.size());
    let mut tc = cfg.lm_train.clone();
    tc.seed = cfg.seed;
    let (params, stats) = train_lm(&stories, shape, &tc)?;
    let out = args.out.clone().unwrap_or(cfg.paths.lm_checkpoint.clone());
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    checkpoint::save_lm(&params, &vocab, &out)?;
    let manifest = Manifest::build(snapshot.as_bytes(), cfg.seed, &[], &[&out], started)?;
    manifest.save(&manifest_path(&out))?;
    println!(
        "trained LM on {} stories, final val loss {:.4}, saved {}",
        stories.len(),
        stats.final_val_loss,
        out.display()
    );
    Ok(())
}

fn cmd_ranker_train(cfg: &RunConfig, snapshot: &str, args: &TrainArgs) -> Result<(), Error> {
    let started = Instant::now();
    let table = RuleTable::standard();
    let vocab = table.vocab();
    let stories = training_stories(cfg);
    let shape = CoherenceModel::desk_shape(vocab.size());
    let mut tc = cfg.ranker_train.clone();
    tc.seed = cfg.seed;
    let (model, acc) = train_ranker(&table, &stories, shape, &tc)?;
    let out = args
        .out
        .clone()
        .unwrap_or(cfg.paths.ranker_checkpoint.clone());
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    checkpoint::save_ranker(&model, &vocab, &out)?;
    let manifest = Manifest::build(snapshot.as_bytes(), cfg.seed, &[], &[&out], started)?;
    manifest.save(&manifest_path(&out))?;
    println!(
        "trained ranker on {} stories, held-out accuracy {acc:.4}, saved {}",
        stories.len(),
        out.display()
    );
    Ok(())
}

fn cmd_decode(cfg: &RunConfig, snapshot: &str, args: &DecodeArgs) -> Result<(), Error> {
    let started = Instant::now();
    let data = args.data.clone().unwrap_or(cfg.paths.dataset.clone());
    require_file(&data)?;
    require_file(&cfg.paths.lm_checkpoint)?;
    require_file(&cfg.paths.ranker_checkpoint)?;
    let lm_ckpt = checkpoint::load_lm(&cfg.paths.lm_checkpoint)?;
    let rk_ckpt = checkpoint::load_ranker(&cfg.paths.ranker_checkpoint)?;
    let mut instances = corpus::read_jsonl_file(&data)?;
    if let Some(task) = &args.task {
        let want = match task.as_str() {
            "abductive" => TaskKind::Abductive,
            "counterfactual" => TaskKind::Counterfactual,
            other => return Err(Error::ConfigError(format!("unknown task '{other}'"))),
        };
        instances.retain(|i| i.task == want);
    }
    let mode: RunMode = args
        .mode
        .as_deref()
        .unwrap_or(&cfg.decode.mode)
        .parse()?;
    let pc = PipelineConfig {
        mode,
        seed: cfg.seed,
        workers: args.workers.unwrap_or(cfg.decode.workers),
        prefix_mode: cfg.decode.prefix_mode,
        tau_kl: cfg.decode.tau_kl,
    };
    let results = run_pipeline(&lm_ckpt.params, &rk_ckpt.model, &lm_ckpt.vocab, &instances, &pc)?;

    let out_dir = &cfg.paths.out_dir;
    ensure_dir(out_dir)?;
    fs::write(out_dir.join("config.snapshot.toml"), snapshot)?;
    let outputs = out_dir.join("outputs.jsonl");
    pipeline::write_results_jsonl(&results, &outputs)?;
    let trace_path = match &args.trace_out {
        Some(p) => p.clone(),
        None => {
            let d = out_dir.join("traces");
            ensure_dir(&d)?;
            d.join("traces.json")
        }
    };
    pipeline::write_traces_json(&results, &trace_path)?;
    let manifest = Manifest::build(
        snapshot.as_bytes(),
        cfg.seed,
        &[&data, &cfg.paths.lm_checkpoint, &cfg.paths.ranker_checkpoint],
        &[&outputs],
        started,
    )?;
    manifest.save(&out_dir.join("manifest.json"))?;
    println!(
        "decoded {} instances ({:?} mode) into {}",
        results.len(),
        pc.mode,
        outputs.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, snapshot: &str, args: &EvalArgs) -> Result<(), Error> {
    let started = Instant::now();
    let data = args.data.clone().unwrap_or(cfg.paths.dataset.clone());
    let outputs = args
        .outputs
        .clone()
        .unwrap_or(cfg.paths.out_dir.join("outputs.jsonl"));
    require_file(&data)?;
    require_file(&outputs)?;
    require_file(&cfg.paths.lm_checkpoint)?;
    let lm_ckpt = checkpoint::load_lm(&cfg.paths.lm_checkpoint)?;
    let instances = corpus::read_jsonl_file(&data)?;
    let results = pipeline::read_results_jsonl(&outputs)?;
    // Evaluate the intersection, in result order.
    let by_id: std::collections::HashMap<&str, &corpus::TaskInstance> =
        instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut paired = Vec::new();
    for r in &results {
        match by_id.get(r.id.as_str()) {
            Some(inst) => paired.push(((*inst).clone(), r.clone())),
            None => {
                return Err(Error::SchemaError {
                    field: format!("output id {} not in dataset", r.id),
                })
            }
        }
    }
    let insts: Vec<corpus::TaskInstance> = paired.iter().map(|(i, _)| i.clone()).collect();
    let ress: Vec<pipeline::InstanceResult> = paired.into_iter().map(|(_, r)| r).collect();
    let summary = evaluate(&lm_ckpt.params.emb, &lm_ckpt.vocab, &insts, &ress)?;

    let out_dir = &cfg.paths.out_dir;
    ensure_dir(out_dir)?;
    let report_json = out_dir.join("report.json");
    fs::write(
        &report_json,
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Invalid(format!("serialize report: {e}")))?,
    )?;
    let table = metrics::format_table(&[
        ("mean".to_string(), summary.mean),
        (
            "corpus".to_string(),
            metrics::MetricReport {
                bleu4: summary.corpus_bleu,
                ..summary.mean
            },
        ),
    ]);
    let report_txt = out_dir.join("report.txt");
    fs::write(&report_txt, &table)?;
    fs::write(out_dir.join("config.snapshot.toml"), snapshot)?;
    let manifest = Manifest::build(
        snapshot.as_bytes(),
        cfg.seed,
        &[&data, &outputs],
        &[&report_json, &report_txt],
        started,
    )?;
    manifest.save(&out_dir.join("eval.manifest.json"))?;
    print!("{table}");
    Ok(())
}

fn cmd_report(cfg: &RunConfig, dir: &Option<PathBuf>) -> Result<(), Error> {
    let dir = dir.clone().unwrap_or(cfg.paths.out_dir.clone());
    let report_json = dir.join("report.json");
    require_file(&report_json)?;
    let summary: pipeline::EvalSummary = serde_json::from_str(&fs::read_to_string(&report_json)?)
        .map_err(|e| Error::ParseError {
            line: e.line(),
            msg: e.to_string(),
        })?;
    let table = metrics::format_table(&[("mean".to_string(), summary.mean)]);
    print!("{table}");
    println!("corpus BLEU-4: {:.4}", summary.corpus_bleu);
    println!("instances: {}", summary.per_instance.len());
    let snap = dir.join("config.snapshot.toml");
    if snap.exists() {
        println!("--- configuration used ---");
        print!("{}", fs::read_to_string(&snap)?);
    }
    Ok(())
}

fn cmd_verify(manifest: &Path) -> Result<(), Error> {
    require_file(manifest)?;
    let m = Manifest::load(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let bad = m.verify(dir)?;
    if bad.is_empty() {
        println!("ok: {} output(s) match the manifest", m.outputs.len());
        Ok(())
    } else {
        Err(Error::SchemaError {
            field: format!("hash mismatch: {}", bad.join(", ")),
        })
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (cfg, snapshot) = load_config(cli)?;
    match &cli.command {
        Command::Corpus {
            action: CorpusAction::Gen(args),
        } => cmd_corpus_gen(&cfg, &snapshot, args),
        Command::Lm {
            action: LmAction::Train(args),
        } => cmd_lm_train(&cfg, &snapshot, args),
        Command::Ranker {
            action: RankerAction::Train(args),
        } => cmd_ranker_train(&cfg, &snapshot, args),
        Command::Decode(args) => cmd_decode(&cfg, &snapshot, args),
        Command::Eval(args) => cmd_eval(&cfg, &snapshot, args),
        Command::Report { dir } => cmd_report(&cfg, dir),
        Command::Verify { manifest } => cmd_verify(manifest),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
