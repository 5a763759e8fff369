//! Batch orchestration: runs decoding over task instances with a worker
//! pool, ranks candidates, writes JSONL outputs, and produces manifests
//! whose hashes make runs verifiable after the fact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::ConstraintSpec;
use crate::corpus::{TaskInstance, TaskKind};
use crate::decode::{
    greedy_continuation, run, segmented_run, DecodeConfig, DecodeTrace, HarvestMode, SamplingMode,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::LMParams;
use crate::ranker::{
    rank_abductive, rank_counterfactual, sentence_split, CoherenceModel, RankedCandidate,
};
use crate::util::stable_hash64;
use crate::vocab::{TokenSeq, Vocab};

/// Default temperature of the counterfactual KL relaxation.
pub const DEFAULT_TAU_KL: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Delorean,
    Zeroshot,
    ZeroshotRanked,
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<RunMode> {
        match s {
            "delorean" => Ok(RunMode::Delorean),
            "zeroshot" => Ok(RunMode::Zeroshot),
            "zeroshot-ranked" => Ok(RunMode::ZeroshotRanked),
            other => Err(Error::ConfigError(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub workers: usize,
    /// Abductive KL prefix handling; see the constraint module.
    pub prefix_mode: bool,
    pub tau_kl: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: RunMode::Delorean,
            seed: 0,
            workers: 1,
            prefix_mode: false,
            tau_kl: DEFAULT_TAU_KL,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub text: String,
    pub ranking_score: f64,
    pub rank: usize,
    pub iteration: usize,
    pub config_id: usize,
    pub incomplete: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub task: TaskKind,
    /// Top-ranked hypothesis text.
    pub output: String,
    pub candidates: Vec<CandidateRecord>,
    /// Kept out of the serialized record: traces carry wall-clock timings,
    /// which would break byte-identical reproducibility of outputs.jsonl.
    /// The CLI writes them separately under --trace-out.
    #[serde(skip)]
    pub traces: Vec<DecodeTrace>,
}

/// Per-instance seed derived from the global seed and the instance id, so
/// results do not depend on worker count or scheduling.
pub fn instance_seed(global_seed: u64, id: &str) -> u64 {
    stable_hash64(&[&global_seed.to_le_bytes(), id.as_bytes()])
}

fn to_records(vocab: &Vocab, ranked: &[RankedCandidate]) -> Vec<CandidateRecord> {
    ranked
        .iter()
        .map(|r| CandidateRecord {
            text: vocab.decode(&r.candidate.tokens),
            ranking_score: r.ranking_score,
            rank: r.rank,
            iteration: r.candidate.iteration,
            config_id: r.candidate.config_id,
            incomplete: r.candidate.incomplete,
        })
        .collect()
}

fn zeroshot_config(mut cfg: DecodeConfig) -> DecodeConfig {
    cfg.mix_weight = 1.0;
    cfg.backward_steps = 0;
    cfg.iterations = 1;
    cfg.schedule = Vec::new();
    cfg.sampling = SamplingMode::Greedy;
    cfg.harvest = HarvestMode::PerIteration;
    cfg
}

fn zeroshot_ranked_config(mut cfg: DecodeConfig) -> DecodeConfig {
    cfg.mix_weight = 1.0;
    cfg.backward_steps = 0;
    cfg.iterations = 20;
    cfg.schedule = Vec::new();
    cfg.sampling = SamplingMode::TopK(40);
    cfg.tau_sample = 0.7;
    cfg.harvest = HarvestMode::PerIteration;
    cfg
}

/// Decodes and ranks a single instance.
pub fn decode_instance(
    lm: &LMParams,
    ranker: &CoherenceModel,
    vocab: &Vocab,
    inst: &TaskInstance,
    cfg: &PipelineConfig,
) -> Result<InstanceResult> {
    let seed = instance_seed(cfg.seed, &inst.id);
    let x = vocab.encode(&inst.x)?;
    let z = vocab.encode(&inst.z)?;
    let (candidates, traces) = match inst.task {
        TaskKind::Abductive => {
            let mut dc = DecodeConfig::abductive_default();
            dc.seed = seed;
            let dc = match cfg.mode {
                RunMode::Delorean => dc,
                RunMode::Zeroshot => zeroshot_config(dc),
                RunMode::ZeroshotRanked => zeroshot_ranked_config(dc),
            };
            let constraint = ConstraintSpec::abductive(cfg.prefix_mode);
            run(lm, &constraint, &x, &z, &dc)?
        }
        TaskKind::Counterfactual => {
            let mut dc = DecodeConfig::counterfactual_default();
            dc.seed = seed;
            let dc = match cfg.mode {
                RunMode::Delorean => dc,
                RunMode::Zeroshot => zeroshot_config(dc),
                RunMode::ZeroshotRanked => zeroshot_ranked_config(dc),
            };
            let constraint = ConstraintSpec::counterfactual(cfg.tau_kl);
            let segments = sentence_split(&z);
            segmented_run(lm, &constraint, &x, &segments, &dc)?
        }
    };
    let ranked = match inst.task {
        TaskKind::Abductive => rank_abductive(ranker, &x, candidates, &z)?,
        TaskKind::Counterfactual => rank_counterfactual(ranker, &x, candidates)?,
    };
    Ok(InstanceResult {
        id: inst.id.clone(),
        task: inst.task,
        output: vocab.decode(&ranked[0].candidate.tokens),
        candidates: to_records(vocab, &ranked),
        traces,
    })
}

/// Runs all instances over a pool of `cfg.workers` threads. Output order
/// matches input order regardless of worker count.
pub fn run_pipeline(
    lm: &LMParams,
    ranker: &CoherenceModel,
    vocab: &Vocab,
    instances: &[TaskInstance],
    cfg: &PipelineConfig,
) -> Result<Vec<InstanceResult>> {
    if cfg.workers == 0 {
        return Err(Error::ConfigError("workers must be >= 1".into()));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<InstanceResult>>>> =
        Mutex::new((0..instances.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(instances.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= instances.len() {
                    break;
                }
                let r = decode_instance(lm, ranker, vocab, &instances[i], cfg);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("worker pool left an instance unprocessed"))
        .collect()
}

/// Per-instance decode traces, keyed by instance id, as one JSON document.
pub fn write_traces_json(results: &[InstanceResult], path: &Path) -> Result<()> {
    let map: BTreeMap<&str, &[DecodeTrace]> = results
        .iter()
        .map(|r| (r.id.as_str(), r.traces.as_slice()))
        .collect();
    let s = serde_json::to_string_pretty(&map)
        .map_err(|e| Error::Invalid(format!("serialize traces: {e}")))?;
    fs::write(path, s)?;
    Ok(())
}

/// One JSON document per line; deterministic given the results.
pub fn write_results_jsonl(results: &[InstanceResult], path: &Path) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for r in results {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Invalid(format!("serialize result: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<InstanceResult>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| Error::ParseError {
                line: i + 1,
                msg: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    /// Content hashes of input files, keyed by file name.
    pub inputs: BTreeMap<String, String>,
    /// Content hashes of produced files, keyed by file name relative to the
    /// manifest location.
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

impl Manifest {
    pub fn build(
        config_bytes: &[u8],
        seed: u64,
        input_paths: &[&Path],
        output_paths: &[&Path],
        started: Instant,
    ) -> Result<Manifest> {
        let name = |p: &Path| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        };
        let mut inputs = BTreeMap::new();
        for p in input_paths {
            inputs.insert(name(p), sha256_file(p)?);
        }
        let mut outputs = BTreeMap::new();
        for p in output_paths {
            outputs.insert(name(p), sha256_file(p)?);
        }
        Ok(Manifest {
            config_sha256: sha256_hex(config_bytes),
            seed,
            inputs,
            outputs,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("serialize manifest: {e}")))?;
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let s = fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::ParseError {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Re-hashes every output file next to the manifest and reports any
    /// mismatches by name.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, want) in &self.outputs {
            let p = dir.join(name);
            match sha256_file(&p) {
                Ok(got) if &got == want => {}
                _ => bad.push(name.clone()),
            }
        }
        Ok(bad)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_instance: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
    pub corpus_bleu: f64,
}

/// Scores each result's top output against the instance's gold text.
pub fn evaluate(
    embeddings: &Array2<f64>,
    vocab: &Vocab,
    instances: &[TaskInstance],
    results: &[InstanceResult],
) -> Result<EvalSummary> {
    if instances.len() != results.len() {
        return Err(Error::LengthMismatch {
            expected: instances.len(),
            got: results.len(),
        });
    }
    let mut per_instance = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    let mut bleu_pairs: Vec<(TokenSeq, Vec<TokenSeq>)> = Vec::with_capacity(results.len());
    for (inst, res) in instances.iter().zip(results) {
        if inst.id != res.id {
            return Err(Error::Invalid(format!(
                "result id {} does not match instance id {}",
                res.id, inst.id
            )));
        }
        let hyp = vocab.encode(&res.output)?;
        let gold = vocab.encode(&inst.gold)?;
        let report = metrics::report(embeddings, &hyp, &gold)?;
        per_instance.push((inst.id.clone(), report));
        reports.push(report);
        bleu_pairs.push((hyp, vec![gold]));
    }
    let mean = metrics::mean_report(&reports).ok_or(Error::EmptyReference)?;
    let corpus_bleu = metrics::bleu4_corpus(&bleu_pairs)?;
    Ok(EvalSummary {
        per_instance,
        mean,
        corpus_bleu,
    })
}

/// Greedy zero-shot continuation for baselines that bypass ranking entirely.
pub fn greedy_baseline(
    lm: &LMParams,
    vocab: &Vocab,
    x_text: &str,
    n: usize,
    budget: usize,
) -> Result<String> {
    let x = vocab.encode(x_text)?;
    let (tokens, _, _) = greedy_continuation(lm, &x, n, budget)?;
    Ok(vocab.decode(&tokens))
}
