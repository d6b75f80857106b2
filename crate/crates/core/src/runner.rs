//! Paired bijective / non-bijective experiments.
//!
//! Each run draws one ciphered set and one cipher pair from its seed
//! (`base_seed + run`). Every test instance gets one demo sample, rendered
//! once per condition, so the two conditions differ only in the cipher map.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backends::{Backend, BackendError, Completion, Query};
use crate::cipher::{CipherError, CipherPair, CipherSpec};
use crate::corpus::{DemoPool, Instance, InstanceBody, TaskKind};
use crate::lexicon::{EligibleSet, ZipfBins};
use crate::prompting::{render_prompt, Cipher, PromptError};
use crate::rng;
use crate::sampling::{self, SampleMode, SamplePlan, SamplingError};
use crate::tokenization::{TokenizerError, TokenizerSpec};

/// Runs abort when more than this share of instances is skipped.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("experiment config: {0}")]
    Config(String),
    #[error("scoring: {0}")]
    Scoring(String),
    #[error("run {run}: {skipped} of {total} instances skipped, above the 10% limit")]
    PartialRun {
        run: u32,
        skipped: usize,
        total: usize,
        path: Option<PathBuf>,
    },
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    GenerationParse,
    OptionScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "bij")]
    Bijective,
    #[serde(rename = "nonbij")]
    NonBijective,
}

fn default_k() -> usize {
    10
}
fn default_runs() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_sample_mode() -> SampleMode {
    SampleMode::Priority
}
fn default_scoring() -> ScoringMode {
    ScoringMode::GenerationParse
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Dataset label used in reports.
    pub dataset: String,
    pub r: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    pub n: usize,
    #[serde(default = "default_sample_mode")]
    pub sample_mode: SampleMode,
    #[serde(default = "default_scoring")]
    pub scoring: ScoringMode,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_true")]
    pub space_partition: bool,
    #[serde(default)]
    pub pos_filter: Option<BTreeSet<String>>,
    /// Sample demos separately for the non-bijective condition.
    #[serde(default)]
    pub independent_sampling: bool,
    /// Classification label set; derived from the data when empty.
    #[serde(default)]
    pub labels: Vec<String>,
}

impl ExperimentConfig {
    pub fn new(name: &str, dataset: &str, r: f64, n: usize) -> Self {
        ExperimentConfig {
            name: name.into(),
            dataset: dataset.into(),
            r,
            k: default_k(),
            n,
            sample_mode: default_sample_mode(),
            scoring: default_scoring(),
            runs: default_runs(),
            base_seed: 0,
            space_partition: true,
            pos_filter: None,
            independent_sampling: false,
            labels: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.into()));
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.r) {
            return bad("r must lie in [0, 1]");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a non-empty path segment");
        }
        Ok(())
    }

    pub fn run_seed(&self, run: u32) -> u64 {
        self.base_seed.wrapping_add(u64::from(run))
    }

    fn cipher_spec(&self, seed: u64) -> CipherSpec {
        CipherSpec {
            seed,
            r: self.r,
            space_partition: self.space_partition,
            pos_filter: self.pos_filter.clone(),
        }
    }
}

/// One condition of one instance in one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRow {
    pub instance_id: String,
    pub run: u32,
    pub condition: Condition,
    pub correct: bool,
    pub prediction: String,
    pub demo_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// The data and model an experiment runs against.
pub struct Experiment<'a> {
    pub tokenizer: &'a TokenizerSpec,
    pub pool: &'a DemoPool,
    pub tests: &'a [Instance],
    pub eligible: &'a EligibleSet,
    pub bins: &'a ZipfBins,
    pub backend: &'a dyn Backend,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run: u32,
    pub meta: Value,
    pub rows: Vec<ResultRow>,
}

impl RunOutput {
    pub fn skipped(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.condition == Condition::Bijective && r.skipped.is_some())
            .count()
    }

    pub fn instances(&self) -> usize {
        self.rows.len() / 2
    }
}

/// Decides whether a completion is correct. Returns the verdict and the
/// prediction to record.
pub fn score_prediction(
    completion: &Completion,
    instance: &Instance,
    mode: ScoringMode,
    labels: &[String],
) -> Result<(bool, String), RunError> {
    match mode {
        ScoringMode::GenerationParse => {
            let verdict = match &instance.body {
                InstanceBody::Classification { label, .. } => first_label(&completion.text, labels)
                    .is_some_and(|l| l.eq_ignore_ascii_case(label)),
                InstanceBody::MultipleChoice {
                    options, answer, ..
                } => first_marker(&completion.text, options.len()) == Some(*answer),
            };
            Ok((verdict, completion.text.clone()))
        }
        ScoringMode::OptionScore => {
            let scores = completion.option_scores.as_ref().ok_or_else(|| {
                RunError::Scoring("option scoring requested but backend returned no scores".into())
            })?;
            let (gold, n) = match &instance.body {
                InstanceBody::Classification { label, .. } => (
                    labels.iter().position(|l| l.eq_ignore_ascii_case(label)),
                    labels.len(),
                ),
                InstanceBody::MultipleChoice {
                    options, answer, ..
                } => (answer.checked_sub(1), options.len()),
            };
            if scores.len() != n {
                return Err(RunError::Scoring(format!(
                    "{} scores for {n} candidates",
                    scores.len()
                )));
            }
            let best = argmax_unique(scores);
            let prediction = match (best, &instance.body) {
                (Some(i), InstanceBody::Classification { .. }) => labels[i].clone(),
                (Some(i), InstanceBody::MultipleChoice { .. }) => format!("({})", i + 1),
                (None, _) => String::new(),
            };
            Ok((best.is_some() && best == gold, prediction))
        }
    }
}

fn argmax_unique(scores: &[f64]) -> Option<usize> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hits = scores.iter().enumerate().filter(|(_, &s)| s == max);
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) if max.is_finite() => Some(i),
        _ => None,
    }
}

/// Earliest case-insensitive label occurrence; the longer label wins a tie.
fn first_label<'l>(text: &str, labels: &'l [String]) -> Option<&'l str> {
    let lower = text.to_lowercase();
    labels
        .iter()
        .filter(|l| !l.is_empty())
        .filter_map(|l| lower.find(&l.to_lowercase()).map(|pos| (pos, l)))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())))
        .map(|(_, l)| l.as_str())
}

fn first_marker(text: &str, n_options: usize) -> Option<usize> {
    (1..=n_options)
        .filter_map(|k| text.find(&format!("({k})")).map(|pos| (pos, k)))
        .min()
        .map(|(_, k)| k)
}

/// Sorted distinct labels over classification instances.
pub fn derive_labels<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Vec<String> {
    instances
        .into_iter()
        .filter_map(|i| i.label().map(str::to_string))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn candidates(instance: &Instance, labels: &[String]) -> Vec<String> {
    match &instance.body {
        InstanceBody::Classification { .. } => labels.iter().map(|l| format!(" {l}")).collect(),
        InstanceBody::MultipleChoice { options, .. } => {
            (1..=options.len()).map(|k| format!(" ({k})")).collect()
        }
    }
}

struct Outcome {
    correct: bool,
    prediction: String,
}

fn rows_for(
    test: &Instance,
    run: u32,
    demo_ids: [Vec<String>; 2],
    result: Result<[Outcome; 2], String>,
) -> [ResultRow; 2] {
    let [bij_ids, nonbij_ids] = demo_ids;
    let row = |condition, ids, outcome: Option<&Outcome>, skipped: Option<String>| ResultRow {
        instance_id: test.id.clone(),
        run,
        condition,
        correct: outcome.is_some_and(|o| o.correct),
        prediction: outcome.map(|o| o.prediction.clone()).unwrap_or_default(),
        demo_ids: ids,
        skipped,
    };
    match result {
        Ok([b, nb]) => [
            row(Condition::Bijective, bij_ids, Some(&b), None),
            row(Condition::NonBijective, nonbij_ids, Some(&nb), None),
        ],
        Err(reason) => [
            row(Condition::Bijective, bij_ids, None, Some(reason.clone())),
            row(Condition::NonBijective, nonbij_ids, None, Some(reason)),
        ],
    }
}

/// Evaluates one run in memory.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    exp: &Experiment<'_>,
    run: u32,
) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let seed = cfg.run_seed(run);
    let pair = CipherPair::generate(
        &cfg.cipher_spec(seed),
        exp.eligible,
        exp.bins,
        exp.tokenizer.vocab(),
    )?;
    let labels = if cfg.labels.is_empty() {
        derive_labels(exp.pool.instances().iter().chain(exp.tests))
    } else {
        cfg.labels.clone()
    };
    let plan = SamplePlan {
        n: cfg.n,
        mode: cfg.sample_mode,
        seed,
    };
    let nonbij_plan = SamplePlan {
        seed: rng::derive_seed(seed, &[rng::hash_str("independent")]),
        ..plan
    };

    let eval = |test: &Instance| -> Result<[ResultRow; 2], RunError> {
        let tokens = test.input_tokens(exp.tokenizer)?;
        let bij_demos = sampling::sample(&plan, exp.pool, &test.id, &tokens, &pair.set)?;
        let nonbij_demos = if cfg.independent_sampling {
            sampling::sample(&nonbij_plan, exp.pool, &test.id, &tokens, &pair.set)?
        } else {
            bij_demos.clone()
        };
        let ids = |d: &[usize]| d.iter().map(|&i| exp.pool.get(i).id.clone()).collect();
        let demo_ids = [ids(&bij_demos), ids(&nonbij_demos)];
        let cands = candidates(test, &labels);
        let cands = (cfg.scoring == ScoringMode::OptionScore).then_some(cands.as_slice());

        let mut outcomes = Vec::with_capacity(2);
        for (demos, cipher) in [
            (&bij_demos, Cipher::Bijective(&pair.bijective)),
            (&nonbij_demos, Cipher::NonBijective(&pair.non_bijective)),
        ] {
            let demo_refs: Vec<&Instance> = demos.iter().map(|&i| exp.pool.get(i)).collect();
            let prompt = render_prompt(exp.tokenizer, &demo_refs, test, cipher)?;
            let query = Query {
                prompt: &prompt,
                kind: test.kind(),
                candidates: cands,
                ciphered_set: &pair.set,
            };
            match exp.backend.complete(&query) {
                Ok(c) => {
                    let (correct, prediction) = score_prediction(&c, test, cfg.scoring, &labels)?;
                    outcomes.push(Outcome {
                        correct,
                        prediction,
                    });
                }
                Err(e) => {
                    log::warn!("instance {}: {e}", test.id);
                    return Ok(rows_for(test, run, demo_ids, Err(skip_reason(&e))));
                }
            }
        }
        let nb = outcomes.pop().expect("two outcomes");
        let b = outcomes.pop().expect("two outcomes");
        Ok(rows_for(test, run, demo_ids, Ok([b, nb])))
    };

    let threads = exp
        .backend
        .max_in_flight()
        .min(std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
    let pairs: Vec<[ResultRow; 2]> =
        workers.install(|| exp.tests.par_iter().map(eval).collect::<Result<_, _>>())?;
    let rows: Vec<ResultRow> = pairs.into_iter().flatten().collect();

    let meta = json!({
        "name": cfg.name,
        "dataset": cfg.dataset,
        "run": run,
        "run_seed": seed,
        "base_seed": cfg.base_seed,
        "runs": cfg.runs,
        "r": cfg.r,
        "k": cfg.k,
        "n": cfg.n,
        "sample_mode": cfg.sample_mode,
        "scoring": cfg.scoring,
        "independent_sampling": cfg.independent_sampling,
        "space_partition": cfg.space_partition,
        "pos_filter": cfg.pos_filter,
        "labels": labels,
        "backend": exp.backend.name(),
        "tokenizer": exp.tokenizer.mode(),
        "ciphered_set_size": pair.set.len(),
        "test_instances": exp.tests.len(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    Ok(RunOutput { run, meta, rows })
}

fn skip_reason(e: &BackendError) -> String {
    e.to_string()
}

/// `{root}/{name}/{run}/results.jsonl`.
pub fn results_path(root: &Path, name: &str, run: u32) -> PathBuf {
    root.join(name).join(run.to_string()).join("results.jsonl")
}

pub fn write_results(path: &Path, output: &RunOutput) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &json!({ "meta": output.meta }))?;
    w.write_all(b"\n")?;
    for row in &output.rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `true` when `skipped` exceeds the abort threshold.
pub fn exceeds_skip_limit(skipped: usize, total: usize) -> bool {
    // integer form of skipped / total > 0.10
    skipped * 10 > total
}

/// Runs every seed, writes one results file per run, and returns their
/// paths. A run with too many skips is still written before the error.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    exp: &Experiment<'_>,
    out_root: &Path,
) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    if exp.tests.is_empty() {
        return Err(RunError::Config("no test instances".into()));
    }
    let mut paths = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs as u32 {
        let output = evaluate_run(cfg, exp, run)?;
        let path = results_path(out_root, &cfg.name, run);
        write_results(&path, &output)?;
        log::info!(
            "run {run}: {} instances, {} skipped -> {}",
            output.instances(),
            output.skipped(),
            path.display()
        );
        if exceeds_skip_limit(output.skipped(), output.instances()) {
            return Err(RunError::PartialRun {
                run,
                skipped: output.skipped(),
                total: output.instances(),
                path: Some(path),
            });
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Kind shared by all instances, or a config error.
pub fn task_kind(instances: &[Instance]) -> Result<TaskKind, RunError> {
    let mut kinds = instances.iter().map(Instance::kind);
    let first = kinds
        .next()
        .ok_or_else(|| RunError::Config("empty dataset".into()))?;
    if kinds.any(|k| k != first) {
        return Err(RunError::Config("dataset mixes task kinds".into()));
    }
    Ok(first)
}
