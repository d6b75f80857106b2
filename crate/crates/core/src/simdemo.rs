//! End-to-end paired runs on the synthetic polarity task with both
//! simulated learners. No network, no external tokenizer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::{generate_synthetic, Backend, SimBackend, SimKind, SyntheticTask};
use crate::lexicon::{build_bins, build_frequency, Constraints, EligibleSet};
use crate::runner::{evaluate_run, Experiment, ExperimentConfig, ResultRow};
use crate::stats::{gap_report, GapRow};
use crate::tokenization::SpaceClass;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimDemoConfig {
    pub n_words: usize,
    /// Shares of negative, neutral and positive words.
    pub probs: [f64; 3],
    pub sentence_length: (usize, usize),
    pub n_pool: usize,
    pub n_test: usize,
    pub r: f64,
    pub n: usize,
    pub k: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for SimDemoConfig {
    fn default() -> Self {
        SimDemoConfig {
            n_words: 40,
            probs: [0.4, 0.2, 0.4],
            sentence_length: (3, 5),
            n_pool: 2000,
            n_test: 500,
            r: 0.5,
            n: 20,
            k: 10,
            runs: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LearnerReport {
    pub learner: String,
    pub gap: GapRow,
    pub rows: Vec<ResultRow>,
}

/// Runs the paired experiment once per learner (retrieval first).
pub fn run_sim_demo(cfg: &SimDemoConfig) -> Result<Vec<LearnerReport>> {
    let data =
        SyntheticTask::new(cfg.n_words, cfg.probs, cfg.sentence_length, cfg.seed).materialize();
    let (pool, tests) = generate_synthetic(&data.task, &data.tokenizer, cfg.n_pool, cfg.n_test)?;
    let texts: Vec<&str> = pool
        .instances()
        .iter()
        .flat_map(|i| i.input_fields())
        .collect();
    let freq = build_frequency("synthetic-pool", texts, &data.tokenizer)?;
    // only space-prefixed task words are substituted; the sentence-initial
    // bare form stays readable
    let eligible = EligibleSet {
        ids: data
            .tokenizer
            .vocab()
            .entries()
            .iter()
            .filter(|e| {
                !e.reserved
                    && e.space_class == SpaceClass::SpacePrefixed
                    && data.lexicon.weight(e.id).is_some()
            })
            .map(|e| e.id)
            .collect::<BTreeSet<_>>(),
        constraints: Constraints {
            reserved_excluded: true,
            space_class_partition: true,
            pos_filter: None,
        },
    };
    let bins = build_bins(&freq, &eligible, cfg.k)?;

    let mut exp_cfg = ExperimentConfig::new("sim-demo", "synthetic", cfg.r, cfg.n);
    exp_cfg.k = cfg.k;
    exp_cfg.runs = cfg.runs;
    exp_cfg.base_seed = cfg.seed;
    exp_cfg.labels = vec!["negative".into(), "positive".into()];

    let mut reports = Vec::new();
    for kind in [SimKind::Retrieval, SimKind::InContext] {
        let backend = SimBackend::new(kind, data.lexicon.clone(), "positive", "negative");
        let exp = Experiment {
            tokenizer: &data.tokenizer,
            pool: &pool,
            tests: &tests,
            eligible: &eligible,
            bins: &bins,
            backend: &backend,
        };
        let mut rows = Vec::new();
        for run in 0..cfg.runs as u32 {
            rows.extend(evaluate_run(&exp_cfg, &exp, run)?.rows);
        }
        let gap = gap_report("synthetic", cfg.r, cfg.n, &rows)?;
        reports.push(LearnerReport {
            learner: backend.name(),
            gap,
            rows,
        });
    }
    Ok(reports)
}
