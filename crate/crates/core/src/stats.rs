//! Accuracy, gap and McNemar's paired test.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::runner::{Condition, ResultRow};

/// Discordant-pair count up to which the exact binomial test is used.
pub const EXACT_THRESHOLD: u64 = 25;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no scored rows{0}")]
    NoData(String),
    #[error("unpaired result: {0}")]
    Pairing(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn scored<'a>(
    rows: &'a [ResultRow],
    condition: Condition,
) -> impl Iterator<Item = &'a ResultRow> + 'a {
    rows.iter()
        .filter(move |r| r.condition == condition && r.skipped.is_none())
}

/// Share of correct rows for `condition`, skipped rows excluded.
pub fn accuracy(rows: &[ResultRow], condition: Condition) -> Result<f64, StatsError> {
    let (mut correct, mut total) = (0usize, 0usize);
    for r in scored(rows, condition) {
        total += 1;
        correct += usize::from(r.correct);
    }
    if total == 0 {
        return Err(StatsError::NoData(format!(" for {condition:?}")));
    }
    Ok(correct as f64 / total as f64)
}

pub fn run_accuracies(
    rows: &[ResultRow],
    condition: Condition,
) -> Result<BTreeMap<u32, f64>, StatsError> {
    let mut by_run: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in scored(rows, condition) {
        let e = by_run.entry(r.run).or_default();
        e.0 += usize::from(r.correct);
        e.1 += 1;
    }
    if by_run.is_empty() {
        return Err(StatsError::NoData(format!(" for {condition:?}")));
    }
    Ok(by_run
        .into_iter()
        .map(|(run, (c, t))| (run, c as f64 / t as f64))
        .collect())
}

/// Mean of per-run accuracies.
pub fn run_averaged_accuracy(rows: &[ResultRow], condition: Condition) -> Result<f64, StatsError> {
    let per_run = run_accuracies(rows, condition)?;
    Ok(per_run.values().sum::<f64>() / per_run.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquareCc,
}

impl McNemarMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            McNemarMethod::ExactBinomial => "exact_binomial",
            McNemarMethod::ChiSquareCc => "chi_square_cc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Bijective correct, non-bijective wrong.
    pub b: u64,
    /// Bijective wrong, non-bijective correct.
    pub c: u64,
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub method: McNemarMethod,
}

impl McNemarResult {
    pub fn significant(&self) -> bool {
        self.p_value <= SIGNIFICANCE_LEVEL
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// McNemar's test from discordant counts.
///
/// Exact two-sided binomial when `b + c ≤ 25`, otherwise the
/// continuity-corrected chi-square with one degree of freedom.
pub fn mcnemar_counts(b: u64, c: u64) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult {
            b,
            c,
            statistic: None,
            p_value: 1.0,
            method: McNemarMethod::ExactBinomial,
        };
    }
    if n <= EXACT_THRESHOLD {
        let tail: u64 = (b.max(c)..=n).map(|k| binomial(n, k)).sum();
        let p = (2.0 * tail as f64 / (1u64 << n) as f64).min(1.0);
        return McNemarResult {
            b,
            c,
            statistic: None,
            p_value: p,
            method: McNemarMethod::ExactBinomial,
        };
    }
    let d = (b as f64 - c as f64).abs() - 1.0;
    let stat = d * d / n as f64;
    // chi-square(1) survival function
    let p = erfc((stat / 2.0).sqrt()).clamp(0.0, 1.0);
    McNemarResult {
        b,
        c,
        statistic: Some(stat),
        p_value: p,
        method: McNemarMethod::ChiSquareCc,
    }
}

/// `(bijective correct, non-bijective correct)` per scored (instance, run).
/// Pairs with a skipped side are dropped.
pub fn paired_outcomes(rows: &[ResultRow]) -> Result<Vec<(bool, bool)>, StatsError> {
    let mut slots: HashMap<(&str, u32), [Option<&ResultRow>; 2]> = HashMap::new();
    for r in rows {
        let slot = slots.entry((r.instance_id.as_str(), r.run)).or_default();
        let i = match r.condition {
            Condition::Bijective => 0,
            Condition::NonBijective => 1,
        };
        if slot[i].replace(r).is_some() {
            return Err(StatsError::Pairing(format!(
                "instance {:?} run {} has two {:?} rows",
                r.instance_id, r.run, r.condition
            )));
        }
    }
    let mut keys: Vec<_> = slots.keys().copied().collect();
    keys.sort_unstable();
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        match slots[&key] {
            [Some(b), Some(nb)] => {
                if b.skipped.is_none() && nb.skipped.is_none() {
                    out.push((b.correct, nb.correct));
                }
            }
            _ => {
                return Err(StatsError::Pairing(format!(
                    "instance {:?} run {} lacks one condition",
                    key.0, key.1
                )))
            }
        }
    }
    Ok(out)
}

pub fn discordant(pairs: &[(bool, bool)]) -> (u64, u64) {
    pairs
        .iter()
        .fold((0, 0), |(b, c), &(bij, nonbij)| match (bij, nonbij) {
            (true, false) => (b + 1, c),
            (false, true) => (b, c + 1),
            _ => (b, c),
        })
}

/// McNemar over all runs pooled.
pub fn mcnemar(rows: &[ResultRow]) -> Result<McNemarResult, StatsError> {
    let (b, c) = discordant(&paired_outcomes(rows)?);
    Ok(mcnemar_counts(b, c))
}

pub fn mcnemar_per_run(rows: &[ResultRow]) -> Result<BTreeMap<u32, McNemarResult>, StatsError> {
    let mut by_run: BTreeMap<u32, Vec<ResultRow>> = BTreeMap::new();
    for r in rows {
        by_run.entry(r.run).or_default().push(r.clone());
    }
    by_run
        .into_iter()
        .map(|(run, rs)| mcnemar(&rs).map(|m| (run, m)))
        .collect()
}

/// One line of the gap report. Accuracies are fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub dataset: String,
    pub r: f64,
    pub n: usize,
    pub acc_nonbij: f64,
    pub acc_bij: f64,
    pub gap: f64,
    pub mcnemar: McNemarResult,
}

impl GapRow {
    pub fn significant(&self) -> bool {
        self.mcnemar.significant()
    }
}

/// Run-averaged accuracies, their gap, and pooled McNemar.
pub fn gap_report(
    dataset: &str,
    r: f64,
    n: usize,
    rows: &[ResultRow],
) -> Result<GapRow, StatsError> {
    let acc_bij = run_averaged_accuracy(rows, Condition::Bijective)?;
    let acc_nonbij = run_averaged_accuracy(rows, Condition::NonBijective)?;
    Ok(GapRow {
        dataset: dataset.to_string(),
        r,
        n,
        acc_nonbij,
        acc_bij,
        gap: acc_bij - acc_nonbij,
        mcnemar: mcnemar(rows)?,
    })
}

pub const REPORT_HEADER: &str = "dataset,r,n,acc_nonbij,acc_bij,gap,b,c,method,p,significant";

fn pct(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

/// Report CSV; accuracies and gap in percentage points.
pub fn report_csv(rows: &[GapRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for g in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.2},{:+.2},{},{},{},{:.6e},{}",
            g.dataset,
            g.r,
            g.n,
            g.acc_nonbij * 100.0,
            g.acc_bij * 100.0,
            g.gap * 100.0,
            g.mcnemar.b,
            g.mcnemar.c,
            g.mcnemar.method.as_str(),
            g.mcnemar.p_value,
            g.significant()
        );
    }
    out
}

/// Plain-text table with one decimal and a `*` on significant gaps.
pub fn format_table(rows: &[GapRow]) -> String {
    let mut out = format!(
        "{:<16} {:>5} {:>4} {:>8} {:>8} {:>8} {:>10}\n",
        "dataset", "r", "n", "nonbij", "bij", "gap", "p"
    );
    for g in rows {
        let gap = format!(
            "{:+.1}{}",
            pct(g.acc_bij) - pct(g.acc_nonbij),
            if g.significant() { "*" } else { "" }
        );
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>4} {:>8.1} {:>8.1} {:>8} {:>10.3e}",
            g.dataset,
            g.r,
            g.n,
            pct(g.acc_nonbij),
            pct(g.acc_bij),
            gap,
            g.mcnemar.p_value
        );
    }
    out
}

/// A parsed results file: optional header plus rows.
#[derive(Clone, Debug, Default)]
pub struct ResultsFile {
    pub meta: Option<Value>,
    pub rows: Vec<ResultRow>,
}

pub fn parse_results(text: &str, origin: &str) -> Result<ResultsFile, StatsError> {
    let mut file = ResultsFile::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| StatsError::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if let Some(meta) = value.get("meta") {
            file.meta = Some(meta.clone());
            continue;
        }
        file.rows
            .push(serde_json::from_value(value).map_err(|e| err(e.to_string()))?);
    }
    Ok(file)
}

pub fn read_results(path: &Path) -> Result<ResultsFile, StatsError> {
    parse_results(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Every `{dir}/{run}/results.jsonl`, in run order.
pub fn find_run_files(dir: &Path) -> Result<Vec<PathBuf>, StatsError> {
    let mut runs: Vec<(u32, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let Some(run) = entry
            .file_name()
            .to_str()
            .and_then(|s| s.parse::<u32>().ok())
        else {
            continue;
        };
        let p = entry.path().join("results.jsonl");
        if p.is_file() {
            runs.push((run, p));
        }
    }
    runs.sort();
    Ok(runs.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: usize, run: u32, cond: Condition, correct: bool) -> ResultRow {
        ResultRow {
            instance_id: id.to_string(),
            run,
            condition: cond,
            correct,
            prediction: String::new(),
            demo_ids: vec![],
            skipped: None,
        }
    }

    #[test]
    fn accuracy_examples() {
        let rows: Vec<_> = (0..1000)
            .map(|i| row(i, 0, Condition::NonBijective, i < 647))
            .collect();
        assert!((accuracy(&rows, Condition::NonBijective).unwrap() - 0.647).abs() < 1e-12);
        assert!(matches!(
            accuracy(&rows, Condition::Bijective),
            Err(StatsError::NoData(_))
        ));
        let all: Vec<_> = (0..5)
            .map(|i| row(i, 0, Condition::Bijective, true))
            .collect();
        assert_eq!(accuracy(&all, Condition::Bijective).unwrap(), 1.0);
    }

    #[test]
    fn skipped_rows_excluded() {
        let mut rows = vec![
            row(0, 0, Condition::Bijective, true),
            row(1, 0, Condition::Bijective, false),
        ];
        rows[1].skipped = Some("timeout".into());
        assert_eq!(accuracy(&rows, Condition::Bijective).unwrap(), 1.0);
    }

    #[test]
    fn run_average_is_mean_of_runs() {
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(row(i, 0, Condition::Bijective, i < 5));
        }
        for i in 0..4 {
            rows.push(row(i, 1, Condition::Bijective, true));
        }
        assert!((run_averaged_accuracy(&rows, Condition::Bijective).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mcnemar_examples() {
        let m = mcnemar_counts(15, 5);
        assert_eq!(m.method, McNemarMethod::ExactBinomial);
        assert!((m.p_value - 43400.0 / 1048576.0).abs() < 1e-15);
        assert_eq!(mcnemar_counts(7, 7).p_value, 1.0);
        assert_eq!(mcnemar_counts(0, 0).p_value, 1.0);
        let m = mcnemar_counts(40, 20);
        assert_eq!(m.method, McNemarMethod::ChiSquareCc);
        assert_eq!(m.statistic, Some(361.0 / 60.0));
        assert!((m.p_value - 0.0142).abs() < 1e-3);
    }

    #[test]
    fn mcnemar_symmetric() {
        for (b, c) in [(3, 9), (30, 12), (0, 26)] {
            let x = mcnemar_counts(b, c);
            let y = mcnemar_counts(c, b);
            assert_eq!(x.p_value, y.p_value);
            assert_eq!((x.b, x.c), (y.c, y.b));
        }
    }

    #[test]
    fn pairing_errors() {
        let rows = vec![row(0, 0, Condition::Bijective, true)];
        assert!(matches!(mcnemar(&rows), Err(StatsError::Pairing(_))));
        let rows = vec![
            row(0, 0, Condition::Bijective, true),
            row(0, 0, Condition::Bijective, true),
        ];
        assert!(matches!(mcnemar(&rows), Err(StatsError::Pairing(_))));
    }

    #[test]
    fn significance_boundary_inclusive() {
        let mut m = mcnemar_counts(1, 1);
        m.p_value = 0.05;
        assert!(m.significant());
        m.p_value = 0.0500001;
        assert!(!m.significant());
    }

    #[test]
    fn equal_accuracy_zero_gap() {
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(row(i, 0, Condition::Bijective, i % 2 == 0));
            rows.push(row(i, 0, Condition::NonBijective, i % 2 == 1));
        }
        let g = gap_report("d", 0.5, 4, &rows).unwrap();
        assert_eq!(g.gap, 0.0);
        assert!(report_csv(&[g]).contains(",+0.00,"));
    }

    #[test]
    fn parse_results_with_meta() {
        let text = "{\"meta\":{\"run\":0}}\n{\"instance_id\":\"a\",\"run\":0,\"condition\":\"bij\",\"correct\":true,\"prediction\":\"\",\"demo_ids\":[]}\n";
        let f = parse_results(text, "x").unwrap();
        assert_eq!(f.meta.unwrap()["run"], 0);
        assert_eq!(f.rows.len(), 1);
        assert!(matches!(
            parse_results("{bad", "x"),
            Err(StatsError::Parse { line: 1, .. })
        ));
    }
}
