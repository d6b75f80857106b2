use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cipherbench::backends::build_backend;
use cipherbench::cipher::{CipherFile, DrawKey};
use cipherbench::corpus::{load_jsonl, DatasetFormat, Instance, InstanceBody};
use cipherbench::lexicon::build_frequency;
use cipherbench::probe::{
    aggregate, build_probe_prompts, load_records, select_probe_tokens, write_probe_files,
    ProbeSelection, EXAMPLES_PER_TOKEN,
};
use cipherbench::prompting::{render_prompt, Cipher, CipherMode};
use cipherbench::runner::{run_experiment, Experiment};
use cipherbench::sampling::{sample, SamplePlan};
use cipherbench::simdemo::{run_sim_demo, SimDemoConfig};
use cipherbench::stats::{
    find_run_files, format_table, gap_report, mcnemar_per_run, read_results, report_csv, GapRow,
};
use cipherbench::tokenization::{bridge, DEFAULT_MARKER};
use cipherbench::{TokenizerSpec, Vocabulary};
use serde_json::json;

use crate::config::{config_err, CliConfig, Overrides};
use crate::pipeline::{
    build_lexicon, cipher_spec, load_datasets, load_frequency, load_tokenizer, run_cipher,
};

fn create_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    create_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn vocab_induce(
    texts: &[PathBuf],
    datasets: &[PathBuf],
    format: DatasetFormat,
    marker: Option<&str>,
    out: &Path,
) -> anyhow::Result<()> {
    if texts.is_empty() && datasets.is_empty() {
        return Err(config_err(
            "vocab induce: give at least one --text or --dataset",
        ));
    }
    let mut lines: Vec<String> = Vec::new();
    for p in texts {
        let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
        lines.extend(text.lines().map(str::to_string));
    }
    for p in datasets {
        let report = load_jsonl(p, format).with_context(|| p.display().to_string())?;
        for inst in &report.instances {
            lines.extend(inst.input_fields().into_iter().map(str::to_string));
        }
    }
    let vocab = Vocabulary::induce(
        lines.iter().map(String::as_str),
        marker.unwrap_or(DEFAULT_MARKER),
    );
    create_parent(out)?;
    vocab.save(out)?;
    log::info!("{} tokens -> {}", vocab.len(), out.display());
    Ok(())
}

pub fn freq_build(o: &Overrides, corpus: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let tok = load_tokenizer(&cfg)?;
    let text = fs::read_to_string(corpus).with_context(|| corpus.display().to_string())?;
    let table = build_frequency(&corpus.display().to_string(), text.lines(), &tok.spec)?;
    write_file(out, &table.to_tsv())?;
    log::info!("{} tokens counted -> {}", table.total(), out.display());
    Ok(())
}

pub fn cipher_gen(o: &Overrides, out: &Path) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let tok = load_tokenizer(&cfg)?;
    let pool = match &cfg.paths.pool {
        Some(_) if cfg.paths.freq.is_none() && cfg.paths.freq_corpus.is_none() => {
            Some(load_datasets_pool(&cfg, &tok.spec)?)
        }
        _ => None,
    };
    let freq = load_frequency(&cfg, &tok.spec, pool.as_ref())?;
    let lex = build_lexicon(&cfg, &tok, &freq)?;
    let pair = cipherbench::cipher::CipherPair::generate(
        &cipher_spec(&cfg, cfg.cipher.seed),
        &lex.eligible,
        &lex.bins,
        tok.spec.vocab(),
    )?;
    let file = pair.to_file();
    create_parent(out)?;
    file.save(out)?;
    log::info!("|S| = {} -> {}", file.s.len(), out.display());
    Ok(())
}

fn load_datasets_pool(
    cfg: &CliConfig,
    tok: &TokenizerSpec,
) -> anyhow::Result<cipherbench::corpus::DemoPool> {
    let path = cfg.require("paths.pool", &cfg.paths.pool)?;
    let pool = crate::pipeline::load_dataset(cfg, "paths.pool", path)?;
    Ok(cipherbench::corpus::DemoPool::build(pool, tok)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Direction {
    Apply,
    Invert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    None,
    Bij,
    Nonbij,
}

impl From<ModeArg> for CipherMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => CipherMode::None,
            ModeArg::Bij => CipherMode::Bijective,
            ModeArg::Nonbij => CipherMode::NonBijective,
        }
    }
}

fn transform_field(
    tok: &TokenizerSpec,
    text: &str,
    dir: Direction,
    cipher: &Cipher<'_>,
    bij: &cipherbench::cipher::BijectiveCipher,
    key: DrawKey,
) -> anyhow::Result<String> {
    let ids = tok.encode(text)?;
    let out = match dir {
        Direction::Apply => cipher.apply(&ids, key),
        Direction::Invert => bij.invert(&ids),
    };
    if out == ids {
        return Ok(text.to_string());
    }
    Ok(tok.decode(&out)?)
}

/// Ciphers (or deciphers) a text file line by line, or the input fields of
/// a JSONL dataset when `format` is given.
#[allow(clippy::too_many_arguments)]
pub fn cipher_transform(
    o: &Overrides,
    dir: Direction,
    map: &Path,
    mode: ModeArg,
    format: Option<DatasetFormat>,
    input: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let tok = load_tokenizer(&cfg)?;
    let file = CipherFile::load(map).with_context(|| format!("cipher map {}", map.display()))?;
    let bij = file.bijective()?;
    let nonbij = file.non_bijective();
    let cipher = match (dir, mode) {
        (Direction::Invert, ModeArg::Nonbij) => {
            return Err(config_err(
                "cipher invert: the non-bijective cipher has no inverse; use --mode bij",
            ))
        }
        (_, ModeArg::Bij) => Cipher::Bijective(&bij),
        (_, ModeArg::Nonbij) => Cipher::NonBijective(&nonbij),
        (_, ModeArg::None) => Cipher::None,
    };
    let text = fs::read_to_string(input).with_context(|| input.display().to_string())?;
    let result = match format {
        None => {
            let lines: Vec<String> = text
                .split('\n')
                .enumerate()
                .map(|(i, line)| {
                    if line.is_empty() {
                        Ok(String::new())
                    } else {
                        transform_field(
                            &tok.spec,
                            line,
                            dir,
                            &cipher,
                            &bij,
                            DrawKey::new("line", i, 0),
                        )
                    }
                })
                .collect::<anyhow::Result<_>>()?;
            lines.join("\n")
        }
        Some(format) => {
            let report = cipherbench::corpus::parse_jsonl(&text, format)?;
            let mut out = String::new();
            for inst in report.instances {
                let id = inst.id.clone();
                let f = |i: usize, s: &str| {
                    transform_field(&tok.spec, s, dir, &cipher, &bij, DrawKey::new(&id, 0, i))
                };
                let body = match inst.body {
                    InstanceBody::Classification { input, label } => InstanceBody::Classification {
                        input: f(0, &input)?,
                        label,
                    },
                    InstanceBody::MultipleChoice {
                        question,
                        options,
                        answer,
                    } => InstanceBody::MultipleChoice {
                        question: f(0, &question)?,
                        options: options
                            .iter()
                            .enumerate()
                            .map(|(j, o)| f(j + 1, o))
                            .collect::<anyhow::Result<_>>()?,
                        answer,
                    },
                };
                out.push_str(&serde_json::to_string(&Instance { id, body })?);
                out.push('\n');
            }
            out
        }
    };
    write_file(out, &result)
}

pub fn sample_cmd(o: &Overrides, run: u32, out: &Path) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let tok = load_tokenizer(&cfg)?;
    let data = load_datasets(&cfg, &tok.spec)?;
    let freq = load_frequency(&cfg, &tok.spec, Some(&data.pool))?;
    let lex = build_lexicon(&cfg, &tok, &freq)?;
    let pair = run_cipher(&cfg, &tok, &lex, run)?;
    let exp = cfg.experiment();
    let plan = SamplePlan {
        n: exp.n,
        mode: exp.sample_mode,
        seed: exp.run_seed(run),
    };
    let mut text = String::new();
    for test in &data.tests {
        let tokens = test.input_tokens(&tok.spec)?;
        let demos = sample(&plan, &data.pool, &test.id, &tokens, &pair.set)?;
        let ids: Vec<&str> = demos
            .iter()
            .map(|&i| data.pool.get(i).id.as_str())
            .collect();
        text.push_str(&json!({"instance_id": test.id, "run": run, "demo_ids": ids}).to_string());
        text.push('\n');
    }
    write_file(out, &text)
}

/// Writes `{out}/{instance_id}.{mode}.txt` for every test instance.
pub fn prompt_build(
    o: &Overrides,
    run: u32,
    modes: &[ModeArg],
    limit: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let tok = load_tokenizer(&cfg)?;
    let data = load_datasets(&cfg, &tok.spec)?;
    let freq = load_frequency(&cfg, &tok.spec, Some(&data.pool))?;
    let lex = build_lexicon(&cfg, &tok, &freq)?;
    let pair = run_cipher(&cfg, &tok, &lex, run)?;
    let exp = cfg.experiment();
    let plan = SamplePlan {
        n: exp.n,
        mode: exp.sample_mode,
        seed: exp.run_seed(run),
    };
    fs::create_dir_all(out)?;
    let tests = &data.tests[..limit.unwrap_or(data.tests.len()).min(data.tests.len())];
    for test in tests {
        let tokens = test.input_tokens(&tok.spec)?;
        let demos = sample(&plan, &data.pool, &test.id, &tokens, &pair.set)?;
        let demos: Vec<&Instance> = demos.iter().map(|&i| data.pool.get(i)).collect();
        for &mode in modes {
            let (cipher, tag) = match mode {
                ModeArg::None => (Cipher::None, "plain"),
                ModeArg::Bij => (Cipher::Bijective(&pair.bijective), "bij"),
                ModeArg::Nonbij => (Cipher::NonBijective(&pair.non_bijective), "nonbij"),
            };
            let prompt = render_prompt(&tok.spec, &demos, test, cipher)?;
            fs::write(out.join(format!("{}.{tag}.txt", test.id)), &prompt.text)?;
        }
    }
    log::info!("{} prompts -> {}", tests.len() * modes.len(), out.display());
    Ok(())
}

fn experiment_dir(cfg: &CliConfig) -> PathBuf {
    cfg.out_dir.join(&cfg.name)
}

pub fn run_cmd(o: &Overrides, verbose: bool) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let backend_cfg = cfg.backend()?.clone();
    let tok = load_tokenizer(&cfg)?;
    let data = load_datasets(&cfg, &tok.spec)?;
    let freq = load_frequency(&cfg, &tok.spec, Some(&data.pool))?;
    let lex = build_lexicon(&cfg, &tok, &freq)?;
    let backend = build_backend(&backend_cfg, None)?;
    let exp = Experiment {
        tokenizer: &tok.spec,
        pool: &data.pool,
        tests: &data.tests,
        eligible: &lex.eligible,
        bins: &lex.bins,
        backend: backend.as_ref(),
    };
    let paths = run_experiment(&cfg.experiment(), &exp, &cfg.out_dir)?;
    for p in &paths {
        println!("{}", p.display());
    }
    stats_cmd(&[experiment_dir(&cfg)], &[], None, verbose)
}

fn gap_for(files: &[PathBuf], verbose: bool) -> anyhow::Result<GapRow> {
    let mut rows = Vec::new();
    let mut meta = None;
    for f in files {
        let parsed = read_results(f)?;
        if meta.is_none() {
            meta = parsed.meta;
        }
        rows.extend(parsed.rows);
    }
    let meta = meta.unwrap_or_default();
    let dataset = meta
        .get("dataset")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown");
    let r = meta.get("r").and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
    let n = meta.get("n").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let gap = gap_report(dataset, r, n, &rows)?;
    if verbose {
        for (run, m) in mcnemar_per_run(&rows)? {
            println!(
                "{dataset} run {run}: b={} c={} {} p={:.4e}{}",
                m.b,
                m.c,
                m.method.as_str(),
                m.p_value,
                if m.significant() { " *" } else { "" }
            );
        }
    }
    Ok(gap)
}

/// One report row per experiment directory, plus one pooling any loose
/// results files.
pub fn stats_cmd(
    dirs: &[PathBuf],
    results: &[PathBuf],
    out: Option<&Path>,
    verbose: bool,
) -> anyhow::Result<()> {
    if dirs.is_empty() && results.is_empty() {
        return Err(config_err("stats: give --dir or --results"));
    }
    let mut rows = Vec::new();
    for d in dirs {
        let files = find_run_files(d).with_context(|| d.display().to_string())?;
        if files.is_empty() {
            bail!("{}: no {{run}}/results.jsonl files", d.display());
        }
        rows.push(gap_for(&files, verbose)?);
    }
    if !results.is_empty() {
        rows.push(gap_for(results, verbose)?);
    }
    let csv = report_csv(&rows);
    let target = match (out, dirs) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, [d]) if results.is_empty() => Some(d.join("report.csv")),
        _ => None,
    };
    if let Some(t) = target {
        write_file(&t, &csv)?;
        log::info!("report -> {}", t.display());
    }
    print!("{}", format_table(&rows));
    Ok(())
}

pub fn probe_select(o: &Overrides, mode: ModeArg, out: &Path) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    if mode == ModeArg::None {
        return Err(config_err("probe select: --mode must be bij or nonbij"));
    }
    let tok = load_tokenizer(&cfg)?;
    let tags = tok
        .pos_tags
        .as_ref()
        .ok_or_else(|| config_err("paths.pos: required by probe select"))?;
    let pool = match &cfg.paths.pool {
        Some(_) if cfg.paths.freq.is_none() && cfg.paths.freq_corpus.is_none() => {
            Some(load_datasets_pool(&cfg, &tok.spec)?)
        }
        _ => None,
    };
    let freq = load_frequency(&cfg, &tok.spec, pool.as_ref())?;
    let sel = select_probe_tokens(&freq, tags, tok.spec.vocab(), cfg.cipher.seed, mode.into())?;
    write_file(out, &serde_json::to_string_pretty(&sel)?)
}

pub fn probe_prompts(
    o: &Overrides,
    selection: &Path,
    examples: usize,
    prompts_out: &Path,
    positions_out: &Path,
) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let tok = load_tokenizer(&cfg)?;
    let sel: ProbeSelection = serde_json::from_str(
        &fs::read_to_string(selection).with_context(|| selection.display().to_string())?,
    )
    .with_context(|| selection.display().to_string())?;
    let pool = load_datasets_pool(&cfg, &tok.spec)?;
    let prompts = build_probe_prompts(&sel, &pool, &tok.spec, examples)?;
    create_parent(prompts_out)?;
    create_parent(positions_out)?;
    write_probe_files(&prompts, prompts_out, positions_out)?;
    log::info!("{} probe prompts", prompts.len());
    Ok(())
}

pub const DEFAULT_EXAMPLES: usize = EXAMPLES_PER_TOKEN;

pub fn probe_analyze(records: &Path, vocab_size: Option<u32>, out: &Path) -> anyhow::Result<()> {
    let recs = load_records(records, vocab_size)?;
    let agg = aggregate(&recs)?;
    write_file(&out.join("heatmap.csv"), &agg.heatmap_csv())?;
    let chunks = agg.chunks_csv();
    write_file(&out.join("chunks.csv"), &chunks)?;
    print!("{chunks}");
    Ok(())
}

pub fn sim_demo(cfg: &SimDemoConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let reports = run_sim_demo(cfg)?;
    let rows: Vec<GapRow> = reports
        .iter()
        .map(|rep| GapRow {
            dataset: rep.learner.clone(),
            ..rep.gap.clone()
        })
        .collect();
    if let Some(dir) = out {
        for rep in &reports {
            let path = dir.join(format!("{}.jsonl", rep.learner));
            let mut text = String::new();
            for row in &rep.rows {
                text.push_str(&serde_json::to_string(row)?);
                text.push('\n');
            }
            write_file(&path, &text)?;
        }
        write_file(&dir.join("report.csv"), &report_csv(&rows))?;
    }
    print!("{}", format_table(&rows));
    Ok(())
}

pub fn tokenizer_serve(o: &Overrides) -> anyhow::Result<()> {
    let cfg = CliConfig::resolve(o)?;
    let tok = load_tokenizer(&cfg)?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    bridge::serve(&tok.spec, stdin.lock(), BufWriter::new(stdout.lock()))?;
    Ok(())
}
