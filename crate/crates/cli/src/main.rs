//! `iclcb`: bijective vs. non-bijective cipher experiments from the command line.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use cipherbench::backends::BackendError;
use cipherbench::cipher::CipherError;
use cipherbench::corpus::DatasetFormat;
use cipherbench::lexicon::LexiconError;
use cipherbench::runner::RunError;
use cipherbench::simdemo::SimDemoConfig;
use clap::{Parser, Subcommand};

use commands::{Direction, ModeArg};
use config::{ConfigError, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "iclcb",
    version,
    about = "Token-cipher experiments for in-context learning"
)]
struct Cli {
    /// More logging (-v info, -vv debug); also prints per-run McNemar tests.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Vocabulary utilities for the built-in word-level tokenizer.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Token frequency tables.
    #[command(subcommand)]
    Freq(FreqCmd),
    /// Cipher maps and file transforms.
    #[command(subcommand)]
    Cipher(CipherCmd),
    /// Demo id lists per test instance.
    Sample {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, default_value_t = 0)]
        run: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompt rendering.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Full paired experiment; writes `{out_dir}/{name}/{run}/results.jsonl`.
    Run {
        #[command(flatten)]
        o: Overrides,
    },
    /// Gap report with McNemar's test over results files.
    Stats {
        /// Experiment directory holding `{run}/results.jsonl`; repeatable.
        #[arg(long)]
        dir: Vec<PathBuf>,
        /// Loose results files pooled into one row; repeatable.
        #[arg(long)]
        results: Vec<PathBuf>,
        /// Report CSV path (default: `{dir}/report.csv` for a single dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Logit-lens probe selection, prompts and analysis.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Simulated learners on the synthetic task.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Tokenizer bridge server.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
}

#[derive(Debug, Subcommand)]
enum VocabCmd {
    /// Induce a word-level vocabulary from text or datasets.
    Induce {
        /// Plain-text file, one segment per line; repeatable.
        #[arg(long)]
        text: Vec<PathBuf>,
        /// JSONL dataset whose input fields are read; repeatable.
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "classification")]
        format: FormatArg,
        /// Space marker glyph.
        #[arg(long)]
        marker: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum FreqCmd {
    /// Count tokens over a plain-text corpus into a TSV.
    Build {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum CipherCmd {
    /// Generate the paired cipher map over a shared ciphered set.
    Gen {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cipher a text file (line by line) or a JSONL dataset.
    Apply(TransformArgs),
    /// Undo a bijective cipher.
    Invert(TransformArgs),
}

#[derive(Debug, clap::Args)]
struct TransformArgs {
    #[command(flatten)]
    o: Overrides,
    /// Cipher map JSON from `cipher gen`.
    #[arg(long)]
    map: PathBuf,
    #[arg(long, value_enum, default_value = "bij")]
    mode: ModeArg,
    /// Treat the input as a JSONL dataset of this format.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum PromptCmd {
    /// Render `{out}/{id}.{plain,bij,nonbij}.txt` for test instances.
    Build {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, default_value_t = 0)]
        run: u32,
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "none,bij,nonbij"
        )]
        modes: Vec<ModeArg>,
        /// Only the first N test instances.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum ProbeCmd {
    /// Choose probe originals and substitutes.
    Select {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, value_enum, default_value = "bij")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build probe prompts and the positions to read.
    Prompts {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long, default_value_t = commands::DEFAULT_EXAMPLES)]
        examples: usize,
        #[arg(long)]
        prompts_out: PathBuf,
        #[arg(long)]
        positions_out: PathBuf,
    },
    /// Aggregate rank records into heatmap and chunk CSVs.
    Analyze {
        #[arg(long)]
        records: PathBuf,
        /// Reject ranks at or above this size.
        #[arg(long)]
        vocab_size: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Paired runs with the retrieval and in-context learners.
    Demo {
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        n_pool: Option<usize>,
        #[arg(long)]
        n_words: Option<usize>,
        /// Write per-learner rows and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum TokenizerCmd {
    /// Answer ENC/DEC/SURF requests on stdin until end of file.
    Serve {
        #[command(flatten)]
        o: Overrides,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FormatArg {
    Classification,
    MultipleChoice,
    AmazonRatings,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Classification => DatasetFormat::Classification,
            FormatArg::MultipleChoice => DatasetFormat::MultipleChoice,
            FormatArg::AmazonRatings => DatasetFormat::AmazonRatings,
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let verbose = cli.verbose > 0;
    match cli.command {
        Command::Vocab(VocabCmd::Induce {
            text,
            dataset,
            format,
            marker,
            out,
        }) => commands::vocab_induce(&text, &dataset, format.into(), marker.as_deref(), &out),
        Command::Freq(FreqCmd::Build { o, corpus, out }) => commands::freq_build(&o, &corpus, &out),
        Command::Cipher(CipherCmd::Gen { o, out }) => commands::cipher_gen(&o, &out),
        Command::Cipher(CipherCmd::Apply(a)) => transform(Direction::Apply, a),
        Command::Cipher(CipherCmd::Invert(a)) => transform(Direction::Invert, a),
        Command::Sample { o, run, out } => commands::sample_cmd(&o, run, &out),
        Command::Prompt(PromptCmd::Build {
            o,
            run,
            modes,
            limit,
            out,
        }) => commands::prompt_build(&o, run, &modes, limit, &out),
        Command::Run { o } => commands::run_cmd(&o, verbose),
        Command::Stats { dir, results, out } => {
            commands::stats_cmd(&dir, &results, out.as_deref(), verbose)
        }
        Command::Probe(ProbeCmd::Select { o, mode, out }) => commands::probe_select(&o, mode, &out),
        Command::Probe(ProbeCmd::Prompts {
            o,
            selection,
            examples,
            prompts_out,
            positions_out,
        }) => commands::probe_prompts(&o, &selection, examples, &prompts_out, &positions_out),
        Command::Probe(ProbeCmd::Analyze {
            records,
            vocab_size,
            out,
        }) => commands::probe_analyze(&records, vocab_size, &out),
        Command::Sim(SimCmd::Demo {
            r,
            n,
            k,
            runs,
            seed,
            n_test,
            n_pool,
            n_words,
            out,
        }) => {
            let d = SimDemoConfig::default();
            let cfg = SimDemoConfig {
                r: r.unwrap_or(d.r),
                n: n.unwrap_or(d.n),
                k: k.unwrap_or(d.k),
                runs: runs.unwrap_or(d.runs),
                seed: seed.unwrap_or(d.seed),
                n_test: n_test.unwrap_or(d.n_test),
                n_pool: n_pool.unwrap_or(d.n_pool),
                n_words: n_words.unwrap_or(d.n_words),
                ..d
            };
            commands::sim_demo(&cfg, out.as_deref())
        }
        Command::Tokenizer(TokenizerCmd::Serve { o }) => commands::tokenizer_serve(&o),
    }
}

fn transform(dir: Direction, a: TransformArgs) -> anyhow::Result<()> {
    commands::cipher_transform(
        &a.o,
        dir,
        &a.map,
        a.mode,
        a.format.map(Into::into),
        &a.input,
        &a.out,
    )
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<RunError>() {
            match e {
                RunError::PartialRun { .. } => return EXIT_PARTIAL,
                RunError::Config(_) => return EXIT_CONFIG,
                _ => {}
            }
        }
        if matches!(
            cause.downcast_ref::<BackendError>(),
            Some(BackendError::Config(_))
        ) || matches!(
            cause.downcast_ref::<LexiconError>(),
            Some(LexiconError::Config(_))
        ) || matches!(
            cause.downcast_ref::<CipherError>(),
            Some(CipherError::InvalidRate(_))
        ) {
            return EXIT_CONFIG;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
