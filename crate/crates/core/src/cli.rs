//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use crate::checkpoint;
use crate::config::SearchConfig;
use crate::data::Dataset;
use crate::dst;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::rng;
use crate::search::{self, Detector, MetricsReport};
use crate::search_space::MsmSet;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(name = "adnas", version, about = "Fusion-architecture search for two-modality anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// `key = value` configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set epochs_search=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bilevel search; writes the discretized genotype.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Modules to instantiate, e.g. `early,late`.
        #[arg(long, default_value = "early,middle,late")]
        msms: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch search history (JSON).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Trains a fixed genotype from scratch; writes a model checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluates a checkpoint on the test split of its own dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Monte-Carlo check of the evidence-combination guarantees.
    DstVerify {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search, train and evaluate every module subset; writes CSV.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Semicolon-separated subsets, e.g. `early;early,late`. Defaults to all seven.
        #[arg(long)]
        subsets: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a genotype on k normal images and evaluates on the full test set.
    Fewshot {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        genotype: PathBuf,
        /// Number of training images, or `full`.
        #[arg(long)]
        k: String,
        #[arg(long)]
        report: PathBuf,
    },
}

fn is_usage(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Parse(_)
    )
}

fn load_config(run: &RunArgs) -> Result<SearchConfig> {
    let mut cfg = match &run.config {
        Some(p) => SearchConfig::load(p)?,
        None => SearchConfig::default(),
    };
    cfg.apply_overrides(&run.overrides)?;
    Ok(cfg)
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Ablation rows as CSV text.
pub fn ablation_csv(rows: &[(MsmSet, MetricsReport)]) -> String {
    let mut s = String::from("early,middle,late,i_auroc,p_auroc,aupro\n");
    for (set, r) in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            u8::from(set.early),
            u8::from(set.middle),
            u8::from(set.late),
            r.i_auroc,
            r.p_auroc,
            r.aupro
        ));
    }
    s
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Search {
            run,
            msms,
            out,
            history,
        } => {
            let cfg = load_config(&run)?;
            let msms: MsmSet = msms.parse()?;
            let data = Dataset::generate(&cfg.data_config(), run.seed)?;
            let found = search::bilevel_search(&cfg, &data, msms, run.seed)?;
            write(&out, found.genotype.to_json().as_bytes())?;
            if let Some(h) = history {
                let text = serde_json::to_string_pretty(&found.history).expect("history serializes");
                write(&h, text.as_bytes())?;
            }
        }
        Command::Train { run, genotype, out } => {
            let cfg = load_config(&run)?;
            let g = Genotype::load(&genotype)?;
            let data = Dataset::generate(&cfg.data_config(), run.seed)?;
            let state = search::train_fixed(&g, &cfg, &data, run.seed)?;
            checkpoint::save(&out, &state)?;
        }
        Command::Eval { model, report } => {
            let started = Instant::now();
            let state = checkpoint::load(&model)?;
            let data = Dataset::generate(&state.config.data_config(), state.seed)?;
            let m = search::evaluate(&Detector::new(&state)?, &data.test, state.config.fpr_cap)?;
            let r = MetricsReport::new(m, &state.config, state.seed, started);
            write(&report, r.to_json().as_bytes())?;
        }
        Command::DstVerify { trials, seed, out } => {
            let mut r = rng::stream(seed, "dst");
            let report = dst::verify(&mut r, trials)?;
            let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
            text.push('\n');
            write(&out, text.as_bytes())?;
        }
        Command::Ablate { run, subsets, out } => {
            let cfg = load_config(&run)?;
            let sets = match subsets {
                Some(s) => s
                    .split(';')
                    .map(str::parse::<MsmSet>)
                    .collect::<Result<Vec<_>>>()?,
                None => MsmSet::all_nonempty(),
            };
            let data = Dataset::generate(&cfg.data_config(), run.seed)?;
            let mut rows = Vec::new();
            for set in sets {
                rows.push((set, search::ablate_msm(&cfg, &data, set, run.seed)?));
            }
            write(&out, ablation_csv(&rows).as_bytes())?;
        }
        Command::Fewshot {
            run,
            genotype,
            k,
            report,
        } => {
            let cfg = load_config(&run)?;
            let g = Genotype::load(&genotype)?;
            let data = Dataset::generate(&cfg.data_config(), run.seed)?;
            let k = if k == "full" {
                data.train.len()
            } else {
                k.parse()
                    .map_err(|_| Error::invalid(format!("k must be a count or `full`, got {k:?}")))?
            };
            let r = search::fewshot(&cfg, &data, &g, k, run.seed)?;
            write(&report, r.to_json().as_bytes())?;
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            if is_usage(&e) {
                2
            } else {
                1
            }
        }
    }
}
