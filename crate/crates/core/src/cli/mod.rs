//! Command-line front end. Every subcommand resolves a configuration, maps
//! it to a run directory named by the configuration hash and seed, and
//! reuses whatever earlier subcommands already wrote there.

mod config;
mod report;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{load_config, ConfigSources, RunConfig, RUN_KEYS};
pub use report::emit_report;
pub use run::{cohort_table, generate, Partition, Prepared, Run};
pub use run::{
    ABLATION_FILE, BASELINES_FILE, BEST_CONFIG_FILE, CHECKPOINT_FILE, COHORT_TABLE_FILE, CONFIG_FILE,
    CURVE_AFTER_FILE, CURVE_BEFORE_FILE, CV_FOLDS_FILE, CV_TABLE_FILE, HISTORY_FILE, PREPARE_FILE, RECAL_FILE,
    REPORT_FILE, SEARCH_FILE, SPLIT_FILE, SUBGROUPS_FILE, VOCAB_FILE,
};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tgcnn", version, about = "Temporal graph CNN risk models on coded patient histories")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding events.csv, demographics.csv and outcomes.csv.
    /// Without it a synthetic cohort is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Root directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Work in an existing run directory with its recorded configuration.
    #[arg(long, conflicts_with_all = ["config", "sets", "seed", "data"])]
    run: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort as CSV files.
    Generate {
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
        /// Number of patients.
        #[arg(long)]
        n: Option<usize>,
        /// Fraction of patients who go on to a replacement.
        #[arg(long)]
        prevalence: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Window, filter, match and split the cohort; write the split manifest.
    Prepare(ConfigArgs),
    /// Fit one configuration; write its checkpoint and history.
    Train(ConfigArgs),
    /// Cross-validate one configuration.
    Cv(ConfigArgs),
    /// Random hyperparameter search over cross-validated trials.
    Search {
        #[command(flatten)]
        args: ConfigArgs,
        /// Number of trials (overrides `search_trials`).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Cross-validate every ablation variant.
    Ablate(ConfigArgs),
    /// Predict and score one partition.
    Evaluate {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, default_value = "test2")]
        partition: String,
    },
    /// Recalibrate on Test 1 and evaluate on Test 2.
    Recalibrate(ConfigArgs),
    /// Subgroup reports on the recalibrated Test 2 predictions.
    Stratify(ConfigArgs),
    /// Fit the logistic and recurrent comparison models.
    Baselines(ConfigArgs),
    /// Collect a run directory's artifacts into report.md.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn split_pairs(sets: &[String]) -> Result<Vec<(String, String)>, Error> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, found '{s}'")))
        })
        .collect()
}

fn sources(
    config: Option<PathBuf>,
    sets: &[String],
    flags: Vec<(String, String)>,
) -> Result<ConfigSources, Error> {
    Ok(ConfigSources {
        file: config,
        env_seed: std::env::var("RUN_SEED").ok(),
        sets: split_pairs(sets)?,
        flags,
    })
}

fn open_run(args: ConfigArgs) -> Result<Run, Error> {
    if let Some(dir) = args.run {
        return Run::reopen(&dir);
    }
    let mut flags = Vec::new();
    if let Some(seed) = args.seed {
        flags.push(("seed".to_string(), seed.to_string()));
    }
    if let Some(data) = &args.data {
        flags.push(("data_dir".to_string(), data.display().to_string()));
    }
    let config = load_config(&sources(args.config, &args.sets, flags)?)?;
    let run = Run::open(config, &args.out)?;
    println!("run directory: {}", run.dir.display());
    Ok(run)
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate {
            out,
            n,
            prevalence,
            seed,
            config,
            sets,
        } => {
            let mut flags = Vec::new();
            if let Some(n) = n {
                flags.push(("gen_n_patients".to_string(), n.to_string()));
            }
            if let Some(p) = prevalence {
                flags.push(("gen_prevalence".to_string(), p.to_string()));
            }
            if let Some(s) = seed {
                flags.push(("seed".to_string(), s.to_string()));
            }
            let cfg = load_config(&sources(config, &sets, flags)?)?;
            let n = generate(&cfg, &out)?;
            println!("wrote {n} patients to {}", out.display());
        }
        Command::Prepare(args) => {
            let run = open_run(args)?;
            let prep = run.prepared()?;
            print!("{}", run::read_file(&run.dir.join(PREPARE_FILE))?);
            log::info!("{} matched training patients", prep.split.matched_train.len());
        }
        Command::Train(args) => {
            let run = open_run(args)?;
            let prep = run.prepared()?;
            run.model(&prep)?;
            println!("checkpoint: {}", run.dir.join(CHECKPOINT_FILE).display());
        }
        Command::Cv(args) => print!("{}", open_run(args)?.cross_validate()?),
        Command::Search { args, trials } => {
            let mut run = open_run(args)?;
            if let Some(t) = trials {
                run.config.search_trials = t;
            }
            run.search()?;
            println!("best configuration: {}", run.dir.join(BEST_CONFIG_FILE).display());
        }
        Command::Ablate(args) => print!("{}", open_run(args)?.ablate()?),
        Command::Evaluate { args, partition } => {
            let part: Partition = partition.parse()?;
            let run = open_run(args)?;
            let report = run.evaluate(part)?;
            print!("{}", report.to_csv());
        }
        Command::Recalibrate(args) => {
            let run = open_run(args)?;
            run.recalibrate()?;
            print!("{}", run::read_file(&run.dir.join(RECAL_FILE))?);
        }
        Command::Stratify(args) => {
            let run = open_run(args)?;
            let groups = run.stratify()?;
            println!("{} subgroups written to {}", groups.len(), run.dir.join(SUBGROUPS_FILE).display());
        }
        Command::Baselines(args) => print!("{}", open_run(args)?.baselines()?),
        Command::Report { run } => {
            let path = emit_report(&run)?;
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

/// Exit status for an error: configuration and usage mistakes are usage
/// errors, everything else concerns the data or artifacts.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownAblation { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Runs the command line and returns the process exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(cli_main(["tgcnn", "--bogus"]), EXIT_USAGE);
        assert_eq!(cli_main(["tgcnn", "train", "--frobnicate"]), EXIT_USAGE);
        assert_eq!(cli_main(["tgcnn"]), EXIT_USAGE);
        assert_eq!(cli_main(["tgcnn", "--help"]), EXIT_OK);
    }

    #[test]
    fn bad_set_and_unknown_partition_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(cli_main(["tgcnn", "prepare", "--out", out, "--set", "nonsense"]), EXIT_USAGE);
        assert_eq!(cli_main(["tgcnn", "prepare", "--out", out, "--set", "colour=red"]), EXIT_USAGE);
        assert_eq!(
            cli_main(["tgcnn", "evaluate", "--out", out, "--partition", "test3"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn missing_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.txt");
        let out = dir.path().to_str().unwrap();
        assert_eq!(
            cli_main(["tgcnn", "prepare", "--out", out, "--config", missing.to_str().unwrap()]),
            EXIT_DATA
        );
        assert_eq!(cli_main(["tgcnn", "report", "--run", missing.to_str().unwrap()]), EXIT_DATA);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::CohortTooSmall("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_DATA);
    }
}
