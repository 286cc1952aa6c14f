//! Command-line front end: run experiments from config files, replay runs
//! from their manifests, and generate or check group-assignment matrices.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedsim_core::fedgt::{build_assignment, AssignmentMatrix, MatrixStrategy};
use fedsim_core::harness::{
    emit_outputs, replay, run_experiment, ExperimentConfig, RunManifest,
};

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Seed-reproducible federated-learning simulator with misbehavior \
             detection and contribution scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Directory for the results CSVs, run manifest, and plot data.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Worker threads for repetitions (0 picks one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log progress to stderr; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        /// Experiment config (TOML, schema-versioned).
        config: PathBuf,
    },
    /// Re-run an experiment from its manifest and verify that the results
    /// reproduce byte-identically.
    Replay {
        /// Run manifest (JSON) from a previous `run`.
        manifest: PathBuf,
    },
    /// Assignment-matrix tooling.
    Matrix {
        #[command(subcommand)]
        command: MatrixCommand,
    },
}

#[derive(Subcommand)]
enum MatrixCommand {
    /// Generate a privacy-checked matrix and print or write its text form.
    Gen(GenArgs),
    /// Validate a matrix file: shape, row weight, coverage, privacy.
    Check {
        /// Matrix text file ("L N k" header, then 0/1 rows).
        file: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    /// Number of clients (matrix columns).
    #[arg(long)]
    clients: usize,

    /// Number of test groups (matrix rows).
    #[arg(long)]
    groups: usize,

    /// Clients per group (row weight).
    #[arg(long)]
    group_size: usize,

    /// Construction seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Round index for the per-round construction; with --same the same
    /// matrix comes back for every round.
    #[arg(long, default_value_t = 1)]
    round: usize,

    /// Derive one matrix for all rounds instead of one per round.
    #[arg(long)]
    same: bool,

    /// Output file ("-" writes to stdout).
    #[arg(long, default_value = "-")]
    file: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("building the worker pool")?;
    }
    match cli.command {
        Command::Run { config } => cmd_run(&config, &cli.out_dir),
        Command::Replay { manifest } => cmd_replay(&manifest, &cli.out_dir),
        Command::Matrix { command } => match command {
            MatrixCommand::Gen(args) => cmd_matrix_gen(&args),
            MatrixCommand::Check { file } => cmd_matrix_check(&file),
        },
    }
}

fn cmd_run(config: &PathBuf, out_dir: &PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::from_toml_path(config)
        .with_context(|| format!("loading {}", config.display()))?;
    log::info!(
        "running {}: {} clients, {} rounds, {} repetitions",
        cfg.experiment_id,
        cfg.num_clients,
        cfg.rounds,
        cfg.repetitions
    );
    let table = run_experiment(&cfg).context("running the experiment")?;
    for (rep, msg) in &table.failures {
        log::warn!("repetition {rep} failed: {msg}");
    }
    let paths = emit_outputs(&table, out_dir).context("writing outputs")?;
    println!("results:  {}", paths.results.display());
    println!("manifest: {}", paths.manifest.display());
    println!("plot:     {}", paths.plot.display());
    if !table.failures.is_empty() {
        bail!("{} of {} repetitions failed", table.failures.len(), cfg.repetitions);
    }
    Ok(())
}

fn cmd_replay(manifest: &PathBuf, out_dir: &PathBuf) -> Result<()> {
    let man = RunManifest::from_json_path(manifest)
        .with_context(|| format!("loading {}", manifest.display()))?;
    log::info!("replaying {}", man.config.experiment_id);
    let table = replay(&man).context("replay diverged from the manifest")?;
    let paths = emit_outputs(&table, out_dir).context("writing outputs")?;
    println!("replay reproduced the recorded results digest");
    println!("results:  {}", paths.results.display());
    Ok(())
}

fn cmd_matrix_gen(args: &GenArgs) -> Result<()> {
    let strategy = if args.same {
        MatrixStrategy::Same
    } else {
        MatrixStrategy::Prefixed
    };
    let matrix = build_assignment(
        args.clients,
        args.groups,
        args.group_size,
        args.seed,
        strategy,
        args.round,
    )
    .context("constructing the matrix")?;
    let text = matrix.to_text();
    if args.file == "-" {
        print!("{text}");
        std::io::stdout().flush()?;
    } else {
        std::fs::write(&args.file, text).with_context(|| format!("writing {}", args.file))?;
        println!("wrote {}", args.file);
    }
    Ok(())
}

fn cmd_matrix_check(file: &PathBuf) -> Result<()> {
    let text =
        std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let matrix = AssignmentMatrix::from_text(&text).context("invalid matrix")?;
    println!(
        "{} groups x {} clients, group size {}",
        matrix.num_groups(),
        matrix.num_clients(),
        matrix.group_size()
    );
    let isolated = matrix.isolated_clients();
    if isolated.is_empty() {
        println!("privacy: ok (no client isolatable from group aggregates)");
        Ok(())
    } else {
        bail!("privacy: clients {isolated:?} can be isolated from group aggregates");
    }
}
