mod config;
mod error;
mod experiments;
mod gradcheck;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ddcl_core::data::{generate_blobs, generate_corpus, generate_debris, TokenStream};
use ddcl_core::Backend;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::experiments::{run_experiment, Fault, RunContext};
use crate::output::{float, unix_ms, write_outputs, Table};

#[derive(Parser, Debug)]
#[command(name = "ddcl", version, about = "Run prototype-layer experiments and write CSV results")]
struct Cli {
    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (takes precedence over the config's `out_dir`).
    #[arg(long, global = true, env = "DDCL_OUT_DIR")]
    out_dir: Option<PathBuf>,

    /// Worker threads; 1 runs every kernel sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, hide = true)]
    fault: Option<Fault>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Write a generated dataset as CSV (label in the last column).
    Generate {
        dataset: Dataset,
        out: PathBuf,
        /// Take dataset parameters from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dataset {
    Debris,
    Blobs,
    Corpus,
    Tokens,
}

fn setup_threads(threads: Option<usize>) -> CliResult<Backend> {
    match threads {
        Some(0) => Err(CliError::config("--threads must be >= 1")),
        Some(1) => Ok(Backend::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
            Ok(Backend::Parallel)
        }
        _ => Ok(Backend::default()),
    }
}

fn run(cli: &Cli, path: &Path, backend: Backend) -> CliResult<()> {
    let started = unix_ms();
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("ddcl-out").join(config.experiment.name()));
    let tables = run_experiment(&config, &RunContext { backend, fault: cli.fault })?;
    let written = write_outputs(&dir, &tables, &config, cli.threads, started)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn gradcheck(cli: &Cli, instances: usize, backend: Backend) -> CliResult<()> {
    let started = unix_ms();
    let mut config = ExperimentConfig::parse("experiment = \"gradcheck\"")?;
    config.seed = cli.seed.unwrap_or(config.seed);
    config.gradcheck.instances = Some(instances);
    let table = experiments::gradcheck(&config, &RunContext { backend, fault: cli.fault })?;
    if let Some(dir) = &cli.out_dir {
        write_outputs(dir, &[table], &config, cli.threads, started)?;
    }
    Ok(())
}

fn dataset_table(name: &str, x: &ddcl_core::Matrix, features: &[String], extra: &[(&str, Vec<usize>)], y: &[usize]) -> Table {
    let mut header: Vec<&str> = features.iter().map(String::as_str).collect();
    header.extend(extra.iter().map(|(n, _)| *n));
    header.push("label");
    let mut t = Table::new(name, &header);
    for i in 0..x.rows() {
        let mut row: Vec<String> = x.row(i).iter().map(|v| float(*v)).collect();
        row.extend(extra.iter().map(|(_, col)| col[i].to_string()));
        row.push(y[i].to_string());
        t.push(row);
    }
    t
}

fn generate(cli: &Cli, dataset: Dataset, out: &Path, config_path: Option<&Path>) -> CliResult<()> {
    let experiment = match dataset {
        Dataset::Debris => Experiment::Debris,
        Dataset::Blobs => Experiment::Ablation,
        Dataset::Corpus => Experiment::Hierarchy,
        Dataset::Tokens => Experiment::Vq,
    };
    let mut config = match config_path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::parse(&format!("experiment = \"{}\"", experiment.name()))?,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let table = match dataset {
        Dataset::Debris => {
            let ds = generate_debris(&config.debris_params().0, config.seed)?;
            dataset_table("debris", &ds.x, &ds.feature_names, &[], &ds.y)
        }
        Dataset::Blobs => {
            let ds = generate_blobs(&config.blob_params().0, config.seed)?;
            dataset_table("blobs", &ds.x, &ds.feature_names, &[], &ds.y)
        }
        Dataset::Corpus => {
            let corpus = generate_corpus(&config.corpus_params(), config.seed)?;
            let x = corpus.stacked_tokens();
            let mut docs = Vec::with_capacity(x.rows());
            let mut topics = Vec::with_capacity(x.rows());
            for (d, doc) in corpus.docs.iter().enumerate() {
                docs.extend(std::iter::repeat_n(d, doc.rows()));
                topics.extend(std::iter::repeat_n(corpus.topics[d], doc.rows()));
            }
            let names: Vec<String> = (0..corpus.dim).map(|j| format!("x{j}")).collect();
            dataset_table("corpus", &x, &names, &[("doc", docs)], &topics)
        }
        Dataset::Tokens => {
            let vq = config.vq_configs(Backend::Sequential)?;
            let stream = TokenStream::new(vq[0].tokens.clone(), config.seed)?;
            let ds = stream.epoch(0);
            dataset_table("tokens", &ds.x, &ds.feature_names, &[], &ds.y)
        }
    };
    let bytes = table.to_bytes()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(out, bytes).map_err(|e| CliError::io(out, e))?;
    println!("wrote {} ({} rows)", out.display(), table.rows.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = setup_threads(cli.threads).and_then(|backend| match &cli.command {
        Command::Run { config } => run(&cli, config, backend),
        Command::Generate { dataset, out, config } => generate(&cli, *dataset, out, config.as_deref()),
        Command::Gradcheck { instances } => gradcheck(&cli, *instances, backend),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
