use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmc::cli::{
    cmd_bench, cmd_chain, cmd_extract, cmd_propose, cmd_report, BackendChoice, CliError,
    RunConfig, EXIT_OK,
};
use lmc::eval::ValidationMode;

/// Cascaded language-model extraction of dates of birth, with benchmarking
/// and chain construction.
#[derive(Parser)]
#[command(name = "lmc", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Corpus manifest (`id,path[,target]` per line).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Generate endpoint URL, e.g. http://localhost:11434/api/generate.
    #[arg(long, global = true, env = "LMC_BACKEND_URL")]
    backend_url: Option<String>,
    /// Scripted replies instead of a live backend.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// File holding a prompt template with a single `_` placeholder.
    #[arg(long, global = true)]
    prompt_file: Option<PathBuf>,
    /// Maximum in-flight requests per backend.
    #[arg(long, global = true, default_value_t = 1)]
    concurrency: usize,
    /// Request timeout in seconds.
    #[arg(long, global = true, env = "LMC_TIMEOUT", default_value_t = 600.0)]
    timeout: f64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run each model on its own over the corpus.
    Bench {
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Run a chain over the corpus.
    Chain {
        #[arg(long)]
        chain: PathBuf,
    },
    /// Propose chains from a bench report table.
    Propose {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "in_document")]
        mode: String,
    },
    /// Extract the date of birth from a single text file.
    Extract {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        text: PathBuf,
    },
    /// Rebuild the report table from stored prediction records.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

fn run_config(args: GlobalArgs) -> Result<RunConfig, CliError> {
    let backend = match (args.backend_url, args.mock_script) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--backend-url and --mock-script are mutually exclusive".into(),
            ))
        }
        (Some(url), None) => Some(BackendChoice::Http { url }),
        (None, Some(script)) => Some(BackendChoice::Mock { script }),
        (None, None) => None,
    };
    let prompt_override = args
        .prompt_file
        .map(|path| {
            std::fs::read_to_string(&path).map_err(|source| CliError::Io { path, source })
        })
        .transpose()?
        .map(|p| p.trim_end_matches(['\r', '\n']).to_string());
    Ok(RunConfig {
        corpus_manifest: args.manifest,
        backend,
        prompt_override,
        concurrency_limit: args.concurrency,
        timeout_seconds: args.timeout,
        output_dir: args.out,
    })
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let config = run_config(cli.global)?;
    match cli.command {
        Command::Bench { models } => {
            cmd_bench(&config, &models)?;
            println!("{}", config.output_dir.join(lmc::cli::REPORT_FILE).display());
        }
        Command::Chain { chain } => {
            let (outcome, _) = cmd_chain(&config, &chain)?;
            for t in &outcome.traces {
                println!(
                    "stage {} {}: in {} resolved {} unresolved {}",
                    t.stage_index, t.model_name, t.documents_in, t.resolved, t.unresolved
                );
            }
            println!("{}", config.output_dir.join(lmc::cli::REPORT_FILE).display());
        }
        Command::Propose { reports, k, mode } => {
            let mode: ValidationMode = mode
                .parse()
                .map_err(|e: lmc::eval::EvalError| CliError::Usage(e.to_string()))?;
            for p in cmd_propose(&config, &reports, k, mode)? {
                println!("{}: {}", p.chain.id(), p.rationale);
            }
        }
        Command::Extract { chain, text } => {
            let outcome = cmd_extract(&config, &chain, &text)?;
            print!("{}", outcome.render());
            return Ok(outcome.exit_code());
        }
        Command::Report { records, traces } => {
            cmd_report(&config, &records, traces.as_deref())?;
            println!("{}", config.output_dir.join(lmc::cli::REPORT_FILE).display());
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("lmc: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
