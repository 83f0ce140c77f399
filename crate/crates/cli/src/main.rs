use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use soup_cli::commands::{self, Grid, SelectMethod, SoupMethod, Suite};
use soup_cli::config::PipelineConfig;
use soup_cli::error::{CliError, CliResult};
use soup_cli::workspace::Workspace;

/// Train domain adapters, select and average them for novel domains, and
/// evaluate the results.
#[derive(Parser, Debug)]
#[command(name = "adapter-soup", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Workspace directory (overrides `workspace.path`).
    #[arg(long, env = "ADAPTER_SOUP_WORKSPACE", global = true)]
    workspace: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the tokenizer and per-domain corpus splits.
    Prepare,
    /// Train the base model and domain adapters.
    Train {
        /// Comma-separated training domains, or `all`.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        /// Learning-rate by data-seed grid on the sweep domain.
        #[arg(long)]
        sweep: Option<Grid>,
        /// Parallel training jobs (overrides `workspace.workers`).
        #[arg(long)]
        workers: Option<usize>,
        /// Stop after the base model.
        #[arg(long)]
        base_only: bool,
    },
    /// Rank training domains for a novel domain.
    Select {
        /// Novel domain name.
        #[arg(long)]
        novel: String,
        /// Selection method.
        #[arg(long, value_enum, default_value = "both")]
        method: SelectMethod,
    },
    /// Average selected adapters into one checkpoint.
    Soup {
        /// Novel domain name.
        #[arg(long)]
        novel: String,
        /// Selection method.
        #[arg(long, value_enum)]
        method: SoupMethod,
        /// Adapter ids (or unique prefixes) for `--method manual`.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Average adapters trained from different initializations.
        #[arg(long)]
        allow_unsafe: bool,
    },
    /// Score methods on test splits and write reports.
    Eval {
        /// Experiment to run.
        #[arg(long, value_enum)]
        suite: Suite,
        /// Method name for `--suite cell`.
        #[arg(long)]
        method: Option<String>,
        /// Domain for `--suite cell`.
        #[arg(long)]
        domain: Option<String>,
        /// Sweep grid for `--suite single-domain`.
        #[arg(long, value_enum, default_value = "config")]
        grid: Grid,
        /// Only count the recipes a single-domain sweep would evaluate.
        #[arg(long)]
        dry_run: bool,
        /// Parallel training jobs (overrides `workspace.workers`).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print stored reports and refresh their CSV views.
    Report {
        /// Only this suite; all stored reports by default.
        #[arg(long, value_enum)]
        suite: Option<Suite>,
    },
    /// Extra per-token FLOPs of adapters versus a hierarchy adapter.
    Cost {
        /// Transformer layers; defaults to the model config.
        #[arg(long)]
        layers: Option<u64>,
        /// Model width; defaults to the model config.
        #[arg(long)]
        d_model: Option<u64>,
        /// Adapter bottleneck; defaults to the model config.
        #[arg(long)]
        bottleneck: Option<u64>,
        /// Hierarchy tree depth.
        #[arg(long, default_value_t = 8)]
        t: u64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(w) = cli.workspace {
        cfg.workspace.path = w;
    }
    if let Command::Train { workers: Some(n), .. } | Command::Eval { workers: Some(n), .. } = cli.command {
        cfg.workspace.workers = n;
    }
    cfg.validate()?;

    if let Command::Cost {
        layers,
        d_model,
        bottleneck,
        t,
        json,
    } = cli.command
    {
        let m = &cfg.model;
        return commands::cost(
            layers.unwrap_or(m.layers as u64),
            d_model.unwrap_or(m.d_model as u64),
            bottleneck.unwrap_or(m.bottleneck as u64),
            t,
            json,
        );
    }
    if let Command::Eval {
        suite: Suite::SingleDomain,
        grid,
        dry_run: true,
        ..
    } = cli.command
    {
        commands::sweep_dry_run(&cfg, grid)?;
        return Ok(());
    }

    let ws = Workspace::open(&cfg.workspace.path)?;
    match cli.command {
        Command::Prepare => {
            commands::prepare(&cfg, &ws)?;
        }
        Command::Train {
            domains,
            sweep,
            base_only,
            ..
        } => {
            commands::train(&cfg, &ws, &domains, sweep, base_only)?;
        }
        Command::Select { novel, method } => commands::select(&cfg, &ws, &novel, method)?,
        Command::Soup {
            novel,
            method,
            ids,
            allow_unsafe,
        } => {
            commands::soup(&cfg, &ws, &novel, method, &ids, allow_unsafe)?;
        }
        Command::Eval {
            suite,
            method,
            domain,
            grid,
            ..
        } => match suite {
            Suite::CrossDomain => {
                commands::eval_cross_domain(&cfg, &ws)?;
            }
            Suite::SingleDomain => {
                commands::eval_single_domain(&cfg, &ws, grid)?;
            }
            Suite::Cell => {
                let (Some(m), Some(d)) = (method, domain) else {
                    return Err(CliError::Usage("--suite cell needs --method and --domain".into()));
                };
                commands::eval_cell(&cfg, &ws, &m, &d)?;
            }
        },
        Command::Report { suite } => commands::report(&ws, suite)?,
        Command::Cost { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
