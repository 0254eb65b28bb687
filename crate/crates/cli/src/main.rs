use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ionlds::commands;
use ionlds::config::{self, FileConfig};
use ionlds::records::select_record;
use ionlds::store::Store;
use ionlds::{AppError, AppResult};
use ionlds_core::evaluation::Horizon;
use ionlds_core::fitting::ModelFamily;

#[derive(Parser, Debug)]
#[command(
    name = "ionlds",
    version,
    about = "Fit, forecast and compare drug-infusion response models"
)]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "IONLDS_LOG")]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort directory.
    Simulate {
        /// Generator spec file, or `stationary` / `nonstationary`.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        patients: usize,
    },
    /// Fit one model per patient of a cohort.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        family: Option<ModelFamily>,
        /// Model specification JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also insert the records into this service store.
        #[arg(long, env = "IONLDS_STORE")]
        store: Option<PathBuf>,
    },
    /// Forecast means and variances under a protocol CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Patient (or model id) to take from a fit bundle.
        #[arg(long)]
        patient: Option<String>,
        #[arg(long)]
        protocol: PathBuf,
        /// Steps ahead, or `free`.
        #[arg(long)]
        horizon: Horizon,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare models on a cohort and print the report table.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comparison config JSON (arms, horizons).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "IONLDS_PORT")]
        port: Option<u16>,
        #[arg(long, env = "IONLDS_STORE")]
        store: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        /// Fit worker pool size.
        #[arg(long)]
        workers: Option<usize>,
        /// Static files served under `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
        /// JSON file with any of: store, port, host, log, workers, ui.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn init_logging(filter: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format_timestamp_millis()
        .try_init();
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Simulate {
            spec,
            seed,
            out,
            patients,
        } => {
            init_logging(cli.log.as_deref().unwrap_or("warn"));
            let spec = commands::load_generator_spec(&spec)?;
            let manifest = commands::simulate(&spec, seed, patients, &out)?;
            println!(
                "wrote {} patients of cohort {} to {}",
                manifest.patients.len(),
                manifest.cohort_id,
                out.display()
            );
        }
        Command::Fit {
            data,
            family,
            config,
            out,
            store,
        } => {
            init_logging(cli.log.as_deref().unwrap_or("warn"));
            let spec = commands::resolve_spec(family, config.as_deref())?;
            let store = store.map(Store::open).transpose()?;
            let bundle = commands::fit(&data, &spec, &out, store.as_ref())?;
            println!(
                "fitted {} of {} patients ({}) to {}",
                bundle.records.len(),
                bundle.records.len() + bundle.failures.len(),
                spec.family().label(),
                out.display()
            );
        }
        Command::Predict {
            model,
            patient,
            protocol,
            horizon,
            out,
        } => {
            init_logging(cli.log.as_deref().unwrap_or("warn"));
            let text = std::fs::read_to_string(&model)
                .map_err(|e| AppError::invalid("io", format!("cannot read {}: {e}", model.display())))?;
            let record = select_record(&text, patient.as_deref())?;
            let rows = commands::predict(&record, &protocol, horizon, &out)?;
            println!("wrote {rows} forecast rows to {}", out.display());
        }
        Command::Evaluate {
            cohort,
            out,
            config,
            table,
        } => {
            init_logging(cli.log.as_deref().unwrap_or("warn"));
            let config = commands::load_compare_config(config.as_deref())?;
            let (_, text) = commands::evaluate(&cohort, &config, &out)?;
            if let Some(path) = table {
                std::fs::write(&path, &text)
                    .map_err(|e| AppError::invalid("io", format!("cannot write {}: {e}", path.display())))?;
            }
            print!("{text}");
        }
        Command::Serve {
            port,
            store,
            host,
            workers,
            ui,
            config: config_path,
        } => {
            let file = match &config_path {
                Some(p) => FileConfig::load(p)?,
                None => FileConfig::default(),
            };
            let flags = FileConfig {
                store,
                port,
                host,
                log: cli.log,
                workers,
                ui,
            };
            let cfg = config::resolve(flags, file);
            init_logging(&cfg.log);
            let store = Store::open(&cfg.store)?;
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| AppError::internal(e.to_string()))?;
            runtime.block_on(ionlds::server::serve(store, &cfg.host, cfg.port, cfg.workers, cfg.ui))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let text = text.join(" ");
            let text = text.trim_start_matches("error: ");
            eprintln!("{}", AppError::invalid("usage", text).to_json_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
