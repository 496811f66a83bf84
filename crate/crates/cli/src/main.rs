use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wealthtax_core::dataset::save_dataset;
use wealthtax_core::report::{self, has_errors, Level, ReportError, RunConfig};
use wealthtax_core::syngen::{self, Scenario, SynthSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "wealthtax", version, about = "Wealth-tax microsimulation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correct the survey, evaluate every design and write the output tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration and print diagnostics as JSON.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic survey CSV from a spec (or a scenario, which also
    /// writes national accounts and a rich list next to it).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the JSON API over a snapshot built from the configuration.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn report_failure(e: &ReportError) -> ExitCode {
    if let ReportError::Invalid(diags) = e {
        for d in diags.iter().filter(|d| d.level == Level::Error) {
            eprintln!("{}: {}", d.path, d.message);
        }
    }
    fail(e.exit_code() as u8, e)
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut cfg = match RunConfig::load(config) {
        Ok(c) => c,
        Err(e) => return report_failure(&e),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    if let Some(dir) = out {
        // command-line paths are relative to the working directory
        cfg.output_dir = std::path::absolute(&dir).unwrap_or(dir);
    }
    match report::run(&cfg) {
        Ok((summary, files)) => {
            for f in &files {
                println!("{}", f.display());
            }
            eprintln!("{} designs evaluated", summary.designs.len());
            ExitCode::SUCCESS
        }
        Err(e) => report_failure(&e),
    }
}

fn validate(config: &Path) -> ExitCode {
    let cfg = match RunConfig::load(config) {
        Ok(c) => c,
        Err(e) => return report_failure(&e),
    };
    let diags = report::validate(&cfg);
    println!("{}", serde_json::to_string_pretty(&diags).expect("diagnostics serialize"));
    if has_errors(&diags) {
        ExitCode::from(EXIT_CONFIG)
    } else {
        ExitCode::SUCCESS
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("synthetic");
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn synth(spec: &Path, out: &Path) -> ExitCode {
    let text = match fs::read_to_string(spec) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", spec.display())),
    };
    let value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", spec.display())),
    };
    let written = if value.get("spec").is_some() {
        match serde_json::from_value::<Scenario>(value) {
            Ok(s) => synth_scenario(&s, out),
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", spec.display())),
        }
    } else {
        match serde_json::from_value::<SynthSpec>(value) {
            Ok(s) => syngen::generate(&s).map_err(|e| e.to_string()).and_then(|ds| {
                save_dataset(&ds, out).map_err(|e| e.to_string())?;
                Ok(vec![out.to_path_buf()])
            }),
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", spec.display())),
        }
    };
    match written {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_DATA, e),
    }
}

fn synth_scenario(scenario: &Scenario, out: &Path) -> Result<Vec<PathBuf>, String> {
    let data = scenario.build().map_err(|e| e.to_string())?;
    save_dataset(&data.observed, out).map_err(|e| e.to_string())?;
    let na = sidecar(out, "national_accounts");
    let file = File::create(&na).map_err(|e| format!("{}: {e}", na.display()))?;
    data.national_accounts.write_csv(file).map_err(|e| e.to_string())?;
    let rl = sidecar(out, "rich_list");
    let file = File::create(&rl).map_err(|e| format!("{}: {e}", rl.display()))?;
    data.rich_list.write_csv(file).map_err(|e| e.to_string())?;
    Ok(vec![out.to_path_buf(), na, rl])
}

fn serve(config: &Path, port: u16) -> ExitCode {
    let cfg = match RunConfig::load(config) {
        Ok(c) => c,
        Err(e) => return report_failure(&e),
    };
    let diags = report::validate(&cfg);
    if has_errors(&diags) {
        return report_failure(&ReportError::Invalid(diags));
    }
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(1, e),
    };
    match rt.block_on(wealthtax_service::serve(cfg, port)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(1, e),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Validate { config } => validate(&config),
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Serve { config, port } => serve(&config, port),
    }
}
