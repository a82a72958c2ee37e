use std::fs;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ufork_core::metrics::{compare, StrategyRun};
use ufork_core::workload::gen::{self, RedisParams};
use ufork_core::workload::{parse, run, RunConfig, RunOutcome, Script};
use ufork_core::{ForkStrategy, IsolationLevel};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "ufork", version, about = "Single-address-space fork simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a script and print its trace and metrics.
    Run {
        /// Script path, or `-` for stdin.
        script: String,
        #[arg(long, default_value = "copa")]
        strategy: ForkStrategy,
        #[arg(long, default_value = "full")]
        isolation: IsolationLevel,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Write the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sweep page-table invariants after every mutation.
        #[arg(long)]
        debug_checks: bool,
    },
    /// Run a script under several strategies and check copy-count ordering.
    Compare {
        script: String,
        #[arg(long, value_delimiter = ',', default_value = "full,coa,copa")]
        strategies: Vec<ForkStrategy>,
        #[arg(long, default_value = "full")]
        isolation: IsolationLevel,
    },
    /// Run a script auditing after every statement.
    Audit {
        script: String,
        #[arg(long, default_value = "copa")]
        strategy: ForkStrategy,
    },
    /// Print a generated script.
    Gen {
        #[arg(long, default_value_t = 64)]
        pages: u64,
        #[arg(long, default_value_t = 0.0625)]
        ref_density: f64,
        #[arg(long, default_value_t = 1.0)]
        child_read_frac: f64,
        #[arg(long, default_value_t = 4)]
        write_pages: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Emit a random mixed workload from this seed instead.
        #[arg(long)]
        fuzz: Option<u64>,
    },
}

fn load(path: &str) -> Result<Script, String> {
    let text = if path == "-" {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| format!("stdin: {e}"))?;
        s
    } else {
        fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?
    };
    parse(&text).map_err(|e| format!("{path}:{e}"))
}

fn execute(script: &Script, cfg: &RunConfig) -> Result<RunOutcome, String> {
    run(script, cfg).map_err(|e| e.to_string())
}

fn usage(msg: String) -> ExitCode {
    eprintln!("ufork: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn cmd_run(
    script: &str,
    cfg: RunConfig,
    format: Format,
    out: Option<PathBuf>,
) -> Result<ExitCode, String> {
    let script = load(script)?;
    let outcome = execute(&script, &cfg)?;
    let metrics = match format {
        Format::Text => outcome.report.to_text(),
        Format::Csv => outcome.report.to_csv().map_err(|e| e.to_string())?,
    };
    let mut stdout = io::stdout().lock();
    match &out {
        Some(path) => {
            write!(stdout, "{}", outcome.trace).map_err(|e| e.to_string())?;
            fs::write(path, &metrics).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        None if matches!(format, Format::Csv) => {
            write!(stdout, "{metrics}").map_err(|e| e.to_string())?
        }
        None => write!(stdout, "{}\n{metrics}", outcome.trace).map_err(|e| e.to_string())?,
    }
    writeln!(io::stderr(), "trace_hash={}", outcome.trace_hash()).ok();
    for v in &outcome.violations {
        eprintln!("invariant: {v}");
    }
    for f in &outcome.assertion_failures {
        eprintln!("assertion failed: {f}");
    }
    if outcome.assertion_failures.is_empty() && outcome.violations.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_CHECK_FAILED))
    }
}

fn cmd_compare(
    script: &str,
    strategies: &[ForkStrategy],
    isolation: IsolationLevel,
) -> Result<ExitCode, String> {
    let script = load(script)?;
    let mut runs = Vec::new();
    for s in strategies {
        let outcome = execute(&script, &RunConfig::new(*s).isolation(isolation))?;
        runs.push(StrategyRun {
            trace_hash: outcome.trace_hash(),
            report: outcome.report,
        });
    }
    let cmp = compare(&runs).map_err(|e| e.to_string())?;
    print!("{cmp}");
    Ok(if cmp.dominance_holds() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    })
}

fn cmd_audit(script: &str, strategy: ForkStrategy) -> Result<ExitCode, String> {
    let script = load(script)?;
    let mut cfg = RunConfig::new(strategy);
    cfg.audit_every_step = true;
    let outcome = execute(&script, &cfg)?;
    print!("{}", outcome.audit);
    // Unsafe copy-on-write is expected to leak; report without failing.
    if outcome.audit.is_clean() || strategy == ForkStrategy::UnsafeCoW {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_CHECK_FAILED))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            script,
            strategy,
            isolation,
            format,
            out,
            seed,
            debug_checks,
        } => {
            let mut cfg = RunConfig::new(strategy).isolation(isolation);
            cfg.seed = seed;
            cfg.debug_checks = debug_checks;
            cmd_run(&script, cfg, format, out)
        }
        Cmd::Compare {
            script,
            strategies,
            isolation,
        } => cmd_compare(&script, &strategies, isolation),
        Cmd::Audit { script, strategy } => cmd_audit(&script, strategy),
        Cmd::Gen {
            pages,
            ref_density,
            child_read_frac,
            write_pages,
            seed,
            fuzz,
        } => {
            let script = match fuzz {
                Some(s) => Ok(gen::mixed(s)),
                None => gen::redis_analog(&RedisParams {
                    pages,
                    ref_density,
                    child_read_frac,
                    write_pages,
                    seed,
                })
                .map_err(|e| e.to_string()),
            };
            script.map(|s| {
                print!("{s}");
                ExitCode::SUCCESS
            })
        }
    };
    result.unwrap_or_else(usage)
}
