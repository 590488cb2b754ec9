use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dynqos::emit::{self, Format};
use dynqos::{catalog, load_str, resolve, sweep, Overrides};
use dynqos_core::pfsm::SignalMode;
use dynqos_core::scenario::run;

/// Simulate a UAV sharing a 5G cell with dynamic QoS selection.
#[derive(Parser)]
#[command(name = "dynqos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Deterministic,
    Stochastic,
}

#[derive(clap::Args)]
struct RunOpts {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    config: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides how latency signals are emitted.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl RunOpts {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::Deterministic => SignalMode::Deterministic,
                ModeArg::Stochastic => SignalMode::Stochastic,
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        /// Output directory; without it the selected formats go to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Outputs to produce.
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["csv", "json"])]
        format: Vec<FormatArg>,
    },
    /// Run a scenario once per value of one parameter, in parallel.
    Sweep {
        #[command(flatten)]
        opts: RunOpts,
        /// Dotted key to vary, such as `pfsm.control.rho`.
        #[arg(long)]
        param: String,
        /// Comma-separated TOML values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Directory for the per-run outputs and `sweep.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check a scenario file without running it.
    Validate {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        config: String,
    },
    /// List the bundled scenarios.
    List,
}

fn formats(args: &[FormatArg]) -> Vec<Format> {
    let mut f: Vec<Format> = args
        .iter()
        .map(|a| match a {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        })
        .collect();
    f.sort();
    f.dedup();
    f
}

fn execute(command: Command) -> Result<(), String> {
    match command {
        Command::Run { opts, out, format } => {
            let (text, origin) = resolve(&opts.config).map_err(|e| e.to_string())?;
            let mut scenario = load_str(&text, &origin).map_err(|e| e.to_string())?;
            opts.overrides().apply(&mut scenario.config);
            let (records, summary) = run(&scenario.config).map_err(|e| e.to_string())?;
            let formats = formats(&format);
            match out {
                Some(dir) => {
                    let written = emit::write_outputs(
                        &dir,
                        &scenario.name,
                        &scenario.config,
                        &records,
                        &summary,
                        &formats,
                    )
                    .map_err(|e| e.to_string())?;
                    for p in written {
                        eprintln!("wrote {}", p.display());
                    }
                }
                None => {
                    let mut stdout = io::stdout().lock();
                    if formats.contains(&Format::Csv) {
                        emit::write_csv(&records, &mut stdout).map_err(|e| e.to_string())?;
                    }
                    if formats.contains(&Format::Json) {
                        let json = emit::summary_json(
                            &scenario.name,
                            &scenario.config,
                            &records,
                            &summary,
                        )
                        .map_err(|e| e.to_string())?;
                        stdout
                            .write_all(json.as_bytes())
                            .map_err(|e| e.to_string())?;
                    }
                }
            }
            eprintln!(
                "{}: {} rows, verdict {:?}, {} transitions",
                scenario.name,
                records.len(),
                summary.verdict,
                summary.transitions.len()
            );
            Ok(())
        }
        Command::Sweep {
            opts,
            param,
            values,
            out,
            jobs,
        } => {
            let (text, origin) = resolve(&opts.config).map_err(|e| e.to_string())?;
            // reject a broken base file before spawning anything
            load_str(&text, &origin).map_err(|e| e.to_string())?;
            let threads =
                jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let runs = sweep::sweep(&text, &origin, &param, &values, opts.overrides(), threads);
            let mut failed = 0;
            for r in &runs {
                match &r.outcome {
                    Ok((s, records, summary)) => {
                        let dir =
                            out.join(format!("{param}={}", r.value.replace(['/', '"', ' '], "_")));
                        emit::write_outputs(
                            &dir,
                            &s.name,
                            &s.config,
                            records,
                            summary,
                            &[Format::Csv, Format::Json],
                        )
                        .map_err(|e| e.to_string())?;
                    }
                    Err(e) => {
                        failed += 1;
                        eprintln!("{param} = {}: {e}", r.value);
                    }
                }
            }
            std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            let table = out.join("sweep.csv");
            let file =
                std::fs::File::create(&table).map_err(|e| format!("{}: {e}", table.display()))?;
            sweep::write_table(&param, &runs, file).map_err(|e| e.to_string())?;
            eprintln!("wrote {}", table.display());
            if failed > 0 {
                return Err(format!("{failed} of {} runs failed", runs.len()));
            }
            Ok(())
        }
        Command::Validate { config } => {
            let (text, origin) = resolve(&config).map_err(|e| e.to_string())?;
            let s = load_str(&text, &origin).map_err(|e| e.to_string())?;
            println!("{}: ok", s.name);
            Ok(())
        }
        Command::List => {
            for (name, _) in catalog::BUNDLED {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
