use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use patchbench_core::circuits::ToyCircuitKind;
use patchbench_core::metrics::MetricKind;
use patchbench_core::runner::{
    lines_from_records, load_config_file, read_csv, render_heatmap_svg, render_lines_svg, run_demo,
    run_experiment, verify_circuit, write_csv, HeatmapAxes,
};
use patchbench_core::Error;

#[derive(Parser)]
#[command(name = "patchbench", version, about = "Activation patching on hand-built toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a JSON config and write CSV records.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's "output" field.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that a builtin circuit's ground truth is sufficient.
    Verify {
        #[arg(long)]
        circuit: String,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
    /// Render a CSV of sweep records as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        /// Metric name; for line plots a comma-separated list.
        #[arg(long)]
        metric: String,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// Heatmap axes: "layer,position" or "layer,head".
        #[arg(long, default_value = "layer,position")]
        axes: String,
    },
    /// Write a builtin circuit's weight file and ground-truth sidecar.
    Export {
        #[arg(long)]
        circuit: String,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the full toy-circuit suite and print a pass/fail table.
    Demo,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Heatmap,
    Lines,
}

enum Failure {
    Verification,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn write_text(path: &PathBuf, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| {
        Failure::Error(Error::Io {
            path: path.clone(),
            source: e,
        })
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sweep { config, out } => {
            let cfg = load_config_file(&config)?;
            let out = out.or_else(|| cfg.output.clone()).ok_or_else(|| Error::Config {
                path: ".output".into(),
                message: "no output path in config and no --out given".into(),
            })?;
            let records = run_experiment(&cfg)?;
            write_csv(&records, &out)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Verify { circuit, threshold } => {
            let kind: ToyCircuitKind = circuit.parse()?;
            let (model, truth) = kind.build()?;
            let report = verify_circuit(&model, &truth, threshold)?;
            println!("circuit {kind}");
            println!("{report}");
            if !report.passed() {
                return Err(Failure::Verification);
            }
        }
        Command::Plot {
            input,
            metric,
            kind,
            out,
            axes,
        } => {
            let records = read_csv(&input)?;
            let metrics = metric
                .split(',')
                .map(|m| m.trim().parse::<MetricKind>())
                .collect::<Result<Vec<_>, _>>()?;
            let svg = match kind {
                PlotKind::Heatmap => {
                    let [metric] = metrics[..] else {
                        return Err(Error::Input("a heatmap shows exactly one metric".into()).into());
                    };
                    render_heatmap_svg(&records, metric, axes.parse::<HeatmapAxes>()?)?
                }
                PlotKind::Lines => render_lines_svg(&lines_from_records(&records, &metrics)?)?,
            };
            write_text(&out, &svg)?;
            println!("wrote {}", out.display());
        }
        Command::Export { circuit, dir } => {
            let kind: ToyCircuitKind = circuit.parse()?;
            let (model, truth) = kind.build()?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let weights = dir.join(format!("{kind}.weights.json"));
            let sidecar = dir.join(format!("{kind}.truth.json"));
            model.save(&weights)?;
            truth.save(&sidecar)?;
            println!("wrote {} and {}", weights.display(), sidecar.display());
        }
        Command::Demo => {
            let start = Instant::now();
            let checks = run_demo();
            let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
            for c in &checks {
                println!(
                    "{} {:<width$}  {:>6.2}s  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.seconds,
                    c.detail
                );
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!(
                "{} of {} checks passed in {:.2}s",
                checks.len() - failed,
                checks.len(),
                start.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
