use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use geocloud::batch::{run_batch_with_workers, run_sweep, sweep_csv, SweepAxis, SweepSpec};
use geocloud::report::{summary_table, write_atomic, write_report_files};
use geocloud::{ControllerKind, SimulationConfig};

#[derive(Parser)]
#[command(name = "geocloud", version, about = "Geo-distributed cloud cost simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one or all controllers on a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// bfd, bcf or bcffs; defaults to the controllers listed in the config.
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Vary one parameter and compare controllers at each value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse a config and check it without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &Path) -> Result<SimulationConfig> {
    SimulationConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(
    config: &Path,
    controller: Option<ControllerKind>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load(config)?;
    if let Some(seed) = seed {
        cfg.simulation.seed = seed;
    }
    if let Some(steps) = steps {
        cfg.simulation.steps = steps;
    }
    if let Some(kind) = controller {
        cfg.simulation.controllers = vec![kind];
    }
    cfg.validate()?;

    let jobs: Vec<_> = cfg
        .simulation
        .controllers
        .iter()
        .map(|k| (cfg.clone(), *k))
        .collect();
    let reports = run_batch_with_workers(&jobs, cfg.sweep.workers)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        write_report_files(r, out).with_context(|| format!("writing reports to {}", out.display()))?;
    }
    println!(
        "seed {} | {} steps | {} PMs | {} VMs",
        cfg.simulation.seed, cfg.simulation.steps, cfg.inventory.pm_count, cfg.workload.vm_count
    );
    print!("{}", summary_table(&reports));
    if let Some(res) = reports.iter().find_map(|r| r.calibration_residual_w) {
        println!("multicore calibration residual: {res:.3e} W");
    }
    Ok(())
}

fn sweep(config: &Path, axis: SweepAxis, values: &[String], out: &Path) -> Result<()> {
    let cfg = load(config)?;
    cfg.validate()?;
    let raw: Vec<&str> = values.iter().map(String::as_str).collect();
    let spec = match SweepSpec::parse(axis, &raw, cfg.simulation.controllers.clone()) {
        Ok(spec) => spec,
        Err(e) => bail!(e),
    };
    for v in &spec.values {
        spec.apply(&cfg, v)
            .validate()
            .with_context(|| format!("{axis} = {v}"))?;
    }
    let rows = run_sweep(&cfg, &spec)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("sweep_{axis}.csv"));
    write_atomic(&path, &sweep_csv(&cfg, &spec, &rows))?;

    println!("{:<18}{:>10}{:>14}{:>12}{:>12}", axis.name(), "ctrl", "total cost", "vs BFD", "vs BCF");
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "-".into());
    for r in &rows {
        println!(
            "{:<18}{:>10}{:>14.2}{:>12}{:>12}",
            r.axis_value,
            r.controller,
            r.total_cost_usd,
            pct(r.savings_vs_bfd),
            pct(r.savings_vs_bcf)
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn validate(config: &Path) -> Result<()> {
    let cfg = load(config)?;
    cfg.validate()?;
    let scenario = cfg.build()?;
    println!(
        "ok: {} PMs, {} VMs, {} locations, {} steps",
        scenario.pms.len(),
        scenario.vms.len(),
        scenario.prices.len(),
        cfg.simulation.steps
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            controller,
            seed,
            steps,
            out,
        } => run(config, *controller, *seed, *steps, out),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => sweep(config, *axis, values, out),
        Command::Validate { config } => validate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
