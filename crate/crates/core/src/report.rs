//! CSV report files. Every file starts with `#` comment lines carrying the
//! controller, seed and full config, so a report can be re-derived from its
//! own header.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use crate::config::SimulationConfig;
use crate::engine::SimulationReport;

/// Comment block recording the exact inputs of a run.
pub fn header(config: &SimulationConfig, controller: Option<&str>) -> String {
    let mut out = String::from("# geocloud report\n");
    if let Some(c) = controller {
        let _ = writeln!(out, "# controller = {c}");
    }
    let _ = writeln!(out, "# seed = {}", config.simulation.seed);
    out.push_str("# config:\n");
    for line in config.to_toml().lines() {
        let _ = writeln!(out, "#   {line}");
    }
    out
}

/// Recover the config embedded in a report header.
pub fn config_from_header(text: &str) -> Option<SimulationConfig> {
    let body: String = text
        .lines()
        .skip_while(|l| *l != "# config:")
        .skip(1)
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.strip_prefix("#   ").unwrap_or(l.trim_start_matches('#')))
        .fold(String::new(), |mut acc, l| {
            acc.push_str(l);
            acc.push('\n');
            acc
        });
    SimulationConfig::from_toml(&body).ok()
}

pub fn aggregates_csv(r: &SimulationReport) -> String {
    let mut out = header(&r.config, Some(r.controller.name()));
    out.push_str("metric,value\n");
    let rows: [(&str, f64); 7] = [
        ("it_energy_kwh", r.it_energy_kwh),
        ("it_cost_usd", r.it_cost_usd),
        ("total_energy_kwh", r.total_energy_kwh),
        ("total_cost_usd", r.total_cost_usd),
        ("service_revenue_usd", r.service_revenue_usd),
        ("migration_energy_kwh", r.migration_energy_kwh),
        ("migrations", r.migrations as f64),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    let _ = writeln!(out, "validated_steps,{}", r.validated_steps);
    if let Some(res) = r.calibration_residual_w {
        let _ = writeln!(out, "multicore_calibration_residual_w,{res}");
    }
    out
}

pub fn per_step_csv(r: &SimulationReport) -> String {
    let mut out = header(&r.config, Some(r.controller.name()));
    out.push_str(
        "step,it_energy_kwh,total_energy_kwh,it_cost_usd,total_cost_usd,revenue_usd,\
         migration_energy_kwh,gross_profit_usd,active_pms,allocated_vms,migrations,deferred\n",
    );
    for s in &r.per_step {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            s.step,
            s.it_energy_kwh,
            s.total_energy_kwh,
            s.it_cost_usd,
            s.total_cost_usd,
            s.revenue_usd,
            s.migration_energy_kwh,
            s.gross_profit_usd,
            s.active_pms,
            s.allocated_vms,
            s.migrations,
            s.deferred
        );
    }
    out
}

pub fn actions_csv(r: &SimulationReport) -> String {
    let mut out = header(&r.config, Some(r.controller.name()));
    out.push_str("step,kind,subject,source,target\n");
    for a in &r.actions {
        let (subject, source, target) = a.columns();
        let _ = writeln!(out, "{},{},{subject},{source},{target}", a.step, a.kind_name());
    }
    out
}

pub fn histogram_csv(r: &SimulationReport) -> String {
    let h = &r.histogram;
    let mut out = header(&r.config, Some(r.controller.name()));
    out.push_str("beta_lo,beta_hi,f_ghz,count\n");
    for (bin, row) in h.counts.iter().enumerate() {
        let (lo, hi) = h.bin_bounds(bin);
        for (f, count) in h.frequencies.iter().zip(row) {
            let _ = writeln!(out, "{lo:.2},{hi:.2},{f:.1},{count}");
        }
    }
    out
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

/// Write the four report files for one run into `dir`.
pub fn write_report_files(r: &SimulationReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let name = r.controller.name();
    let files = [
        (format!("report_{name}.csv"), aggregates_csv(r)),
        (format!("per_step_{name}.csv"), per_step_csv(r)),
        (format!("actions_{name}.csv"), actions_csv(r)),
        (format!("hist_beta_freq_{name}.csv"), histogram_csv(r)),
    ];
    let mut written = Vec::new();
    for (file, body) in files {
        let path = dir.join(file);
        write_atomic(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

type Column = fn(&SimulationReport) -> f64;

/// Human-readable comparison table, one column per controller.
pub fn summary_table(reports: &[SimulationReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<22}", "");
    for r in reports {
        let _ = write!(out, "{:>14}", r.controller.name().to_uppercase());
    }
    out.push('\n');
    let rows: [(&str, Column); 5] = [
        ("IT energy (kWh)", |r| r.it_energy_kwh),
        ("IT cost ($)", |r| r.it_cost_usd),
        ("Total energy (kWh)", |r| r.total_energy_kwh),
        ("Total cost ($)", |r| r.total_cost_usd),
        ("Service revenue ($)", |r| r.service_revenue_usd),
    ];
    for (label, get) in rows {
        let _ = write!(out, "{label:<22}");
        for r in reports {
            let _ = write!(out, "{:>14.2}", get(r));
        }
        out.push('\n');
    }
    out
}
