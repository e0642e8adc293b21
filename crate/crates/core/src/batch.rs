//! Many independent simulations at once: seeded batches and parameter
//! sweeps. With the `parallel` feature the runs are spread over a rayon
//! pool; without it they run one after another. Results are returned in
//! job order either way.

use std::fmt;
use std::str::FromStr;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ElectricityMode, SimulationConfig};
use crate::controllers::ControllerKind;
use crate::engine::{run_simulation, EngineError, SimulationReport};
use crate::traces::BetaSource;

pub type Job = (SimulationConfig, ControllerKind);

pub fn run_batch_sequential(jobs: &[Job]) -> Vec<Result<SimulationReport, EngineError>> {
    jobs.iter().map(|(cfg, kind)| run_simulation(cfg, *kind)).collect()
}

/// Run every job, concurrently when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn run_batch(jobs: &[Job]) -> Vec<Result<SimulationReport, EngineError>> {
    jobs.par_iter()
        .map(|(cfg, kind)| run_simulation(cfg, *kind))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(jobs: &[Job]) -> Vec<Result<SimulationReport, EngineError>> {
    run_batch_sequential(jobs)
}

/// Like [`run_batch`], capped at `workers` threads (0 = all cores).
pub fn run_batch_with_workers(jobs: &[Job], workers: usize) -> Vec<Result<SimulationReport, EngineError>> {
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(|| run_batch(jobs));
            }
        }
        run_batch(jobs)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        run_batch_sequential(jobs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Host count; VM count scales proportionally.
    PmCount,
    VmCount,
    /// VM count at fixed host count.
    Utilisation,
    ElectricityMode,
    FixedBeta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PmCount => "pm_count",
            SweepAxis::VmCount => "vm_count",
            SweepAxis::Utilisation => "utilisation",
            SweepAxis::ElectricityMode => "electricity_mode",
            SweepAxis::FixedBeta => "fixed_beta",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pm_count" => Ok(SweepAxis::PmCount),
            "vm_count" => Ok(SweepAxis::VmCount),
            "utilisation" | "utilization" => Ok(SweepAxis::Utilisation),
            "electricity_mode" => Ok(SweepAxis::ElectricityMode),
            "fixed_beta" => Ok(SweepAxis::FixedBeta),
            other => Err(format!(
                "unknown axis `{other}` (expected pm_count, vm_count, utilisation, electricity_mode or fixed_beta)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AxisValue {
    Count(usize),
    Mode(ElectricityMode),
    Beta(f64),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Count(n) => write!(f, "{n}"),
            AxisValue::Mode(ElectricityMode::Fixed) => f.write_str("fixed"),
            AxisValue::Mode(ElectricityMode::Variable) => f.write_str("variable"),
            AxisValue::Beta(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    pub controllers: Vec<ControllerKind>,
}

impl SweepSpec {
    /// Parse raw axis values, checking each against the axis type.
    pub fn parse(axis: SweepAxis, raw: &[&str], controllers: Vec<ControllerKind>) -> Result<Self, String> {
        if raw.is_empty() {
            return Err("a sweep needs at least one value".into());
        }
        if controllers.is_empty() {
            return Err("a sweep needs at least one controller".into());
        }
        let values = raw
            .iter()
            .map(|v| {
                let v = v.trim();
                match axis {
                    SweepAxis::PmCount | SweepAxis::VmCount | SweepAxis::Utilisation => v
                        .parse::<usize>()
                        .ok()
                        .filter(|n| *n > 0 || axis != SweepAxis::PmCount)
                        .map(AxisValue::Count)
                        .ok_or_else(|| format!("`{v}` is not a valid count for {axis}")),
                    SweepAxis::ElectricityMode => match v {
                        "fixed" => Ok(AxisValue::Mode(ElectricityMode::Fixed)),
                        "variable" => Ok(AxisValue::Mode(ElectricityMode::Variable)),
                        _ => Err(format!("`{v}` is not fixed or variable")),
                    },
                    SweepAxis::FixedBeta => v
                        .parse::<f64>()
                        .ok()
                        .filter(|b| (0.0..=1.0).contains(b))
                        .map(AxisValue::Beta)
                        .ok_or_else(|| format!("`{v}` is not a beta in [0, 1]")),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            axis,
            values,
            controllers,
        })
    }

    /// The base config with one axis value applied.
    pub fn apply(&self, base: &SimulationConfig, value: &AxisValue) -> SimulationConfig {
        let mut cfg = base.clone();
        match (self.axis, value) {
            (SweepAxis::PmCount, AxisValue::Count(n)) => {
                let per_pm = base.workload.vm_count as f64 / base.inventory.pm_count as f64;
                cfg.inventory.pm_count = *n;
                cfg.workload.vm_count = (per_pm * *n as f64).round() as usize;
            }
            (SweepAxis::VmCount | SweepAxis::Utilisation, AxisValue::Count(n)) => {
                cfg.workload.vm_count = *n;
            }
            (SweepAxis::ElectricityMode, AxisValue::Mode(m)) => cfg.traces.electricity = *m,
            (SweepAxis::FixedBeta, AxisValue::Beta(b)) => {
                cfg.workload.beta_source = BetaSource::Fixed { beta: *b };
            }
            _ => unreachable!("values are checked against the axis in SweepSpec::parse"),
        }
        cfg
    }

    pub fn jobs(&self, base: &SimulationConfig) -> Vec<Job> {
        self.values
            .iter()
            .flat_map(|v| {
                let cfg = self.apply(base, v);
                self.controllers.iter().map(move |k| (cfg.clone(), *k))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub controller: ControllerKind,
    pub total_cost_usd: f64,
    pub total_energy_kwh: f64,
    pub revenue_usd: f64,
    pub savings_vs_bfd: Option<f64>,
    pub savings_vs_bcf: Option<f64>,
}

/// Run a sweep. The first failing simulation aborts the sweep.
pub fn run_sweep(base: &SimulationConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>, EngineError> {
    let jobs = spec.jobs(base);
    let reports = run_batch_with_workers(&jobs, base.sweep.workers)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let per_value = spec.controllers.len();
    let mut rows = Vec::with_capacity(reports.len());
    for (value, group) in spec.values.iter().zip(reports.chunks(per_value)) {
        let cost_of = |kind: ControllerKind| {
            group
                .iter()
                .find(|r| r.controller == kind)
                .map(|r| r.total_cost_usd)
        };
        let bfd = cost_of(ControllerKind::Bfd);
        let bcf = cost_of(ControllerKind::Bcf);
        for r in group {
            let savings = |base: Option<f64>| base.filter(|b| *b > 0.0).map(|b| 1.0 - r.total_cost_usd / b);
            rows.push(SweepRow {
                axis_value: value.to_string(),
                controller: r.controller,
                total_cost_usd: r.total_cost_usd,
                total_energy_kwh: r.total_energy_kwh,
                revenue_usd: r.service_revenue_usd,
                savings_vs_bfd: savings(bfd),
                savings_vs_bcf: savings(bcf),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(base: &SimulationConfig, spec: &SweepSpec, rows: &[SweepRow]) -> String {
    let mut out = crate::report::header(base, None);
    out.push_str(&format!(
        "# sweep axis = {}\n# sweep values = {}\n",
        spec.axis,
        spec.values
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    ));
    out.push_str(&format!(
        "{},controller,total_cost_usd,total_energy_kwh,revenue_usd,savings_vs_bfd,savings_vs_bcf\n",
        spec.axis
    ));
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.axis_value,
            r.controller,
            r.total_cost_usd,
            r.total_energy_kwh,
            r.revenue_usd,
            opt(r.savings_vs_bfd),
            opt(r.savings_vs_bcf)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SimulationConfig {
        let mut cfg = SimulationConfig::default();
        cfg.simulation.steps = 12;
        cfg.inventory.pm_count = 10;
        cfg.workload.vm_count = 10;
        cfg
    }

    #[test]
    fn parse_rejects_bad_values() {
        let all = ControllerKind::ALL.to_vec();
        assert!(SweepSpec::parse(SweepAxis::FixedBeta, &["0.1", "1.2"], all.clone()).is_err());
        assert!(SweepSpec::parse(SweepAxis::PmCount, &["0"], all.clone()).is_err());
        assert!(SweepSpec::parse(SweepAxis::ElectricityMode, &["spot"], all.clone()).is_err());
        assert!(SweepSpec::parse(SweepAxis::VmCount, &[], all).is_err());
    }

    #[test]
    fn pm_axis_scales_vms() {
        let spec = SweepSpec::parse(SweepAxis::PmCount, &["20"], vec![ControllerKind::Bfd]).unwrap();
        let cfg = spec.apply(&tiny(), &spec.values[0]);
        assert_eq!(cfg.inventory.pm_count, 20);
        assert_eq!(cfg.workload.vm_count, 20);
    }

    #[test]
    fn sweep_row_count() {
        let spec = SweepSpec::parse(SweepAxis::PmCount, &["5", "10"], ControllerKind::ALL.to_vec()).unwrap();
        let rows = run_sweep(&tiny(), &spec).unwrap();
        assert_eq!(rows.len(), 6);
        let bfd = rows.iter().find(|r| r.controller == ControllerKind::Bfd).unwrap();
        assert_eq!(bfd.savings_vs_bfd, Some(0.0));
    }

    #[test]
    fn parallel_matches_sequential() {
        let jobs: Vec<Job> = (0..4)
            .map(|seed| {
                let mut cfg = tiny();
                cfg.simulation.seed = seed;
                (cfg, ControllerKind::Bcffs)
            })
            .collect();
        let a: Vec<_> = run_batch(&jobs).into_iter().map(Result::unwrap).collect();
        let b: Vec<_> = run_batch_sequential(&jobs).into_iter().map(Result::unwrap).collect();
        assert_eq!(a, b);
    }
}
