//! Step loop: departures, arrivals, controller invocation, action
//! application and accounting of energy, cost and revenue.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Scenario, SimulationConfig};
use crate::controllers::{
    decide, estimate_host, ControllerContext, ControllerKind, ControllerParams,
};
use crate::model::{
    validate_state, Action, ActionKind, CloudState, DcId, Inventory, ModelError, Violation,
    VirtualMachine, VmId,
};
use crate::power::{cooling_overhead_factor, PowerError};
use crate::pricing::vm_price;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("step {step}: no {kind} sample for location {location}")]
    TraceGap {
        step: usize,
        location: String,
        kind: &'static str,
    },
    #[error("step {step}: controller emitted an invalid action: {source}")]
    InvalidAction {
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("step {step}: state invalid after controller actions: {}", join(.violations))]
    InvalidState {
        step: usize,
        violations: Vec<Violation>,
    },
    #[error("step {step}: {source}")]
    Power {
        step: usize,
        #[source]
        source: PowerError,
    },
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Occurrence counts of (beta bin, host frequency) over every allocated VM
/// and step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaFreqHistogram {
    pub beta_bins: usize,
    pub frequencies: Vec<f64>,
    /// `counts[bin][frequency index]`.
    pub counts: Vec<Vec<u64>>,
}

impl BetaFreqHistogram {
    pub fn new(beta_bins: usize, frequencies: Vec<f64>) -> Self {
        let counts = vec![vec![0; frequencies.len()]; beta_bins];
        Self {
            beta_bins,
            frequencies,
            counts,
        }
    }

    pub fn bin_of(&self, beta: f64) -> usize {
        ((beta * self.beta_bins as f64) as usize).min(self.beta_bins - 1)
    }

    /// Bounds of a beta bin, `[lo, hi)` (the last bin includes 1).
    pub fn bin_bounds(&self, bin: usize) -> (f64, f64) {
        let w = 1.0 / self.beta_bins as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }

    pub fn add(&mut self, beta: f64, freq_index: usize) {
        let bin = self.bin_of(beta);
        self.counts[bin][freq_index] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Accounting for one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub it_energy_kwh: f64,
    pub total_energy_kwh: f64,
    pub it_cost_usd: f64,
    pub total_cost_usd: f64,
    pub revenue_usd: f64,
    pub migration_energy_kwh: f64,
    /// Model revenue minus energy cost (cooling included, migrations
    /// excluded) over the step, summed over running hosts.
    pub gross_profit_usd: f64,
    pub active_pms: usize,
    pub allocated_vms: usize,
    pub migrations: usize,
    pub deferred: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub controller: ControllerKind,
    pub config: SimulationConfig,
    pub it_energy_kwh: f64,
    pub total_energy_kwh: f64,
    pub it_cost_usd: f64,
    pub total_cost_usd: f64,
    pub service_revenue_usd: f64,
    pub migration_energy_kwh: f64,
    pub migrations: usize,
    pub actions: Vec<Action>,
    pub histogram: BetaFreqHistogram,
    pub per_step: Vec<StepRecord>,
    /// Number of post-step state validations that passed.
    pub validated_steps: usize,
    pub calibration_residual_w: Option<f64>,
}

impl SimulationReport {
    /// Placement-related actions only (frequency changes dropped).
    pub fn allocation_log(&self) -> Vec<&Action> {
        self.actions.iter().filter(|a| !a.is_frequency()).collect()
    }
}

/// Energy moved when migrating `vm`, Wh.
pub fn migration_energy(vm: &VirtualMachine, energy_wh_per_gb: f64) -> f64 {
    vm.ram_gb * energy_wh_per_gb
}

fn current_values(
    set: &crate::traces::TraceSet,
    dcs: &BTreeSet<DcId>,
    step: usize,
    kind: &'static str,
) -> Result<BTreeMap<DcId, f64>, EngineError> {
    dcs.iter()
        .map(|dc| {
            set.get(dc)
                .and_then(|s| s.value_at(step as i64))
                .map(|v| (dc.clone(), v))
                .ok_or_else(|| EngineError::TraceGap {
                    step,
                    location: dc.0.clone(),
                    kind,
                })
        })
        .collect()
}

/// Build the scenario from `config` and run it under `controller`.
pub fn run_simulation(
    config: &SimulationConfig,
    controller: ControllerKind,
) -> Result<SimulationReport, EngineError> {
    let scenario = config.build()?;
    run_scenario(config, &scenario, controller)
}

/// Run an already-resolved scenario. Deterministic in its inputs.
pub fn run_scenario(
    config: &SimulationConfig,
    scenario: &Scenario,
    controller: ControllerKind,
) -> Result<SimulationReport, EngineError> {
    let steps = config.simulation.steps;
    let step_h = config.simulation.step_h;
    let ladder = config.model.ladder;
    let params = ControllerParams {
        power: scenario.power,
        pricing: config.pricing,
        cooling: config.power.cooling,
        weights: config.model.util_weights,
        settings: config.controllers,
    };

    let mut inventory = Inventory::new(scenario.pms.iter().cloned(), ladder);
    let locations: BTreeSet<DcId> = scenario.pms.iter().map(|pm| pm.location.clone()).collect();
    let mut state = CloudState::all_suspended(&inventory);

    let mut boots: BTreeMap<usize, Vec<&VirtualMachine>> = BTreeMap::new();
    for vm in &scenario.vms {
        if vm.boot_step < steps {
            boots.entry(vm.boot_step).or_default().push(vm);
        }
    }

    let mut report = SimulationReport {
        controller,
        config: config.clone(),
        it_energy_kwh: 0.0,
        total_energy_kwh: 0.0,
        it_cost_usd: 0.0,
        total_cost_usd: 0.0,
        service_revenue_usd: 0.0,
        migration_energy_kwh: 0.0,
        migrations: 0,
        actions: Vec::new(),
        histogram: BetaFreqHistogram::new(config.engine.beta_bins, ladder.levels()),
        per_step: Vec::with_capacity(steps),
        validated_steps: 0,
        calibration_residual_w: scenario.calibration_residual_w,
    };
    let mut deferred: Vec<VmId> = Vec::new();

    for step in 0..steps {
        // departures
        let leaving: Vec<VmId> = inventory
            .vms
            .values()
            .filter(|vm| vm.delete_step <= step)
            .map(|vm| vm.id.clone())
            .collect();
        for id in &leaving {
            inventory.vms.remove(id);
            state.allocation.remove(id);
        }
        deferred.retain(|id| inventory.vms.contains_key(id));

        // arrivals
        let mut pending = std::mem::take(&mut deferred);
        if let Some(arriving) = boots.get(&step) {
            for vm in arriving {
                inventory.vms.insert(vm.id.clone(), (*vm).clone());
                pending.push(vm.id.clone());
            }
        }

        let prices = current_values(&scenario.prices, &locations, step, "electricity price")?;
        let temps = current_values(&scenario.temps, &locations, step, "temperature")?;

        let actions = {
            let ctx = ControllerContext {
                step,
                state: &state,
                inventory: &inventory,
                pending: &pending,
                prices: &prices,
                temps: &temps,
                params: &params,
            };
            decide(controller, &ctx).map_err(|source| EngineError::Power { step, source })?
        };

        let mut record = StepRecord {
            step,
            ..Default::default()
        };

        for action in &actions {
            if let ActionKind::Migrate { vm, from, .. } = &action.kind {
                let vm = inventory.vm(vm).expect("migrated VM is live");
                let kwh = migration_energy(vm, config.engine.migration_energy_wh_per_gb) / 1000.0;
                let dc = &inventory.pms[from].location;
                let factor = cooling_overhead_factor(temps[dc], &config.power.cooling);
                record.migration_energy_kwh += kwh;
                record.it_energy_kwh += kwh;
                record.total_energy_kwh += kwh * (1.0 + factor);
                record.it_cost_usd += kwh * prices[dc];
                record.total_cost_usd += kwh * (1.0 + factor) * prices[dc];
                record.migrations += 1;
            }
            if let ActionKind::Defer { vm } = &action.kind {
                deferred.push(vm.clone());
            }
            state
                .apply(action, &inventory)
                .map_err(|source| EngineError::InvalidAction { step, source })?;
        }
        validate_state(&state, &inventory)
            .map_err(|violations| EngineError::InvalidState { step, violations })?;
        report.validated_steps += 1;
        record.deferred = deferred.len();

        // energy and model profit per running host
        let by_pm = state.hosted_by_pm();
        for pm in inventory.pms.values() {
            if state.is_suspended(&pm.id) {
                continue;
            }
            let hosted: Vec<&VirtualMachine> = by_pm
                .get(&pm.id)
                .map(|ids| ids.iter().map(|id| &inventory.vms[*id]).collect())
                .unwrap_or_default();
            let f = state.frequency_of(&pm.id, &ladder);
            let watts = scenario
                .power
                .host_power(pm, &hosted, f, &ladder)
                .map_err(|source| EngineError::Power { step, source })?;
            let price = prices[&pm.location];
            let factor = cooling_overhead_factor(temps[&pm.location], &config.power.cooling);
            let kwh = watts * step_h / 1000.0;
            record.it_energy_kwh += kwh;
            record.total_energy_kwh += kwh * (1.0 + factor);
            record.it_cost_usd += kwh * price;
            record.total_cost_usd += kwh * (1.0 + factor) * price;
            record.active_pms += 1;

            let rate = price * (1.0 + factor);
            let estimate = estimate_host(
                pm,
                &hosted,
                f,
                rate,
                step_h,
                &scenario.power,
                &config.pricing,
                &ladder,
            )
            .map_err(|source| EngineError::Power { step, source })?;
            record.gross_profit_usd += estimate.gross_profit();
        }

        // revenue and histogram per allocated VM, in id order
        for (vm_id, pm_id) in &state.allocation {
            let vm = &inventory.vms[vm_id];
            let f = state.frequency_of(pm_id, &ladder);
            record.revenue_usd += vm_price(vm, f, &ladder, &config.pricing) * step_h;
            let idx = ladder.index_of(f).expect("validated frequency");
            report.histogram.add(vm.beta, idx);
            record.allocated_vms += 1;
        }

        report.it_energy_kwh += record.it_energy_kwh;
        report.total_energy_kwh += record.total_energy_kwh;
        report.it_cost_usd += record.it_cost_usd;
        report.total_cost_usd += record.total_cost_usd;
        report.service_revenue_usd += record.revenue_usd;
        report.migration_energy_kwh += record.migration_energy_kwh;
        report.migrations += record.migrations;
        report.actions.extend(actions);
        report.per_step.push(record);
    }

    Ok(report)
}

/// One metric of a controller run next to a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: &'static str,
    pub value: f64,
    pub baseline: f64,
    pub ratio: f64,
    /// `1 - ratio`.
    pub savings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub controller: ControllerKind,
    pub baseline: ControllerKind,
    pub metrics: Vec<MetricComparison>,
}

impl Comparison {
    pub fn metric(&self, name: &str) -> Option<&MetricComparison> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

pub fn compare_metric(metric: &'static str, value: f64, baseline: f64) -> MetricComparison {
    let ratio = if baseline == 0.0 {
        if value == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        value / baseline
    };
    MetricComparison {
        metric,
        value,
        baseline,
        ratio,
        savings: 1.0 - ratio,
    }
}

/// Normalise `report` against `baseline`. Both must come from the same
/// config apart from the controller.
pub fn aggregate(report: &SimulationReport, baseline: &SimulationReport) -> Result<Comparison, EngineError> {
    if report.config.comparison_key() != baseline.config.comparison_key() {
        return Err(EngineError::Mismatch(
            "configs differ in more than the controller".into(),
        ));
    }
    let pairs: [(&'static str, f64, f64); 5] = [
        ("it_energy_kwh", report.it_energy_kwh, baseline.it_energy_kwh),
        ("it_cost_usd", report.it_cost_usd, baseline.it_cost_usd),
        ("total_energy_kwh", report.total_energy_kwh, baseline.total_energy_kwh),
        ("total_cost_usd", report.total_cost_usd, baseline.total_cost_usd),
        ("service_revenue_usd", report.service_revenue_usd, baseline.service_revenue_usd),
    ];
    Ok(Comparison {
        controller: report.controller,
        baseline: baseline.controller,
        metrics: pairs
            .into_iter()
            .map(|(m, v, b)| compare_metric(m, v, b))
            .collect(),
    })
}
