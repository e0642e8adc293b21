//! Domain types shared by every other module: hosts, VM requests, the
//! frequency ladder, cloud state and controller actions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for frequency arithmetic, in GHz.
pub const FREQ_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid frequency ladder: {0}")]
    InvalidLadder(String),
    #[error("invalid virtual machine {id}: {reason}")]
    InvalidVm { id: String, reason: String },
    #[error("invalid physical machine {id}: {reason}")]
    InvalidPm { id: String, reason: String },
    #[error("invalid data center {id}: {reason}")]
    InvalidDataCenter { id: String, reason: String },
    #[error("hosted VMs exceed capacity of {pm}")]
    CapacityExceeded { pm: PmId },
    #[error("cannot apply {action}: {reason}")]
    InvalidAction { action: String, reason: String },
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(VmId);
string_id!(PmId);
string_id!(DcId);

/// Discrete set of operating frequencies available on every host.
///
/// `f_base` is the reference frequency of the power and pricing models and
/// may lie below `f_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyLadder {
    pub f_base: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub f_step: f64,
}

impl Default for FrequencyLadder {
    fn default() -> Self {
        Self {
            f_base: 1.0,
            f_min: 1.8,
            f_max: 2.6,
            f_step: 0.2,
        }
    }
}

impl FrequencyLadder {
    pub fn new(f_base: f64, f_min: f64, f_max: f64, f_step: f64) -> Result<Self, ModelError> {
        let ladder = Self {
            f_base,
            f_min,
            f_max,
            f_step,
        };
        ladder.check()?;
        Ok(ladder)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidLadder(msg.to_owned()));
        if !(self.f_base > 0.0) {
            return bad("f_base must be positive");
        }
        if !(self.f_step > 0.0) {
            return bad("f_step must be positive");
        }
        if !(self.f_min <= self.f_max) {
            return bad("f_min must not exceed f_max");
        }
        let span = (self.f_max - self.f_min) / self.f_step;
        if (span - span.round()).abs() * self.f_step > FREQ_EPS {
            return bad("f_max - f_min must be a multiple of f_step");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.f_max - self.f_min) / self.f_step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frequency at `index`, counted upward from `f_min`.
    pub fn level(&self, index: usize) -> f64 {
        if index + 1 == self.len() {
            self.f_max
        } else {
            self.f_min + index as f64 * self.f_step
        }
    }

    /// All frequencies in ascending order.
    pub fn levels(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.level(i)).collect()
    }

    pub fn index_of(&self, f: f64) -> Option<usize> {
        let pos = (f - self.f_min) / self.f_step;
        let idx = pos.round();
        if idx < 0.0 || idx as usize >= self.len() {
            return None;
        }
        let idx = idx as usize;
        ((self.level(idx) - f).abs() <= FREQ_EPS).then_some(idx)
    }

    pub fn contains(&self, f: f64) -> bool {
        self.index_of(f).is_some()
    }

    /// Map onto [0, 1]: `f_min` is 0 and `f_max` is 1.
    pub fn unitless(&self, f: f64) -> f64 {
        if self.f_max > self.f_min {
            (f - self.f_min) / (self.f_max - self.f_min)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualMachine {
    pub id: VmId,
    pub cores: u32,
    pub ram_gb: f64,
    /// CPU-boundedness in [0, 1].
    pub beta: f64,
    pub boot_step: usize,
    pub delete_step: usize,
}

impl VirtualMachine {
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| {
            Err(ModelError::InvalidVm {
                id: self.id.0.clone(),
                reason: reason.to_owned(),
            })
        };
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if self.cores == 0 {
            return bad("cores must be at least 1");
        }
        if !(self.ram_gb > 0.0) {
            return bad("ram_gb must be positive");
        }
        if self.boot_step >= self.delete_step {
            return bad("boot_step must precede delete_step");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalMachine {
    pub id: PmId,
    pub cores: u32,
    pub ram_gb: f64,
    pub location: DcId,
}

impl PhysicalMachine {
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| {
            Err(ModelError::InvalidPm {
                id: self.id.0.clone(),
                reason: reason.to_owned(),
            })
        };
        if self.cores == 0 {
            return bad("cores must be at least 1");
        }
        if !(self.ram_gb > 0.0) {
            return bad("ram_gb must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataCenter {
    pub id: DcId,
    pub name: String,
    pub timezone_offset_h: f64,
    pub mean_price_usd_per_kwh: f64,
    /// Mean outside temperature, used only by the synthetic trace generator.
    #[serde(default = "default_mean_temp")]
    pub mean_temp_c: f64,
}

fn default_mean_temp() -> f64 {
    15.0
}

impl DataCenter {
    pub fn check(&self) -> Result<(), ModelError> {
        if !(self.mean_price_usd_per_kwh > 0.0) {
            return Err(ModelError::InvalidDataCenter {
                id: self.id.0.clone(),
                reason: "mean_price_usd_per_kwh must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Relative weight of CPU cores and RAM in the utilisation scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilWeights {
    pub cpu: f64,
    pub ram: f64,
}

impl Default for UtilWeights {
    fn default() -> Self {
        Self { cpu: 0.5, ram: 0.5 }
    }
}

/// Weighted utilisation of `pm` hosting `hosted`, using the default uniform
/// 0.5/0.5 weighting.
pub fn utilisation(pm: &PhysicalMachine, hosted: &[&VirtualMachine]) -> Result<f64, ModelError> {
    utilisation_weighted(pm, hosted, UtilWeights::default())
}

pub fn utilisation_weighted(
    pm: &PhysicalMachine,
    hosted: &[&VirtualMachine],
    weights: UtilWeights,
) -> Result<f64, ModelError> {
    let cores: u32 = hosted.iter().map(|vm| vm.cores).sum();
    let ram: f64 = hosted.iter().map(|vm| vm.ram_gb).sum();
    if cores > pm.cores || ram > pm.ram_gb + 1e-9 {
        return Err(ModelError::CapacityExceeded { pm: pm.id.clone() });
    }
    Ok(weights.cpu * (cores as f64 / pm.cores as f64) + weights.ram * (ram / pm.ram_gb))
}

/// Which hosts exist, which VMs are alive, and the shared ladder.
#[derive(Debug, Clone, Default)]
pub struct Inventory {
    pub pms: BTreeMap<PmId, PhysicalMachine>,
    pub vms: BTreeMap<VmId, VirtualMachine>,
    pub ladder: FrequencyLadder,
}

impl Inventory {
    pub fn new(pms: impl IntoIterator<Item = PhysicalMachine>, ladder: FrequencyLadder) -> Self {
        Self {
            pms: pms.into_iter().map(|pm| (pm.id.clone(), pm)).collect(),
            vms: BTreeMap::new(),
            ladder,
        }
    }

    pub fn with_vms(mut self, vms: impl IntoIterator<Item = VirtualMachine>) -> Self {
        self.vms
            .extend(vms.into_iter().map(|vm| (vm.id.clone(), vm)));
        self
    }

    pub fn pm(&self, id: &PmId) -> Option<&PhysicalMachine> {
        self.pms.get(id)
    }

    pub fn vm(&self, id: &VmId) -> Option<&VirtualMachine> {
        self.vms.get(id)
    }
}

/// Mutable allocation of VMs to hosts, plus per-host frequency and
/// suspension flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudState {
    pub allocation: BTreeMap<VmId, PmId>,
    pub frequency: BTreeMap<PmId, f64>,
    pub suspended: BTreeSet<PmId>,
}

impl CloudState {
    /// Every host suspended at `f_max`, nothing allocated.
    pub fn all_suspended(inventory: &Inventory) -> Self {
        let f_max = inventory.ladder.f_max;
        Self {
            allocation: BTreeMap::new(),
            frequency: inventory.pms.keys().map(|id| (id.clone(), f_max)).collect(),
            suspended: inventory.pms.keys().cloned().collect(),
        }
    }

    pub fn is_suspended(&self, pm: &PmId) -> bool {
        self.suspended.contains(pm)
    }

    pub fn frequency_of(&self, pm: &PmId, ladder: &FrequencyLadder) -> f64 {
        self.frequency.get(pm).copied().unwrap_or(ladder.f_max)
    }

    pub fn host_of(&self, vm: &VmId) -> Option<&PmId> {
        self.allocation.get(vm)
    }

    /// VM ids grouped by host. Hosts without VMs are absent.
    pub fn hosted_by_pm(&self) -> BTreeMap<&PmId, Vec<&VmId>> {
        let mut out: BTreeMap<&PmId, Vec<&VmId>> = BTreeMap::new();
        for (vm, pm) in &self.allocation {
            out.entry(pm).or_default().push(vm);
        }
        out
    }

    pub fn hosted_vms<'a>(&self, pm: &PmId, inventory: &'a Inventory) -> Vec<&'a VirtualMachine> {
        self.allocation
            .iter()
            .filter(|(_, host)| *host == pm)
            .filter_map(|(vm, _)| inventory.vm(vm))
            .collect()
    }

    /// Apply a single action, rejecting any that would break an invariant
    /// checked locally (the full check is [`validate_state`]).
    pub fn apply(&mut self, action: &Action, inventory: &Inventory) -> Result<(), ModelError> {
        let fail = |reason: String| {
            Err(ModelError::InvalidAction {
                action: action.to_string(),
                reason,
            })
        };
        let known_pm = |pm: &PmId| inventory.pms.contains_key(pm);
        match &action.kind {
            ActionKind::Place { vm, pm } => {
                if !known_pm(pm) || inventory.vm(vm).is_none() {
                    return fail("unknown VM or PM".into());
                }
                if self.allocation.contains_key(vm) {
                    return fail("VM already allocated".into());
                }
                if self.is_suspended(pm) {
                    return fail("target PM is suspended".into());
                }
                self.allocation.insert(vm.clone(), pm.clone());
            }
            ActionKind::Migrate { vm, from, to } => {
                if !known_pm(to) {
                    return fail("unknown target PM".into());
                }
                if self.allocation.get(vm) != Some(from) {
                    return fail(format!("VM is not hosted on {from}"));
                }
                if self.is_suspended(to) {
                    return fail("target PM is suspended".into());
                }
                self.allocation.insert(vm.clone(), to.clone());
            }
            ActionKind::Suspend { pm } => {
                if !known_pm(pm) {
                    return fail("unknown PM".into());
                }
                if self.allocation.values().any(|host| host == pm) {
                    return fail("PM still hosts VMs".into());
                }
                self.suspended.insert(pm.clone());
            }
            ActionKind::Resume { pm } => {
                if !known_pm(pm) {
                    return fail("unknown PM".into());
                }
                if !self.suspended.remove(pm) {
                    return fail("PM is not suspended".into());
                }
            }
            ActionKind::SetFrequency { pm, ghz } => {
                if !known_pm(pm) {
                    return fail("unknown PM".into());
                }
                let Some(idx) = inventory.ladder.index_of(*ghz) else {
                    return fail(format!("{ghz} GHz is not on the ladder"));
                };
                self.frequency
                    .insert(pm.clone(), inventory.ladder.level(idx));
            }
            ActionKind::Defer { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    Place { vm: VmId, pm: PmId },
    Migrate { vm: VmId, from: PmId, to: PmId },
    Suspend { pm: PmId },
    Resume { pm: PmId },
    SetFrequency { pm: PmId, ghz: f64 },
    /// A requested VM fit nowhere; it is retried at the next step.
    Defer { vm: VmId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub step: usize,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl Action {
    pub fn new(step: usize, kind: ActionKind) -> Self {
        Self { step, kind }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ActionKind::Place { .. } => "place",
            ActionKind::Migrate { .. } => "migrate",
            ActionKind::Suspend { .. } => "suspend",
            ActionKind::Resume { .. } => "resume",
            ActionKind::SetFrequency { .. } => "set_frequency",
            ActionKind::Defer { .. } => "defer",
        }
    }

    /// (subject, source, target) columns for the action log.
    pub fn columns(&self) -> (String, String, String) {
        match &self.kind {
            ActionKind::Place { vm, pm } => (vm.0.clone(), String::new(), pm.0.clone()),
            ActionKind::Migrate { vm, from, to } => (vm.0.clone(), from.0.clone(), to.0.clone()),
            ActionKind::Suspend { pm } | ActionKind::Resume { pm } => {
                (pm.0.clone(), String::new(), String::new())
            }
            ActionKind::SetFrequency { pm, ghz } => (pm.0.clone(), String::new(), format!("{ghz:.3}")),
            ActionKind::Defer { vm } => (vm.0.clone(), String::new(), String::new()),
        }
    }

    pub fn is_frequency(&self) -> bool {
        matches!(self.kind, ActionKind::SetFrequency { .. })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (subject, source, target) = self.columns();
        write!(f, "step {} {} {}", self.step, self.kind_name(), subject)?;
        if !source.is_empty() {
            write!(f, " from {source}")?;
        }
        if !target.is_empty() {
            write!(f, " -> {target}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnknownVm { vm: VmId },
    UnknownPm { vm: VmId, pm: PmId },
    VmOnSuspendedPm { vm: VmId, pm: PmId },
    CoreOvercommit { pm: PmId, used: u32, capacity: u32 },
    RamOvercommit { pm: PmId, used: f64, capacity: f64 },
    OffLadderFrequency { pm: PmId, ghz: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownVm { vm } => write!(f, "allocated VM {vm} is not in the inventory"),
            Violation::UnknownPm { vm, pm } => write!(f, "VM {vm} mapped to unknown PM {pm}"),
            Violation::VmOnSuspendedPm { vm, pm } => {
                write!(f, "VM {vm} mapped to suspended PM {pm}")
            }
            Violation::CoreOvercommit { pm, used, capacity } => {
                write!(f, "PM {pm} core overcommit: {used} > {capacity}")
            }
            Violation::RamOvercommit { pm, used, capacity } => {
                write!(f, "PM {pm} RAM overcommit: {used} GB > {capacity} GB")
            }
            Violation::OffLadderFrequency { pm, ghz } => {
                write!(f, "PM {pm} off-ladder frequency {ghz} GHz")
            }
        }
    }
}

/// Check every `CloudState` invariant. Violations are returned as data.
pub fn validate_state(state: &CloudState, inventory: &Inventory) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut cores: BTreeMap<&PmId, u32> = BTreeMap::new();
    let mut ram: BTreeMap<&PmId, f64> = BTreeMap::new();

    for (vm_id, pm_id) in &state.allocation {
        let Some(vm) = inventory.vm(vm_id) else {
            violations.push(Violation::UnknownVm { vm: vm_id.clone() });
            continue;
        };
        if inventory.pm(pm_id).is_none() {
            violations.push(Violation::UnknownPm {
                vm: vm_id.clone(),
                pm: pm_id.clone(),
            });
            continue;
        }
        if state.is_suspended(pm_id) {
            violations.push(Violation::VmOnSuspendedPm {
                vm: vm_id.clone(),
                pm: pm_id.clone(),
            });
        }
        *cores.entry(pm_id).or_default() += vm.cores;
        *ram.entry(pm_id).or_default() += vm.ram_gb;
    }

    for (pm_id, used) in cores {
        let pm = &inventory.pms[pm_id];
        if used > pm.cores {
            violations.push(Violation::CoreOvercommit {
                pm: pm_id.clone(),
                used,
                capacity: pm.cores,
            });
        }
        let used_ram = ram[pm_id];
        if used_ram > pm.ram_gb + 1e-9 {
            violations.push(Violation::RamOvercommit {
                pm: pm_id.clone(),
                used: used_ram,
                capacity: pm.ram_gb,
            });
        }
    }

    for (pm_id, ghz) in &state.frequency {
        if !inventory.ladder.contains(*ghz) {
            violations.push(Violation::OffLadderFrequency {
                pm: pm_id.clone(),
                ghz: *ghz,
            });
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
