//! Cloud controllers invoked once per simulation step.
//!
//! * BFD: best-fit-decreasing placement of new requests; no migrations, no
//!   frequency scaling.
//! * BCF: cost-aware placement and consolidation. New requests and VMs on
//!   underutilised hosts are (re)placed, largest first, preferring nearly
//!   full hosts and then cheap locations; hosts are activated largest and
//!   cheapest first.
//! * BCFFS: BCF followed by a greedy per-host frequency descent that keeps
//!   lowering the frequency while the energy saving of one more step
//!   strictly exceeds the revenue lost.
//!
//! Controllers are pure functions of a [`ControllerContext`] and never
//! mutate the state they are given.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{
    Action, ActionKind, CloudState, DcId, Inventory, PhysicalMachine, PmId, UtilWeights,
    VirtualMachine, VmId,
};
use crate::power::{cooling_overhead_factor, CoolingParams, PowerError, PowerModel};
use crate::pricing::{pm_revenue, PricingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Bfd,
    Bcf,
    Bcffs,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Bfd, ControllerKind::Bcf, ControllerKind::Bcffs];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Bfd => "bfd",
            ControllerKind::Bcf => "bcf",
            ControllerKind::Bcffs => "bcffs",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bfd" => Ok(ControllerKind::Bfd),
            "bcf" => Ok(ControllerKind::Bcf),
            "bcffs" => Ok(ControllerKind::Bcffs),
            other => Err(format!("unknown controller `{other}` (expected bfd, bcf or bcffs)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSettings {
    /// Hosts below this utilisation are evacuated by BCF.
    pub underutil_threshold: f64,
    /// Horizon over which frequency scaling compares savings and losses, h.
    pub evaluation_window_h: f64,
    /// Run the frequency scaling stage in BCFFS.
    pub frequency_scaling: bool,
    /// Never reset the "decrease feasible" flag between hosts, so pruning
    /// only happens before the first successful decrease anywhere.
    pub literal_feasible_flag: bool,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            underutil_threshold: 0.4,
            evaluation_window_h: 1.0,
            frequency_scaling: true,
            literal_feasible_flag: false,
        }
    }
}

impl ControllerSettings {
    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.underutil_threshold) {
            return Err("underutil_threshold must lie in [0, 1]".into());
        }
        if !(self.evaluation_window_h > 0.0) {
            return Err("evaluation_window_h must be positive".into());
        }
        Ok(())
    }
}

/// Model parameters a controller needs to estimate costs and revenue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    pub power: PowerModel,
    pub pricing: PricingParams,
    pub cooling: CoolingParams,
    pub weights: UtilWeights,
    pub settings: ControllerSettings,
}

/// Everything a controller sees at one invocation.
#[derive(Debug, Clone, Copy)]
pub struct ControllerContext<'a> {
    pub step: usize,
    pub state: &'a CloudState,
    /// Hosts and currently live VMs (allocated or pending).
    pub inventory: &'a Inventory,
    /// VMs requesting placement this step, including earlier deferrals.
    pub pending: &'a [VmId],
    /// Current USD/kWh per location.
    pub prices: &'a BTreeMap<DcId, f64>,
    /// Current outside temperature per location.
    pub temps: &'a BTreeMap<DcId, f64>,
    pub params: &'a ControllerParams,
}

impl ControllerContext<'_> {
    fn price(&self, dc: &DcId) -> f64 {
        self.prices.get(dc).copied().unwrap_or(f64::INFINITY)
    }

    fn temp(&self, dc: &DcId) -> f64 {
        self.temps.get(dc).copied().unwrap_or(f64::INFINITY)
    }

    /// Effective cost of one kWh of IT energy at `dc` right now.
    pub fn cost_rate(&self, dc: &DcId) -> f64 {
        location_cost(self.price(dc), self.temp(dc), &self.params.cooling)
    }
}

/// Electricity price inflated by the cooling overhead at `temp_c`.
pub fn location_cost(price_usd_per_kwh: f64, temp_c: f64, cooling: &CoolingParams) -> f64 {
    price_usd_per_kwh * (1.0 + cooling_overhead_factor(temp_c, cooling))
}

/// Largest core count and RAM over the inventory; the normalisers for the
/// requirement and capacity scalars.
#[derive(Debug, Clone, Copy)]
struct Scale {
    cores: f64,
    ram: f64,
    weights: UtilWeights,
}

impl Scale {
    fn of(inventory: &Inventory, weights: UtilWeights) -> Self {
        let cores = inventory.pms.values().map(|pm| pm.cores).max().unwrap_or(1) as f64;
        let ram = inventory
            .pms
            .values()
            .map(|pm| pm.ram_gb)
            .fold(0.0_f64, f64::max)
            .max(f64::MIN_POSITIVE);
        Self { cores, ram, weights }
    }

    fn scalar(&self, cores: f64, ram: f64) -> f64 {
        self.weights.cpu * cores / self.cores + self.weights.ram * ram / self.ram
    }

    fn requirement(&self, vm: &VirtualMachine) -> f64 {
        self.scalar(vm.cores as f64, vm.ram_gb)
    }

    fn capacity(&self, pm: &PhysicalMachine) -> f64 {
        self.scalar(pm.cores as f64, pm.ram_gb)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Usage {
    cores: u32,
    ram: f64,
    count: usize,
}

/// Scratch copy of the allocation used while a controller plans.
struct Plan<'a> {
    inventory: &'a Inventory,
    weights: UtilWeights,
    allocation: BTreeMap<VmId, PmId>,
    suspended: BTreeSet<PmId>,
    usage: HashMap<PmId, Usage>,
    actions: Vec<Action>,
    step: usize,
}

impl<'a> Plan<'a> {
    fn new(ctx: &ControllerContext<'a>) -> Self {
        let mut usage: HashMap<PmId, Usage> = ctx
            .inventory
            .pms
            .keys()
            .map(|id| (id.clone(), Usage::default()))
            .collect();
        for (vm, pm) in &ctx.state.allocation {
            if let (Some(vm), Some(u)) = (ctx.inventory.vm(vm), usage.get_mut(pm)) {
                u.cores += vm.cores;
                u.ram += vm.ram_gb;
                u.count += 1;
            }
        }
        Self {
            inventory: ctx.inventory,
            weights: ctx.params.weights,
            allocation: ctx.state.allocation.clone(),
            suspended: ctx.state.suspended.clone(),
            usage,
            actions: Vec::new(),
            step: ctx.step,
        }
    }

    fn usage(&self, pm: &PmId) -> Usage {
        self.usage.get(pm).copied().unwrap_or_default()
    }

    fn fits(&self, vm: &VirtualMachine, pm: &PhysicalMachine) -> bool {
        let u = self.usage(&pm.id);
        u.cores + vm.cores <= pm.cores && u.ram + vm.ram_gb <= pm.ram_gb + 1e-9
    }

    fn util(&self, pm: &PhysicalMachine) -> f64 {
        let u = self.usage(&pm.id);
        self.weights.cpu * u.cores as f64 / pm.cores as f64 + self.weights.ram * u.ram / pm.ram_gb
    }

    fn attach(&mut self, vm: &VirtualMachine, pm: &PmId) {
        let u = self.usage.entry(pm.clone()).or_default();
        u.cores += vm.cores;
        u.ram += vm.ram_gb;
        u.count += 1;
        self.allocation.insert(vm.id.clone(), pm.clone());
    }

    fn detach(&mut self, vm: &VirtualMachine) -> Option<PmId> {
        let pm = self.allocation.remove(&vm.id)?;
        if let Some(u) = self.usage.get_mut(&pm) {
            u.cores -= vm.cores;
            u.ram -= vm.ram_gb;
            u.count -= 1;
            if u.count == 0 {
                u.ram = 0.0;
            }
        }
        Some(pm)
    }

    fn is_active(&self, pm: &PmId) -> bool {
        self.usage(pm).count > 0
    }

    fn push(&mut self, kind: ActionKind) {
        self.actions.push(Action::new(self.step, kind));
    }

    /// Place (or move) `vm` onto `target`, resuming the host if needed.
    fn commit(&mut self, vm: &VirtualMachine, origin: Option<PmId>, target: &PmId) {
        if self.suspended.remove(target) {
            self.push(ActionKind::Resume { pm: target.clone() });
        }
        self.attach(vm, target);
        match origin {
            Some(from) if &from == target => {}
            Some(from) => self.push(ActionKind::Migrate {
                vm: vm.id.clone(),
                from,
                to: target.clone(),
            }),
            None => self.push(ActionKind::Place {
                vm: vm.id.clone(),
                pm: target.clone(),
            }),
        }
    }

    /// Suspend every running host left without VMs.
    fn suspend_empty(&mut self) {
        let empty: Vec<PmId> = self
            .inventory
            .pms
            .keys()
            .filter(|id| !self.suspended.contains(*id) && !self.is_active(id))
            .cloned()
            .collect();
        for pm in empty {
            self.suspended.insert(pm.clone());
            self.push(ActionKind::Suspend { pm });
        }
    }

    fn into_state(self, frequency: &BTreeMap<PmId, f64>) -> (CloudState, Vec<Action>) {
        (
            CloudState {
                allocation: self.allocation,
                frequency: frequency.clone(),
                suspended: self.suspended,
            },
            self.actions,
        )
    }
}

fn pending_sorted<'a>(ctx: &ControllerContext<'a>, scale: &Scale) -> Vec<&'a VirtualMachine> {
    let mut vms: Vec<&VirtualMachine> = ctx
        .pending
        .iter()
        .filter(|id| !ctx.state.allocation.contains_key(*id))
        .filter_map(|id| ctx.inventory.vm(id))
        .collect();
    sort_by_requirement(&mut vms, scale);
    vms
}

fn sort_by_requirement(vms: &mut [&VirtualMachine], scale: &Scale) {
    vms.sort_by(|a, b| {
        scale
            .requirement(b)
            .total_cmp(&scale.requirement(a))
            .then_with(|| a.id.cmp(&b.id))
    });
}

/// Best-fit-decreasing placement baseline.
pub fn bfd_controller(ctx: &ControllerContext<'_>) -> Vec<Action> {
    let scale = Scale::of(ctx.inventory, ctx.params.weights);
    let mut plan = Plan::new(ctx);

    for vm in pending_sorted(ctx, &scale) {
        let best_fit = ctx
            .inventory
            .pms
            .values()
            .filter(|pm| plan.is_active(&pm.id) && !plan.suspended.contains(&pm.id))
            .filter(|pm| plan.fits(vm, pm))
            .map(|pm| {
                let u = plan.usage(&pm.id);
                let spare = scale.scalar((pm.cores - u.cores) as f64, pm.ram_gb - u.ram);
                (spare, pm)
            })
            .min_by(|(sa, a), (sb, b)| sa.total_cmp(sb).then_with(|| a.id.cmp(&b.id)))
            .map(|(_, pm)| pm.id.clone());

        let target = best_fit.or_else(|| {
            let mut inactive: Vec<&PhysicalMachine> = ctx
                .inventory
                .pms
                .values()
                .filter(|pm| !plan.is_active(&pm.id))
                .collect();
            inactive.sort_by(|a, b| {
                scale
                    .capacity(b)
                    .total_cmp(&scale.capacity(a))
                    .then_with(|| a.id.cmp(&b.id))
            });
            inactive
                .into_iter()
                .find(|pm| plan.fits(vm, pm))
                .map(|pm| pm.id.clone())
        });

        match target {
            Some(pm) => plan.commit(vm, None, &pm),
            None => plan.push(ActionKind::Defer { vm: vm.id.clone() }),
        }
    }
    plan.suspend_empty();

    let f_max = ctx.inventory.ladder.f_max;
    let mut actions = plan.actions;
    for (pm, &f) in &ctx.state.frequency {
        if ctx.inventory.ladder.index_of(f) != ctx.inventory.ladder.index_of(f_max) {
            actions.push(Action::new(
                ctx.step,
                ActionKind::SetFrequency {
                    pm: pm.clone(),
                    ghz: f_max,
                },
            ));
        }
    }
    actions
}

/// Cost-aware placement and consolidation stage. Returns the actions and
/// the state they lead to.
pub fn bcf_migration_stage_with_state(ctx: &ControllerContext<'_>) -> (CloudState, Vec<Action>) {
    let scale = Scale::of(ctx.inventory, ctx.params.weights);
    let threshold = ctx.params.settings.underutil_threshold;
    let mut plan = Plan::new(ctx);

    let mut to_alloc = pending_sorted(ctx, &scale);
    for pm in ctx.inventory.pms.values() {
        if plan.suspended.contains(&pm.id) || !plan.is_active(&pm.id) {
            continue;
        }
        if plan.util(pm) < threshold {
            to_alloc.extend(ctx.state.hosted_vms(&pm.id, ctx.inventory));
        }
    }
    sort_by_requirement(&mut to_alloc, &scale);

    let cost: HashMap<&PmId, f64> = ctx
        .inventory
        .pms
        .values()
        .map(|pm| (&pm.id, ctx.cost_rate(&pm.location)))
        .collect();

    for vm in to_alloc {
        let origin = plan.detach(vm);

        let (mut active, mut inactive): (Vec<&PhysicalMachine>, Vec<&PhysicalMachine>) = ctx
            .inventory
            .pms
            .values()
            .partition(|pm| plan.is_active(&pm.id));
        inactive.sort_by(|a, b| {
            scale
                .capacity(b)
                .total_cmp(&scale.capacity(a))
                .then_with(|| cost[&a.id].total_cmp(&cost[&b.id]))
                .then_with(|| a.id.cmp(&b.id))
        });
        // fullest first, then cheapest
        let utils: HashMap<&PmId, f64> = active.iter().map(|pm| (&pm.id, plan.util(pm))).collect();
        active.sort_by(|a, b| {
            utils[&b.id]
                .total_cmp(&utils[&a.id])
                .then_with(|| cost[&a.id].total_cmp(&cost[&b.id]))
                .then_with(|| a.id.cmp(&b.id))
        });

        // Activating inactive hosts one at a time and rescanning finds the
        // first inactive host (in order) that fits, since the rescan only
        // adds empty hosts to the already rejected active set.
        let target = active
            .iter()
            .chain(inactive.iter())
            .find(|pm| plan.fits(vm, pm))
            .map(|pm| pm.id.clone());

        match target {
            Some(pm) => plan.commit(vm, origin, &pm),
            None => match origin {
                // unreachable: the VM's own host has room for it again
                Some(from) => plan.attach(vm, &from),
                None => plan.push(ActionKind::Defer { vm: vm.id.clone() }),
            },
        }
    }
    plan.suspend_empty();
    plan.into_state(&ctx.state.frequency)
}

pub fn bcf_migration_stage(ctx: &ControllerContext<'_>) -> Vec<Action> {
    bcf_migration_stage_with_state(ctx).1
}

/// Model estimate of revenue and energy cost for one host over `window_h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostEstimate {
    pub revenue_usd: f64,
    pub energy_cost_usd: f64,
}

impl HostEstimate {
    pub fn gross_profit(&self) -> f64 {
        self.revenue_usd - self.energy_cost_usd
    }
}

/// Revenue of the hosted VMs and energy cost (cooling included) of a host
/// at frequency `f` over `window_h` hours.
#[allow(clippy::too_many_arguments)]
pub fn estimate_host(
    pm: &PhysicalMachine,
    hosted: &[&VirtualMachine],
    f: f64,
    cost_rate_usd_per_kwh: f64,
    window_h: f64,
    power: &PowerModel,
    pricing: &PricingParams,
    ladder: &crate::model::FrequencyLadder,
) -> Result<HostEstimate, PowerError> {
    let watts = power.host_power(pm, hosted, f, ladder)?;
    Ok(HostEstimate {
        revenue_usd: pm_revenue(f, hosted, ladder, pricing) * window_h,
        energy_cost_usd: watts / 1000.0 * window_h * cost_rate_usd_per_kwh,
    })
}

fn mean_beta(hosted: &[&VirtualMachine]) -> f64 {
    if hosted.is_empty() {
        return 0.0;
    }
    hosted.iter().map(|vm| vm.beta).sum::<f64>() / hosted.len() as f64
}

/// Chosen frequency per running host after greedy descent from `f_max`.
/// Hosts are visited in ascending id order.
pub fn choose_frequencies(
    ctx: &ControllerContext<'_>,
    state: &CloudState,
) -> Result<BTreeMap<PmId, f64>, PowerError> {
    let ladder = &ctx.inventory.ladder;
    let params = ctx.params;
    let window = params.settings.evaluation_window_h;
    let by_pm = state.hosted_by_pm();

    let active: Vec<(&PhysicalMachine, Vec<&VirtualMachine>)> = ctx
        .inventory
        .pms
        .values()
        .filter(|pm| !state.is_suspended(&pm.id))
        .filter_map(|pm| {
            let ids = by_pm.get(&pm.id)?;
            let hosted: Vec<&VirtualMachine> =
                ids.iter().filter_map(|id| ctx.inventory.vm(id)).collect();
            Some((pm, hosted))
        })
        .collect();

    let mut chosen: BTreeMap<PmId, f64> = active
        .iter()
        .map(|(pm, _)| (pm.id.clone(), ladder.f_max))
        .collect();
    let mut removed: BTreeSet<&PmId> = BTreeSet::new();
    let mut decrease_feasible = false;

    for (i, (pm, hosted)) in active.iter().enumerate() {
        if removed.contains(&pm.id) {
            continue;
        }
        if !params.settings.literal_feasible_flag {
            decrease_feasible = false;
        }
        let rate = ctx.cost_rate(&pm.location);
        let estimate = |f: f64| {
            estimate_host(pm, hosted, f, rate, window, &params.power, &params.pricing, ladder)
        };

        let mut current = estimate(ladder.f_max)?;
        let mut f_to_apply = ladder.f_max;
        let mut level = ladder.len() - 1;
        while level > 0 {
            level -= 1;
            let f = ladder.level(level);
            let next = estimate(f)?;
            let revenue_loss = current.revenue_usd - next.revenue_usd;
            let en_savings = current.energy_cost_usd - next.energy_cost_usd;
            if en_savings > revenue_loss {
                current = next;
                decrease_feasible = true;
                f_to_apply = f;
            } else {
                break;
            }
        }

        if decrease_feasible {
            chosen.insert(pm.id.clone(), f_to_apply);
        } else {
            let beta = mean_beta(hosted);
            let price = ctx.price(&pm.location);
            let temp = ctx.temp(&pm.location);
            for (other, other_hosted) in &active[i + 1..] {
                if mean_beta(other_hosted) > beta
                    && ctx.price(&other.location) < price
                    && ctx.temp(&other.location) < temp
                {
                    removed.insert(&other.id);
                }
            }
        }
    }
    Ok(chosen)
}

/// Frequency scaling stage applied on top of `state` (the allocation after
/// the migration stage). Emits `SetFrequency` only where the chosen
/// frequency differs from the host's current one.
pub fn frequency_scaling_stage(
    ctx: &ControllerContext<'_>,
    state: &CloudState,
) -> Result<Vec<Action>, PowerError> {
    let ladder = &ctx.inventory.ladder;
    let chosen = choose_frequencies(ctx, state)?;
    Ok(chosen
        .into_iter()
        .filter(|(pm, f)| ladder.index_of(state.frequency_of(pm, ladder)) != ladder.index_of(*f))
        .map(|(pm, ghz)| Action::new(ctx.step, ActionKind::SetFrequency { pm, ghz }))
        .collect())
}

pub fn bcffs_controller(ctx: &ControllerContext<'_>) -> Result<Vec<Action>, PowerError> {
    let (after, mut actions) = bcf_migration_stage_with_state(ctx);
    if ctx.params.settings.frequency_scaling {
        actions.extend(frequency_scaling_stage(ctx, &after)?);
    }
    Ok(actions)
}

/// Dispatch to the selected controller.
pub fn decide(kind: ControllerKind, ctx: &ControllerContext<'_>) -> Result<Vec<Action>, PowerError> {
    match kind {
        ControllerKind::Bfd => Ok(bfd_controller(ctx)),
        ControllerKind::Bcf => Ok(bcf_migration_stage(ctx)),
        ControllerKind::Bcffs => bcffs_controller(ctx),
    }
}

#[allow(dead_code)]
fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}
