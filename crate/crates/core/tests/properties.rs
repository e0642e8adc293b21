use std::collections::BTreeMap;

use geocloud::model::{
    utilisation, validate_state, ActionKind, CloudState, FrequencyLadder, Inventory,
    PhysicalMachine, PmId, VirtualMachine, VmId,
};
use geocloud::power::{
    cooling_overhead_factor, multicore_idle_power, multicore_peak_power, multicore_pm_power,
    pm_power, CubicPowerParams, MulticorePowerParams,
};
use geocloud::pricing::{pm_revenue, vm_price, PricingParams, PricingScheme};
use geocloud::traces::{synthesize_prices, SeriesKind, TimeSeries};
use geocloud::model::DataCenter;
use geocloud::{run_simulation, ControllerKind, SimulationConfig};
use proptest::prelude::*;

fn ladder() -> FrequencyLadder {
    FrequencyLadder::new(1.0, 1.8, 2.6, 0.2).unwrap()
}

fn level() -> impl Strategy<Value = f64> {
    (0usize..5).prop_map(|i| ladder().level(i))
}

fn vm(cores: u32, ram: f64, beta: f64) -> VirtualMachine {
    VirtualMachine {
        id: VmId::new("vm"),
        cores,
        ram_gb: ram,
        beta,
        boot_step: 0,
        delete_step: 1,
    }
}

fn poly() -> impl Strategy<Value = MulticorePowerParams> {
    (
        50.0..120.0f64,
        prop::array::uniform6(0.0..20.0f64),
        1.0..40.0f64,
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64),
        1u32..9,
    )
        .prop_map(|(p00, c, pmax, (g0, g1, g2), max_cores)| MulticorePowerParams {
            p00,
            p10: c[0],
            p01: c[1],
            p20: c[2],
            p11: c[3],
            p30: c[4],
            p21: c[5],
            p_max_core_w: pmax,
            gamma_poly: (g0 * pmax, g1 * pmax, g2 * pmax),
            max_cores,
        })
}

#[test]
fn ladder_levels_are_members() {
    let l = ladder();
    assert_eq!(l.len(), 5);
    for f in l.levels() {
        assert!(l.contains(f));
        assert_eq!(l.level(l.index_of(f).unwrap()), f);
    }
}

proptest! {
    #[test]
    fn pm_power_monotone(f1 in level(), f2 in level(), u1 in 0.0..=1.0f64, u2 in 0.0..=1.0f64) {
        let (p, l) = (CubicPowerParams::default(), ladder());
        let (lo_f, hi_f) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let (lo_u, hi_u) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        prop_assert!(pm_power(lo_f, lo_u, &p, &l).unwrap() <= pm_power(hi_f, lo_u, &p, &l).unwrap());
        prop_assert!(pm_power(lo_f, lo_u, &p, &l).unwrap() <= pm_power(lo_f, hi_u, &p, &l).unwrap() + 1e-12);
    }

    #[test]
    fn frequency_saving_grows_with_util(f1 in level(), f2 in level(), u1 in 0.0..=1.0f64, u2 in 0.0..=1.0f64) {
        prop_assume!(f1 < f2);
        let (p, l) = (CubicPowerParams::default(), ladder());
        let saving = |u| pm_power(f2, u, &p, &l).unwrap() - pm_power(f1, u, &p, &l).unwrap();
        let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        prop_assert!(saving(lo) <= saving(hi) + 1e-12);
    }

    #[test]
    fn active_idle_is_p_idle(f in level()) {
        prop_assert_eq!(pm_power(f, 0.0, &CubicPowerParams::default(), &ladder()).unwrap(), 100.0);
    }

    #[test]
    fn multicore_power_within_bounds(p in poly(), q in 0.0..=1.0f64, betas in prop::collection::vec(0.0..=1.0f64, 0..9)) {
        prop_assume!(betas.len() <= p.max_cores as usize);
        let idle = multicore_idle_power(q, &p).unwrap();
        prop_assert!((multicore_peak_power(q, 0.0, &p).unwrap() - idle).abs() < 1e-12);
        let full = multicore_peak_power(q, betas.len() as f64, &p).unwrap();
        let got = multicore_pm_power(q, &betas, &p).unwrap();
        prop_assert!(got >= idle.min(full) - 1e-9 && got <= idle.max(full) + 1e-9);
        if betas.is_empty() {
            prop_assert_eq!(got, idle);
        }
    }

    #[test]
    fn price_monotone(f1 in level(), f2 in level(), ram in 1.0..64.0f64, extra in 0.0..32.0f64,
                      b1 in 0.0..=1.0f64, b2 in 0.0..=1.0f64, cores in 1u32..5) {
        let (l, p) = (ladder(), PricingParams::default());
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let v = vm(cores, ram, b1);
        prop_assert!(vm_price(&v, lo, &l, &p) <= vm_price(&v, hi, &l, &p) + 1e-12);
        prop_assert!(vm_price(&v, lo, &l, &p) <= vm_price(&vm(cores, ram + extra, b1), lo, &l, &p) + 1e-12);
        let (blo, bhi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(vm_price(&vm(cores, ram, bhi), lo, &l, &p) <= vm_price(&vm(cores, ram, blo), lo, &l, &p) + 1e-12);
    }

    #[test]
    fn perceived_pricing_limits(f in level(), ram in 1.0..64.0f64, cores in 1u32..5) {
        let l = ladder();
        let perceived = PricingParams::default();
        let perf = PricingParams { scheme: PricingScheme::PerformanceBased, ..perceived };
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        prop_assert!(close(vm_price(&vm(cores, ram, 1.0), f, &l, &perceived), vm_price(&vm(cores, ram, 1.0), f, &l, &perf)));
        prop_assert!(close(vm_price(&vm(cores, ram, 0.0), f, &l, &perceived), vm_price(&vm(cores, ram, 0.0), l.f_max, &l, &perf)));
    }

    #[test]
    fn revenue_loss_nonnegative_and_zero_only_at_beta_zero(
        f1 in level(), f2 in level(),
        betas in prop::collection::vec(prop_oneof![Just(0.0), 0.0..=1.0f64], 1..6),
    ) {
        prop_assume!(f1 < f2);
        let (l, p) = (ladder(), PricingParams::default());
        let vms: Vec<VirtualMachine> = betas.iter().map(|&b| vm(1, 4.0, b)).collect();
        let hosted: Vec<&VirtualMachine> = vms.iter().collect();
        let loss = pm_revenue(f2, &hosted, &l, &p) - pm_revenue(f1, &hosted, &l, &p);
        prop_assert!(loss >= -1e-12);
        let all_zero = betas.iter().all(|b| *b == 0.0);
        prop_assert_eq!(loss.abs() < 1e-15, all_zero);
    }

    #[test]
    fn synthesize_shifts_mean(values in prop::collection::vec(0.02..0.1f64, 20..60), tz in -3i32..=3, target in 0.03..0.09f64) {
        let n = values.len();
        let base = TimeSeries::new(
            "ref".into(),
            SeriesKind::ElectricityPrice,
            values.iter().enumerate().map(|(i, v)| (i as i64 - 3, *v)).collect(),
        ).unwrap();
        let dc = DataCenter {
            id: "x".into(),
            name: "x".into(),
            timezone_offset_h: tz as f64,
            mean_price_usd_per_kwh: target,
            mean_temp_c: 15.0,
        };
        let steps = n - 6;
        let out = synthesize_prices(&base, &dc, steps, 1.0).unwrap();
        prop_assert_eq!(out.len(), steps);
        let delta = target - base.mean();
        for (t, v) in &out.samples {
            let want = base.value_at(t - tz as i64).unwrap() + delta;
            if want > 1e-4 {
                prop_assert!((v - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn valid_state_means_util_in_range(
        caps in prop::collection::vec((1u32..5, 8.0..64.0f64), 1..4),
        reqs in prop::collection::vec((1u32..3, 1.0..16.0f64, 0usize..4), 0..8),
    ) {
        let l = ladder();
        let pms: Vec<PhysicalMachine> = caps.iter().enumerate().map(|(i, (c, r))| PhysicalMachine {
            id: PmId::new(format!("pm{i}")), cores: *c, ram_gb: *r, location: "dc".into(),
        }).collect();
        let vms: Vec<VirtualMachine> = reqs.iter().enumerate().map(|(i, (c, r, _))| VirtualMachine {
            id: VmId::new(format!("vm{i}")), cores: *c, ram_gb: *r, beta: 0.5, boot_step: 0, delete_step: 1,
        }).collect();
        let inv = Inventory::new(pms.clone(), l).with_vms(vms.clone());
        let mut state = CloudState::all_suspended(&inv);
        state.suspended.clear();
        for (vm, (_, _, target)) in vms.iter().zip(&reqs) {
            state.allocation.insert(vm.id.clone(), pms[target % pms.len()].id.clone());
        }
        if validate_state(&state, &inv).is_ok() {
            for pm in &pms {
                let hosted = state.hosted_vms(&pm.id, &inv);
                let u = utilisation(pm, &hosted).unwrap();
                prop_assert!((0.0..=1.0).contains(&u));
            }
        }
    }
}

fn small(seed: u64) -> SimulationConfig {
    let mut cfg = SimulationConfig::default();
    cfg.simulation.seed = seed;
    cfg.simulation.steps = 24;
    cfg.inventory.pm_count = 12;
    cfg.workload.vm_count = 20;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn engine_energy_accounting(seed in 0u64..10_000, kind in prop::sample::select(ControllerKind::ALL.to_vec())) {
        let cfg = small(seed);
        let scenario = cfg.build().unwrap();
        let report = run_simulation(&cfg, kind).unwrap();
        prop_assert_eq!(report.validated_steps, cfg.simulation.steps);

        // replay the action log and re-derive per-step energy
        let l = cfg.model.ladder;
        let mut inv = Inventory::new(scenario.pms.clone(), l);
        let mut state = CloudState::all_suspended(&inv);
        let mut by_step: BTreeMap<usize, Vec<_>> = BTreeMap::new();
        for a in &report.actions {
            by_step.entry(a.step).or_default().push(a);
        }
        for (step, rec) in report.per_step.iter().enumerate() {
            inv.vms.retain(|_, v| v.delete_step > step);
            state.allocation.retain(|vm, _| inv.vms.contains_key(vm));
            for v in scenario.vms.iter().filter(|v| v.boot_step == step) {
                inv.vms.insert(v.id.clone(), v.clone());
            }
            let mut it_kwh = 0.0;
            let mut total_kwh = 0.0;
            for a in by_step.get(&step).into_iter().flatten() {
                if let ActionKind::Migrate { vm, from, .. } = &a.kind {
                    let kwh = inv.vms[vm].ram_gb * cfg.engine.migration_energy_wh_per_gb / 1000.0;
                    let dc = &inv.pms[from].location;
                    let factor = cooling_overhead_factor(scenario.temps[dc].value_at(step as i64).unwrap(), &cfg.power.cooling);
                    it_kwh += kwh;
                    total_kwh += kwh * (1.0 + factor);
                }
                state.apply(a, &inv).unwrap();
            }
            for pm in inv.pms.values().filter(|pm| !state.is_suspended(&pm.id)) {
                let hosted = state.hosted_vms(&pm.id, &inv);
                let w = scenario.power.host_power(pm, &hosted, state.frequency_of(&pm.id, &l), &l).unwrap();
                let kwh = w / 1000.0 * cfg.simulation.step_h;
                let factor = cooling_overhead_factor(scenario.temps[&pm.location].value_at(step as i64).unwrap(), &cfg.power.cooling);
                it_kwh += kwh;
                total_kwh += kwh * (1.0 + factor);
            }
            prop_assert!((rec.it_energy_kwh - it_kwh).abs() < 1e-6, "step {} it {} vs {}", step, rec.it_energy_kwh, it_kwh);
            prop_assert!((rec.total_energy_kwh - total_kwh).abs() < 1e-6, "step {} total {} vs {}", step, rec.total_energy_kwh, total_kwh);
        }
        let sum: f64 = report.per_step.iter().map(|s| s.total_energy_kwh).sum();
        prop_assert!((sum - report.total_energy_kwh).abs() < 1e-6);
    }

    #[test]
    fn bcffs_never_loses_model_profit(seed in 0u64..10_000) {
        let cfg = small(seed);
        let bcf = run_simulation(&cfg, ControllerKind::Bcf).unwrap();
        let bcffs = run_simulation(&cfg, ControllerKind::Bcffs).unwrap();
        prop_assert_eq!(bcf.allocation_log(), bcffs.allocation_log());
        for (a, b) in bcf.per_step.iter().zip(&bcffs.per_step) {
            prop_assert!(b.gross_profit_usd >= a.gross_profit_usd);
        }
    }

    #[test]
    fn scaling_disabled_is_bcf(seed in 0u64..10_000) {
        let mut cfg = small(seed);
        let bcf = run_simulation(&cfg, ControllerKind::Bcf).unwrap();
        cfg.controllers.frequency_scaling = false;
        let bcffs = run_simulation(&cfg, ControllerKind::Bcffs).unwrap();
        prop_assert_eq!(&bcf.actions, &bcffs.actions);
        prop_assert_eq!(bcf.total_cost_usd, bcffs.total_cost_usd);
        prop_assert_eq!(bcf.service_revenue_usd, bcffs.service_revenue_usd);
    }

    #[test]
    fn placement_only_controllers_share_revenue(seed in 0u64..10_000) {
        let cfg = small(seed);
        let bfd = run_simulation(&cfg, ControllerKind::Bfd).unwrap();
        let bcf = run_simulation(&cfg, ControllerKind::Bcf).unwrap();
        let deferred = |r: &geocloud::SimulationReport| r.actions.iter().any(|a| matches!(a.kind, ActionKind::Defer { .. }));
        prop_assume!(!deferred(&bfd) && !deferred(&bcf));
        prop_assert_eq!(bfd.service_revenue_usd, bcf.service_revenue_usd);
    }

    #[test]
    fn runs_are_deterministic(seed in 0u64..10_000) {
        let cfg = small(seed);
        for kind in ControllerKind::ALL {
            prop_assert_eq!(run_simulation(&cfg, kind).unwrap(), run_simulation(&cfg, kind).unwrap());
        }
    }
}
