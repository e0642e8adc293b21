//! Host power models.
//!
//! Two models are available. The single-core cubic model scales peak power
//! with the cube of the relative frequency above `f_base` and interpolates
//! linearly in utilisation from `P_idle`. The multi-core polynomial model
//! expresses full-load power as a polynomial in unitless frequency `q` and
//! active core count `c`, with per-core load taken from a quadratic power
//! ratio in CPU-boundedness.
//!
//! Suspended hosts draw 0 W under both models; callers skip them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    utilisation_weighted, FrequencyLadder, ModelError, PhysicalMachine, UtilWeights,
    VirtualMachine,
};

const Q_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerError {
    #[error("frequency {f} GHz is below the reference frequency {f_base} GHz")]
    BelowBase { f: f64, f_base: f64 },
    #[error("utilisation {0} outside [0, 1]")]
    UtilOutOfRange(f64),
    #[error("unitless frequency {0} outside [0, 1]")]
    FreqOutOfRange(f64),
    #[error("active core count {c} exceeds max_cores {max}")]
    TooManyCores { c: f64, max: u32 },
    #[error("invalid power parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters of the single-core cubic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicPowerParams {
    /// Full-load power at `f_base`, W.
    pub p_base_w: f64,
    pub p_idle_w: f64,
    /// Weight of the cubic frequency term, W.
    pub p_dif_w: f64,
}

impl Default for CubicPowerParams {
    fn default() -> Self {
        Self {
            p_base_w: 150.0,
            p_idle_w: 100.0,
            p_dif_w: 15.0,
        }
    }
}

impl CubicPowerParams {
    pub fn check(&self) -> Result<(), PowerError> {
        if !(self.p_base_w > self.p_idle_w && self.p_idle_w >= 0.0) {
            return Err(PowerError::InvalidParams(
                "need p_base_w > p_idle_w >= 0".into(),
            ));
        }
        if !(self.p_dif_w >= 0.0) {
            return Err(PowerError::InvalidParams("p_dif_w must be >= 0".into()));
        }
        Ok(())
    }
}

/// Full-load power at frequency `f`.
pub fn peak_power(f: f64, ladder: &FrequencyLadder, p: &CubicPowerParams) -> Result<f64, PowerError> {
    if f < ladder.f_base - 1e-12 {
        return Err(PowerError::BelowBase {
            f,
            f_base: ladder.f_base,
        });
    }
    let rel = (f - ladder.f_base) / ladder.f_base;
    Ok(p.p_base_w + p.p_dif_w * rel * rel * rel)
}

/// Power of an active host at frequency `f` and utilisation `util`.
pub fn pm_power(
    f: f64,
    util: f64,
    p: &CubicPowerParams,
    ladder: &FrequencyLadder,
) -> Result<f64, PowerError> {
    if !(0.0..=1.0).contains(&util) {
        return Err(PowerError::UtilOutOfRange(util));
    }
    let peak = peak_power(f, ladder, p)?;
    Ok(p.p_idle_w + util * (peak - p.p_idle_w))
}

/// Coefficients of the multi-core polynomial model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MulticorePowerParams {
    pub p00: f64,
    pub p10: f64,
    pub p01: f64,
    pub p20: f64,
    pub p11: f64,
    pub p30: f64,
    pub p21: f64,
    /// Maximum dissipation of one core, W.
    pub p_max_core_w: f64,
    /// Power-ratio quadratic in beta: `(p0, p1, p2)` for `p0*b^2 + p1*b + p2`.
    pub gamma_poly: (f64, f64, f64),
    pub max_cores: u32,
}

impl MulticorePowerParams {
    /// Validate coefficients. Full-load power must not fall below idle power
    /// anywhere on the ladder for `c` in `0..=max_cores`.
    pub fn new(p: MulticorePowerParams, ladder: &FrequencyLadder) -> Result<Self, PowerError> {
        if !(p.p_max_core_w > 0.0) {
            return Err(PowerError::InvalidParams("p_max_core_w must be positive".into()));
        }
        for f in ladder.levels() {
            let q = ladder.unitless(f);
            let idle = multicore_idle_power(q, &p)?;
            for c in 0..=p.max_cores {
                let full = multicore_peak_power(q, c as f64, &p)?;
                if full < idle - 1e-9 {
                    return Err(PowerError::InvalidParams(format!(
                        "full-load power {full:.3} W below idle {idle:.3} W at q={q:.3}, c={c}"
                    )));
                }
            }
        }
        Ok(p)
    }
}

/// Result of anchoring the multi-core polynomial to the cubic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub params: MulticorePowerParams,
    /// Largest |multi-core full load - cubic peak| over the ladder, W.
    pub residual_w: f64,
}

/// Fit multi-core coefficients so that, at `f_max`, an idle host draws
/// `P_idle` and a host with every core fully loaded draws the cubic peak.
///
/// Idle power is taken frequency-independent (as in the cubic model); the
/// per-core dynamic term is the quadratic in `q` through the cubic model's
/// per-core share at `q = 0, 0.5, 1`. The default power ratio rises
/// linearly from 0.5 at beta = 0 to 1 at beta = 1.
pub fn calibrate_multicore(
    cubic: &CubicPowerParams,
    ladder: &FrequencyLadder,
    max_cores: u32,
) -> Result<Calibration, PowerError> {
    if max_cores == 0 {
        return Err(PowerError::InvalidParams("max_cores must be at least 1".into()));
    }
    let freq_at = |q: f64| ladder.f_min + q * (ladder.f_max - ladder.f_min);
    let per_core = |q: f64| -> Result<f64, PowerError> {
        Ok((peak_power(freq_at(q), ladder, cubic)? - cubic.p_idle_w) / max_cores as f64)
    };
    let (t0, th, t1) = (per_core(0.0)?, per_core(0.5)?, per_core(1.0)?);
    let p21 = 2.0 * (t1 - 2.0 * th + t0);
    let p11 = t1 - t0 - p21;
    let params = MulticorePowerParams {
        p00: cubic.p_idle_w,
        p10: 0.0,
        p01: t0,
        p20: 0.0,
        p11,
        p30: 0.0,
        p21,
        p_max_core_w: t1,
        gamma_poly: (0.0, 0.5 * t1, 0.5 * t1),
        max_cores,
    };
    let params = MulticorePowerParams::new(params, ladder)?;
    let mut residual_w: f64 = 0.0;
    for f in ladder.levels() {
        let q = ladder.unitless(f);
        let multi = multicore_peak_power(q, max_cores as f64, &params)?;
        residual_w = residual_w.max((multi - peak_power(f, ladder, cubic)?).abs());
    }
    Ok(Calibration { params, residual_w })
}

fn check_q(q: f64) -> Result<(), PowerError> {
    if !(-Q_EPS..=1.0 + Q_EPS).contains(&q) {
        return Err(PowerError::FreqOutOfRange(q));
    }
    Ok(())
}

/// Full-load power with `c` active cores at unitless frequency `q`.
pub fn multicore_peak_power(q: f64, c: f64, p: &MulticorePowerParams) -> Result<f64, PowerError> {
    check_q(q)?;
    if c > p.max_cores as f64 || c < 0.0 {
        return Err(PowerError::TooManyCores { c, max: p.max_cores });
    }
    Ok(p.p00
        + p.p10 * q
        + p.p01 * c
        + p.p20 * q * q
        + p.p11 * q * c
        + p.p30 * q * q * q
        + p.p21 * q * q * c)
}

pub fn multicore_idle_power(q: f64, p: &MulticorePowerParams) -> Result<f64, PowerError> {
    check_q(q)?;
    Ok(p.p00 + p.p10 * q + p.p20 * q * q + p.p30 * q * q * q)
}

/// Per-core power ratio for a VM with CPU-boundedness `beta`, clamped to [0, 1].
pub fn gamma_core(beta: f64, p: &MulticorePowerParams) -> f64 {
    let (p0, p1, p2) = p.gamma_poly;
    ((p0 * beta * beta + p1 * beta + p2) / p.p_max_core_w).clamp(0.0, 1.0)
}

/// Host power with one entry of `hosted_betas` per busy core.
pub fn multicore_pm_power(
    q: f64,
    hosted_betas: &[f64],
    p: &MulticorePowerParams,
) -> Result<f64, PowerError> {
    let idle = multicore_idle_power(q, p)?;
    let active = hosted_betas.len();
    if active == 0 {
        return Ok(idle);
    }
    let full = multicore_peak_power(q, active as f64, p)?;
    let u: f64 = hosted_betas.iter().map(|&b| gamma_core(b, p)).sum::<f64>() / active as f64;
    Ok(idle + (full - idle) * u)
}

/// Cooling overhead as a fraction of IT power, linear in outside temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoolingParams {
    pub reference_overhead: f64,
    pub reference_temp_c: f64,
    pub slope_per_c: f64,
    pub min_overhead: f64,
    pub max_overhead: f64,
}

impl Default for CoolingParams {
    fn default() -> Self {
        Self {
            reference_overhead: 0.2,
            reference_temp_c: 15.0,
            slope_per_c: 0.01,
            min_overhead: 0.05,
            max_overhead: 0.6,
        }
    }
}

impl CoolingParams {
    pub fn check(&self) -> Result<(), PowerError> {
        if !(0.0 <= self.min_overhead
            && self.min_overhead <= self.reference_overhead
            && self.reference_overhead <= self.max_overhead)
        {
            return Err(PowerError::InvalidParams(
                "need 0 <= min_overhead <= reference_overhead <= max_overhead".into(),
            ));
        }
        Ok(())
    }
}

/// Cooling power divided by IT power. Total power is `IT * (1 + factor)`.
pub fn cooling_overhead_factor(temp_c: f64, cp: &CoolingParams) -> f64 {
    (cp.reference_overhead + cp.slope_per_c * (temp_c - cp.reference_temp_c))
        .clamp(cp.min_overhead, cp.max_overhead)
}

/// The power model used by a simulation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerModel {
    Cubic {
        params: CubicPowerParams,
        weights: UtilWeights,
    },
    Multicore(MulticorePowerParams),
}

impl PowerModel {
    /// Power drawn by an active (not suspended) host.
    pub fn host_power(
        &self,
        pm: &PhysicalMachine,
        hosted: &[&VirtualMachine],
        f: f64,
        ladder: &FrequencyLadder,
    ) -> Result<f64, PowerError> {
        match self {
            PowerModel::Cubic { params, weights } => {
                let util = utilisation_weighted(pm, hosted, *weights)?;
                pm_power(f, util.min(1.0), params, ladder)
            }
            PowerModel::Multicore(params) => {
                let betas: Vec<f64> = hosted
                    .iter()
                    .flat_map(|vm| std::iter::repeat_n(vm.beta, vm.cores as usize))
                    .collect();
                if betas.len() > pm.cores as usize {
                    return Err(ModelError::CapacityExceeded { pm: pm.id.clone() }.into());
                }
                multicore_pm_power(ladder.unitless(f), &betas, params)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn poly() -> MulticorePowerParams {
        MulticorePowerParams {
            p00: 60.0,
            p10: 10.0,
            p01: 8.0,
            p20: 5.0,
            p11: 3.0,
            p30: 2.0,
            p21: 1.0,
            p_max_core_w: 10.0,
            gamma_poly: (0.0, 10.0, 0.0),
            max_cores: 4,
        }
    }

    #[test]
    fn peak_power_examples() {
        let ladder = FrequencyLadder::default();
        let p = CubicPowerParams::default();
        assert_relative_eq!(peak_power(1.0, &ladder, &p).unwrap(), 150.0, max_relative = 1e-12);
        assert_relative_eq!(peak_power(2.6, &ladder, &p).unwrap(), 211.44, max_relative = 1e-9);
        assert_relative_eq!(peak_power(1.8, &ladder, &p).unwrap(), 157.68, max_relative = 1e-9);
        assert!(matches!(
            peak_power(0.9, &ladder, &p),
            Err(PowerError::BelowBase { .. })
        ));
    }

    #[test]
    fn pm_power_examples() {
        let ladder = FrequencyLadder::default();
        let p = CubicPowerParams::default();
        for f in ladder.levels() {
            assert_eq!(pm_power(f, 0.0, &p, &ladder).unwrap(), 100.0);
        }
        assert_relative_eq!(pm_power(2.6, 1.0, &p, &ladder).unwrap(), 211.44, max_relative = 1e-9);
        assert_relative_eq!(pm_power(2.6, 0.5, &p, &ladder).unwrap(), 155.72, max_relative = 1e-9);
        assert!(pm_power(2.6, 1.01, &p, &ladder).is_err());
        assert!(pm_power(2.6, -0.1, &p, &ladder).is_err());
    }

    #[test]
    fn multicore_examples() {
        let p = poly();
        assert_relative_eq!(multicore_peak_power(0.5, 2.0, &p).unwrap(), 86.0, max_relative = 1e-12);
        assert_relative_eq!(multicore_idle_power(0.5, &p).unwrap(), 66.5, max_relative = 1e-12);
        assert_eq!(multicore_idle_power(0.0, &p).unwrap(), 60.0);
        assert!(multicore_peak_power(0.5, 5.0, &p).is_err());

        let constant = MulticorePowerParams {
            p00: 80.0,
            p10: 0.0,
            p01: 0.0,
            p20: 0.0,
            p11: 0.0,
            p30: 0.0,
            p21: 0.0,
            ..p
        };
        assert_eq!(multicore_peak_power(0.3, 3.0, &constant).unwrap(), 80.0);
    }

    #[test]
    fn gamma_examples() {
        let mut p = poly();
        assert_relative_eq!(gamma_core(0.4, &p), 0.4, max_relative = 1e-12);
        p.gamma_poly = (0.0, 0.0, p.p_max_core_w);
        for b in [0.0, 0.3, 1.0] {
            assert_eq!(gamma_core(b, &p), 1.0);
        }
        p.gamma_poly = (3.0, 2.0, 4.0);
        assert_relative_eq!(gamma_core(0.0, &p), 0.4, max_relative = 1e-12);
        p.gamma_poly = (0.0, 0.0, 20.0);
        assert_eq!(gamma_core(0.5, &p), 1.0);
    }

    #[test]
    fn multicore_host_power_examples() {
        let p = poly();
        assert_eq!(
            multicore_pm_power(0.5, &[], &p).unwrap(),
            multicore_idle_power(0.5, &p).unwrap()
        );
        // gamma = beta under the linear params
        let idle = multicore_idle_power(0.5, &p).unwrap();
        let full = multicore_peak_power(0.5, 2.0, &p).unwrap();
        assert_relative_eq!(
            multicore_pm_power(0.5, &[0.5, 1.0], &p).unwrap(),
            idle + 0.75 * (full - idle),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            multicore_pm_power(0.5, &[1.0, 1.0], &p).unwrap(),
            full,
            max_relative = 1e-12
        );
    }

    #[test]
    fn cooling_examples() {
        let cp = CoolingParams::default();
        assert_eq!(cooling_overhead_factor(15.0, &cp), 0.2);
        assert_relative_eq!(cooling_overhead_factor(25.0, &cp), 0.30, max_relative = 1e-12);
        assert_eq!(cooling_overhead_factor(-40.0, &cp), 0.05);
        assert_eq!(cooling_overhead_factor(100.0, &cp), 0.6);
    }

    #[test]
    fn calibration_hits_anchors() {
        let ladder = FrequencyLadder::default();
        let cubic = CubicPowerParams::default();
        let cal = calibrate_multicore(&cubic, &ladder, 4).unwrap();
        let p = cal.params;
        assert_relative_eq!(multicore_idle_power(1.0, &p).unwrap(), 100.0, max_relative = 1e-12);
        assert_relative_eq!(
            multicore_peak_power(1.0, 4.0, &p).unwrap(),
            211.44,
            max_relative = 1e-12
        );
        // cubic in q cannot be matched exactly by a quadratic in q
        assert!(cal.residual_w > 0.0 && cal.residual_w < 1.0, "{}", cal.residual_w);
    }

    #[test]
    fn multicore_params_reject_negative_dynamic_power() {
        let ladder = FrequencyLadder::default();
        let mut p = poly();
        p.p01 = -50.0;
        assert!(MulticorePowerParams::new(p, &ladder).is_err());
        assert!(MulticorePowerParams::new(poly(), &ladder).is_ok());
    }

    #[test]
    fn param_checks() {
        assert!(CubicPowerParams::default().check().is_ok());
        let bad = CubicPowerParams {
            p_base_w: 90.0,
            ..Default::default()
        };
        assert!(bad.check().is_err());
        let cool = CoolingParams {
            min_overhead: 0.3,
            ..Default::default()
        };
        assert!(cool.check().is_err());
    }
}
