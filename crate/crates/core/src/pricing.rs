//! VM pricing under performance-based and perceived-performance schemes.
//!
//! Prices are hourly rates; the engine multiplies them by step duration.

use serde::{Deserialize, Serialize};

use crate::model::{FrequencyLadder, VirtualMachine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PricingScheme {
    /// Billed on the host's operating frequency.
    PerformanceBased,
    /// Billed on the frequency the VM effectively experiences.
    PerceivedPerformance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingParams {
    pub c_base_usd_h: f64,
    pub c_cpu_usd_h: f64,
    pub c_ram_usd_h: f64,
    pub ram_base_gb: f64,
    pub scheme: PricingScheme,
}

impl Default for PricingParams {
    fn default() -> Self {
        Self {
            c_base_usd_h: 0.027,
            c_cpu_usd_h: 0.018,
            c_ram_usd_h: 0.025,
            ram_base_gb: 1.0,
            scheme: PricingScheme::PerceivedPerformance,
        }
    }
}

impl PricingParams {
    pub fn check(&self) -> Result<(), String> {
        if self.c_base_usd_h < 0.0 || self.c_cpu_usd_h < 0.0 || self.c_ram_usd_h < 0.0 {
            return Err("pricing rates must be non-negative".into());
        }
        if !(self.ram_base_gb > 0.0) {
            return Err("ram_base_gb must be positive".into());
        }
        Ok(())
    }
}

/// Frequency experienced by a VM with CPU-boundedness `beta` on a host
/// running at `f`: fully CPU-bound VMs see `f`, I/O-bound ones see `f_max`.
pub fn perceived_frequency(beta: f64, f: f64, ladder: &FrequencyLadder) -> f64 {
    beta * f + (1.0 - beta) * ladder.f_max
}

/// Hourly price of `vm` on a host running at `pm_freq`. Every core of the
/// VM shares the VM's beta, so the CPU term is summed over its cores.
pub fn vm_price(vm: &VirtualMachine, pm_freq: f64, ladder: &FrequencyLadder, p: &PricingParams) -> f64 {
    let f_cpu = match p.scheme {
        PricingScheme::PerformanceBased => pm_freq,
        PricingScheme::PerceivedPerformance => perceived_frequency(vm.beta, pm_freq, ladder),
    };
    let per_core = (f_cpu - ladder.f_base) / ladder.f_base;
    p.c_base_usd_h + p.c_cpu_usd_h * per_core * vm.cores as f64 + p.c_ram_usd_h * (vm.ram_gb / p.ram_base_gb)
}

/// Hourly revenue of every VM on one host.
pub fn pm_revenue(
    pm_freq: f64,
    hosted: &[&VirtualMachine],
    ladder: &FrequencyLadder,
    p: &PricingParams,
) -> f64 {
    hosted.iter().map(|vm| vm_price(vm, pm_freq, ladder, p)).sum()
}
