//! Time-varying simulation inputs: electricity prices, outside temperatures,
//! VM requests and CPU-boundedness values. Everything is either read from
//! CSV or generated from an explicit RNG.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DataCenter, DcId, ModelError, VirtualMachine, VmId};

/// Smallest price the synthesizer emits, USD/kWh.
pub const PRICE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("{location}: {reason}")]
    Invalid { location: String, reason: String },
    #[error("{location}: base series does not cover step {step}")]
    Coverage { location: String, step: i64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    /// USD/kWh.
    ElectricityPrice,
    /// Degrees Celsius.
    Temperature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub location: DcId,
    pub kind: SeriesKind,
    /// `(step, value)`, steps strictly increasing.
    pub samples: Vec<(i64, f64)>,
}

impl TimeSeries {
    pub fn new(location: DcId, kind: SeriesKind, samples: Vec<(i64, f64)>) -> Result<Self, TraceError> {
        let series = Self {
            location,
            kind,
            samples,
        };
        series.check()?;
        Ok(series)
    }

    pub fn check(&self) -> Result<(), TraceError> {
        let invalid = |reason: String| TraceError::Invalid {
            location: self.location.0.clone(),
            reason,
        };
        for pair in self.samples.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(invalid(format!(
                    "steps not strictly increasing at step {}",
                    pair[1].0
                )));
            }
        }
        for &(step, value) in &self.samples {
            if !value.is_finite() {
                return Err(invalid(format!("non-finite value at step {step}")));
            }
            if self.kind == SeriesKind::ElectricityPrice && value <= 0.0 {
                return Err(invalid(format!("non-positive price {value} at step {step}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn value_at(&self, step: i64) -> Option<f64> {
        self.samples
            .binary_search_by_key(&step, |&(s, _)| s)
            .ok()
            .map(|i| self.samples[i].1)
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&(_, v)| v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|&(_, v)| v).collect()
    }
}

/// Series keyed by location.
pub type TraceSet = BTreeMap<DcId, TimeSeries>;

/// Read a `step,location,value` CSV. Rows may come in any order; they are
/// grouped per location and sorted by step.
pub fn load_timeseries(path: impl AsRef<Path>, kind: SeriesKind) -> Result<TraceSet, TraceError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_timeseries(file, kind)
}

pub fn parse_timeseries(reader: impl Read, kind: SeriesKind) -> Result<TraceSet, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| TraceError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["step", "location", "value"] {
        return Err(TraceError::Parse {
            line: 1,
            reason: "expected header `step,location,value`".into(),
        });
    }

    let mut grouped: BTreeMap<DcId, Vec<(i64, f64)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |reason: String| TraceError::Parse { line, reason };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", record.len())));
        }
        let step: i64 = record[0]
            .parse()
            .map_err(|_| parse_err(format!("bad step `{}`", &record[0])))?;
        if record[1].is_empty() {
            return Err(parse_err("empty location".into()));
        }
        let value: f64 = record[2]
            .parse()
            .map_err(|_| parse_err(format!("bad value `{}`", &record[2])))?;
        grouped
            .entry(DcId::new(&record[1]))
            .or_default()
            .push((step, value));
    }

    grouped
        .into_iter()
        .map(|(loc, mut samples)| {
            samples.sort_by_key(|&(s, _)| s);
            TimeSeries::new(loc.clone(), kind, samples).map(|s| (loc, s))
        })
        .collect()
}

/// Write series as `step,location,value`, sorted by (location, step).
pub fn write_timeseries(set: &TraceSet, mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "step,location,value")?;
    for series in set.values() {
        for &(step, value) in &series.samples {
            writeln!(out, "{step},{},{value}", series.location)?;
        }
    }
    Ok(())
}

fn shift_steps(dc: &DataCenter, step_h: f64) -> i64 {
    (dc.timezone_offset_h / step_h).round() as i64
}

/// Derive a location's price series from a reference series: delay by the
/// location's timezone offset and move the mean to the location's annual
/// mean. Values are floored at [`PRICE_FLOOR`].
pub fn synthesize_prices(
    base: &TimeSeries,
    dc: &DataCenter,
    steps: usize,
    step_h: f64,
) -> Result<TimeSeries, TraceError> {
    let shift = shift_steps(dc, step_h);
    let delta = dc.mean_price_usd_per_kwh - base.mean();
    let samples = (0..steps as i64)
        .map(|t| {
            base.value_at(t - shift)
                .map(|v| (t, (v + delta).max(PRICE_FLOOR)))
                .ok_or_else(|| TraceError::Coverage {
                    location: dc.id.0.clone(),
                    step: t - shift,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    TimeSeries::new(dc.id.clone(), SeriesKind::ElectricityPrice, samples)
}

/// Constant price at the location's annual mean.
pub fn fixed_prices(dc: &DataCenter, steps: usize) -> TimeSeries {
    TimeSeries {
        location: dc.id.clone(),
        kind: SeriesKind::ElectricityPrice,
        samples: (0..steps as i64)
            .map(|t| (t, dc.mean_price_usd_per_kwh))
            .collect(),
    }
}

/// Synthetic reference price series covering `[-lead, steps + lead)`:
/// diurnal sinusoid peaking in the afternoon plus AR(1) noise.
pub fn synthetic_base_prices(
    steps: usize,
    lead: usize,
    step_h: f64,
    mean: f64,
    rng: &mut impl Rng,
) -> TimeSeries {
    let amplitude = 0.35 * mean;
    let noise = Normal::new(0.0, 0.08 * mean).expect("finite sigma");
    let mut ar = 0.0;
    let start = -(lead as i64);
    let end = (steps + lead) as i64;
    let samples = (start..end)
        .map(|t| {
            let hour = (t as f64 * step_h).rem_euclid(24.0);
            ar = 0.7 * ar + noise.sample(rng);
            let v = mean + amplitude * (2.0 * PI * (hour - 9.0) / 24.0).sin() + ar;
            (t, v.max(PRICE_FLOOR))
        })
        .collect();
    TimeSeries {
        location: DcId::new("reference"),
        kind: SeriesKind::ElectricityPrice,
        samples,
    }
}

/// Synthetic outside temperature: the location's mean, a diurnal swing in
/// local time peaking mid-afternoon, and small noise.
pub fn synthetic_temperatures(
    dc: &DataCenter,
    steps: usize,
    step_h: f64,
    rng: &mut impl Rng,
) -> TimeSeries {
    let noise = Normal::new(0.0, 0.8).expect("finite sigma");
    let samples = (0..steps as i64)
        .map(|t| {
            let local = (t as f64 * step_h + dc.timezone_offset_h).rem_euclid(24.0);
            let v = dc.mean_temp_c + 5.0 * (2.0 * PI * (local - 9.0) / 24.0).sin() + noise.sample(rng);
            (t, v)
        })
        .collect();
    TimeSeries {
        location: dc.id.clone(),
        kind: SeriesKind::Temperature,
        samples,
    }
}

/// Where VM CPU-boundedness values come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSource {
    /// Exponential with the given rate, resampled until the draw is <= 1.
    ExponentialFit { rate: f64 },
    Fixed { beta: f64 },
    /// Empirical pool, drawn uniformly; built by [`betas_from_usage`].
    FromFile { path: String },
}

impl Default for BetaSource {
    fn default() -> Self {
        BetaSource::ExponentialFit { rate: 1.0 / 0.18 }
    }
}

/// A resolved [`BetaSource`] ready for sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum BetaSampler {
    Exponential(f64),
    Fixed(f64),
    Empirical(Vec<f64>),
}

impl BetaSampler {
    pub fn resolve(source: &BetaSource) -> Result<Self, TraceError> {
        let invalid = |reason: &str| TraceError::Invalid {
            location: "beta_source".into(),
            reason: reason.to_owned(),
        };
        match source {
            BetaSource::ExponentialFit { rate } if *rate > 0.0 => Ok(Self::Exponential(*rate)),
            BetaSource::ExponentialFit { .. } => Err(invalid("rate must be positive")),
            BetaSource::Fixed { beta } if (0.0..=1.0).contains(beta) => Ok(Self::Fixed(*beta)),
            BetaSource::Fixed { .. } => Err(invalid("fixed beta must lie in [0, 1]")),
            BetaSource::FromFile { path } => {
                let pool = betas_from_usage(path)?;
                if pool.is_empty() {
                    return Err(invalid("usage trace contains no VMs"));
                }
                Ok(Self::Empirical(pool))
            }
        }
    }
}

/// Draw one beta in [0, 1].
pub fn sample_beta(sampler: &BetaSampler, rng: &mut impl Rng) -> f64 {
    match sampler {
        BetaSampler::Fixed(beta) => *beta,
        BetaSampler::Exponential(rate) => {
            let exp = Exp::new(*rate).expect("positive rate");
            loop {
                let x: f64 = exp.sample(rng);
                if x <= 1.0 {
                    return x;
                }
            }
        }
        BetaSampler::Empirical(pool) => pool[rng.random_range(0..pool.len())],
    }
}

/// Per-VM beta as the mean CPU usage fraction of its usage trace. The file
/// has header `trace_id,cpu_usage` with usage in [0, 1].
pub fn betas_from_usage(path: impl AsRef<Path>) -> Result<Vec<f64>, TraceError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let usage: f64 = record
            .get(1)
            .and_then(|v| v.parse().ok())
            .filter(|u| (0.0..=1.0).contains(u))
            .ok_or_else(|| TraceError::Parse {
                line,
                reason: "cpu_usage must be a number in [0, 1]".into(),
            })?;
        let entry = sums.entry(record[0].to_owned()).or_default();
        entry.0 += usage;
        entry.1 += 1;
    }
    Ok(sums.into_values().map(|(s, n)| s / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub vm_count: usize,
    pub cores_range: (u32, u32),
    pub ram_range_gb: (u32, u32),
    pub sim_steps: usize,
    pub beta_source: BetaSource,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            vm_count: 200,
            cores_range: (1, 1),
            ram_range_gb: (8, 32),
            sim_steps: 168,
            beta_source: BetaSource::default(),
        }
    }
}

impl WorkloadSpec {
    pub fn check(&self) -> Result<(), TraceError> {
        let invalid = |reason: &str| TraceError::Invalid {
            location: "workload".into(),
            reason: reason.to_owned(),
        };
        if self.cores_range.0 == 0 || self.cores_range.0 > self.cores_range.1 {
            return Err(invalid("cores_range must be a non-empty range of positive counts"));
        }
        if self.ram_range_gb.0 == 0 || self.ram_range_gb.0 > self.ram_range_gb.1 {
            return Err(invalid("ram_range_gb must be a non-empty range of positive sizes"));
        }
        if self.sim_steps == 0 {
            return Err(invalid("sim_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Generate VM requests. Boot steps are uniform over the horizon; each
/// delete step is uniform over the remaining steps after boot (a delete at
/// `sim_steps` means the VM lives until the end).
pub fn generate_workload(
    spec: &WorkloadSpec,
    sampler: &BetaSampler,
    rng: &mut impl Rng,
) -> Result<Vec<VirtualMachine>, TraceError> {
    spec.check()?;
    let width = spec.vm_count.to_string().len().max(4);
    (0..spec.vm_count)
        .map(|i| {
            let boot_step = rng.random_range(0..spec.sim_steps);
            let delete_step = rng.random_range(boot_step + 1..=spec.sim_steps);
            let vm = VirtualMachine {
                id: VmId(format!("vm{i:0width$}")),
                cores: rng.random_range(spec.cores_range.0..=spec.cores_range.1),
                ram_gb: rng.random_range(spec.ram_range_gb.0..=spec.ram_range_gb.1) as f64,
                beta: sample_beta(sampler, rng),
                boot_step,
                delete_step,
            };
            vm.check()?;
            Ok(vm)
        })
        .collect()
}

/// Read a `vm_id,cores,ram_gb,beta,boot_step,delete_step` workload file.
pub fn load_workload(path: impl AsRef<Path>) -> Result<Vec<VirtualMachine>, TraceError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut vms = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<&str, TraceError> {
            record.get(i).ok_or_else(|| TraceError::Parse {
                line,
                reason: format!("missing {name}"),
            })
        };
        let num = |i: usize, name: &str| -> Result<f64, TraceError> {
            field(i, name)?.parse::<f64>().map_err(|_| TraceError::Parse {
                line,
                reason: format!("bad {name}"),
            })
        };
        let vm = VirtualMachine {
            id: VmId::new(field(0, "vm_id")?),
            cores: num(1, "cores")? as u32,
            ram_gb: num(2, "ram_gb")?,
            beta: num(3, "beta")?,
            boot_step: num(4, "boot_step")? as usize,
            delete_step: num(5, "delete_step")? as usize,
        };
        vm.check().map_err(|e| TraceError::Parse {
            line,
            reason: e.to_string(),
        })?;
        vms.push(vm);
    }
    Ok(vms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dc(offset: f64, mean: f64) -> DataCenter {
        DataCenter {
            id: "x".into(),
            name: "x".into(),
            timezone_offset_h: offset,
            mean_price_usd_per_kwh: mean,
            mean_temp_c: 15.0,
        }
    }

    #[test]
    fn parse_well_formed() {
        let csv = "step,location,value\n0,a,0.05\n1,a,0.06\n2,a,0.07\n";
        let set = parse_timeseries(csv.as_bytes(), SeriesKind::ElectricityPrice).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[&DcId::new("a")].len(), 3);
        assert_eq!(set[&DcId::new("a")].value_at(1), Some(0.06));
    }

    #[test]
    fn parse_missing_value_names_line() {
        let csv = "step,location,value\n0,a\n";
        let err = parse_timeseries(csv.as_bytes(), SeriesKind::ElectricityPrice).unwrap_err();
        match err {
            TraceError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicates_and_bad_prices() {
        let dup = "step,location,value\n0,a,0.05\n0,a,0.06\n";
        assert!(matches!(
            parse_timeseries(dup.as_bytes(), SeriesKind::ElectricityPrice),
            Err(TraceError::Invalid { .. })
        ));
        let neg = "step,location,value\n0,a,-0.05\n";
        assert!(matches!(
            parse_timeseries(neg.as_bytes(), SeriesKind::ElectricityPrice),
            Err(TraceError::Invalid { .. })
        ));
        // negative temperatures are fine
        assert!(parse_timeseries(neg.as_bytes(), SeriesKind::Temperature).is_ok());
    }

    #[test]
    fn write_then_parse() {
        let mut set = TraceSet::new();
        set.insert(
            "a".into(),
            TimeSeries::new("a".into(), SeriesKind::Temperature, vec![(0, -3.5), (1, 2.25)]).unwrap(),
        );
        let mut buf = Vec::new();
        write_timeseries(&set, &mut buf).unwrap();
        assert_eq!(parse_timeseries(&buf[..], SeriesKind::Temperature).unwrap(), set);
    }

    #[test]
    fn synthesize_identity() {
        let base = TimeSeries::new(
            "ref".into(),
            SeriesKind::ElectricityPrice,
            (0..5).map(|t| (t, 0.04 + 0.01 * t as f64)).collect(),
        )
        .unwrap();
        let out = synthesize_prices(&base, &dc(0.0, base.mean()), 5, 1.0).unwrap();
        for (a, b) in out.values().iter().zip(base.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesize_constant_mean_shift() {
        let base = TimeSeries::new(
            "ref".into(),
            SeriesKind::ElectricityPrice,
            (0..10).map(|t| (t, 0.05)).collect(),
        )
        .unwrap();
        let out = synthesize_prices(&base, &dc(0.0, 0.07), 10, 1.0).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.07).abs() < 1e-12));
    }

    #[test]
    fn synthesize_delays_ramp() {
        // ramp over steps -2..5, mean 0.045; target mean 0.055 adds 0.01
        let base = TimeSeries::new(
            "ref".into(),
            SeriesKind::ElectricityPrice,
            (-2..5).map(|t| (t, 0.035 + 0.01 * t as f64)).collect(),
        )
        .unwrap();
        let out = synthesize_prices(&base, &dc(2.0, 0.055), 5, 1.0).unwrap();
        let expected = [0.025, 0.035, 0.045, 0.055, 0.065];
        for (got, want) in out.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(synthesize_prices(&base, &dc(3.0, 0.045), 5, 1.0).is_err());
    }

    #[test]
    fn fixed_prices_are_constant() {
        let s = fixed_prices(&dc(0.0, 0.06), 168);
        assert_eq!(s.len(), 168);
        assert!(s.values().iter().all(|&v| v == 0.06));
    }

    #[test]
    fn fixed_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = BetaSampler::resolve(&BetaSource::Fixed { beta: 0.2 }).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_beta(&s, &mut rng), 0.2);
        }
        assert!(BetaSampler::resolve(&BetaSource::Fixed { beta: 1.5 }).is_err());
        assert!(BetaSampler::resolve(&BetaSource::ExponentialFit { rate: 0.0 }).is_err());
    }

    #[test]
    fn workload_determinism_and_validity() {
        let spec = WorkloadSpec::default();
        let s = BetaSampler::resolve(&spec.beta_source).unwrap();
        let a = generate_workload(&spec, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_workload(&spec, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        for vm in &a {
            assert!(vm.check().is_ok());
            assert_eq!(vm.cores, 1);
            assert!((8.0..=32.0).contains(&vm.ram_gb));
            assert!(vm.delete_step <= 168);
        }
        let empty = WorkloadSpec {
            vm_count: 0,
            ..spec
        };
        assert!(generate_workload(&empty, &s, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn workload_and_usage_files() {
        let dir = tempfile::tempdir().unwrap();
        let wl = dir.path().join("wl.csv");
        std::fs::write(
            &wl,
            "vm_id,cores,ram_gb,beta,boot_step,delete_step\na,1,8,0.1,0,5\nb,2,16,0.9,3,4\n",
        )
        .unwrap();
        let vms = load_workload(&wl).unwrap();
        assert_eq!(vms.len(), 2);
        assert_eq!(vms[1].cores, 2);

        std::fs::write(&wl, "vm_id,cores,ram_gb,beta,boot_step,delete_step\na,1,8,0.1,5,5\n").unwrap();
        assert!(matches!(load_workload(&wl), Err(TraceError::Parse { line: 2, .. })));

        let usage = dir.path().join("usage.csv");
        std::fs::write(&usage, "trace_id,cpu_usage\nx,0.1\nx,0.3\ny,0.5\n").unwrap();
        let pool = betas_from_usage(&usage).unwrap();
        assert_eq!(pool.len(), 2);
        assert!((pool[0] - 0.2).abs() < 1e-12);
        assert_eq!(pool[1], 0.5);
    }
}
