//! Host-CPU latency measurement with per-operator attribution.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nets::{Mode, Model};
use crate::tensor::{RealTensor, Shape4};

#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub operator: &'static str,
    pub layer: String,
    pub duration: Duration,
}

/// Collects `(operator, layer, duration)` records during forward passes.
#[derive(Clone, Debug, Default)]
pub struct Profiler {
    pub records: Vec<OpRecord>,
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, operator: &'static str, layer: &str, duration: Duration) {
        self.records.push(OpRecord {
            operator,
            layer: layer.to_string(),
            duration,
        });
    }

    pub fn total(&self) -> Duration {
        self.records.iter().map(|r| r.duration).sum()
    }
}

/// Summary of one series of wall-clock samples, in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingStats {
    pub mean_us: f64,
    pub median_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no timing samples".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // Clamp guards against the mean drifting outside [min, max] by rounding.
        let mean = (sorted.iter().sum::<f64>() / n as f64).clamp(sorted[0], sorted[n - 1]);
        Ok(TimingStats {
            mean_us: mean,
            median_us: median,
            min_us: sorted[0],
            max_us: sorted[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OperatorTiming {
    pub operator: String,
    pub layer: String,
    #[serde(flatten)]
    pub stats: TimingStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    /// Per `(operator, layer)` timings in first-seen order; the last row is
    /// `other`, the end-to-end time not attributed to any operator.
    pub operators: Vec<OperatorTiming>,
    pub end_to_end: TimingStats,
    pub runs: usize,
    pub warmup: usize,
    /// Recorded for the report; the kernels themselves run on one thread.
    pub threads: usize,
    pub input: [usize; 4],
}

impl BenchReport {
    /// Sum of the per-operator means, excluding `other`.
    pub fn attributed_mean_us(&self) -> f64 {
        self.operators
            .iter()
            .filter(|o| o.operator != "other")
            .map(|o| o.stats.mean_us)
            .sum()
    }

    /// Sum of the mean times of all rows with the given operator name.
    pub fn operator_mean_us(&self, operator: &str) -> f64 {
        self.operators
            .iter()
            .filter(|o| o.operator == operator)
            .map(|o| o.stats.mean_us)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "operator,layer,mean_us,min_us,max_us")?;
        for o in &self.operators {
            writeln!(
                w,
                "{},{},{},{},{}",
                o.operator, o.layer, o.stats.mean_us, o.stats.min_us, o.stats.max_us
            )?;
        }
        writeln!(
            w,
            "total,model,{},{},{}",
            self.end_to_end.mean_us, self.end_to_end.min_us, self.end_to_end.max_us
        )?;
        Ok(())
    }

    pub fn save(&self, csv: &Path, json: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv)?))?;
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Times `runs` inference passes of `model` on a fixed pseudo-random batch
/// of shape `input`, after `warmup` untimed passes.
pub fn bench_model(model: &Model, input: Shape4, runs: usize, warmup: usize, threads: usize) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = RealTensor::uniform(input, -1.0, 1.0, &mut rng);
    for _ in 0..warmup {
        model.forward(&x, Mode::Infer)?;
    }
    let mut order: Vec<(&'static str, String)> = Vec::new();
    let mut samples: BTreeMap<(&'static str, String), Vec<f64>> = BTreeMap::new();
    let mut totals = Vec::with_capacity(runs);
    let mut others = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut prof = Profiler::new();
        let start = Instant::now();
        let pass = model.pass(&x, Mode::Infer, None, Some(&mut prof))?;
        let total = start.elapsed();
        drop(pass);
        let mut per_run: BTreeMap<(&'static str, String), f64> = BTreeMap::new();
        for r in &prof.records {
            let key = (r.operator, r.layer.clone());
            if !order.contains(&key) {
                order.push(key.clone());
            }
            *per_run.entry(key).or_default() += r.duration.as_secs_f64() * 1e6;
        }
        for key in &order {
            samples
                .entry(key.clone())
                .or_default()
                .push(per_run.get(key).copied().unwrap_or(0.0));
        }
        let total_us = total.as_secs_f64() * 1e6;
        totals.push(total_us);
        others.push((total_us - prof.total().as_secs_f64() * 1e6).max(0.0));
    }
    let mut operators = order
        .iter()
        .map(|key| {
            Ok(OperatorTiming {
                operator: key.0.to_string(),
                layer: key.1.clone(),
                stats: TimingStats::from_samples(&samples[key])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    operators.push(OperatorTiming {
        operator: "other".into(),
        layer: String::new(),
        stats: TimingStats::from_samples(&others)?,
    });
    Ok(BenchReport {
        operators,
        end_to_end: TimingStats::from_samples(&totals)?,
        runs,
        warmup,
        threads,
        input: input.dims(),
    })
}
