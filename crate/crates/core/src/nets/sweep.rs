//! Trains every LAB placement over the four stages of a spec.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{Model, ModelSpec};
use crate::bench::bench_model;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::train::{evaluate, train, Dataset, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// Bit `i` set means stage `i + 1` uses LAB.
    pub mask: u32,
    pub top1: Real,
    pub top5: Real,
    pub param_count: usize,
    pub param_bytes: usize,
    pub latency_us: f64,
}

impl SweepRow {
    pub fn lab_stages(&self) -> u32 {
        self.mask.count_ones()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepTable {
    /// Sorted by top-1 descending, ties by mask.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, mask: u32) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }

    /// `timing = false` leaves out the latency column, giving output that is
    /// reproducible byte for byte.
    pub fn write_csv<W: Write>(&self, mut w: W, timing: bool) -> Result<()> {
        write!(w, "mask,stage1,stage2,stage3,stage4,top1,top5,param_count,param_bytes")?;
        writeln!(w, "{}", if timing { ",latency_us" } else { "" })?;
        for r in &self.rows {
            write!(w, "{}", r.mask)?;
            for s in 0..4 {
                write!(w, ",{}", if r.mask & (1 << s) != 0 { "lab" } else { "sign" })?;
            }
            write!(w, ",{},{},{},{}", r.top1 as f32, r.top5 as f32, r.param_count, r.param_bytes)?;
            if timing {
                write!(w, ",{}", r.latency_us)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, timing: bool) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?), timing)
    }
}

/// Trains the 16 LAB placements of a four-stage `base` under the same seed
/// and schedule, evaluating on `test` and timing `bench_runs` single-image
/// inference passes of each.
pub fn placement_sweep(
    base: &ModelSpec,
    train_set: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    bench_runs: usize,
) -> Result<SweepTable> {
    if base.blocks.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "placement sweep needs a 4-stage spec, got {} stages",
            base.blocks.len()
        )));
    }
    let mut rows = Vec::with_capacity(16);
    for mask in 0..16u32 {
        let spec = base.clone().with_lab_mask(mask);
        let mut model = Model::new(spec, cfg.seed)?;
        train(&mut model, train_set, None, cfg)?;
        let acc = evaluate(&model, test, 100)?;
        let latency_us = if bench_runs > 0 {
            bench_model(&model, model.spec().input, bench_runs, 1, 1)?.end_to_end.mean_us
        } else {
            0.0
        };
        rows.push(SweepRow {
            mask,
            top1: acc.top1,
            top5: acc.top5,
            param_count: model.param_count(),
            param_bytes: model.param_bytes(),
            latency_us,
        });
    }
    rows.sort_by(|a, b| b.top1.total_cmp(&a.top1).then(a.mask.cmp(&b.mask)));
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape_and_ordering() {
        let rows = (0..16u32)
            .map(|mask| SweepRow {
                mask,
                top1: (mask % 3) as Real / 10.0,
                top5: 1.0,
                param_count: 100 + mask as usize,
                param_bytes: 10,
                latency_us: 1.5,
            })
            .collect::<Vec<_>>();
        let mut t = SweepTable { rows };
        t.rows.sort_by(|a, b| b.top1.total_cmp(&a.top1).then(a.mask.cmp(&b.mask)));
        let mut buf = Vec::new();
        t.write_csv(&mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.lines().nth(1).unwrap().starts_with("2,sign,lab,sign,sign,0.2,"));
        assert!(!text.contains("latency"));
        assert_eq!(t.row(5).unwrap().lab_stages(), 2);
    }
}
