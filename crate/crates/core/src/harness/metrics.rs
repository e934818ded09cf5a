//! Metrics records and CSV emission.
//!
//! Column orders are stable and documented in the README; training is
//! deterministic, so every column except wall_time_s reproduces bitwise
//! across identical runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::graph::LayerName;

pub const METRICS_HEADER: &str =
    "run_id,regime,stage,step,lr,train_loss,train_acc,test_acc,gap,wall_time_s";

/// One row of the per-run metrics stream.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub run_id: String,
    pub regime: &'static str,
    pub stage: u32,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Exactly `train_acc - test_acc`.
    pub gap: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.run_id,
            self.regime,
            self.stage,
            self.step,
            self.lr,
            self.train_loss,
            self.train_acc,
            self.test_acc,
            self.gap,
            self.wall_time_s
        )
    }
}

/// Append-only CSV sink for one run.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Full evaluation at the final step of one learning-rate rung.
#[derive(Debug, Clone, Copy)]
pub struct RungFinal {
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl RungFinal {
    pub fn gap(&self) -> f64 {
        self.train_acc - self.test_acc
    }
}

/// Full evaluation of an optimized stage, before the next growth.
#[derive(Debug, Clone, Copy)]
pub struct StageFinal {
    pub stage: u32,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Loss continuity measurements around one growth boundary.
#[derive(Debug, Clone, Copy)]
pub struct GrowthBoundary {
    /// Stage created by the growth.
    pub stage: u32,
    /// Batch loss at the last pre-growth step.
    pub pre_loss: f64,
    /// Batch loss at the first post-growth step.
    pub post_loss: f64,
    /// Standard deviation of recent pre-growth batch losses.
    pub batch_loss_std: f64,
    pub preservation_max_diff: f64,
}

pub fn write_rung_finals(path: &Path, rows: &[RungFinal]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "lr,train_loss,train_acc,test_acc,gap")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.lr,
            r.train_loss,
            r.train_acc,
            r.test_acc,
            r.gap()
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_stage_finals(path: &Path, rows: &[StageFinal]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "stage,train_loss,train_acc,test_acc")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.stage, r.train_loss, r.train_acc, r.test_acc
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_growth_boundaries(path: &Path, rows: &[GrowthBoundary]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "stage,pre_loss,post_loss,batch_loss_std,preservation_max_diff"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:e}",
            r.stage, r.pre_loss, r.post_loss, r.batch_loss_std, r.preservation_max_diff
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Per-layer gamma summary and per-channel dump.
#[derive(Debug, Clone)]
pub struct GammaRow {
    pub layer: LayerName,
    pub gammas: Vec<f64>,
    pub mean_abs: f64,
}

#[derive(Debug, Clone)]
pub struct GammaReport {
    pub rows: Vec<GammaRow>,
    /// Comparison groups (columns of one table row), e.g.
    /// (0_6, 1_12, 2_24).
    pub groups: Vec<Vec<LayerName>>,
}

pub fn write_gamma_csvs(report: &GammaReport, summary_path: &Path, channels_path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(summary_path)?);
    writeln!(out, "layer,mean_abs_gamma")?;
    for row in &report.rows {
        writeln!(out, "{},{:.6}", row.layer, row.mean_abs)?;
    }
    out.flush()?;
    let mut out = BufWriter::new(File::create(channels_path)?);
    writeln!(out, "layer,channel,gamma")?;
    for row in &report.rows {
        for (ch, g) in row.gammas.iter().enumerate() {
            writeln!(out, "{},{},{:.6}", row.layer, ch, g)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Side-by-side accuracy table: one row per learning-rate rung.
pub fn write_comparison(path: &Path, s2c: &[RungFinal], e2e: &[RungFinal]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "lr,e2e_train,e2e_test,e2e_gap,s2c_train,s2c_test,s2c_gap"
    )?;
    for s in s2c {
        if let Some(e) = e2e.iter().find(|e| e.lr == s.lr) {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.lr,
                e.train_acc,
                e.test_acc,
                e.gap(),
                s.train_acc,
                s.test_acc,
                s.gap()
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parse a rung_finals.csv back (used to combine runs across processes).
pub fn read_rung_finals(path: &Path) -> Result<Vec<RungFinal>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let mut next = || -> Result<f64> {
            parts
                .next()
                .ok_or_else(|| crate::error::Error::data(format!("short rung row {line:?}")))?
                .parse()
                .map_err(|e| crate::error::Error::data(format!("bad rung value: {e}")))
        };
        let lr = next()?;
        let train_loss = next()?;
        let train_acc = next()?;
        let test_acc = next()?;
        rows.push(RungFinal {
            lr,
            train_loss,
            train_acc,
            test_acc,
        });
    }
    Ok(rows)
}
