//! Selection-pattern statistics from selection logs: how often the chosen
//! pair is the lowest-IoU candidate, IoU distributions of chosen versus all
//! candidate pairs, and loss curves, bucketed by epoch.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, HvpError, Result};
use crate::trainer::SelectionLogRecord;

pub const HISTOGRAM_BINS: usize = 20;

/// Largest tolerated share of unparseable log lines.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub epoch_lo: u64,
    pub epoch_hi: u64,
    pub records: u64,
    pub frac_lowest_iou_selected: f64,
    pub mean_iou_selected: f64,
    /// Mean IoU over every candidate pair, the random-choice reference.
    pub mean_iou_random: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStats {
    pub buckets: Vec<BucketStats>,
    pub iou_histogram_selected: [f64; HISTOGRAM_BINS],
    pub iou_histogram_random: [f64; HISTOGRAM_BINS],
    pub records: u64,
    pub skipped_lines: u64,
}

impl SelectionStats {
    /// Record-weighted lowest-IoU fraction over buckets starting at or after
    /// `from_epoch`.
    pub fn frac_lowest_iou_from(&self, from_epoch: u64) -> f64 {
        self.weighted(from_epoch, |b| b.frac_lowest_iou_selected)
    }

    pub fn mean_iou_selected_from(&self, from_epoch: u64) -> f64 {
        self.weighted(from_epoch, |b| b.mean_iou_selected)
    }

    pub fn mean_iou_random_from(&self, from_epoch: u64) -> f64 {
        self.weighted(from_epoch, |b| b.mean_iou_random)
    }

    fn weighted(&self, from_epoch: u64, f: impl Fn(&BucketStats) -> f64) -> f64 {
        let (mut num, mut den) = (0.0, 0u64);
        for b in self.buckets.iter().filter(|b| b.epoch_lo >= from_epoch) {
            num += f(b) * b.records as f64;
            den += b.records;
        }
        if den == 0 {
            f64::NAN
        } else {
            num / den as f64
        }
    }
}

#[derive(Default, Clone)]
struct Accum {
    records: u64,
    lowest: u64,
    iou_selected: f64,
    iou_all: f64,
    candidates: u64,
    loss: f64,
}

fn bin(iou: f64) -> usize {
    ((iou * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

fn well_formed(r: &SelectionLogRecord) -> bool {
    r.chosen < r.candidates.len()
        && r.candidates
            .iter()
            .all(|c| c.iou.is_finite() && (0.0..=1.0).contains(&c.iou) && c.loss.is_finite())
}

/// Single streaming pass over JSONL selection records, grouped into buckets
/// of `bucket_epochs` epochs. Unparseable lines are skipped and counted; more
/// than 1% skipped is an error.
pub fn compute_stats<R: BufRead>(readers: impl IntoIterator<Item = R>, bucket_epochs: u64) -> Result<SelectionStats> {
    ensure!(bucket_epochs >= 1, "bucket size must be at least one epoch");
    let mut buckets: Vec<Accum> = Vec::new();
    let mut hist_sel = [0u64; HISTOGRAM_BINS];
    let mut hist_all = [0u64; HISTOGRAM_BINS];
    let (mut lines, mut skipped) = (0u64, 0u64);
    for reader in readers {
        for line in reader.lines() {
            let line = line.map_err(|e| HvpError::format(format!("reading selection log: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            lines += 1;
            let rec = match serde_json::from_str::<SelectionLogRecord>(&line) {
                Ok(r) if well_formed(&r) => r,
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            let b = (rec.epoch / bucket_epochs) as usize;
            if buckets.len() <= b {
                buckets.resize(b + 1, Accum::default());
            }
            let acc = &mut buckets[b];
            let chosen = rec.candidates[rec.chosen];
            let min_iou = rec.candidates.iter().map(|c| c.iou).fold(f64::INFINITY, f64::min);
            acc.records += 1;
            if chosen.iou <= min_iou {
                acc.lowest += 1;
            }
            acc.iou_selected += chosen.iou;
            acc.loss += rec.chosen_loss as f64;
            hist_sel[bin(chosen.iou)] += 1;
            for c in &rec.candidates {
                acc.iou_all += c.iou;
                acc.candidates += 1;
                hist_all[bin(c.iou)] += 1;
            }
        }
    }
    ensure!(lines > 0, "selection log is empty");
    if skipped as f64 > MAX_SKIPPED_FRACTION * lines as f64 {
        return Err(HvpError::format(format!(
            "{skipped} of {lines} selection log lines are malformed"
        )));
    }
    let records: u64 = buckets.iter().map(|a| a.records).sum();
    ensure!(records > 0, "selection log has no usable records");
    let normalize = |h: [u64; HISTOGRAM_BINS]| {
        let total: u64 = h.iter().sum();
        h.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
    };
    let buckets = buckets
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.records > 0)
        .map(|(i, a)| BucketStats {
            epoch_lo: i as u64 * bucket_epochs,
            epoch_hi: (i as u64 + 1) * bucket_epochs - 1,
            records: a.records,
            frac_lowest_iou_selected: a.lowest as f64 / a.records as f64,
            mean_iou_selected: a.iou_selected / a.records as f64,
            mean_iou_random: a.iou_all / a.candidates as f64,
            mean_loss: a.loss / a.records as f64,
        })
        .collect();
    Ok(SelectionStats {
        buckets,
        iou_histogram_selected: normalize(hist_sel),
        iou_histogram_random: normalize(hist_all),
        records,
        skipped_lines: skipped,
    })
}

pub fn compute_stats_from_paths<P: AsRef<Path>>(paths: &[P], bucket_epochs: u64) -> Result<SelectionStats> {
    let readers = paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            File::open(p).map(BufReader::new).map_err(|e| HvpError::io(p, e))
        })
        .collect::<Result<Vec<_>>>()?;
    compute_stats(readers, bucket_epochs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub epoch_lo: u64,
    pub epoch_hi: u64,
    pub delta_mean_loss: f64,
    pub delta_mean_iou: f64,
    pub delta_frac_lowest_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Share of buckets where the first run's loss exceeds the baseline's.
    pub loss_elevated: f64,
}

/// Per-bucket differences `hvp − baseline`.
pub fn compare_runs(hvp: &SelectionStats, baseline: &SelectionStats) -> Result<Comparison> {
    let key = |s: &SelectionStats| s.buckets.iter().map(|b| (b.epoch_lo, b.epoch_hi)).collect::<Vec<_>>();
    ensure!(
        key(hvp) == key(baseline),
        "runs cover different epoch buckets: {:?} vs {:?}",
        key(hvp),
        key(baseline)
    );
    ensure!(!hvp.buckets.is_empty(), "no buckets to compare");
    let rows: Vec<ComparisonRow> = hvp
        .buckets
        .iter()
        .zip(&baseline.buckets)
        .map(|(a, b)| ComparisonRow {
            epoch_lo: a.epoch_lo,
            epoch_hi: a.epoch_hi,
            delta_mean_loss: a.mean_loss - b.mean_loss,
            delta_mean_iou: a.mean_iou_selected - b.mean_iou_selected,
            delta_frac_lowest_iou: a.frac_lowest_iou_selected - b.frac_lowest_iou_selected,
        })
        .collect();
    let elevated = hvp
        .buckets
        .iter()
        .zip(&baseline.buckets)
        .filter(|(a, b)| a.mean_loss > b.mean_loss)
        .count();
    Ok(Comparison {
        loss_elevated: elevated as f64 / rows.len() as f64,
        rows,
    })
}

pub fn write_stats_csv(path: impl AsRef<Path>, stats: &SelectionStats) -> Result<()> {
    let path = path.as_ref();
    let mut wr = csv::Writer::from_path(path)?;
    for b in &stats.buckets {
        wr.serialize(b)?;
    }
    wr.flush().map_err(|e| HvpError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mass_selected: f64,
    pub mass_random: f64,
}

pub fn histogram_rows(stats: &SelectionStats) -> Vec<HistogramRow> {
    (0..HISTOGRAM_BINS)
        .map(|i| HistogramRow {
            bin_lo: i as f64 / HISTOGRAM_BINS as f64,
            bin_hi: (i + 1) as f64 / HISTOGRAM_BINS as f64,
            mass_selected: stats.iou_histogram_selected[i],
            mass_random: stats.iou_histogram_random[i],
        })
        .collect()
}

pub fn write_histogram_csv(path: impl AsRef<Path>, stats: &SelectionStats) -> Result<()> {
    let path = path.as_ref();
    let mut wr = csv::Writer::from_path(path)?;
    for r in histogram_rows(stats) {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| HvpError::io(path, e))
}

pub fn write_comparison_csv(path: impl AsRef<Path>, cmp: &Comparison) -> Result<()> {
    let path = path.as_ref();
    let mut wr = csv::Writer::from_path(path)?;
    for r in &cmp.rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| HvpError::io(path, e))
}
