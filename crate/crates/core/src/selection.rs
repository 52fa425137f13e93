//! Hard-pair selection over the pair loss matrix, the n-step gate, and the
//! IoU rejection-sampling baseline policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{iou, sample_appearance, sample_view_params, AugConfig, ViewParams};
use crate::error::{ensure, Result};
use crate::objectives::PairLossMatrix;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Highest-loss pair.
    Adversarial,
    /// Lowest-loss pair.
    Cooperative,
    /// Uniformly random pair.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    /// Chosen column of the loss matrix per sample.
    pub chosen: Vec<usize>,
    pub chosen_loss: Vec<f32>,
    pub matrix: PairLossMatrix,
}

impl SelectionResult {
    /// Chosen `(k, l)` view indices of a sample.
    pub fn pair(&self, sample: usize) -> (usize, usize) {
        self.matrix.pairs()[self.chosen[sample]]
    }
}

fn extreme(row: &[f32], better: impl Fn(f32, f32) -> bool) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if better(v, row[best]) {
            best = j;
        }
    }
    best
}

/// Pick one pair per sample. Ties go to the lowest pair index. Random mode
/// draws from a stream keyed by `(seed, step, sample)`.
pub fn select_pairs(matrix: PairLossMatrix, mode: SelectionMode, seed: u64, step: u64) -> Result<SelectionResult> {
    ensure!(
        matrix.losses().iter().all(|v| v.is_finite()),
        "cannot select from a loss matrix with non-finite entries"
    );
    let p = matrix.num_pairs();
    let chosen: Vec<usize> = (0..matrix.batch())
        .map(|i| {
            let row = matrix.row(i);
            match mode {
                SelectionMode::Adversarial => extreme(row, |a, b| a > b),
                SelectionMode::Cooperative => extreme(row, |a, b| a < b),
                SelectionMode::Random => {
                    rng::stream(seed, &[tag::RANDOM_SELECT, step, i as u64]).random_range(0..p)
                }
            }
        })
        .collect();
    let chosen_loss = chosen.iter().enumerate().map(|(i, &c)| matrix.get(i, c)).collect();
    Ok(SelectionResult {
        mode,
        chosen,
        chosen_loss,
        matrix,
    })
}

/// Whether step `step` runs hard-view selection.
pub fn hvp_gate(step: u64, n_step: u64) -> Result<bool> {
    ensure!(n_step >= 1, "n_step must be at least 1");
    Ok(step.is_multiple_of(n_step))
}

/// Sample `n` views of one image. With `static_appearance` the colour
/// parameters are drawn once and shared by every view; crops, flips and blur
/// stay independent.
pub fn sample_views<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugConfig,
    source_dims: (usize, usize),
    n: usize,
    static_appearance: bool,
) -> Vec<ViewParams> {
    let shared = static_appearance.then(|| sample_appearance(rng, cfg));
    (0..n)
        .map(|_| {
            let v = sample_view_params(rng, cfg, source_dims);
            match &shared {
                Some(a) => v.with_appearance(a),
                None => v,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleDirection {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoUSchedule {
    pub start: f64,
    pub end: f64,
    pub total_epochs: u64,
    #[serde(default = "forward")]
    pub direction: ScheduleDirection,
    /// Constrain only every other step; the rest sample freely.
    #[serde(default)]
    pub alternate: bool,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn forward() -> ScheduleDirection {
    ScheduleDirection::Forward
}

fn default_retries() -> usize {
    20
}

impl IoUSchedule {
    pub fn new(start: f64, end: f64, total_epochs: u64) -> Self {
        Self {
            start,
            end,
            total_epochs,
            direction: ScheduleDirection::Forward,
            alternate: false,
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.total_epochs >= 1, "IoU schedule needs total_epochs >= 1");
        ensure!(self.max_retries >= 1, "IoU schedule needs max_retries >= 1");
        ensure!(
            self.start.is_finite() && self.end.is_finite(),
            "IoU schedule endpoints must be finite"
        );
        Ok(())
    }

    /// Whether the constraint applies at `step`.
    pub fn active(&self, step: u64) -> bool {
        !self.alternate || step.is_multiple_of(2)
    }
}

/// Linear interpolation from start to end over the schedule's epochs.
pub fn iou_threshold(epoch: u64, s: &IoUSchedule) -> Result<f64> {
    ensure!(
        epoch <= s.total_epochs && s.total_epochs > 0,
        "epoch {epoch} outside schedule of {} epochs",
        s.total_epochs
    );
    let (a, b) = match s.direction {
        ScheduleDirection::Forward => (s.start, s.end),
        ScheduleDirection::Inverse => (s.end, s.start),
    };
    Ok(a + (b - a) * epoch as f64 / s.total_epochs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionOutcome {
    pub views: (ViewParams, ViewParams),
    pub iou: f64,
    /// False when retries ran out and the lowest-IoU pair was returned.
    pub accepted: bool,
    pub attempts: usize,
}

/// Resample view pairs until their crop IoU is at most `threshold`.
pub fn iou_rejection_sample<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugConfig,
    source_dims: (usize, usize),
    threshold: f64,
    max_retries: usize,
) -> Result<RejectionOutcome> {
    ensure!(max_retries >= 1, "max_retries must be at least 1");
    let mut best: Option<RejectionOutcome> = None;
    for attempt in 1..=max_retries {
        let a = sample_view_params(rng, cfg, source_dims);
        let b = sample_view_params(rng, cfg, source_dims);
        let v = iou(&a.crop, &b.crop)?;
        if v <= threshold {
            return Ok(RejectionOutcome {
                views: (a, b),
                iou: v,
                accepted: true,
                attempts: attempt,
            });
        }
        if best.as_ref().is_none_or(|o| v < o.iou) {
            best = Some(RejectionOutcome {
                views: (a, b),
                iou: v,
                accepted: false,
                attempts: attempt,
            });
        }
    }
    let mut out = best.expect("at least one attempt");
    out.attempts = max_retries;
    Ok(out)
}
