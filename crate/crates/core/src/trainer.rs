//! Pretraining loop: view sampling, hard-pair selection, SGD updates,
//! per-epoch checkpoints, forward-pass accounting and selection logs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply_view, pair_geometry, AugConfig, ViewParams};
use crate::data::{load_cifar10_bin, synth_dataset, BatchPlan, Dataset};
use crate::error::{ensure, HvpError, Result};
use crate::exec;
use crate::model::{
    image_batch, init_model, load_checkpoint, optimizer_for, save_checkpoint, CheckpointMeta, ModelState,
    ModelWidths, ParamGroup,
};
use crate::objectives::{pairwise_loss_matrix, Objective, ObjectiveKind, SimclrVariant, ViewEmbeddings};
use crate::rng::{self, tag};
use crate::selection::{
    hvp_gate, iou_rejection_sample, iou_threshold, sample_views, select_pairs, IoUSchedule, SelectionMode,
};
use crate::tensor::{cosine_lr, Graph, OptimizerState, SgdConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Adversarial,
    Cooperative,
    Random,
    /// Two views per image, no selection phase.
    Vanilla,
}

impl TrainMode {
    pub fn selection(self) -> Option<SelectionMode> {
        match self {
            TrainMode::Adversarial => Some(SelectionMode::Adversarial),
            TrainMode::Cooperative => Some(SelectionMode::Cooperative),
            TrainMode::Random => Some(SelectionMode::Random),
            TrainMode::Vanilla => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Adversarial => "adversarial",
            TrainMode::Cooperative => "cooperative",
            TrainMode::Random => "random",
            TrainMode::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        seed: u64,
        n: usize,
        classes: usize,
    },
    Cifar10 {
        path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synth { seed, n, classes } => synth_dataset(*seed, *n, *classes),
            DataSource::Cifar10 { path, limit } => {
                let ds = load_cifar10_bin(path)?;
                Ok(match limit {
                    Some(n) => ds.take(*n),
                    None => ds,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// Write selection records at all.
    pub selection: bool,
    /// Log every `every`-th selection step.
    pub every: u64,
    /// Log only the first `samples` batch positions of a step.
    pub samples: Option<usize>,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            selection: true,
            every: 1,
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub mode: TrainMode,
    #[serde(rename = "N")]
    pub n_views: usize,
    #[serde(rename = "M")]
    pub batch_size: usize,
    pub epochs: u64,
    pub base_lr: f32,
    pub min_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_epochs: u64,
    pub n_step: u64,
    pub pair_cap: usize,
    pub tau: f32,
    pub simclr_variant: SimclrVariant,
    pub aug: AugConfig,
    pub seed: u64,
    pub static_appearance: bool,
    pub select_before_appearance: bool,
    pub fix_pred_lr: bool,
    pub iou_policy: Option<IoUSchedule>,
    pub model: ModelWidths,
    pub data: DataSource,
    pub log: LogConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Simsiam,
            mode: TrainMode::Adversarial,
            n_views: 4,
            batch_size: 256,
            epochs: 10,
            base_lr: 0.05,
            min_lr: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 0,
            n_step: 1,
            pair_cap: 128,
            tau: 0.1,
            simclr_variant: SimclrVariant::CrossView,
            aug: AugConfig::default(),
            seed: 0,
            static_appearance: false,
            select_before_appearance: false,
            fix_pred_lr: true,
            iou_policy: None,
            model: ModelWidths::default(),
            data: DataSource::Synth {
                seed: 0,
                n: 5000,
                classes: 10,
            },
            log: LogConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parse and validate a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HvpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HvpError::Config(msg));
        if self.n_views < 2 {
            return bad(format!("N must be at least 2, got {}", self.n_views));
        }
        if self.batch_size < 1 {
            return bad("M must be at least 1".into());
        }
        if self.objective == ObjectiveKind::Simclr && self.batch_size < 2 {
            return bad("simclr needs M >= 2".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return bad("warmup_epochs must be smaller than epochs".into());
        }
        if self.n_step < 1 {
            return bad("n_step must be at least 1".into());
        }
        if self.pair_cap < 1 {
            return bad("pair_cap must be at least 1".into());
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return bad(format!("min_lr {} must lie in [0, base_lr]", self.min_lr));
        }
        if self.log.every < 1 {
            return bad("log.every must be at least 1".into());
        }
        if self.aug.out_size < 4 {
            return bad("aug.out_size must be at least 4".into());
        }
        if let Some(s) = &self.iou_policy {
            if self.mode != TrainMode::Vanilla {
                return bad("iou_policy applies to the two-view baseline and needs mode \"vanilla\"".into());
            }
            s.validate().map_err(as_config)?;
        }
        self.objective().validate().map_err(as_config)?;
        self.sgd().validate().map_err(as_config)?;
        self.aug.validate().map_err(as_config)?;
        self.model.validate().map_err(as_config)?;
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Simsiam => Objective::simsiam(),
            ObjectiveKind::Simclr => Objective::simclr(self.tau, self.simclr_variant),
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Learning rate of the shared (non-predictor) parameters at `step`.
    pub fn lr_at(&self, step: u64, steps_per_epoch: u64) -> f32 {
        let total = self.epochs * steps_per_epoch;
        let warm = self.warmup_epochs * steps_per_epoch;
        if step < warm {
            self.base_lr * (step + 1) as f32 / warm as f32
        } else {
            cosine_lr(step - warm, total - warm, self.base_lr, self.min_lr)
        }
    }
}

fn as_config(e: HvpError) -> HvpError {
    match e {
        HvpError::Contract(m) => HvpError::Config(m),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunCounters {
    /// Gradient-free forwards of single views during selection.
    pub selection_forward_count: u64,
    /// Forwards of single views that feed the optimizer.
    pub training_forward_count: u64,
    pub optimizer_steps: u64,
    pub hvp_steps: u64,
    pub iou_policy_draws: u64,
    pub iou_policy_fallbacks: u64,
    #[serde(default)]
    pub wall_seconds: f64,
}

impl RunCounters {
    /// Everything except wall-clock time, for checkpoint headers.
    fn deterministic(&self) -> serde_json::Value {
        let mut c = *self;
        c.wall_seconds = 0.0;
        let mut v = serde_json::to_value(c).expect("counters serialise");
        v.as_object_mut().expect("object").remove("wall_seconds");
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub k: usize,
    pub l: usize,
    pub loss: f32,
    pub iou: f64,
    pub rel_center_distance: f64,
    pub color_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLogRecord {
    pub step: u64,
    pub epoch: u64,
    /// Dataset index of the source image.
    pub sample: usize,
    pub mode: SelectionMode,
    pub candidates: Vec<CandidateRecord>,
    /// Index into `candidates`.
    pub chosen: usize,
    pub chosen_loss: f32,
    pub views: Vec<ViewParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub mean_train_loss: f64,
    pub lr: f32,
    pub selection_forward_count: u64,
    pub training_forward_count: u64,
    pub wall_seconds: f64,
    pub mean_selected_iou: f64,
    pub mean_random_iou: f64,
    pub frac_lowest_iou_selected: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop cleanly after this many completed epochs (simulates an
    /// interruption).
    pub stop_after_epochs: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Checkpoints written by this invocation.
    pub checkpoints: Vec<PathBuf>,
    pub selection_log: Option<PathBuf>,
    pub metrics_csv: PathBuf,
    pub counters_json: PathBuf,
    pub counters: RunCounters,
    pub completed_epochs: u64,
    pub finished: bool,
    pub metrics: Vec<EpochMetrics>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.hvpckpt"))
}

pub const SELECTION_LOG: &str = "selection_log.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const COUNTERS_JSON: &str = "counters.json";

#[derive(Default)]
struct EpochAccum {
    loss_sum: f64,
    steps: u64,
    selected_iou: f64,
    random_iou: f64,
    candidates: u64,
    lowest: u64,
    selections: u64,
}

impl EpochAccum {
    fn ratio(a: f64, b: u64) -> f64 {
        if b == 0 {
            f64::NAN
        } else {
            a / b as f64
        }
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    objective: Objective,
    steps_per_epoch: u64,
    model: ModelState,
    opt: OptimizerState,
    counters: RunCounters,
    out_dir: PathBuf,
    log: Option<BufWriter<File>>,
}

/// Run (or resume) pretraining, writing checkpoints and logs to `out_dir`.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset, out_dir: impl AsRef<Path>, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "empty dataset");
    ensure!(
        data.len() >= cfg.batch_size,
        "dataset of {} images is smaller than one batch of {}",
        data.len(),
        cfg.batch_size
    );
    let out_dir = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| HvpError::io(&out_dir, e))?;
    let steps_per_epoch = (data.len() / cfg.batch_size) as u64;

    let (model, opt, counters, start_epoch) = match &opts.resume {
        None => {
            let model = init_model(cfg.seed, &cfg.model)?;
            let opt = optimizer_for(&model, cfg.sgd())?;
            for f in [SELECTION_LOG, METRICS_CSV, COUNTERS_JSON] {
                let p = out_dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| HvpError::io(&p, e))?;
                }
            }
            (model, opt, RunCounters::default(), 0)
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let hash = cfg.hash();
            if ck.meta.config_hash != hash {
                return Err(HvpError::ResumeMismatch(format!(
                    "checkpoint {} was written with config hash {}, current config hashes to {hash}",
                    path.display(),
                    ck.meta.config_hash
                )));
            }
            if ck.meta.step != ck.meta.epoch * steps_per_epoch {
                return Err(HvpError::ResumeMismatch(format!(
                    "checkpoint {} is not at an epoch boundary (step {})",
                    path.display(),
                    ck.meta.step
                )));
            }
            let mut counters: RunCounters = serde_json::from_value(ck.meta.extra.clone())
                .map_err(|e| HvpError::format(format!("checkpoint counters: {e}")))?;
            if let Ok(text) = fs::read_to_string(out_dir.join(COUNTERS_JSON)) {
                if let Ok(c) = serde_json::from_str::<RunCounters>(&text) {
                    counters.wall_seconds = c.wall_seconds;
                }
            }
            truncate_logs(&out_dir, ck.meta.step, ck.meta.epoch)?;
            (ck.model, ck.optimizer, counters, ck.meta.epoch)
        }
    };

    let log = if cfg.log.selection && cfg.mode != TrainMode::Vanilla {
        let p = out_dir.join(SELECTION_LOG);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| HvpError::io(&p, e))?;
        Some(BufWriter::new(f))
    } else {
        None
    };

    let mut t = Trainer {
        cfg,
        data,
        objective: cfg.objective(),
        steps_per_epoch,
        model,
        opt,
        counters,
        out_dir: out_dir.clone(),
        log,
    };

    let stop = opts
        .stop_after_epochs
        .map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut written = Vec::new();
    let mut metrics = Vec::new();
    for epoch in start_epoch..stop {
        let m = t.run_epoch(epoch)?;
        written.push(t.finish_epoch(epoch, &m)?);
        metrics.push(m);
    }
    let completed = stop.max(start_epoch);
    let final_checkpoint = match (written.last(), &opts.resume) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => checkpoint_path(&out_dir, completed),
    };
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoints: written,
        selection_log: t.log.is_some().then(|| out_dir.join(SELECTION_LOG)),
        metrics_csv: out_dir.join(METRICS_CSV),
        counters_json: out_dir.join(COUNTERS_JSON),
        counters: t.counters,
        completed_epochs: completed,
        finished: completed == cfg.epochs,
        metrics,
    })
}

/// Drop log lines and metric rows written after the checkpoint being resumed.
fn truncate_logs(out_dir: &Path, step: u64, epoch: u64) -> Result<()> {
    let log = out_dir.join(SELECTION_LOG);
    if log.exists() {
        let f = File::open(&log).map_err(|e| HvpError::io(&log, e))?;
        let mut kept = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| HvpError::io(&log, e))?;
            let rec_step = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
            if rec_step.is_some_and(|s| s < step) {
                kept.push(line);
            }
        }
        write_lines(&log, &kept)?;
    }
    let csv_path = out_dir.join(METRICS_CSV);
    if csv_path.exists() {
        let mut rd = csv::Reader::from_path(&csv_path)?;
        let rows: Vec<EpochMetrics> = rd
            .deserialize()
            .collect::<std::result::Result<Vec<EpochMetrics>, _>>()?
            .into_iter()
            .filter(|r| r.epoch < epoch)
            .collect();
        let mut wr = csv::Writer::from_path(&csv_path)?;
        for r in rows {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| HvpError::io(&csv_path, e))?;
    }
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| HvpError::io(path, e))?);
    for l in lines {
        writeln!(f, "{l}").map_err(|e| HvpError::io(path, e))?;
    }
    f.flush().map_err(|e| HvpError::io(path, e))
}

struct StepViews {
    a: Tensor,
    b: Tensor,
}

impl Trainer<'_> {
    fn run_epoch(&mut self, epoch: u64) -> Result<EpochMetrics> {
        let started = Instant::now();
        let plan = BatchPlan::new(self.data.len(), self.cfg.batch_size, self.cfg.seed, epoch)?;
        let mut acc = EpochAccum::default();
        let mut lr = 0.0;
        for (b, idx) in plan.batches().enumerate() {
            let step = epoch * self.steps_per_epoch + b as u64;
            lr = self.cfg.lr_at(step, self.steps_per_epoch);
            let gated = match self.cfg.mode.selection() {
                Some(_) => hvp_gate(step, self.cfg.n_step)?,
                None => false,
            };
            let views = if gated {
                self.counters.hvp_steps += 1;
                self.select(step, epoch, idx, &mut acc)?
            } else {
                self.two_views(step, epoch, idx)?
            };
            let loss = self.train_step(step, epoch, lr, views)?;
            acc.loss_sum += loss as f64;
            acc.steps += 1;
        }
        self.counters.wall_seconds += started.elapsed().as_secs_f64();
        let m = EpochMetrics {
            epoch,
            mean_train_loss: EpochAccum::ratio(acc.loss_sum, acc.steps),
            lr,
            selection_forward_count: self.counters.selection_forward_count,
            training_forward_count: self.counters.training_forward_count,
            wall_seconds: self.counters.wall_seconds,
            mean_selected_iou: EpochAccum::ratio(acc.selected_iou, acc.selections),
            mean_random_iou: EpochAccum::ratio(acc.random_iou, acc.candidates),
            frac_lowest_iou_selected: EpochAccum::ratio(acc.lowest as f64, acc.selections),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} lr {:.4} selected IoU {:.3} (all {:.3}) lowest-IoU frac {:.3} [{:.1}s]",
            m.mean_train_loss,
            m.lr,
            m.mean_selected_iou,
            m.mean_random_iou,
            m.frac_lowest_iou_selected,
            m.wall_seconds
        );
        Ok(m)
    }

    fn finish_epoch(&mut self, epoch: u64, m: &EpochMetrics) -> Result<PathBuf> {
        if let Some(log) = &mut self.log {
            log.flush()
                .map_err(|e| HvpError::io(self.out_dir.join(SELECTION_LOG), e))?;
        }
        let csv_path = self.out_dir.join(METRICS_CSV);
        let fresh = !csv_path.exists() || fs::metadata(&csv_path).map(|m| m.len() == 0).unwrap_or(true);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .map_err(|e| HvpError::io(&csv_path, e))?;
        let mut wr = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
        wr.serialize(m)?;
        wr.flush().map_err(|e| HvpError::io(&csv_path, e))?;

        let path = checkpoint_path(&self.out_dir, epoch + 1);
        self.save(&path, (epoch + 1) * self.steps_per_epoch, epoch + 1)?;
        let cj = self.out_dir.join(COUNTERS_JSON);
        fs::write(&cj, serde_json::to_string_pretty(&self.counters)?).map_err(|e| HvpError::io(&cj, e))?;
        Ok(path)
    }

    fn save(&self, path: &Path, step: u64, epoch: u64) -> Result<()> {
        let meta = CheckpointMeta {
            seed: self.cfg.seed,
            step,
            epoch,
            config_hash: self.cfg.hash(),
            extra: self.counters.deterministic(),
        };
        save_checkpoint(path, &self.model, &self.opt, &meta)
    }

    fn abort_non_finite(&self, step: u64, epoch: u64) -> HvpError {
        let path = self
            .out_dir
            .join("checkpoints")
            .join(format!("nonfinite_step_{step}.hvpckpt"));
        match self.save(&path, step, epoch) {
            Ok(()) => HvpError::NonFinite { step, checkpoint: path },
            Err(e) => e,
        }
    }

    fn render(&self, idx: &[usize], params: &[ViewParams]) -> Result<Tensor> {
        let out = self.cfg.aug.out_size;
        let images = exec::map_range(idx.len(), |i| apply_view(&self.data.images[idx[i]], &params[i], out))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        image_batch(&images)
    }

    fn sample(&self, step: u64, pos: usize, image: usize, n: usize) -> Vec<ViewParams> {
        let im = &self.data.images[image];
        let mut r = rng::stream(self.cfg.seed, &[tag::VIEW, step, pos as u64]);
        sample_views(
            &mut r,
            &self.cfg.aug,
            (im.height(), im.width()),
            n,
            self.cfg.static_appearance,
        )
    }

    fn two_views(&mut self, step: u64, epoch: u64, idx: &[usize]) -> Result<StepViews> {
        let policy = self.cfg.iou_policy.as_ref().filter(|s| s.active(step));
        let (mut a, mut b) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
        for (pos, &i) in idx.iter().enumerate() {
            match policy {
                Some(s) => {
                    let im = &self.data.images[i];
                    let threshold = iou_threshold(epoch.min(s.total_epochs), s)?;
                    let mut r = rng::stream(self.cfg.seed, &[tag::IOU_POLICY, step, pos as u64]);
                    let o = iou_rejection_sample(
                        &mut r,
                        &self.cfg.aug,
                        (im.height(), im.width()),
                        threshold,
                        s.max_retries,
                    )?;
                    self.counters.iou_policy_draws += 1;
                    if !o.accepted {
                        self.counters.iou_policy_fallbacks += 1;
                    }
                    a.push(o.views.0);
                    b.push(o.views.1);
                }
                None => {
                    let v = self.sample(step, pos, i, 2);
                    a.push(v[0]);
                    b.push(v[1]);
                }
            }
        }
        Ok(StepViews {
            a: self.render(idx, &a)?,
            b: self.render(idx, &b)?,
        })
    }

    fn embed(&self, x: Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::no_grad();
        let bound = self.model.bind(&mut g)?;
        let x = g.input(x);
        let h = self.model.encode(&mut g, &bound, x)?;
        let z = self.model.project(&mut g, &bound, h)?;
        let p = if self.objective.uses_predictor() {
            let p = self.model.predict(&mut g, &bound, z)?;
            Some(g.tensor(p))
        } else {
            None
        };
        Ok((g.tensor(z), p))
    }

    fn select(&mut self, step: u64, epoch: u64, idx: &[usize], acc: &mut EpochAccum) -> Result<StepViews> {
        let n = self.cfg.n_views;
        let m = idx.len();
        let views: Vec<Vec<ViewParams>> = idx
            .iter()
            .enumerate()
            .map(|(pos, &i)| self.sample(step, pos, i, n))
            .collect();
        let geometric = self.cfg.select_before_appearance;
        let mut rendered = Vec::with_capacity(n);
        let (mut zs, mut ps) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for v in 0..n {
            let params: Vec<ViewParams> = views
                .iter()
                .map(|vs| if geometric { vs[v].geometric() } else { vs[v] })
                .collect();
            let x = self.render(idx, &params)?;
            let (z, p) = self.embed(x.clone())?;
            zs.push(z);
            if let Some(p) = p {
                ps.push(p);
            }
            if !geometric {
                rendered.push(x);
            }
        }
        self.counters.selection_forward_count += (n * m) as u64;
        let emb = ViewEmbeddings::new(zs, self.objective.uses_predictor().then_some(ps))?;
        if !emb.is_finite() {
            return Err(self.abort_non_finite(step, epoch));
        }
        let mut r = rng::stream(self.cfg.seed, &[tag::PAIR_CAP, step]);
        let matrix = pairwise_loss_matrix(&emb, &self.objective, self.cfg.pair_cap, &mut r)?;
        let mode = self.cfg.mode.selection().expect("selection mode");
        let sel = select_pairs(matrix, mode, self.cfg.seed, step)?;

        let log_step = self.log.is_some() && (self.counters.hvp_steps - 1).is_multiple_of(self.cfg.log.every);
        let log_limit = self.cfg.log.samples.unwrap_or(m);
        let pairs = sel.matrix.pairs().to_vec();
        for pos in 0..m {
            let vs = &views[pos];
            let geo = pairs
                .iter()
                .map(|&(k, l)| pair_geometry(&vs[k], &vs[l]))
                .collect::<Result<Vec<_>>>()?;
            let chosen = sel.chosen[pos];
            let min_iou = geo.iter().map(|g| g.iou).fold(f64::INFINITY, f64::min);
            acc.selections += 1;
            acc.selected_iou += geo[chosen].iou;
            acc.random_iou += geo.iter().map(|g| g.iou).sum::<f64>();
            acc.candidates += geo.len() as u64;
            if geo[chosen].iou <= min_iou {
                acc.lowest += 1;
            }
            if log_step && pos < log_limit {
                let rec = SelectionLogRecord {
                    step,
                    epoch,
                    sample: idx[pos],
                    mode,
                    candidates: pairs
                        .iter()
                        .zip(&geo)
                        .enumerate()
                        .map(|(j, (&(k, l), g))| CandidateRecord {
                            k,
                            l,
                            loss: sel.matrix.get(pos, j),
                            iou: g.iou,
                            rel_center_distance: g.rel_center_distance,
                            color_distance: g.color_distance,
                        })
                        .collect(),
                    chosen,
                    chosen_loss: sel.chosen_loss[pos],
                    views: vs.clone(),
                };
                let log = self.log.as_mut().expect("log open");
                serde_json::to_writer(&mut *log, &rec)?;
                log.write_all(b"\n")
                    .map_err(|e| HvpError::io(self.out_dir.join(SELECTION_LOG), e))?;
            }
        }

        if geometric {
            let (a, b): (Vec<ViewParams>, Vec<ViewParams>) = (0..m)
                .map(|pos| {
                    let (k, l) = sel.pair(pos);
                    (views[pos][k], views[pos][l])
                })
                .unzip();
            Ok(StepViews {
                a: self.render(idx, &a)?,
                b: self.render(idx, &b)?,
            })
        } else {
            let gather = |side: usize| -> Result<Tensor> {
                let mut shape = rendered[0].shape().to_vec();
                let row = shape[1..].iter().product::<usize>();
                let mut data = Vec::with_capacity(m * row);
                for pos in 0..m {
                    let (k, l) = sel.pair(pos);
                    let v = if side == 0 { k } else { l };
                    data.extend_from_slice(rendered[v].row(pos));
                }
                shape[0] = m;
                Tensor::new(shape, data)
            };
            Ok(StepViews {
                a: gather(0)?,
                b: gather(1)?,
            })
        }
    }

    fn train_step(&mut self, step: u64, epoch: u64, lr: f32, views: StepViews) -> Result<f32> {
        let m = views.a.shape()[0];
        let mut shape = views.a.shape().to_vec();
        shape[0] = 2 * m;
        let mut data = views.a.into_data();
        data.extend_from_slice(views.b.data());
        let x = Tensor::new(shape, data)?;

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g)?;
        let x = g.input(x);
        let h = self.model.encode(&mut g, &bound, x)?;
        let z = self.model.project(&mut g, &bound, h)?;
        let p = if self.objective.uses_predictor() {
            Some(self.model.predict(&mut g, &bound, z)?)
        } else {
            None
        };
        let za = g.slice_rows(z, 0, m)?;
        let zb = g.slice_rows(z, m, m)?;
        let (pa, pb) = match p {
            Some(p) => (Some(g.slice_rows(p, 0, m)?), Some(g.slice_rows(p, m, m)?)),
            None => (None, None),
        };
        let per_sample = self.objective.pair_loss(&mut g, (za, pa), (zb, pb))?;
        let loss = g.mean(per_sample);
        let value = g.value(loss)[0];
        self.counters.training_forward_count += 2 * m as u64;
        if !value.is_finite() {
            return Err(self.abort_non_finite(step, epoch));
        }
        g.backward(loss, self.model.params_mut())?;
        let lrs: Vec<f32> = (0..self.model.params().len())
            .map(|i| {
                if self.cfg.fix_pred_lr && self.model.group(i) == ParamGroup::Predictor {
                    self.cfg.base_lr
                } else {
                    lr
                }
            })
            .collect();
        self.opt.step_with_lrs(self.model.params_mut(), &lrs)?;
        self.counters.optimizer_steps += 1;
        if !self.model.is_finite() {
            return Err(self.abort_non_finite(step + 1, epoch));
        }
        Ok(value)
    }
}

/// Parse a selection log written by [`pretrain`].
pub fn read_selection_log(path: impl AsRef<Path>) -> Result<Vec<SelectionLogRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| HvpError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| HvpError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| HvpError::format(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let mut rd = csv::Reader::from_path(path.as_ref())?;
    Ok(rd.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
