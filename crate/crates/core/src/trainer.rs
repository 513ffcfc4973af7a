//! Two-stage training loop.
//!
//! Epochs are numbered globally: `0..stage1_epochs` train with supervision plus
//! cross-window consistency, the remaining `stage2_max_epochs` train on labeled
//! images plus the pseudo-label bank. Every random draw is re-derived from
//! `(seed, stream, epoch, slot)`, so a run resumed from any epoch checkpoint
//! continues exactly as the uninterrupted run would have.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, Phase};
use crate::config::ExperimentConfig;
use crate::data::{augment_labeled, augment_unlabeled, generate_synthetic, partition, write_dataset_dir, ImageId, Splits};
use crate::dpm::{append_update_log, on_validation, write_score_dump, Decision, MemoryBank, RebuildSettings, TriggerState, UpdateRecord};
use crate::error::{Error, Result};
use crate::geometry::{enumerate_pairs, sample_patch_group, Window};
use crate::grid::{argmax_channels, Image, LabelMap};
use crate::losses::{bcc_group_loss, ce_loss, MaskMode};
use crate::metrics::{evaluate, EvalReport, CSV_HEADER};
use crate::model::{backward, forward, init_params, GradientSet, ModelParams, Tensors};
use crate::optim::{poly_lr, Sgd};
use crate::reliability::selection_count;
use crate::rng::{stream_rng, Stream};

pub const STEPS_HEADER: &str = "step,epoch,stage,lr,loss_sup,loss_bcc,loss_dpm,loss_total";

/// Per-epoch slot reserved for shuffles; real slots are sample indices.
const ORDER_SLOT: u64 = u32::MAX as u64;

fn key(epoch: usize, slot: u64) -> u64 {
    ((epoch as u64) << 32) | slot
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Sgd,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    /// Steps taken within the current stage; drives the poly schedule.
    pub stage_step: u64,
    pub trigger: Option<TriggerState>,
    pub bank: Option<MemoryBank>,
}

impl TrainState {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let params = init_params(cfg.arch(), &mut stream_rng(cfg.seed, Stream::Init, 0))?;
        Ok(Self {
            params,
            optimizer: Sgd::new(cfg.optim.head_lr_scale, cfg.optim.momentum),
            epoch: 0,
            step: 0,
            stage_step: 0,
            trigger: None,
            bank: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss_sup: f64,
    pub loss_bcc: f64,
    pub loss_dpm: f64,
    pub loss_total: f64,
}

impl StepRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.epoch, self.stage, self.lr, self.loss_sup, self.loss_bcc, self.loss_dpm, self.loss_total
        )
    }
}

/// Everything a run emits, kept in memory alongside the files.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<(String, usize, EvalReport)>,
    pub updates: Vec<UpdateRecord>,
}

/// Files a run appends to. Absent when training purely in memory.
#[derive(Clone, Debug)]
struct Sinks {
    root: PathBuf,
}

impl Sinks {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::write(root.join("metrics.csv"), format!("{CSV_HEADER}\n"))?;
        fs::write(root.join("steps.csv"), format!("{STEPS_HEADER}\n"))?;
        fs::write(root.join("dpm_log.jsonl"), "")?;
        Ok(Self { root: root.to_path_buf() })
    }

    fn reopen(root: &Path) -> Result<Self> {
        for f in ["metrics.csv", "steps.csv", "dpm_log.jsonl"] {
            if !root.join(f).exists() {
                return Err(Error::Checkpoint(format!("cannot resume: {} is missing", root.join(f).display())));
            }
        }
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(Self { root: root.to_path_buf() })
    }

    fn append(&self, file: &str, text: &str) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(self.root.join(file))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    fn bank_dir(&self, generation: u64) -> PathBuf {
        self.root.join("bank").join(format!("gen_{generation:04}"))
    }
}

pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    splits: &'a Splits,
    sinks: Option<Sinks>,
    pub log: TrainLog,
}

pub fn predict(params: &ModelParams, image: &Image) -> Result<LabelMap> {
    Ok(argmax_channels(&forward(params, image, &Window::full(image.height(), image.width()))?))
}

/// Full-image predictions on `samples`, scored against their labels.
pub fn evaluate_params(params: &ModelParams, samples: &[crate::data::Sample], num_classes: usize) -> Result<EvalReport> {
    let preds = samples
        .par_iter()
        .map(|s| predict(params, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    evaluate(&preds, &gts, num_classes)
}

fn sum_in_order(parts: Vec<(f64, GradientSet)>, zero: GradientSet) -> (f64, GradientSet) {
    parts.into_iter().fold((0.0, zero), |(l, mut g), (pl, pg)| {
        g.add_assign(&pg);
        (l + pl, g)
    })
}

impl<'a> Trainer<'a> {
    /// In-memory trainer: nothing is written to disk.
    pub fn new(cfg: &'a ExperimentConfig, splits: &'a Splits) -> Self {
        Self {
            cfg,
            splits,
            sinks: None,
            log: TrainLog::default(),
        }
    }

    /// Trainer writing logs, checkpoints and banks under `root`; existing logs are truncated.
    pub fn with_output(cfg: &'a ExperimentConfig, splits: &'a Splits, root: &Path) -> Result<Self> {
        Ok(Self {
            sinks: Some(Sinks::create(root)?),
            ..Self::new(cfg, splits)
        })
    }

    /// Like [`Trainer::with_output`] but keeps existing logs so a resumed run appends to them.
    pub fn resuming(cfg: &'a ExperimentConfig, splits: &'a Splits, root: &Path) -> Result<Self> {
        Ok(Self {
            sinks: Some(Sinks::reopen(root)?),
            ..Self::new(cfg, splits)
        })
    }

    fn stage1_epochs(&self) -> usize {
        self.cfg.schedule.stage1_epochs
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.schedule.stage1_epochs + self.cfg.schedule.stage2_max_epochs
    }

    fn stage1_steps_per_epoch(&self) -> usize {
        self.splits.labeled.len().div_ceil(self.cfg.optim.batch_labeled)
    }

    fn bank_capacity(&self) -> usize {
        let n = self.splits.unlabeled.len();
        match self.cfg.components.selection.mode() {
            None => 0,
            Some(crate::dpm::SelectionMode::All) => n,
            Some(_) => selection_count(n, self.cfg.selection.ratio),
        }
    }

    fn stage2_steps_per_epoch(&self) -> usize {
        (self.splits.labeled.len() + self.bank_capacity()).div_ceil(self.cfg.optim.batch_stage2)
    }

    /// Trains epochs until the schedule is exhausted or `halt_after_epoch`
    /// epochs have completed. Returns whether the schedule finished.
    pub fn run(&mut self, state: &mut TrainState, halt_after_epoch: Option<usize>) -> Result<bool> {
        while state.epoch < self.total_epochs() {
            if halt_after_epoch.is_some_and(|h| state.epoch >= h) {
                return Ok(false);
            }
            self.run_epoch(state)?;
        }
        Ok(true)
    }

    /// Runs the Stage I epochs; returns validation mIoU after the last one.
    pub fn train_stage1(&mut self, state: &mut TrainState) -> Result<f64> {
        while state.epoch < self.stage1_epochs() {
            self.run_epoch(state)?;
        }
        state
            .trigger
            .map(|t| t.best_val)
            .ok_or(Error::Precondition("Stage I ran no epochs".into()))
    }

    pub fn train_stage2(&mut self, state: &mut TrainState) -> Result<()> {
        if state.epoch < self.stage1_epochs() {
            return Err(Error::Precondition("Stage I is not complete".into()));
        }
        self.run(state, None).map(|_| ())
    }

    fn run_epoch(&mut self, state: &mut TrainState) -> Result<()> {
        let e = state.epoch;
        let stage1 = e < self.stage1_epochs();
        if stage1 {
            self.stage1_epoch(state)?;
        } else {
            self.stage2_epoch(state)?;
        }
        let val = evaluate_params(&state.params, &self.splits.val, self.splits.num_classes)?;
        let s = val.miou;
        self.record_eval("val", e + 1, val)?;

        let remaining = self.total_epochs() - (e + 1);
        let selection = self.cfg.components.selection.mode();
        if stage1 {
            if e + 1 == self.stage1_epochs() {
                state.trigger = Some(TriggerState::new(
                    s,
                    self.cfg.selection.gain_threshold,
                    self.cfg.selection.patience,
                ));
                if selection.is_some() && remaining > 0 {
                    self.rebuild_bank(state, s)?;
                }
            }
        } else {
            let trigger = state.trigger.ok_or(Error::Precondition("Stage II without a trigger".into()))?;
            let (decision, next) = on_validation(s, trigger);
            state.trigger = Some(next);
            if decision == Decision::Update && self.cfg.components.dynamic_bank && selection.is_some() && remaining > 0 {
                self.rebuild_bank(state, s)?;
            }
        }
        state.epoch += 1;
        if stage1 && state.epoch == self.stage1_epochs() {
            state.stage_step = 0;
        }
        self.save_checkpoint(state)
    }

    fn record_eval(&mut self, split: &str, epoch: usize, report: EvalReport) -> Result<()> {
        if let Some(s) = &self.sinks {
            s.append("metrics.csv", &format!("{}\n", report.csv_row(split, epoch)))?;
        }
        self.log.evals.push((split.to_string(), epoch, report));
        Ok(())
    }

    fn record_step(&mut self, rec: StepRecord) -> Result<()> {
        if !rec.loss_total.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        if let Some(s) = &self.sinks {
            s.append("steps.csv", &format!("{}\n", rec.csv_row()))?;
        }
        self.log.steps.push(rec);
        Ok(())
    }

    fn rebuild_bank(&mut self, state: &mut TrainState, val_miou: f64) -> Result<()> {
        let mode = self
            .cfg
            .components
            .selection
            .mode()
            .ok_or(Error::Precondition("bank rebuild with selection disabled".into()))?;
        let settings = RebuildSettings {
            ratio: self.cfg.selection.ratio,
            mode,
            win: self.cfg.geometry.crop_size,
            min_overlap: self.cfg.geometry.min_overlap(),
            pixel_filter: self.cfg.components.pixel_filter_threshold,
            seed: self.cfg.seed,
        };
        let rebuilt = MemoryBank::rebuild(
            &state.params,
            &self.splits.unlabeled,
            &settings,
            state.bank.as_ref(),
            state.epoch + 1,
        )?;
        let record = UpdateRecord {
            generation: rebuilt.bank.generation,
            epoch: state.epoch + 1,
            val_miou,
            renewal_ratio: rebuilt.renewal_ratio,
            bank_size: rebuilt.bank.len(),
        };
        if let Some(s) = &self.sinks {
            rebuilt.bank.save(&s.bank_dir(rebuilt.bank.generation))?;
            append_update_log(&s.root.join("dpm_log.jsonl"), &record)?;
            if self.cfg.output.dump_scores && !rebuilt.scores.is_empty() {
                write_score_dump(
                    &s.root.join(format!("scores_gen{}.csv", rebuilt.bank.generation)),
                    &rebuilt.scores,
                )?;
            }
        }
        self.log.updates.push(record);
        state.bank = Some(rebuilt.bank);
        Ok(())
    }

    fn save_checkpoint(&self, state: &TrainState) -> Result<()> {
        let Some(s) = &self.sinks else {
            return Ok(());
        };
        let phase = if state.epoch >= self.total_epochs() {
            Phase::Done
        } else if state.epoch < self.stage1_epochs() {
            Phase::Stage1
        } else {
            Phase::Stage2
        };
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                arch: *state.params.arch(),
                phase,
                epoch: state.epoch,
                stage2_epoch: state.epoch.saturating_sub(self.stage1_epochs()),
                step: state.step,
                stage_step: state.stage_step,
                seed: self.cfg.seed,
                trigger: state.trigger,
                bank_generation: state.bank.as_ref().map(|b| b.generation),
            },
            params: state.params.clone(),
            velocity: state.optimizer.velocity.clone(),
        };
        let bytes = ckpt.encode();
        let dir = s.root.join("checkpoints");
        fs::write(dir.join(format!("epoch_{:04}.ckpt", state.epoch)), &bytes)?;
        fs::write(dir.join("last.ckpt"), &bytes)?;
        Ok(())
    }

    /// Restores a state from a checkpoint written by this trainer's output tree.
    pub fn load_state(&self, ckpt_path: &Path) -> Result<TrainState> {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let h = &ckpt.header;
        if h.seed != self.cfg.seed || h.arch != self.cfg.arch() {
            return Err(Error::Checkpoint("checkpoint was written by a different configuration".into()));
        }
        let bank = match (h.bank_generation, &self.sinks) {
            (None, _) => None,
            (Some(g), Some(s)) => {
                let bank = MemoryBank::load(&s.bank_dir(g))?;
                if bank.generation != g {
                    return Err(Error::Checkpoint(format!("bank generation {} != {g}", bank.generation)));
                }
                Some(bank)
            }
            (Some(_), None) => return Err(Error::Checkpoint("bank restore needs an output directory".into())),
        };
        Ok(TrainState {
            params: ckpt.params,
            optimizer: Sgd {
                head_lr_scale: self.cfg.optim.head_lr_scale,
                momentum: self.cfg.optim.momentum,
                velocity: ckpt.velocity,
            },
            epoch: h.epoch,
            step: h.step,
            stage_step: h.stage_step,
            trigger: h.trigger,
            bank,
        })
    }

    fn stage1_epoch(&mut self, state: &mut TrainState) -> Result<()> {
        let cfg = self.cfg;
        let e = state.epoch;
        let seed = cfg.seed;
        let arch = cfg.arch();
        let crop = cfg.geometry.crop_size;
        let bl = cfg.optim.batch_labeled;
        let bu = cfg.optim.batch_unlabeled;
        let lambda = cfg.loss.lambda_bcc;
        let mask = cfg.components.mask_mode().filter(|_| cfg.geometry.n_pairs > 0 && lambda > 0.0);
        let total = (cfg.schedule.stage1_epochs * self.stage1_steps_per_epoch()) as u64;

        let mut labeled: Vec<usize> = (0..self.splits.labeled.len()).collect();
        labeled.shuffle(&mut stream_rng(seed, Stream::Batches, key(e, ORDER_SLOT)));
        let mut unlabeled: Vec<usize> = (0..self.splits.unlabeled.len()).collect();
        unlabeled.shuffle(&mut stream_rng(seed, Stream::Photometric, key(e, ORDER_SLOT)));

        for (s, batch) in labeled.chunks(bl).enumerate() {
            let params = &state.params;
            let sup_parts = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let sample = &self.splits.labeled[i];
                    let mut rng = stream_rng(seed, Stream::Batches, key(e, (s * bl + j) as u64));
                    let (img, lab) = augment_labeled(&sample.image, &sample.label, crop, &cfg.augment.labeled, &mut rng)?;
                    let win = Window::full(crop, crop);
                    let conf = forward(params, &img, &win)?;
                    let (lv, mut g) = ce_loss(&conf, &lab)?;
                    g.data_mut().iter_mut().for_each(|v| *v /= batch.len() as f64);
                    Ok((lv.value, backward(params, &img, &win, &g)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (sup_sum, mut grads) = sum_in_order(sup_parts, Tensors::zeros(&arch));
            let loss_sup = sup_sum / batch.len() as f64;

            let mut loss_bcc = 0.0;
            if let (Some(mode), false) = (mask, unlabeled.is_empty()) {
                let (bcc_sum, bcc_grads) = self.bcc_batch(params, e, s, bu, &unlabeled, mode)?;
                loss_bcc = bcc_sum / bu as f64;
                grads.add_scaled(&bcc_grads, lambda / bu as f64);
            }

            let lr = poly_lr(cfg.optim.lr_stage1, state.stage_step, total, cfg.optim.poly_power);
            let rec = StepRecord {
                step: state.step,
                epoch: e,
                stage: 1,
                lr,
                loss_sup,
                loss_bcc,
                loss_dpm: 0.0,
                loss_total: loss_sup + lambda * loss_bcc,
            };
            self.record_step(rec)?;
            state.optimizer.step(&mut state.params, &grads, lr, state.step)?;
            state.step += 1;
            state.stage_step += 1;
        }
        Ok(())
    }

    /// Summed consistency loss and unscaled gradient over the step's unlabeled images.
    fn bcc_batch(
        &self,
        params: &ModelParams,
        e: usize,
        s: usize,
        bu: usize,
        order: &[usize],
        mode: MaskMode,
    ) -> Result<(f64, GradientSet)> {
        let cfg = self.cfg;
        let crop = cfg.geometry.crop_size;
        let parts = (0..bu)
            .into_par_iter()
            .map(|j| {
                let slot = (s * bu + j) as u64;
                let u = &self.splits.unlabeled[order[slot as usize % order.len()]];
                let img = augment_unlabeled(
                    &u.image,
                    &cfg.augment.unlabeled,
                    &mut stream_rng(cfg.seed, Stream::Photometric, key(e, slot)),
                );
                let geo_epoch = if cfg.geometry.resample_each_epoch { e } else { 0 };
                let group = sample_patch_group(
                    u.id,
                    img.height(),
                    img.width(),
                    crop,
                    cfg.geometry.min_overlap(),
                    &mut stream_rng(cfg.seed, Stream::Geometry, key(geo_epoch, u.id.0 as u64)),
                )?;
                let pairs = enumerate_pairs(&group, cfg.geometry.n_pairs)?;
                let confs = [
                    forward(params, &img, &group.windows[0])?,
                    forward(params, &img, &group.windows[1])?,
                    forward(params, &img, &group.windows[2])?,
                    forward(params, &img, &group.windows[3])?,
                ];
                let (lv, dconf) = bcc_group_loss(&confs, &pairs, mode)?;
                let mut g = Tensors::zeros(params.arch());
                for (w, d) in group.windows.iter().zip(&dconf) {
                    g.add_assign(&backward(params, &img, w, d)?);
                }
                Ok((lv.value, g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(sum_in_order(parts, Tensors::zeros(params.arch())))
    }

    fn stage2_epoch(&mut self, state: &mut TrainState) -> Result<()> {
        let cfg = self.cfg;
        let e = state.epoch;
        let seed = cfg.seed;
        let arch = cfg.arch();
        let crop = cfg.geometry.crop_size;
        let b = cfg.optim.batch_stage2;
        let lambda = cfg.loss.lambda_dpm;
        let total = (cfg.schedule.stage2_max_epochs * self.stage2_steps_per_epoch()) as u64;

        let unlabeled: BTreeMap<ImageId, &Image> = self.splits.unlabeled.iter().map(|u| (u.id, &u.image)).collect();
        // (image, target, is_pseudo)
        let mut items: Vec<(&Image, &LabelMap, bool)> =
            self.splits.labeled.iter().map(|s| (&s.image, &s.label, false)).collect();
        if let Some(bank) = &state.bank {
            for (id, entry) in &bank.entries {
                let img = unlabeled
                    .get(id)
                    .ok_or_else(|| Error::Precondition(format!("bank entry {id} is not an unlabeled image")))?;
                items.push((img, &entry.pseudo, true));
            }
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Batches, key(e, ORDER_SLOT)));

        for (s, batch) in order.chunks(b).enumerate() {
            let params = &state.params;
            let n = batch.len() as f64;
            let parts = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let (image, target, pseudo) = items[i];
                    let mut rng = stream_rng(seed, Stream::Batches, key(e, (s * b + j) as u64));
                    let (img, lab) = augment_labeled(image, target, crop, &cfg.augment.labeled, &mut rng)?;
                    let win = Window::full(crop, crop);
                    let conf = forward(params, &img, &win)?;
                    let (lv, mut g) = ce_loss(&conf, &lab)?;
                    let w = if pseudo { lambda } else { 1.0 };
                    g.data_mut().iter_mut().for_each(|v| *v *= w / n);
                    Ok(((lv.value, pseudo), backward(params, &img, &win, &g)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Tensors::zeros(&arch);
            let (mut sup, mut dpm, mut n_sup, mut n_dpm) = (0.0, 0.0, 0usize, 0usize);
            for ((v, pseudo), g) in parts {
                grads.add_assign(&g);
                if pseudo {
                    dpm += v;
                    n_dpm += 1;
                } else {
                    sup += v;
                    n_sup += 1;
                }
            }
            let lr = poly_lr(cfg.optim.lr_stage2(), state.stage_step, total, cfg.optim.poly_power);
            let rec = StepRecord {
                step: state.step,
                epoch: e,
                stage: 2,
                lr,
                loss_sup: if n_sup > 0 { sup / n_sup as f64 } else { 0.0 },
                loss_bcc: 0.0,
                loss_dpm: if n_dpm > 0 { dpm / n_dpm as f64 } else { 0.0 },
                loss_total: (sup + lambda * dpm) / n,
            };
            self.record_step(rec)?;
            state.optimizer.step(&mut state.params, &grads, lr, state.step)?;
            state.step += 1;
            state.stage_step += 1;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint; logs under the output directory are appended to.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs have completed overall.
    pub halt_after_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub stage1_val_miou: Option<f64>,
    pub final_val_miou: Option<f64>,
    pub bank_generation: Option<u64>,
    pub test: EvalReport,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// `None` when the run halted before the schedule finished.
    pub report: Option<RunReport>,
    pub state: TrainState,
    pub log: TrainLog,
}

/// Generates data, trains both stages, evaluates on the test split and writes
/// `config.resolved`, `report.json`, `metrics.csv`, `steps.csv`,
/// `dpm_log.jsonl`, `checkpoints/`, `bank/` and `data/` under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved"), cfg.to_toml())?;
    let ds = generate_synthetic(&cfg.data.synth(), cfg.seed)?;
    let splits = partition(&ds, &cfg.protocol())?;
    write_dataset_dir(&out.join("data"), &ds, &splits.assignment())?;

    let (mut trainer, mut state) = match &opts.resume {
        Some(path) => {
            let t = Trainer::resuming(cfg, &splits, out)?;
            let s = t.load_state(path)?;
            (t, s)
        }
        None => (Trainer::with_output(cfg, &splits, out)?, TrainState::init(cfg)?),
    };
    let finished = trainer.run(&mut state, opts.halt_after_epoch)?;
    if !finished {
        return Ok(RunOutcome {
            report: None,
            state,
            log: trainer.log,
        });
    }
    let test = evaluate_params(&state.params, &splits.test, splits.num_classes)?;
    trainer.record_eval("test", state.epoch, test.clone())?;
    let vals = metrics_val_column(&out.join("metrics.csv"))?;
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        epochs: state.epoch,
        steps: state.step,
        stage1_val_miou: vals.get(cfg.schedule.stage1_epochs.wrapping_sub(1)).copied(),
        final_val_miou: vals.last().copied(),
        bank_generation: state.bank.as_ref().map(|b| b.generation),
        test,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(out.join("report.json"), json + "\n")?;
    Ok(RunOutcome {
        report: Some(report),
        state,
        log: trainer.log,
    })
}

/// Validation mIoU per epoch, read back from the metrics file so resumed runs see the full history.
fn metrics_val_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut cols = l.split(',');
            (cols.next() == Some("val")).then(|| cols.nth(1)?.parse().ok()).flatten()
        })
        .collect())
}
