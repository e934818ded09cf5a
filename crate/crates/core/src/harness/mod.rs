//! Experiment orchestration: the staged-growth (s2c) and end-to-end (e2e)
//! training regimes, evaluation, and report emission.

pub mod config;
pub mod metrics;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{
    augment_batch, load_cifar10_dir, normalize_images, synth_dataset, BatchPlan, ChannelStats,
    LabeledImageSet,
};
use crate::error::{Error, Result};
use crate::graph::checkpoint::Checkpoint;
use crate::graph::forward::{backward, eval_loss_acc, forward_train};
use crate::graph::{default_channel_plan, LayerName, SeriesNetwork};
use crate::growth::{
    apply_growth, apply_growth_standard_init, check_growth_accounting, plan_growth,
    verify_preservation,
};
use crate::optim::{EmaState, LrSchedule, SchedulePhase, ScheduleKind, SgdState};
use crate::rng::SeededRng;
use crate::tensor::Element;

pub use config::{DataSource, Precision, ScheduleSelector, TrainConfig};
pub use metrics::{
    GammaReport, GammaRow, GrowthBoundary, MetricsRecord, MetricsWriter, RungFinal, StageFinal,
};

/// Fixed seed for the training-subset shuffle, shared by every run so all
/// seeds and regimes train on the same subset.
const SUBSET_SHUFFLE_SEED: u64 = 1337;
/// Fixed seed for synthetic dataset generation (the dataset is part of the
/// task definition, not of any particular run).
const SYNTH_DATA_SEED: u64 = 77;
/// Probe batches used by every inline preservation check.
pub const PRESERVATION_PROBES: usize = 16;

/// Preservation tolerance for a precision: exact in double, 1e-5 in single.
pub fn preservation_tol<E: Element>() -> f64 {
    if E::WIDTH == 8 {
        0.0
    } else {
        1e-5
    }
}

/// Prepared train/test splits plus the normalization statistics used.
pub struct DataBundle<E: Element> {
    pub train: LabeledImageSet<E>,
    pub test: LabeledImageSet<E>,
    pub stats: ChannelStats,
}

/// Load and normalize data per the config.
pub fn prepare_data<E: Element>(cfg: &TrainConfig) -> Result<DataBundle<E>> {
    let (mut train, mut test) = match cfg.data.source {
        DataSource::Cifar10 => {
            let dir = cfg.data.data_dir.as_ref().ok_or_else(|| {
                Error::config("data.data_dir is required for the cifar10 source")
            })?;
            load_cifar10_dir::<E>(Path::new(dir))?
        }
        DataSource::Synthetic => {
            let mut rng = SeededRng::new(SYNTH_DATA_SEED).derive("synth-train");
            let train = synth_dataset::<E>(
                cfg.data.synth_classes,
                cfg.data.synth_per_class,
                cfg.data.synth_image_size,
                cfg.data.synth_noise,
                &mut rng,
            )?;
            let mut rng = SeededRng::new(SYNTH_DATA_SEED).derive("synth-test");
            let test = synth_dataset::<E>(
                cfg.data.synth_classes,
                cfg.data.synth_test_per_class,
                cfg.data.synth_image_size,
                cfg.data.synth_noise,
                &mut rng,
            )?;
            (train, test)
        }
    };
    if let Some(size) = cfg.data.subset_size {
        train = train.subset(size, SUBSET_SHUFFLE_SEED);
    }
    let stats = normalize_images(&mut train, None)?;
    normalize_images(&mut test, Some(&stats))?;
    Ok(DataBundle { train, test, stats })
}

/// Eval-mode loss and accuracy over a whole set, fixed batch order.
pub fn evaluate_accuracy<E: Element>(
    net: &SeriesNetwork<E>,
    set: &LabeledImageSet<E>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = set.len();
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let mut i = 0usize;
    while i < n {
        let end = (i + batch_size).min(n);
        let indices: Vec<u32> = (i as u32..end as u32).collect();
        let (batch, labels) = set.select(&indices);
        let (loss, acc) = eval_loss_acc(net, &batch, &labels)?;
        let count = (end - i) as f64;
        loss_sum += loss * count;
        correct += acc * count;
        i = end;
    }
    Ok((loss_sum / n as f64, correct / n as f64))
}

/// Evaluate with EMA shadow parameters swapped in (and back out).
pub fn evaluate_with_ema<E: Element>(
    net: &mut SeriesNetwork<E>,
    ema: &mut EmaState<E>,
    set: &LabeledImageSet<E>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    ema.swap_in(net)?;
    let result = evaluate_accuracy(net, set, batch_size);
    ema.swap_out(net)?;
    result
}

/// Per-channel gammas and mean |gamma| for the named layers.
pub fn gamma_report<E: Element>(
    net: &SeriesNetwork<E>,
    groups: &[Vec<LayerName>],
) -> Result<GammaReport> {
    let mut layers: Vec<LayerName> = groups.iter().flatten().copied().collect();
    layers.sort();
    layers.dedup();
    let mut rows = Vec::new();
    for name in layers {
        let edge = net.edge_by_name(name).ok_or_else(|| {
            let valid: Vec<String> = net.edges().iter().map(|e| e.name.to_string()).collect();
            Error::data(format!(
                "unknown layer {name}; valid layers: {}",
                valid.join(" ")
            ))
        })?;
        let gammas: Vec<f64> = edge.bn.gamma.data().iter().map(|g| g.to_f64()).collect();
        let mean_abs = gammas.iter().map(|g| g.abs()).sum::<f64>() / gammas.len() as f64;
        rows.push(GammaRow {
            layer: name,
            gammas,
            mean_abs,
        });
    }
    Ok(GammaReport {
        rows,
        groups: groups.to_vec(),
    })
}

/// Default comparison groups: for each backbone edge 0_j the chain
/// (0_j, 1_2j, 2_4j, ...) of layers feeding the same junction, plus the
/// analogous chains rooted at each first-conv path layer of grown stages.
pub fn default_gamma_groups<E: Element>(net: &SeriesNetwork<E>) -> Vec<Vec<LayerName>> {
    let exists = |n: &LayerName| net.edge_by_name(*n).is_some();
    let chain = |mut name: LayerName| -> Vec<LayerName> {
        let mut out = vec![name];
        loop {
            let next = LayerName::new(name.stage + 1, 2 * name.ordinal);
            if !exists(&next) {
                break;
            }
            out.push(next);
            name = next;
        }
        out
    };
    let mut roots: Vec<LayerName> = net
        .edges()
        .iter()
        .map(|e| e.name)
        .filter(|n| n.stage == 0 || n.ordinal % 2 == 1)
        .collect();
    roots.sort();
    roots
        .into_iter()
        .map(chain)
        .filter(|c| c.len() >= 2 || c[0].stage == 0)
        .collect()
}

/// Everything one training run produces.
pub struct RunOutput {
    pub run_id: String,
    pub regime: &'static str,
    pub records: Vec<MetricsRecord>,
    pub rung_finals: Vec<RungFinal>,
    pub stage_finals: Vec<StageFinal>,
    pub boundaries: Vec<GrowthBoundary>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_test_acc: f64,
    pub run_dir: PathBuf,
}

struct Trainer<'a, E: Element> {
    cfg: &'a TrainConfig,
    data: &'a DataBundle<E>,
    regime: &'static str,
    run_id: String,
    run_dir: PathBuf,
    net: SeriesNetwork<E>,
    sgd: SgdState<E>,
    ema: EmaState<E>,
    schedule: LrSchedule,
    growth_rng: SeededRng,
    augment_rng: SeededRng,
    step: u64,
    stage: u32,
    epoch: u64,
    queue: VecDeque<Vec<u32>>,
    recent: VecDeque<(f64, f64)>,
    pending_boundary: Option<(u32, f64, f64, f64)>,
    writer: MetricsWriter,
    records: Vec<MetricsRecord>,
    rung_finals: Vec<RungFinal>,
    stage_finals: Vec<StageFinal>,
    boundaries: Vec<GrowthBoundary>,
    best_test_acc: f64,
    started: Instant,
}

const RECENT_WINDOW: usize = 100;

impl<'a, E: Element> Trainer<'a, E> {
    fn new(
        cfg: &'a TrainConfig,
        data: &'a DataBundle<E>,
        out_dir: &Path,
        regime: &'static str,
        net: SeriesNetwork<E>,
        growth_rng: SeededRng,
    ) -> Result<Self> {
        let run_id = format!("{regime}_seed{}", cfg.run.seed);
        let run_dir = out_dir.join(&run_id);
        std::fs::create_dir_all(&run_dir)?;
        std::fs::write(run_dir.join("resolved_config.json"), cfg.to_json_pretty())?;
        let writer = MetricsWriter::create(&run_dir.join("metrics.csv"))?;
        let sgd = SgdState::new(&net, cfg.optimizer.momentum, cfg.optimizer.weight_decay, cfg.optimizer.lr);
        let ema = EmaState::new(&net, cfg.optimizer.ema_decay);
        let schedule = LrSchedule::new(
            cfg.optimizer.schedule.into(),
            cfg.optimizer.lr,
            cfg.optimizer.stagnation_window,
            cfg.optimizer.stagnation_epsilon,
            cfg.optimizer.max_halvings,
        );
        let root = SeededRng::new(cfg.run.seed);
        Ok(Trainer {
            cfg,
            data,
            regime,
            run_id,
            run_dir,
            net,
            sgd,
            ema,
            schedule,
            growth_rng,
            augment_rng: root.derive("augment"),
            step: 0,
            stage: 0,
            epoch: 0,
            queue: VecDeque::new(),
            recent: VecDeque::new(),
            pending_boundary: None,
            writer,
            records: Vec::new(),
            rung_finals: Vec::new(),
            stage_finals: Vec::new(),
            boundaries: Vec::new(),
            best_test_acc: f64::NEG_INFINITY,
            started: Instant::now(),
        })
    }

    fn next_batch(&mut self) -> Vec<u32> {
        loop {
            if let Some(batch) = self.queue.pop_front() {
                return batch;
            }
            let plan = BatchPlan {
                batch_size: self.cfg.budget.batch_size,
                seed: self.cfg.run.seed,
                drop_last: self.cfg.data.drop_last,
            };
            let batches = crate::data::make_minibatches(self.data.train.len(), &plan, self.epoch);
            self.epoch += 1;
            self.queue.extend(batches);
        }
    }

    fn recent_loss_stats(&self) -> (f64, f64) {
        if self.recent.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.recent.len() as f64;
        let mean = self.recent.iter().map(|(l, _)| l).sum::<f64>() / n;
        let var = self
            .recent
            .iter()
            .map(|(l, _)| (l - mean) * (l - mean))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    fn windowed_train_stats(&self) -> (f64, f64) {
        if self.recent.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = self.recent.len() as f64;
        (
            self.recent.iter().map(|(l, _)| l).sum::<f64>() / n,
            self.recent.iter().map(|(_, a)| a).sum::<f64>() / n,
        )
    }

    fn train_steps(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            let indices = self.next_batch();
            let (mut images, labels) = self.data.train.select(&indices);
            if self.cfg.data.augment {
                images = augment_batch(&images, &mut self.augment_rng)?;
            }
            let cache = forward_train(&mut self.net, &images, &labels)?;
            let (loss, acc) = (cache.loss, cache.accuracy);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training loss {loss} at step {} (stage {}, lr {}, run {})",
                    self.step,
                    self.stage,
                    self.schedule.lr(),
                    self.run_id
                )));
            }
            let grads = backward(&self.net, &cache)?;
            self.sgd.lr = self.schedule.lr();
            self.sgd.step(&mut self.net, &grads)?;
            self.ema.update(&self.net)?;
            self.step += 1;
            if self.recent.len() == RECENT_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back((loss, acc));
            if let Some((stage, pre_loss, std, max_diff)) = self.pending_boundary.take() {
                self.boundaries.push(GrowthBoundary {
                    stage,
                    pre_loss,
                    post_loss: loss,
                    batch_loss_std: std,
                    preservation_max_diff: max_diff,
                });
            }
            let old_lr = self.schedule.lr();
            if self.schedule.record_loss(loss).is_some() {
                // Stagnation halving: close out the finished rung.
                self.full_eval_record(Some(old_lr), false)?;
            }
            if self.step % self.cfg.budget.eval_every == 0 {
                self.cadence_eval()?;
            }
        }
        Ok(())
    }

    /// Cheap periodic record: windowed train stats plus a full test eval.
    fn cadence_eval(&mut self) -> Result<()> {
        let (test_loss, test_acc) = evaluate_with_ema(
            &mut self.net,
            &mut self.ema,
            &self.data.test,
            self.cfg.budget.batch_size,
        )?;
        let _ = test_loss;
        let (train_loss, train_acc) = self.windowed_train_stats();
        self.push_record(train_loss, train_acc, test_acc)?;
        self.maybe_save_best(test_acc)?;
        Ok(())
    }

    /// Full train + test evaluation; records a metrics row and optionally a
    /// rung-final and/or stage-final entry.
    fn full_eval_record(&mut self, rung_lr: Option<f64>, stage_final: bool) -> Result<()> {
        let (train_loss, train_acc) = evaluate_with_ema(
            &mut self.net,
            &mut self.ema,
            &self.data.train,
            self.cfg.budget.batch_size,
        )?;
        let (_, test_acc) = evaluate_with_ema(
            &mut self.net,
            &mut self.ema,
            &self.data.test,
            self.cfg.budget.batch_size,
        )?;
        self.push_record(train_loss, train_acc, test_acc)?;
        if let Some(lr) = rung_lr {
            self.rung_finals.push(RungFinal {
                lr,
                train_loss,
                train_acc,
                test_acc,
            });
        }
        if stage_final {
            self.stage_finals.push(StageFinal {
                stage: self.stage,
                train_loss,
                train_acc,
                test_acc,
            });
        }
        self.maybe_save_best(test_acc)?;
        Ok(())
    }

    fn push_record(&mut self, train_loss: f64, train_acc: f64, test_acc: f64) -> Result<()> {
        let record = MetricsRecord {
            run_id: self.run_id.clone(),
            regime: self.regime,
            stage: self.stage,
            step: self.step,
            lr: self.schedule.lr(),
            train_loss,
            train_acc,
            test_acc,
            gap: train_acc - test_acc,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        self.writer.write(&record)?;
        self.records.push(record);
        Ok(())
    }

    fn maybe_save_best(&mut self, test_acc: f64) -> Result<()> {
        if test_acc > self.best_test_acc {
            self.best_test_acc = test_acc;
            self.checkpoint()?.save(&self.run_dir.join("best.s2c"))?;
        }
        Ok(())
    }

    fn checkpoint(&self) -> Result<Checkpoint<E>> {
        Ok(Checkpoint {
            net: self.net.clone(),
            ema: Some(self.ema.clone()),
            step: self.step,
            rng: self.growth_rng.clone(),
            norm_stats: Some(self.data.stats.clone()),
        })
    }

    /// Grow to the next stage with an inline preservation check.
    fn grow(&mut self) -> Result<()> {
        let (_, batch_std) = self.recent_loss_stats();
        let pre_loss = self.recent.back().map(|(l, _)| *l).unwrap_or(0.0);
        let plan = plan_growth(&self.net);
        let child = apply_growth(&self.net, &plan, &mut self.growth_rng)?;
        check_growth_accounting(&self.net, &child, &plan)?;
        let (_, _, h, _) = self.data.train.images.dims4()?;
        let mut probe_rng = SeededRng::new(self.cfg.run.seed).derive_indexed("probe", plan.stage as u64);
        let tol = preservation_tol::<E>();
        let report = verify_preservation(
            &self.net,
            &child,
            PRESERVATION_PROBES,
            h,
            &mut probe_rng,
            tol,
        )?;
        if !report.pass {
            return Err(Error::Preservation {
                max_abs_diff: report.max_abs_diff,
                tol,
            });
        }
        self.net = child;
        self.sgd.ensure_keys(&self.net);
        self.ema.ensure_keys(&self.net);
        self.stage = plan.stage;
        self.pending_boundary = Some((plan.stage, pre_loss, batch_std, report.max_abs_diff));
        Ok(())
    }

    fn finish(self) -> Result<RunOutput> {
        let final_path = self.run_dir.join("final.s2c");
        self.checkpoint()?.save(&final_path)?;
        metrics::write_rung_finals(&self.run_dir.join("rung_finals.csv"), &self.rung_finals)?;
        metrics::write_stage_finals(&self.run_dir.join("stage_finals.csv"), &self.stage_finals)?;
        metrics::write_growth_boundaries(
            &self.run_dir.join("growth_boundaries.csv"),
            &self.boundaries,
        )?;
        std::fs::write(self.run_dir.join("topology.txt"), self.net.describe())?;
        // Gamma report from the best checkpoint, read through the EMA
        // parameters that produced its test accuracy.
        let best_path = self.run_dir.join("best.s2c");
        if best_path.exists() {
            let mut best: Checkpoint<E> = Checkpoint::load(&best_path)?;
            if let Some(ema) = best.ema.as_mut() {
                ema.swap_in(&mut best.net)?;
            }
            let groups = default_gamma_groups(&best.net);
            let report = gamma_report(&best.net, &groups)?;
            metrics::write_gamma_csvs(
                &report,
                &self.run_dir.join("gamma_summary.csv"),
                &self.run_dir.join("gamma_channels.csv"),
            )?;
        }
        Ok(RunOutput {
            run_id: self.run_id,
            regime: self.regime,
            records: self.records,
            rung_finals: self.rung_finals,
            stage_finals: self.stage_finals,
            boundaries: self.boundaries,
            final_checkpoint: final_path,
            best_checkpoint: best_path,
            best_test_acc: self.best_test_acc,
            run_dir: self.run_dir,
        })
    }

    /// Shared final-network phase: base-lr segment then the decay ladder.
    fn final_phase(&mut self) -> Result<()> {
        self.schedule.set_phase(SchedulePhase::Final);
        self.train_steps(self.cfg.budget.steps_final_base_lr)?;
        self.full_eval_record(Some(self.schedule.lr()), true)?;
        match self.schedule.kind {
            ScheduleKind::FixedStep => {
                let rungs = self.cfg.optimizer.max_halvings.max(1);
                let per_rung = (self.cfg.budget.steps_decay_phase / rungs as u64).max(1);
                let mut remaining = self.cfg.budget.steps_decay_phase;
                for r in 0..rungs {
                    if self.schedule.halve().is_none() {
                        break;
                    }
                    let steps = if r + 1 == rungs { remaining } else { per_rung };
                    remaining = remaining.saturating_sub(steps);
                    self.train_steps(steps)?;
                    self.full_eval_record(Some(self.schedule.lr()), false)?;
                }
            }
            ScheduleKind::Stagnation => {
                self.train_steps(self.cfg.budget.steps_decay_phase)?;
                self.full_eval_record(Some(self.schedule.lr()), false)?;
            }
        }
        Ok(())
    }
}

/// Staged growth: train the plain network, grow with preservation checks,
/// repeat to stage n, then run the final-network schedule.
pub fn run_s2c<E: Element>(
    cfg: &TrainConfig,
    data: &DataBundle<E>,
    out_dir: &Path,
) -> Result<RunOutput> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.run.seed);
    let mut init_rng = root.derive("init");
    let net = SeriesNetwork::build_plain(
        data.train.image_dims().0,
        &default_channel_plan(),
        class_count(data),
        cfg.optimizer.ema_decay,
        &mut init_rng,
    )?;
    let growth_rng = root.derive("growth");
    let mut t = Trainer::new(cfg, data, out_dir, "s2c", net, growth_rng)?;
    for _ in 0..cfg.run.stages {
        t.train_steps(cfg.budget.steps_per_growth)?;
        t.full_eval_record(None, true)?;
        t.grow()?;
    }
    t.final_phase()?;
    t.finish()
}

/// End-to-end baseline: the stage-n architecture built directly with
/// standard initialization, trained on the final-network schedule only.
pub fn run_e2e<E: Element>(
    cfg: &TrainConfig,
    data: &DataBundle<E>,
    out_dir: &Path,
) -> Result<RunOutput> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.run.seed);
    let mut init_rng = root.derive("init");
    let mut net = SeriesNetwork::build_plain(
        data.train.image_dims().0,
        &default_channel_plan(),
        class_count(data),
        cfg.optimizer.ema_decay,
        &mut init_rng,
    )?;
    let mut growth_rng = root.derive("growth");
    for _ in 0..cfg.run.stages {
        let plan = plan_growth(&net);
        net = apply_growth_standard_init(&net, &plan, &mut growth_rng)?;
    }
    let mut t = Trainer::new(cfg, data, out_dir, "e2e", net, growth_rng)?;
    t.stage = cfg.run.stages;
    t.final_phase()?;
    t.finish()
}

fn class_count<E: Element>(data: &DataBundle<E>) -> usize {
    let max = data
        .train
        .labels
        .iter()
        .chain(data.test.labels.iter())
        .copied()
        .max()
        .unwrap_or(9);
    (max as usize + 1).max(2)
}

/// If both regimes' rung files exist for this seed, write the side-by-side
/// comparison table at the out_dir level.
pub fn try_write_comparison(out_dir: &Path, seed: u64) -> Result<Option<PathBuf>> {
    let s2c = out_dir.join(format!("s2c_seed{seed}")).join("rung_finals.csv");
    let e2e = out_dir.join(format!("e2e_seed{seed}")).join("rung_finals.csv");
    if !s2c.exists() || !e2e.exists() {
        return Ok(None);
    }
    let s2c_rows = metrics::read_rung_finals(&s2c)?;
    let e2e_rows = metrics::read_rung_finals(&e2e)?;
    let path = out_dir.join(format!("comparison_seed{seed}.csv"));
    metrics::write_comparison(&path, &s2c_rows, &e2e_rows)?;
    Ok(Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::forward::forward_eval;

    fn synth_cfg(stages: u32) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.run.seed = 1;
        cfg.run.stages = stages;
        cfg.data.source = DataSource::Synthetic;
        cfg.data.subset_size = None;
        cfg.data.synth_classes = 2;
        cfg.data.synth_per_class = 64;
        cfg.data.synth_test_per_class = 16;
        cfg.data.synth_image_size = 16;
        cfg.data.synth_noise = 0.0;
        cfg.budget.batch_size = 32;
        cfg.budget.steps_per_growth = 30;
        cfg.budget.steps_final_base_lr = 200;
        cfg.budget.steps_decay_phase = 40;
        cfg.budget.eval_every = 100;
        cfg
    }

    #[test]
    fn untrained_net_is_at_chance_level() {
        let mut cfg = synth_cfg(0);
        cfg.data.synth_classes = 10;
        cfg.data.synth_per_class = 120;
        cfg.data.synth_noise = 0.3;
        let data = prepare_data::<f32>(&cfg).unwrap();
        let mut rng = SeededRng::new(5);
        let net = SeriesNetwork::<f32>::build_plain(3, &default_channel_plan(), 10, 0.9999, &mut rng)
            .unwrap();
        let (_, acc) = evaluate_accuracy(&net, &data.train, 64).unwrap();
        assert!(data.train.len() >= 1000);
        assert!((acc - 0.1).abs() <= 0.05, "chance-level accuracy, got {acc}");
    }

    #[test]
    fn evaluation_is_pure() {
        let cfg = synth_cfg(0);
        let data = prepare_data::<f32>(&cfg).unwrap();
        let mut rng = SeededRng::new(6);
        let net =
            SeriesNetwork::<f32>::build_plain(3, &default_channel_plan(), 2, 0.9999, &mut rng)
                .unwrap();
        let a = evaluate_accuracy(&net, &data.test, 32).unwrap();
        let b = evaluate_accuracy(&net, &data.test, 32).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        let (idx, labels) = {
            let indices: Vec<u32> = (0..8).collect();
            data.test.select(&indices)
        };
        let l1 = forward_eval(&net, &idx).unwrap();
        let l2 = forward_eval(&net, &idx).unwrap();
        assert!(l1.bit_eq(&l2));
        drop(labels);
    }

    #[test]
    fn zero_noise_synth_reaches_full_train_accuracy() {
        // Separable-by-construction data: the plain network must hit
        // train accuracy 1.0 within 200 steps.
        let cfg = synth_cfg(0);
        let dir = tempfile::tempdir().unwrap();
        let data = prepare_data::<f32>(&cfg).unwrap();
        let out = run_s2c(&cfg, &data, dir.path()).unwrap();
        assert_eq!(out.stage_finals.len(), 1);
        assert_eq!(out.stage_finals[0].stage, 0);
        assert_eq!(out.stage_finals[0].train_acc, 1.0);
        assert!(out.boundaries.is_empty(), "stages=0 must not grow");
    }

    #[test]
    fn two_stage_synth_run_grows_and_preserves() {
        let mut cfg = synth_cfg(2);
        cfg.budget.steps_per_growth = 40;
        cfg.budget.steps_final_base_lr = 60;
        cfg.budget.steps_decay_phase = 20;
        let dir = tempfile::tempdir().unwrap();
        let data = prepare_data::<f32>(&cfg).unwrap();
        let out = run_s2c(&cfg, &data, dir.path()).unwrap();
        assert_eq!(out.boundaries.len(), 2);
        for b in &out.boundaries {
            assert!(b.preservation_max_diff <= 1e-5);
            assert!(
                (b.post_loss - b.pre_loss).abs() <= (10.0 * b.batch_loss_std).max(1e-6),
                "loss cliff at stage {}: {} -> {} (std {})",
                b.stage,
                b.pre_loss,
                b.post_loss,
                b.batch_loss_std
            );
        }
        assert_eq!(out.stage_finals.len(), 3);
        assert!(out.final_checkpoint.exists());
        assert!(out.best_checkpoint.exists());
        // Metrics invariants.
        for r in &out.records {
            assert!(r.train_acc >= 0.0 && r.train_acc <= 1.0);
            assert!(r.test_acc >= 0.0 && r.test_acc <= 1.0);
            assert_eq!(r.gap, r.train_acc - r.test_acc);
        }
        // Rung finals follow the halving ladder.
        let lrs: Vec<f64> = out.rung_finals.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![0.1, 0.05, 0.025, 0.0125, 0.00625]);
    }

    #[test]
    fn e2e_matches_s2c_key_set() {
        let mut cfg = synth_cfg(2);
        cfg.budget.steps_per_growth = 5;
        cfg.budget.steps_final_base_lr = 5;
        cfg.budget.steps_decay_phase = 4;
        cfg.budget.eval_every = 1000;
        let dir = tempfile::tempdir().unwrap();
        let data = prepare_data::<f32>(&cfg).unwrap();
        let s2c = run_s2c(&cfg, &data, dir.path()).unwrap();
        let e2e = run_e2e(&cfg, &data, dir.path()).unwrap();
        let a: Checkpoint<f32> = Checkpoint::load(&s2c.final_checkpoint).unwrap();
        let b: Checkpoint<f32> = Checkpoint::load(&e2e.final_checkpoint).unwrap();
        assert_eq!(a.net.trainable_keys(), b.net.trainable_keys());
        let cmp = try_write_comparison(dir.path(), cfg.run.seed).unwrap();
        assert!(cmp.is_some());
        let text = std::fs::read_to_string(cmp.unwrap()).unwrap();
        assert!(text.starts_with("lr,e2e_train,e2e_test,e2e_gap,s2c_train,s2c_test,s2c_gap"));
        assert_eq!(text.lines().count(), 6, "5 rungs + header:\n{text}");
    }

    #[test]
    fn gamma_report_hand_values() {
        let mut rng = SeededRng::new(8);
        let mut net =
            SeriesNetwork::<f64>::build_plain(3, &default_channel_plan(), 10, 0.9999, &mut rng)
                .unwrap();
        let name: LayerName = "0_2".parse().unwrap();
        for g in net
            .param_mut(&crate::graph::ParamKey::Gamma(name))
            .unwrap()
            .data_mut()
        {
            *g = 2.0;
        }
        let report = gamma_report(&net, &[vec![name]]).unwrap();
        assert_eq!(report.rows[0].mean_abs, 2.0);
        // Mixed signs: mean |gamma| of {-3, 3} is 3.
        let g = net
            .param_mut(&crate::graph::ParamKey::Gamma(name))
            .unwrap()
            .data_mut();
        for (i, v) in g.iter_mut().enumerate() {
            *v = if i % 2 == 0 { -3.0 } else { 3.0 };
        }
        let report = gamma_report(&net, &[vec![name]]).unwrap();
        assert_eq!(report.rows[0].mean_abs, 3.0);
        // Unknown layer name lists valid layers.
        let missing: LayerName = "9_9".parse().unwrap();
        let err = gamma_report(&net, &[vec![missing]]).unwrap_err();
        assert!(err.to_string().contains("0_1"), "{err}");
    }
}
