//! Sequential and barrier-synchronized parallel training loops, the
//! learning-rate schedule, evaluation, and metrics logging.
//!
//! Each iteration visits one meta-batch `M_r` together with a randomly paired
//! partner `M_s` and takes an AdaGrad step on the concatenated batch. With
//! `workers = k`, `k` consecutive iterations form one super-iteration: the
//! workers compute their batch gradients against a frozen parameter snapshot,
//! the gradients are averaged in slot order, and a single step is applied.
//! `workers = 1` reproduces the sequential loop bit for bit. All randomness
//! derives from the global seed, so (seeds, workers) fully determine the
//! metrics stream and the final parameters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use thiserror::Error;

use crate::batching::{pair_schedule, MetaBatchPlan};
use crate::dataio::DataSet;
use crate::knngraph::AffinityGraph;
use crate::model::{
    adagrad_step, batch_gradient, forward, gather_features, ForwardMode, Gradient, LossBreakdown,
    LossConfig, ModelError, ModelState,
};
use crate::util::{derive_seed, streams};

/// Rows per forward chunk during evaluation.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("plan mismatch: {0}")]
    Plan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {detail}; training aborted (last checkpoint: {})",
            last_checkpoint.as_deref().unwrap_or("none"))]
    NonFinite {
        detail: String,
        last_checkpoint: Option<String>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Training hyperparameters and run plumbing. The plan fields describe the
/// meta-batch plan the loop is given and are cross-checked against it.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub workers: usize,
    pub lr_reset_epoch: usize,
    pub loss: LossConfig,
    pub plan_block_size: usize,
    pub plan_blocks_per_meta: usize,
    /// Emit a metrics record every this many iterations (0 = only at epoch
    /// boundaries).
    pub eval_every: usize,
    pub global_seed: u64,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (the final epoch always).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.001,
            workers: 1,
            lr_reset_epoch: 10,
            loss: LossConfig::default(),
            plan_block_size: 128,
            plan_blocks_per_meta: 8,
            eval_every: 0,
            global_seed: 0,
            metrics_path: None,
            checkpoint_dir: None,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(EngineError::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if self.workers < 1 {
            return Err(EngineError::Config("workers must be at least 1".into()));
        }
        if self.lr_reset_epoch < 1 {
            return Err(EngineError::Config("lr_reset_epoch must be at least 1".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(EngineError::Config("checkpoint_every must be at least 1".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One row of the metrics stream. `val_acc` is present only when an
/// evaluation set was supplied; `samples_per_sec` is cumulative per-worker
/// throughput in batch points.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iter: usize,
    pub wall_ms: u64,
    pub loss: LossBreakdown,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub workers: usize,
    pub samples_per_sec: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,iter,wall_ms,loss,loss_sup,loss_graph,loss_ent,loss_l2,val_acc,lr,workers";

/// Format one metrics row in the CSV column order.
pub fn metrics_csv_row(r: &MetricsRecord) -> String {
    let val = match r.val_acc {
        Some(a) => format!("{a}"),
        None => "NaN".to_string(),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.iter,
        r.wall_ms,
        r.loss.total,
        r.loss.supervised,
        r.loss.graph,
        r.loss.entropy,
        r.loss.l2,
        val,
        r.lr,
        r.workers
    )
}

/// Trained parameters plus the full metrics stream of the run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub metrics: Vec<MetricsRecord>,
}

/// Effective learning rate: `base_lr * workers` before the reset epoch,
/// `base_lr` from then on.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.lr_reset_epoch {
        cfg.base_lr * cfg.workers as f64
    } else {
        cfg.base_lr
    }
}

/// Average gradients in slot order (fixed reduction order).
pub fn average_gradients(grads: &[Gradient]) -> Gradient {
    assert!(!grads.is_empty(), "nothing to average");
    let mut sum = grads[0].clone();
    for g in &grads[1..] {
        for (acc, x) in sum.d_w.iter_mut().zip(&g.d_w) {
            *acc += x;
        }
        for (acc, x) in sum.d_b.iter_mut().zip(&g.d_b) {
            *acc += x;
        }
    }
    let inv = 1.0 / grads.len() as f64;
    for acc in &mut sum.d_w {
        acc.mapv_inplace(|v| v * inv);
    }
    for acc in &mut sum.d_b {
        acc.mapv_inplace(|v| v * inv);
    }
    sum
}

fn average_breakdowns(parts: &[LossBreakdown]) -> LossBreakdown {
    let inv = 1.0 / parts.len() as f64;
    let mut out = LossBreakdown {
        total: 0.0,
        supervised: 0.0,
        graph: 0.0,
        entropy: 0.0,
        l2: 0.0,
    };
    for p in parts {
        out.total += p.total;
        out.supervised += p.supervised;
        out.graph += p.graph;
        out.entropy += p.entropy;
        out.l2 += p.l2;
    }
    out.total *= inv;
    out.supervised *= inv;
    out.graph *= inv;
    out.entropy *= inv;
    out.l2 *= inv;
    out
}

#[cfg(feature = "openblas")]
extern "C" {
    fn openblas_set_num_threads(num: std::os::raw::c_int);
}

/// Keep BLAS single-threaded: parallelism belongs to the worker threads, and
/// a fixed thread count keeps reductions bitwise reproducible.
fn pin_blas_threads() {
    #[cfg(feature = "openblas")]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe { openblas_set_num_threads(1) });
    }
}

/// Fraction of argmax-correct predictions over the labeled points of
/// `ds_eval`, with argmax ties broken toward the lowest class index.
pub fn evaluate(model: &ModelState, ds_eval: &DataSet) -> Result<f64, EngineError> {
    pin_blas_threads();
    if ds_eval.d() != model.input_dim() {
        return Err(EngineError::Config(format!(
            "eval set has {} features, model expects {}",
            ds_eval.d(),
            model.input_dim()
        )));
    }
    if ds_eval.num_classes() as usize != model.num_classes() {
        return Err(EngineError::Config(format!(
            "eval set has {} classes, model outputs {}",
            ds_eval.num_classes(),
            model.num_classes()
        )));
    }
    let labeled: Vec<u32> = (0..ds_eval.n())
        .filter(|&i| ds_eval.label_of(i).is_some())
        .map(|i| i as u32)
        .collect();
    if labeled.is_empty() {
        return Err(EngineError::Config("evaluation set has no labeled points".into()));
    }
    let mut correct = 0usize;
    for chunk in labeled.chunks(EVAL_CHUNK) {
        let x = gather_features(ds_eval, chunk)?;
        let p = forward(model, &x, ForwardMode::Eval)?;
        for (row, &i) in chunk.iter().enumerate() {
            let mut best = 0usize;
            let mut best_p = p[[row, 0]];
            for c in 1..model.num_classes() {
                if p[[row, c]] > best_p {
                    best_p = p[[row, c]];
                    best = c;
                }
            }
            if best == ds_eval.label_of(i as usize).unwrap() as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / labeled.len() as f64)
}

struct RunState<'a> {
    cfg: &'a TrainConfig,
    start: Instant,
    points_done: u64,
    metrics: Vec<MetricsRecord>,
    csv: Option<BufWriter<File>>,
    csv_path: Option<PathBuf>,
    last_checkpoint: Option<String>,
}

impl<'a> RunState<'a> {
    fn new(cfg: &'a TrainConfig) -> Result<Self, EngineError> {
        let (csv, csv_path) = match &cfg.metrics_path {
            Some(path) => {
                let file = File::create(path).map_err(|e| EngineError::io(path, e))?;
                let mut w = BufWriter::new(file);
                writeln!(w, "{METRICS_HEADER}").map_err(|e| EngineError::io(path, e))?;
                (Some(w), Some(path.clone()))
            }
            None => (None, None),
        };
        Ok(RunState {
            cfg,
            start: Instant::now(),
            points_done: 0,
            metrics: Vec::new(),
            csv,
            csv_path,
            last_checkpoint: None,
        })
    }

    fn record(
        &mut self,
        epoch: usize,
        iter: usize,
        loss: LossBreakdown,
        val_acc: Option<f64>,
        lr: f64,
    ) -> Result<(), EngineError> {
        let wall_ms = self.start.elapsed().as_millis() as u64;
        let secs = (wall_ms as f64 / 1000.0).max(1e-9);
        let rec = MetricsRecord {
            epoch,
            iter,
            wall_ms,
            loss,
            val_acc,
            lr,
            workers: self.cfg.workers,
            samples_per_sec: self.points_done as f64 / secs / self.cfg.workers as f64,
        };
        if let Some(w) = &mut self.csv {
            let path = self.csv_path.as_ref().unwrap();
            writeln!(w, "{}", metrics_csv_row(&rec)).map_err(|e| EngineError::io(path, e))?;
        }
        self.metrics.push(rec);
        Ok(())
    }

    fn flush(&mut self) -> Result<(), EngineError> {
        if let Some(w) = &mut self.csv {
            let path = self.csv_path.as_ref().unwrap();
            w.flush().map_err(|e| EngineError::io(path, e))?;
        }
        Ok(())
    }

    fn maybe_checkpoint(&mut self, model: &ModelState, epoch_done: usize) -> Result<(), EngineError> {
        let Some(dir) = &self.cfg.checkpoint_dir else {
            return Ok(());
        };
        let last = epoch_done == self.cfg.epochs;
        if !epoch_done.is_multiple_of(self.cfg.checkpoint_every) && !last {
            return Ok(());
        }
        std::fs::create_dir_all(dir).map_err(|e| EngineError::io(dir, e))?;
        let name = format!("ckpt_epoch_{epoch_done}.gmd1");
        let path = dir.join(&name);
        model.save_checkpoint(&path)?;
        let marker = dir.join("latest");
        std::fs::write(&marker, format!("{name}\n")).map_err(|e| EngineError::io(&marker, e))?;
        self.last_checkpoint = Some(path.display().to_string());
        Ok(())
    }
}

fn check_plan(
    ds: &DataSet,
    g: &AffinityGraph,
    plan: &MetaBatchPlan,
    model: &ModelState,
    cfg: &TrainConfig,
) -> Result<(), EngineError> {
    cfg.validate()?;
    if ds.n() != g.n() {
        return Err(EngineError::Plan(format!(
            "dataset has {} points, graph {} nodes",
            ds.n(),
            g.n()
        )));
    }
    let planned: usize = (0..plan.num_meta_batches()).map(|j| plan.meta_nodes(j).len()).sum();
    if planned != ds.n() {
        return Err(EngineError::Plan(format!(
            "plan covers {planned} nodes, dataset has {}",
            ds.n()
        )));
    }
    if plan.block_size() != cfg.plan_block_size || plan.blocks_per_meta() != cfg.plan_blocks_per_meta {
        return Err(EngineError::Plan(format!(
            "plan is b={} m={}, config says b={} m={}",
            plan.block_size(),
            plan.blocks_per_meta(),
            cfg.plan_block_size,
            cfg.plan_blocks_per_meta
        )));
    }
    if model.input_dim() != ds.d() || model.num_classes() != ds.num_classes() as usize {
        return Err(EngineError::Plan(format!(
            "model is {}->{} but dataset is d={} C={}",
            model.input_dim(),
            model.num_classes(),
            ds.d(),
            ds.num_classes()
        )));
    }
    if cfg.workers > plan.num_meta_batches() {
        return Err(EngineError::Config(format!(
            "workers {} exceeds the {} meta-batches",
            cfg.workers,
            plan.num_meta_batches()
        )));
    }
    Ok(())
}

fn concat_pair(plan: &MetaBatchPlan, r: usize, s: Option<usize>) -> Vec<u32> {
    let mut batch = plan.meta_nodes(r).to_vec();
    if let Some(s) = s {
        batch.extend_from_slice(plan.meta_nodes(s));
    }
    batch
}

/// Slot results of one super-iteration, in slot order.
type SlotResult = Result<(Gradient, LossBreakdown), ModelError>;

fn run_train(
    ds: &DataSet,
    g: &AffinityGraph,
    plan: &MetaBatchPlan,
    eval_ds: Option<&DataSet>,
    mut model: ModelState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EngineError> {
    pin_blas_threads();
    check_plan(ds, g, plan, &model, cfg)?;
    let mut run = RunState::new(cfg)?;
    let num_meta = plan.num_meta_batches();
    let mut iter = 0usize;
    let mut last_part: Option<LossBreakdown> = None;
    info!(
        "training {} epochs over {num_meta} meta-batches, {} worker(s)",
        cfg.epochs, cfg.workers
    );
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let epoch_seed = derive_seed(cfg.global_seed, streams::EPOCH, &[epoch as u64]);
        let schedule = pair_schedule(plan, epoch_seed);
        for group in schedule.chunks(cfg.workers) {
            // Each slot owns one (M_r, M_s) pair and a dropout seed keyed by
            // its global iteration index, so the schedule is identical for
            // every worker count.
            let slots: Vec<(Vec<u32>, u64)> = group
                .iter()
                .enumerate()
                .map(|(k, &(r, s))| {
                    let seed = derive_seed(cfg.global_seed, streams::DROPOUT, &[(iter + k) as u64]);
                    (concat_pair(plan, r, s), seed)
                })
                .collect();
            let results: Vec<SlotResult> = if cfg.workers == 1 || slots.len() == 1 {
                slots
                    .iter()
                    .map(|(batch, seed)| batch_gradient(&model, &cfg.loss, g, ds, batch, *seed))
                    .collect()
            } else {
                // Workers read a frozen snapshot of the parameters; the
                // reduction below is the only writer.
                let snapshot = &model;
                std::thread::scope(|scope| {
                    let handles: Vec<_> = slots
                        .iter()
                        .map(|(batch, seed)| {
                            scope.spawn(move || {
                                batch_gradient(snapshot, &cfg.loss, g, ds, batch, *seed)
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                })
            };
            let mut grads = Vec::with_capacity(results.len());
            let mut parts = Vec::with_capacity(results.len());
            for res in results {
                let (grad, part) = res?;
                grads.push(grad);
                parts.push(part);
            }
            let avg = average_gradients(&grads);
            let part = average_breakdowns(&parts);
            last_part = Some(part);
            if !part.total.is_finite() {
                return Err(EngineError::NonFinite {
                    detail: format!("loss {} at iteration {iter}", part.total),
                    last_checkpoint: run.last_checkpoint.clone(),
                });
            }
            match adagrad_step(&mut model, &avg, lr) {
                Ok(()) => {}
                Err(ModelError::NonFiniteGradient { param })
                | Err(ModelError::NonFiniteParam { param }) => {
                    return Err(EngineError::NonFinite {
                        detail: format!("gradient update for {param} at iteration {iter}"),
                        last_checkpoint: run.last_checkpoint.clone(),
                    });
                }
                Err(e) => return Err(e.into()),
            }
            for (batch, _) in &slots {
                run.points_done += batch.len() as u64;
            }
            let prev_iter = iter;
            iter += group.len();
            if cfg.eval_every > 0 && iter / cfg.eval_every > prev_iter / cfg.eval_every {
                let val = eval_ds.map(|e| evaluate(&model, e)).transpose()?;
                run.record(epoch, iter, part, val, lr)?;
            }
        }
        // Epoch boundary: ensure a record at this iteration, with val_acc
        // when an evaluation set is available.
        let part = last_part.expect("at least one super-iteration per epoch");
        let boundary_done = run
            .metrics
            .last()
            .is_some_and(|r| r.iter == iter && (r.val_acc.is_some() || eval_ds.is_none()));
        if !boundary_done {
            let val = eval_ds.map(|e| evaluate(&model, e)).transpose()?;
            run.record(epoch, iter, part, val, lr)?;
        }
        run.flush()?;
        run.maybe_checkpoint(&model, epoch + 1)?;
        info!(
            "epoch {} done: iter {iter}, loss {:.6}",
            epoch + 1,
            run.metrics.last().map(|r| r.loss.total).unwrap_or(f64::NAN)
        );
    }
    run.flush()?;
    Ok(TrainOutcome {
        model,
        metrics: run.metrics,
    })
}

/// Sequential training: one meta-batch pair per AdaGrad step.
pub fn train_sequential(
    ds: &DataSet,
    g: &AffinityGraph,
    plan: &MetaBatchPlan,
    eval_ds: Option<&DataSet>,
    model: ModelState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EngineError> {
    let cfg = TrainConfig {
        workers: 1,
        ..cfg.clone()
    };
    run_train(ds, g, plan, eval_ds, model, &cfg)
}

/// Barrier-synchronized parallel training: `cfg.workers` meta-batch pairs per
/// super-iteration, gradients averaged in slot order, one AdaGrad step.
pub fn train_parallel(
    ds: &DataSet,
    g: &AffinityGraph,
    plan: &MetaBatchPlan,
    eval_ds: Option<&DataSet>,
    model: ModelState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EngineError> {
    run_train(ds, g, plan, eval_ds, model, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::make_plan;
    use crate::dataio::{drop_labels, generate_synthetic, SyntheticSpec};
    use crate::knngraph::{build_knn, GraphConfig};
    use crate::partitioner::partition;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;
    use tempfile::tempdir;

    struct Fixture {
        ds: DataSet,
        ds_full: DataSet,
        g: AffinityGraph,
        plan: MetaBatchPlan,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let spec = SyntheticSpec {
                n: 240,
                d: 6,
                num_classes: 3,
                clusters_per_class: 4,
                noise_sigma: 0.2,
                seed: 99,
            };
            let ds_full = generate_synthetic(&spec).unwrap();
            let ds = drop_labels(&ds_full, 0.3, 101).unwrap();
            let g = build_knn(&ds, &GraphConfig::default()).unwrap();
            let p = partition(&g, 8, 0.05, 31).unwrap();
            let plan = make_plan(&p, 30, 2, 17).unwrap();
            Fixture { ds, ds_full, g, plan }
        })
    }

    fn quick_cfg(epochs: usize, workers: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            base_lr: 0.01,
            workers,
            lr_reset_epoch: 10,
            loss: LossConfig {
                gamma: 0.1,
                kappa: 0.05,
                lambda: 1e-4,
            },
            plan_block_size: 30,
            plan_blocks_per_meta: 2,
            eval_every: 0,
            global_seed: 5,
            metrics_path: None,
            checkpoint_dir: None,
            checkpoint_every: 1,
        }
    }

    fn param_bits(m: &ModelState) -> Vec<u64> {
        let mut bits = Vec::new();
        for l in 0..m.num_layers() {
            bits.extend(m.weights(l).iter().map(|v| v.to_bits()));
            bits.extend(m.biases(l).iter().map(|v| v.to_bits()));
            bits.extend(m.acc_weights(l).iter().map(|v| v.to_bits()));
            bits.extend(m.acc_biases(l).iter().map(|v| v.to_bits()));
        }
        bits
    }

    #[test]
    fn lr_schedule_cases() {
        let mut cfg = quick_cfg(1, 8);
        cfg.base_lr = 0.001;
        assert!((lr_schedule(&cfg, 0) - 0.008).abs() < 1e-15);
        assert!((lr_schedule(&cfg, 9) - 0.008).abs() < 1e-15);
        assert!((lr_schedule(&cfg, 10) - 0.001).abs() < 1e-18);
        cfg.workers = 1;
        for e in 0..20 {
            assert!((lr_schedule(&cfg, e) - 0.001).abs() < 1e-18);
        }
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let f = fixture();
        let model = ModelState::new(&[6, 8, 3], 0.2, 3).unwrap();
        let before = param_bits(&model);
        let out = train_sequential(&f.ds, &f.g, &f.plan, None, model, &quick_cfg(0, 1)).unwrap();
        assert_eq!(param_bits(&out.model), before);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let f = fixture();
        let cfg = quick_cfg(2, 1);
        let run = || {
            let model = ModelState::new(&[6, 8, 3], 0.2, 3).unwrap();
            train_sequential(&f.ds, &f.g, &f.plan, Some(&f.ds_full), model, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(param_bits(&a.model), param_bits(&b.model));
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.iter, y.iter);
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.val_acc, y.val_acc);
            assert_eq!(x.lr, y.lr);
        }
    }

    #[test]
    fn parallel_one_worker_matches_sequential_bitwise() {
        let f = fixture();
        let cfg = quick_cfg(2, 1);
        let seq = train_sequential(
            &f.ds,
            &f.g,
            &f.plan,
            None,
            ModelState::new(&[6, 8, 3], 0.2, 3).unwrap(),
            &cfg,
        )
        .unwrap();
        let par = train_parallel(
            &f.ds,
            &f.g,
            &f.plan,
            None,
            ModelState::new(&[6, 8, 3], 0.2, 3).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(param_bits(&seq.model), param_bits(&par.model));
    }

    #[test]
    fn super_iterations_match_serial_average_oracle() {
        // Replay one epoch of two-slot super-iterations serially: compute
        // both slot gradients against the same snapshot, average, take one
        // AdaGrad step. The parallel run must match within 1e-12 relative.
        let f = fixture();
        let mut cfg = quick_cfg(1, 2);
        cfg.loss = LossConfig::default();
        let model = ModelState::new(&[6, 8, 3], 0.2, 3).unwrap();
        let epoch_seed = derive_seed(cfg.global_seed, streams::EPOCH, &[0]);
        let schedule = pair_schedule(&f.plan, epoch_seed);
        let mut oracle = model.clone();
        for (chunk_idx, group) in schedule.chunks(2).enumerate() {
            let mut grads = Vec::new();
            for (k, &(r, s)) in group.iter().enumerate() {
                let seed = derive_seed(
                    cfg.global_seed,
                    streams::DROPOUT,
                    &[(chunk_idx * 2 + k) as u64],
                );
                let batch = concat_pair(&f.plan, r, s);
                let (grad, _) =
                    batch_gradient(&oracle, &cfg.loss, &f.g, &f.ds, &batch, seed).unwrap();
                grads.push(grad);
            }
            let avg = average_gradients(&grads);
            adagrad_step(&mut oracle, &avg, lr_schedule(&cfg, 0)).unwrap();
        }
        let out = train_parallel(&f.ds, &f.g, &f.plan, None, model, &cfg).unwrap();
        let mut max_rel = 0.0f64;
        for l in 0..out.model.num_layers() {
            for (a, b) in out.model.weights(l).iter().zip(oracle.weights(l)) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-12, "parallel vs serial-average oracle: {max_rel}");
    }

    #[test]
    fn average_gradients_arithmetic_mean() {
        let mk = |a: f64, b: f64| {
            let d_w = vec![Array2::from_shape_vec((1, 2), vec![a, b]).unwrap()];
            let d_b = vec![Array1::zeros(2)];
            Gradient { d_w, d_b }
        };
        let avg = average_gradients(&[mk(1.0, 3.0), mk(3.0, 5.0)]);
        assert_eq!(avg.d_w[0][[0, 0]], 2.0);
        assert_eq!(avg.d_w[0][[0, 1]], 4.0);
    }

    #[test]
    fn supervised_only_loss_decreases() {
        let f = fixture();
        let mut cfg = quick_cfg(5, 1);
        cfg.loss = LossConfig {
            gamma: 0.0,
            kappa: 0.0,
            lambda: 0.0,
        };
        let model = ModelState::new(&[6, 8, 3], 0.0, 3).unwrap();
        let out = train_sequential(&f.ds_full, &f.g, &f.plan, None, model, &cfg).unwrap();
        let first = out.metrics.first().unwrap().loss.total;
        let last = out.metrics.last().unwrap().loss.total;
        assert!(
            last < first,
            "supervised loss should trend down: first {first}, last {last}"
        );
    }

    #[test]
    fn evaluate_closed_cases() {
        // Identity-style model: feature row = 3 * one_hot(label).
        let c = 4usize;
        let n = 40usize;
        let mut feats = Array2::<f32>::zeros((n, c));
        let mut labels = vec![-1i32; n];
        for i in 0..n {
            let class = i % c;
            feats[[i, class]] = 3.0;
            labels[i] = class as i32;
        }
        let ds = DataSet::new(feats, labels, c as u32).unwrap();
        let mut model = ModelState::new(&[c, c], 0.0, 0).unwrap();
        for i in 0..model.param_count() {
            model.set_param(i, 0.0);
        }
        for k in 0..c {
            // W[k,k] = 1.
            model.set_param(k * c + k, 1.0);
        }
        assert_eq!(evaluate(&model, &ds).unwrap(), 1.0);

        // Uniform predictions: ties broken toward class 0.
        let zero = {
            let mut m = ModelState::new(&[c, c], 0.0, 0).unwrap();
            for i in 0..m.param_count() {
                m.set_param(i, 0.0);
            }
            m
        };
        let acc = evaluate(&zero, &ds).unwrap();
        assert!((acc - 0.25).abs() < 1e-12, "uniform ties -> class 0: {acc}");
    }

    #[test]
    fn evaluate_random_model_near_chance() {
        let n = 1000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feats = Array2::from_shape_fn((n, 6), |_| rng.random_range(-1.0..1.0f32));
        let labels: Vec<i32> = (0..n).map(|i| (i % 2) as i32).collect();
        let ds = DataSet::new(feats, labels, 2).unwrap();
        let model = ModelState::new(&[6, 8, 2], 0.0, 7).unwrap();
        let acc = evaluate(&model, &ds).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "random model accuracy {acc}");
    }

    #[test]
    fn evaluate_requires_labels() {
        let feats = Array2::<f32>::zeros((5, 2));
        let ds = DataSet::new(feats, vec![-1; 5], 2).unwrap();
        let model = ModelState::new(&[2, 2], 0.0, 0).unwrap();
        assert!(matches!(
            evaluate(&model, &ds),
            Err(EngineError::Config(_))
        ));
    }

    #[test]
    fn metrics_csv_written_with_checkpoints() {
        let f = fixture();
        let dir = tempdir().unwrap();
        let mut cfg = quick_cfg(2, 1);
        cfg.eval_every = 3;
        cfg.metrics_path = Some(dir.path().join("metrics.csv"));
        cfg.checkpoint_dir = Some(dir.path().join("ckpt"));
        let model = ModelState::new(&[6, 8, 3], 0.2, 3).unwrap();
        let out =
            train_sequential(&f.ds, &f.g, &f.plan, Some(&f.ds_full), model, &cfg).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let mut prev_wall = 0u64;
        let mut rows = 0;
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 11, "row {line}");
            let wall: u64 = cols[2].parse().unwrap();
            assert!(wall >= prev_wall, "wall_ms must be nondecreasing");
            prev_wall = wall;
            rows += 1;
        }
        assert_eq!(rows, out.metrics.len());
        // Checkpoints: one per epoch plus the latest marker.
        let ckpt = dir.path().join("ckpt");
        assert!(ckpt.join("ckpt_epoch_1.gmd1").exists());
        assert!(ckpt.join("ckpt_epoch_2.gmd1").exists());
        let latest = std::fs::read_to_string(ckpt.join("latest")).unwrap();
        assert_eq!(latest.trim(), "ckpt_epoch_2.gmd1");
        let reloaded = ModelState::load_checkpoint(&ckpt.join("ckpt_epoch_2.gmd1")).unwrap();
        assert_eq!(param_bits(&reloaded), param_bits(&out.model));
        // Throughput is accounted per record.
        assert!(out.metrics.iter().all(|r| r.samples_per_sec >= 0.0));
    }

    #[test]
    fn metrics_without_eval_set_reports_nan() {
        let f = fixture();
        let dir = tempdir().unwrap();
        let mut cfg = quick_cfg(1, 1);
        cfg.metrics_path = Some(dir.path().join("m.csv"));
        let model = ModelState::new(&[6, 8, 3], 0.0, 3).unwrap();
        train_sequential(&f.ds, &f.g, &f.plan, None, model, &cfg).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        let row = csv.lines().nth(1).unwrap();
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[8], "NaN");
    }

    #[test]
    fn divergent_run_aborts_with_nonfinite_error() {
        let f = fixture();
        let mut cfg = quick_cfg(3, 1);
        cfg.base_lr = 1e300;
        let model = ModelState::new(&[6, 8, 3], 0.0, 3).unwrap();
        let err = train_sequential(&f.ds, &f.g, &f.plan, None, model, &cfg).unwrap_err();
        assert!(matches!(err, EngineError::NonFinite { .. }), "got {err}");
    }

    #[test]
    fn workers_cannot_exceed_meta_batches() {
        let f = fixture();
        let cfg = quick_cfg(1, f.plan.num_meta_batches() + 1);
        let model = ModelState::new(&[6, 8, 3], 0.0, 3).unwrap();
        assert!(matches!(
            train_parallel(&f.ds, &f.g, &f.plan, None, model, &cfg),
            Err(EngineError::Config(_))
        ));
    }

    #[test]
    fn epoch_iterations_cover_every_meta_batch() {
        let f = fixture();
        for workers in [1usize, 2, 3] {
            let cfg = quick_cfg(1, workers);
            let model = ModelState::new(&[6, 8, 3], 0.0, 3).unwrap();
            let out = train_parallel(&f.ds, &f.g, &f.plan, None, model, &cfg).unwrap();
            let final_iter = out.metrics.last().unwrap().iter;
            assert_eq!(final_iter, f.plan.num_meta_batches());
        }
    }

    #[test]
    fn multi_worker_runs_are_deterministic() {
        let f = fixture();
        let cfg = quick_cfg(2, 3);
        let run = || {
            let model = ModelState::new(&[6, 8, 3], 0.2, 3).unwrap();
            train_parallel(&f.ds, &f.g, &f.plan, None, model, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(param_bits(&a.model), param_bits(&b.model));
    }

    #[test]
    fn plan_mismatch_rejected() {
        let f = fixture();
        let mut cfg = quick_cfg(1, 1);
        cfg.plan_block_size = 64;
        let model = ModelState::new(&[6, 8, 3], 0.0, 3).unwrap();
        assert!(matches!(
            train_sequential(&f.ds, &f.g, &f.plan, None, model, &cfg),
            Err(EngineError::Plan(_))
        ));
    }

}
