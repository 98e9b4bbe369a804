//! Subcommand interface wiring the pipeline end to end: data generation,
//! graph construction, partitioning, batch planning, training, evaluation.
//!
//! Stages hand off through files in a run directory (`--out`), so each one
//! is reproducible and testable in isolation. Every command takes the same
//! configuration flags (`--config`, repeated `--set key=value`, `--seed`) and
//! echoes the effective configuration into the run directory. Errors are
//! reported on stderr as a single machine-readable line naming the
//! originating module.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::batching::{load_plan, make_plan, plan_diagnostics};
use crate::config::RunConfig;
use crate::dataio::{drop_labels, generate_synthetic, load_dataset, save_dataset, save_labels, DataSet, SyntheticSpec};
use crate::engine::{evaluate, train_parallel, train_sequential, TrainConfig};
use crate::error::Error;
use crate::knngraph::{build_knn, load_graph, save_graph, GraphConfig};
use crate::model::ModelState;
use crate::partitioner::{cut_weight, load_partition, partition, permute, Partitioning};
use crate::util::{derive_seed, streams};

/// Fixed artifact names inside a run directory. Feature and label file names
/// come from the `data.*` configuration keys instead.
pub mod files {
    pub const GRAPH: &str = "graph.gcs1";
    pub const PARTITION: &str = "partition.txt";
    pub const PLAN: &str = "plan.txt";
    pub const DIAGNOSTICS: &str = "diagnostics.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const CHECKPOINTS: &str = "ckpt";
    pub const LATEST: &str = "latest";
    pub const CONFIG_ECHO: &str = "config.echo";
}

#[derive(Debug, Parser)]
#[command(name = "gssl", version, about = "Graph-based semi-supervised training pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file (`key = value` lines); defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a single configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Override the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate synthetic clustered data and subsample labels.
    Gen(Common),
    /// Build the kNN affinity graph over the feature file.
    Graph(Common),
    /// Partition the graph into balanced blocks.
    Partition {
        #[command(flatten)]
        common: Common,
        /// Import an external assignment file instead of partitioning.
        #[arg(long, value_name = "FILE")]
        import: Option<PathBuf>,
        /// Also write graph/data/partition copies reindexed so blocks are
        /// contiguous.
        #[arg(long)]
        emit_permuted: bool,
    },
    /// Group blocks into meta-batches and write plan diagnostics.
    Plan(Common),
    /// Train the classifier over the planned meta-batches.
    Train(Common),
    /// Print the accuracy of a trained checkpoint on the evaluation labels.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: the run's latest).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

fn io_err(context: &str, source: std::io::Error) -> Error {
    Error::Io {
        context: context.to_string(),
        source,
    }
}

/// Resolve a configured file name against the run directory.
fn resolve(out: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| io_err("creating run directory", e))?;
    let path = out.join(files::CONFIG_ECHO);
    std::fs::write(&path, cfg.echo()).map_err(|e| io_err("writing config echo", e))?;
    Ok(())
}

fn load_train_dataset(cfg: &RunConfig, out: &Path) -> Result<DataSet, Error> {
    let features = resolve(out, &cfg.data.features);
    let labels = resolve(out, &cfg.data.labels);
    Ok(load_dataset(&features, Some(&labels))?)
}

/// The evaluation dataset: the same features with the full label file when
/// it exists (transductive evaluation), otherwise the training labels.
fn load_eval_dataset(cfg: &RunConfig, out: &Path) -> Result<Option<DataSet>, Error> {
    let features = resolve(out, &cfg.data.features);
    let full = resolve(out, &cfg.data.labels_full);
    if full.exists() {
        Ok(Some(load_dataset(&features, Some(&full))?))
    } else {
        Ok(None)
    }
}

fn load_run_partition(cfg: &RunConfig, out: &Path, n: usize) -> Result<Partitioning, Error> {
    let blocks = cfg.effective_blocks(n);
    Ok(load_partition(&out.join(files::PARTITION), n, blocks)?)
}

fn cmd_gen(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    echo_config(&cfg, &common.out)?;
    let spec = SyntheticSpec {
        n: cfg.gen.n,
        d: cfg.gen.d,
        num_classes: cfg.gen.classes,
        clusters_per_class: cfg.gen.clusters_per_class,
        noise_sigma: cfg.gen.noise_sigma,
        seed: derive_seed(cfg.seed, streams::DATA_GEN, &[]),
    };
    let full = generate_synthetic(&spec)?;
    let dropped = drop_labels(&full, cfg.gen.label_ratio, derive_seed(cfg.seed, streams::LABEL_DROP, &[]))?;
    let features = resolve(&common.out, &cfg.data.features);
    let labels = resolve(&common.out, &cfg.data.labels);
    let labels_full = resolve(&common.out, &cfg.data.labels_full);
    save_dataset(&dropped, &features, Some(&labels))?;
    save_labels(&full, &labels_full)?;
    let labeled = dropped.num_labeled();
    info!(
        "generated {} points (d={}, C={}), kept {labeled} labels ({:.1}%)",
        cfg.gen.n,
        cfg.gen.d,
        cfg.gen.classes,
        100.0 * labeled as f64 / cfg.gen.n as f64
    );
    Ok(())
}

fn cmd_graph(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    echo_config(&cfg, &common.out)?;
    let ds = load_train_dataset(&cfg, &common.out)?;
    let gcfg = GraphConfig {
        k_nn: cfg.graph.k_nn,
        sigma: cfg.graph.sigma,
        distance_exponent: cfg.graph.distance_exponent,
    };
    let g = build_knn(&ds, &gcfg)?;
    save_graph(&g, &common.out.join(files::GRAPH))?;
    info!(
        "built kNN graph: {} nodes, {} undirected edges",
        g.n(),
        g.nnz() / 2
    );
    Ok(())
}

fn cmd_partition(
    common: &Common,
    import: Option<&Path>,
    emit_permuted: bool,
) -> Result<(), Error> {
    let cfg = load_config(common)?;
    echo_config(&cfg, &common.out)?;
    let g = load_graph(&common.out.join(files::GRAPH))?;
    let blocks = cfg.effective_blocks(g.n());
    let p = match import {
        Some(path) => load_partition(path, g.n(), blocks)?,
        None => partition(
            &g,
            blocks,
            cfg.partition.eps,
            derive_seed(cfg.seed, streams::PARTITION, &[]),
        )?,
    };
    p.save(&common.out.join(files::PARTITION))?;
    let cut = cut_weight(&g, &p)?;
    info!(
        "partitioned {} nodes into {blocks} blocks (max size {}), cut weight {cut:.3}",
        g.n(),
        p.max_block_size()
    );
    if emit_permuted {
        let ds = load_train_dataset(&cfg, &common.out)?;
        let (pg, pds, pp) = permute(&g, &ds, &p)?;
        save_graph(&pg, &common.out.join("graph_permuted.gcs1"))?;
        save_dataset(
            &pds,
            &common.out.join("features_permuted.gss1"),
            Some(&common.out.join("labels_permuted.gsl1")),
        )?;
        pp.save(&common.out.join("partition_permuted.txt"))?;
        info!("wrote permuted graph, dataset, and partition");
    }
    Ok(())
}

fn cmd_plan(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    echo_config(&cfg, &common.out)?;
    let g = load_graph(&common.out.join(files::GRAPH))?;
    let p = load_run_partition(&cfg, &common.out, g.n())?;
    let plan = make_plan(
        &p,
        cfg.plan.block_size,
        cfg.plan.blocks_per_meta,
        derive_seed(cfg.seed, streams::PLAN, &[]),
    )?;
    plan.save(&common.out.join(files::PLAN))?;
    // Diagnostics prefer the full labels so the entropy column reflects the
    // true class mix of each batch.
    let ds = match load_eval_dataset(&cfg, &common.out)? {
        Some(full) => full,
        None => load_train_dataset(&cfg, &common.out)?,
    };
    let report = plan_diagnostics(&g, &ds, &plan);
    report.write_csv(&common.out.join(files::DIAGNOSTICS))?;
    info!(
        "planned {} meta-batches of {} blocks; mean block connectivity {:.3}, mean meta connectivity {:.3}",
        plan.num_meta_batches(),
        cfg.plan.blocks_per_meta,
        report.block_connectivity_mean,
        report.meta_connectivity_mean
    );
    Ok(())
}

fn model_dims(cfg: &RunConfig, ds: &DataSet) -> Vec<usize> {
    let mut dims = Vec::with_capacity(cfg.model.hidden.len() + 2);
    dims.push(ds.d());
    dims.extend_from_slice(&cfg.model.hidden);
    dims.push(ds.num_classes() as usize);
    dims
}

fn cmd_train(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    echo_config(&cfg, &common.out)?;
    let ds = load_train_dataset(&cfg, &common.out)?;
    let eval_ds = load_eval_dataset(&cfg, &common.out)?;
    let g = load_graph(&common.out.join(files::GRAPH))?;
    let p = load_run_partition(&cfg, &common.out, g.n())?;
    let plan = load_plan(&common.out.join(files::PLAN), &p)?;
    let model = ModelState::new(
        &model_dims(&cfg, &ds),
        cfg.model.dropout,
        derive_seed(cfg.seed, streams::INIT, &[]),
    )?;
    let tcfg = TrainConfig {
        epochs: cfg.train.epochs,
        base_lr: cfg.train.base_lr,
        workers: cfg.train.workers,
        lr_reset_epoch: cfg.train.lr_reset_epoch,
        loss: cfg.loss,
        plan_block_size: cfg.plan.block_size,
        plan_blocks_per_meta: cfg.plan.blocks_per_meta,
        eval_every: cfg.train.eval_every,
        global_seed: cfg.seed,
        metrics_path: Some(common.out.join(files::METRICS)),
        checkpoint_dir: Some(common.out.join(files::CHECKPOINTS)),
        checkpoint_every: cfg.train.checkpoint_every,
    };
    let outcome = if tcfg.workers == 1 {
        train_sequential(&ds, &g, &plan, eval_ds.as_ref(), model, &tcfg)?
    } else {
        train_parallel(&ds, &g, &plan, eval_ds.as_ref(), model, &tcfg)?
    };
    let last = outcome.metrics.last();
    info!(
        "training done: {} epochs, final loss {}, final val_acc {}",
        cfg.train.epochs,
        last.map(|r| r.loss.total).unwrap_or(f64::NAN),
        last.and_then(|r| r.val_acc).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = common.out.join(files::CHECKPOINTS);
            let marker = dir.join(files::LATEST);
            let name = std::fs::read_to_string(&marker)
                .map_err(|e| io_err(&format!("reading {}", marker.display()), e))?;
            dir.join(name.trim())
        }
    };
    let model = ModelState::load_checkpoint(&ckpt_path)?;
    let ds = match load_eval_dataset(&cfg, &common.out)? {
        Some(full) => full,
        None => load_train_dataset(&cfg, &common.out)?,
    };
    let acc = evaluate(&model, &ds)?;
    info!("checkpoint {}: accuracy {acc:.4}", ckpt_path.display());
    println!("{acc}");
    Ok(())
}

/// Run one parsed command line.
pub fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::Gen(common) => cmd_gen(common),
        Cmd::Graph(common) => cmd_graph(common),
        Cmd::Partition {
            common,
            import,
            emit_permuted,
        } => cmd_partition(common, import.as_deref(), *emit_permuted),
        Cmd::Plan(common) => cmd_plan(common),
        Cmd::Train(common) => cmd_train(common),
        Cmd::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()),
    }
}

/// Single-line machine-readable error: `error module=<mod> message="..."`.
/// Module errors interpolate their own source chains, so the top-level
/// Display is the complete story.
pub fn format_error(err: &Error) -> String {
    let clean = err.to_string().replace(['\n', '\r'], " ").replace('"', "'");
    format!("error module={} message=\"{}\"", err.module(), clean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_line_is_single_line_and_tagged() {
        let err = Error::Io {
            context: "broken \"thing\"\nwith newline".into(),
            source: std::io::Error::other("no"),
        };
        let line = format_error(&err);
        assert!(line.starts_with("error module=cli message=\""));
        assert!(!line.contains('\n'));
        assert!(!line[line.find("message=").unwrap() + 9..].trim_end_matches('"').contains('"'));
    }

    #[test]
    fn resolve_honors_absolute_paths() {
        let out = Path::new("/tmp/run");
        assert_eq!(resolve(out, "features.gss1"), out.join("features.gss1"));
        assert_eq!(resolve(out, "/data/x.gss1"), PathBuf::from("/data/x.gss1"));
    }
}
