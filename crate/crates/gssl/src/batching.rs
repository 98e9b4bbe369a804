//! Meta-batch construction over partition blocks, the per-epoch pairing
//! schedule, and connectivity / label-entropy diagnostics.
//!
//! A meta-batch groups `m` partition blocks chosen by a seeded shuffle, so it
//! keeps every within-block graph edge while its label histogram approaches
//! the global one (a mixture of blocks). The pairing schedule assigns each
//! meta-batch a random partner per epoch for cross-batch regularization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::DataSet;
use crate::knngraph::AffinityGraph;
use crate::partitioner::Partitioning;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("invalid batching configuration: {0}")]
    Config(String),
    #[error("invalid meta-batch plan: {0}")]
    Invalid(String),
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl BatchError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        BatchError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Grouping of partition blocks into meta-batches.
///
/// Invariants, enforced at construction: every block id below `num_blocks`
/// belongs to exactly one meta-batch; every meta-batch holds exactly
/// `blocks_per_meta` blocks except possibly the last; node lists are the
/// concatenation of the member blocks' nodes, sorted ascending, so every node
/// appears in exactly one meta-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatchPlan {
    block_size: usize,
    blocks_per_meta: usize,
    num_blocks: usize,
    /// Node ids of each partition block, ascending.
    blocks: Vec<Vec<u32>>,
    /// Member block ids of each meta-batch, in grouping order.
    meta_blocks: Vec<Vec<u32>>,
    /// Node ids of each meta-batch, ascending.
    meta_nodes: Vec<Vec<u32>>,
    seed: u64,
}

impl MetaBatchPlan {
    fn new(
        p: &Partitioning,
        block_size: usize,
        blocks_per_meta: usize,
        meta_blocks: Vec<Vec<u32>>,
        seed: u64,
    ) -> Result<Self, BatchError> {
        let num_blocks = p.num_blocks();
        let m = blocks_per_meta;
        if m == 0 {
            return Err(BatchError::Config("blocks_per_meta must be at least 1".into()));
        }
        if m > num_blocks {
            return Err(BatchError::Config(format!(
                "blocks_per_meta {m} exceeds the partition's {num_blocks} blocks"
            )));
        }
        let mut seen = vec![false; num_blocks];
        for (j, blocks) in meta_blocks.iter().enumerate() {
            if blocks.is_empty() {
                return Err(BatchError::Invalid(format!("meta-batch {j} is empty")));
            }
            let expect_full = j + 1 < meta_blocks.len();
            if (expect_full && blocks.len() != m) || blocks.len() > m {
                return Err(BatchError::Invalid(format!(
                    "meta-batch {j} has {} blocks, expected {m}",
                    blocks.len()
                )));
            }
            for &b in blocks {
                if b as usize >= num_blocks {
                    return Err(BatchError::Invalid(format!(
                        "meta-batch {j} references block {b}, only {num_blocks} blocks"
                    )));
                }
                if seen[b as usize] {
                    return Err(BatchError::Invalid(format!(
                        "block {b} appears in more than one meta-batch"
                    )));
                }
                seen[b as usize] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(BatchError::Invalid(format!(
                "block {missing} belongs to no meta-batch"
            )));
        }
        if meta_blocks.len() > 1 && meta_blocks.last().is_some_and(|last| last.len() < m) {
            log::warn!(
                "last meta-batch has {} of {m} blocks",
                meta_blocks.last().map_or(0, Vec::len)
            );
        }
        let blocks: Vec<Vec<u32>> = (0..num_blocks).map(|b| p.block_nodes(b).to_vec()).collect();
        let meta_nodes: Vec<Vec<u32>> = meta_blocks
            .iter()
            .map(|ids| {
                let mut nodes: Vec<u32> = ids
                    .iter()
                    .flat_map(|&b| blocks[b as usize].iter().copied())
                    .collect();
                nodes.sort_unstable();
                nodes
            })
            .collect();
        Ok(MetaBatchPlan {
            block_size,
            blocks_per_meta,
            num_blocks,
            blocks,
            meta_blocks,
            meta_nodes,
            seed,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks_per_meta(&self) -> usize {
        self.blocks_per_meta
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn num_meta_batches(&self) -> usize {
        self.meta_blocks.len()
    }

    /// Nodes of partition block `b`, ascending.
    pub fn block_nodes(&self, b: usize) -> &[u32] {
        &self.blocks[b]
    }

    /// Member block ids of meta-batch `j`.
    pub fn meta_blocks(&self, j: usize) -> &[u32] {
        &self.meta_blocks[j]
    }

    /// Nodes of meta-batch `j`, ascending.
    pub fn meta_nodes(&self, j: usize) -> &[u32] {
        &self.meta_nodes[j]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Write the plan as structured text: header lines for `b`, `m`, and
    /// `seed`, then one line of block ids per meta-batch.
    pub fn save(&self, path: &Path) -> Result<(), BatchError> {
        let file = File::create(path).map_err(|e| BatchError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "b {}", self.block_size)?;
            writeln!(w, "m {}", self.blocks_per_meta)?;
            writeln!(w, "seed {}", self.seed)?;
            for (j, blocks) in self.meta_blocks.iter().enumerate() {
                write!(w, "meta {j}:")?;
                for &b in blocks {
                    write!(w, " {b}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        })();
        res.map_err(|e| BatchError::io(path, e))
    }
}

/// Group the partitioning's blocks into meta-batches of `m` blocks by a
/// seeded shuffle. Deterministic in `seed`; the last meta-batch may be
/// smaller when `m` does not divide the block count.
pub fn make_plan(
    p: &Partitioning,
    b: usize,
    m: usize,
    seed: u64,
) -> Result<MetaBatchPlan, BatchError> {
    if m == 0 {
        return Err(BatchError::Config("blocks_per_meta must be at least 1".into()));
    }
    if m > p.num_blocks() {
        return Err(BatchError::Config(format!(
            "blocks_per_meta {m} exceeds the partition's {} blocks",
            p.num_blocks()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = (0..p.num_blocks() as u32).collect();
    ids.shuffle(&mut rng);
    let meta_blocks: Vec<Vec<u32>> = ids.chunks(m).map(<[u32]>::to_vec).collect();
    MetaBatchPlan::new(p, b, m, meta_blocks, seed)
}

/// Load a plan written by [`MetaBatchPlan::save`], resolving block node
/// lists against `p` and re-validating all invariants.
pub fn load_plan(path: &Path, p: &Partitioning) -> Result<MetaBatchPlan, BatchError> {
    let file = File::open(path).map_err(|e| BatchError::io(path, e))?;
    let r = BufReader::new(file);
    let parse = |detail: String| BatchError::Parse {
        path: path.display().to_string(),
        detail,
    };
    let mut b: Option<usize> = None;
    let mut m: Option<usize> = None;
    let mut seed: Option<u64> = None;
    let mut meta_blocks: Vec<Vec<u32>> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| BatchError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(rest) = t.strip_prefix("b ") {
            b = Some(rest.trim().parse().map_err(|_| {
                parse(format!("line {lineno}: bad block size {rest:?}"))
            })?);
        } else if let Some(rest) = t.strip_prefix("m ") {
            m = Some(rest.trim().parse().map_err(|_| {
                parse(format!("line {lineno}: bad blocks_per_meta {rest:?}"))
            })?);
        } else if let Some(rest) = t.strip_prefix("seed ") {
            seed = Some(rest.trim().parse().map_err(|_| {
                parse(format!("line {lineno}: bad seed {rest:?}"))
            })?);
        } else if let Some(rest) = t.strip_prefix("meta ") {
            let (idx, ids) = rest
                .split_once(':')
                .ok_or_else(|| parse(format!("line {lineno}: missing ':' in meta line")))?;
            let idx: usize = idx.trim().parse().map_err(|_| {
                parse(format!("line {lineno}: bad meta-batch index {:?}", idx.trim()))
            })?;
            if idx != meta_blocks.len() {
                return Err(parse(format!(
                    "line {lineno}: meta-batch {idx} out of order, expected {}",
                    meta_blocks.len()
                )));
            }
            let ids = ids
                .split_whitespace()
                .map(|s| {
                    s.parse::<u32>()
                        .map_err(|_| parse(format!("line {lineno}: bad block id {s:?}")))
                })
                .collect::<Result<Vec<u32>, _>>()?;
            meta_blocks.push(ids);
        } else {
            return Err(parse(format!("line {lineno}: unrecognized line {t:?}")));
        }
    }
    let b = b.ok_or_else(|| parse("missing 'b' header".into()))?;
    let m = m.ok_or_else(|| parse("missing 'm' header".into()))?;
    let seed = seed.ok_or_else(|| parse("missing 'seed' header".into()))?;
    MetaBatchPlan::new(p, b, m, meta_blocks, seed).map_err(|e| match e {
        BatchError::Invalid(d) | BatchError::Config(d) => parse(d),
        other => other,
    })
}

/// Per-epoch regularization pairing: one iteration per meta-batch `r`, in
/// shuffled order, each with a uniformly drawn partner `s != r`.
/// Deterministic in `epoch_seed`. With a single meta-batch the schedule
/// degenerates to self-only regularization (`s` absent) with a warning.
pub fn pair_schedule(plan: &MetaBatchPlan, epoch_seed: u64) -> Vec<(usize, Option<usize>)> {
    let num = plan.num_meta_batches();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    if num == 1 {
        log::warn!("single meta-batch: no cross-batch regularization partner available");
        return vec![(0, None)];
    }
    let mut order: Vec<usize> = (0..num).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|r| {
            let mut s = rng.random_range(0..num - 1);
            if s >= r {
                s += 1;
            }
            (r, Some(s))
        })
        .collect()
}

/// Within-batch connectivity: the fraction of batch members' neighbors that
/// fall inside the batch, `sum_i |C_i| / sum_i |N_i|` over `i` in the batch.
/// Isolated nodes are omitted from both sums; a batch with only isolated
/// nodes (or an empty batch) scores 0.
pub fn connectivity(g: &AffinityGraph, batch: &[u32]) -> f64 {
    let mut member = vec![false; g.n()];
    for &i in batch {
        debug_assert!(!member[i as usize], "duplicate node {i} in batch");
        member[i as usize] = true;
    }
    let mut inside = 0u64;
    let mut total = 0u64;
    for &i in batch {
        let (nbrs, _) = g.neighbors(i as usize);
        total += nbrs.len() as u64;
        inside += nbrs.iter().filter(|&&u| member[u as usize]).count() as u64;
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

/// Shannon entropy (nats) of the label histogram over the labeled nodes of
/// the batch. The flag is false — and the entropy 0 — when the batch has no
/// labeled nodes.
pub fn label_entropy(ds: &DataSet, batch: &[u32]) -> (f64, bool) {
    let mut counts = vec![0u64; ds.num_classes() as usize];
    let mut labeled = 0u64;
    for &i in batch {
        if let Some(c) = ds.label_of(i as usize) {
            counts[c as usize] += 1;
            labeled += 1;
        }
    }
    if labeled == 0 {
        return (0.0, false);
    }
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / labeled as f64;
            h -= p * p.ln();
        }
    }
    (h, true)
}

/// Connectivity and entropy statistics for every mini-block and meta-batch
/// of a plan, for histogram plotting and acceptance checks.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub block_sizes: Vec<usize>,
    pub block_connectivity: Vec<f64>,
    pub block_entropy: Vec<f64>,
    pub meta_sizes: Vec<usize>,
    pub meta_connectivity: Vec<f64>,
    pub meta_entropy: Vec<f64>,
    pub block_connectivity_mean: f64,
    pub block_connectivity_var: f64,
    pub block_entropy_mean: f64,
    pub block_entropy_var: f64,
    pub meta_connectivity_mean: f64,
    pub meta_connectivity_var: f64,
    pub meta_entropy_mean: f64,
    pub meta_entropy_var: f64,
    /// Label entropy of the whole dataset's labeled nodes.
    pub global_entropy: f64,
}

/// Population mean and variance; (0, 0) for an empty slice.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    (mean, var)
}

pub fn plan_diagnostics(g: &AffinityGraph, ds: &DataSet, plan: &MetaBatchPlan) -> DiagnosticsReport {
    let block_sizes: Vec<usize> = (0..plan.num_blocks())
        .map(|b| plan.block_nodes(b).len())
        .collect();
    let block_connectivity: Vec<f64> = (0..plan.num_blocks())
        .map(|b| connectivity(g, plan.block_nodes(b)))
        .collect();
    let block_entropy: Vec<f64> = (0..plan.num_blocks())
        .map(|b| label_entropy(ds, plan.block_nodes(b)).0)
        .collect();
    let meta_sizes: Vec<usize> = (0..plan.num_meta_batches())
        .map(|j| plan.meta_nodes(j).len())
        .collect();
    let meta_connectivity: Vec<f64> = (0..plan.num_meta_batches())
        .map(|j| connectivity(g, plan.meta_nodes(j)))
        .collect();
    let meta_entropy: Vec<f64> = (0..plan.num_meta_batches())
        .map(|j| label_entropy(ds, plan.meta_nodes(j)).0)
        .collect();
    let all: Vec<u32> = (0..ds.n() as u32).collect();
    let global_entropy = label_entropy(ds, &all).0;
    let (block_connectivity_mean, block_connectivity_var) = mean_var(&block_connectivity);
    let (block_entropy_mean, block_entropy_var) = mean_var(&block_entropy);
    let (meta_connectivity_mean, meta_connectivity_var) = mean_var(&meta_connectivity);
    let (meta_entropy_mean, meta_entropy_var) = mean_var(&meta_entropy);
    DiagnosticsReport {
        block_sizes,
        block_connectivity,
        block_entropy,
        meta_sizes,
        meta_connectivity,
        meta_entropy,
        block_connectivity_mean,
        block_connectivity_var,
        block_entropy_mean,
        block_entropy_var,
        meta_connectivity_mean,
        meta_connectivity_var,
        meta_entropy_mean,
        meta_entropy_var,
        global_entropy,
    }
}

impl DiagnosticsReport {
    /// Write one row per mini-block and meta-batch:
    /// `kind,index,size,connectivity,entropy`.
    pub fn write_csv(&self, path: &Path) -> Result<(), BatchError> {
        let file = File::create(path).map_err(|e| BatchError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "kind,index,size,connectivity,entropy")?;
            for i in 0..self.block_sizes.len() {
                writeln!(
                    w,
                    "block,{},{},{},{}",
                    i, self.block_sizes[i], self.block_connectivity[i], self.block_entropy[i]
                )?;
            }
            for j in 0..self.meta_sizes.len() {
                writeln!(
                    w,
                    "meta,{},{},{},{}",
                    j, self.meta_sizes[j], self.meta_connectivity[j], self.meta_entropy[j]
                )?;
            }
            w.flush()
        })();
        res.map_err(|e| BatchError::io(path, e))
    }
}
