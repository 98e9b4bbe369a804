//! Balanced k-way edge-cut partitioning of the affinity graph and the induced
//! block-diagonalizing permutation.
//!
//! The partitioner follows the classic multilevel scheme: coarsen by
//! heavy-edge matching until the graph is small, split the coarsest graph by
//! recursive bisection (greedy region growing from several seeded starts,
//! followed by boundary refinement), then project back through the levels,
//! repairing balance and running positive-gain refinement passes at each one.
//! General block counts use a power-of-two bisection tree with proportional
//! side targets. All tie-breaking is by lowest node index and all randomness
//! comes from the caller's seed, so results are reproducible.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::DataSet;
use crate::knngraph::AffinityGraph;
use crate::util::derive_seed;

const COARSEN_STREAM: u64 = 0x434F_4152;
const BISECT_STREAM: u64 = 0x4249_5345;

/// Stop coarsening once the graph has at most `max(4 * num_blocks, COARSEN_FLOOR)` nodes.
const COARSEN_FLOOR: usize = 200;
/// Give up on a coarsening pass that shrinks the graph by less than 2%.
const MIN_SHRINK: f64 = 0.98;
/// Maximum positive-gain refinement passes per level.
const MAX_REFINE_PASSES: usize = 8;
/// Region-growing restarts per bisection (more on small node sets, where a
/// bad start is costlier relative to the search space).
const GROW_ATTEMPTS: usize = 4;
const GROW_ATTEMPTS_SMALL: usize = 8;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid partition configuration: {0}")]
    Config(String),
    #[error("size mismatch: {0}")]
    Mismatch(String),
    #[error("invalid partitioning: {0}")]
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

impl PartitionError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PartitionError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Largest block size tolerated for `n` nodes in `num_blocks` blocks at
/// imbalance `eps`: `ceil((1 + eps) * n / num_blocks)`.
pub fn balance_cap(n: usize, num_blocks: usize, eps: f64) -> usize {
    let cap = ((1.0 + eps) * n as f64 / num_blocks as f64).ceil() as usize;
    cap.max(n.div_ceil(num_blocks))
}

/// Node-to-block assignment with the induced block-contiguous permutation.
///
/// Invariants, enforced at construction:
/// - every assignment is a block id below `num_blocks`;
/// - `permutation` is a bijection listing the nodes of block 0, then block 1,
///   ... (stable within a block), with `block_bounds` marking the boundaries;
/// - no block exceeds [`balance_cap`].
#[derive(Debug, Clone, PartialEq)]
pub struct Partitioning {
    num_blocks: usize,
    assignment: Vec<u32>,
    permutation: Vec<u32>,
    block_bounds: Vec<usize>,
    balance_eps: f64,
}

impl Partitioning {
    /// Build from a raw assignment, deriving the permutation by stable sort
    /// on block id and validating the balance cap.
    pub fn from_assignment(
        assignment: Vec<u32>,
        num_blocks: usize,
        balance_eps: f64,
    ) -> Result<Self, PartitionError> {
        let n = assignment.len();
        if n == 0 {
            return Err(PartitionError::Invalid("empty assignment".into()));
        }
        if num_blocks == 0 {
            return Err(PartitionError::Invalid("zero blocks".into()));
        }
        if balance_eps < 0.0 || !balance_eps.is_finite() {
            return Err(PartitionError::Invalid(format!(
                "balance_eps must be finite and nonnegative, got {balance_eps}"
            )));
        }
        let mut counts = vec![0usize; num_blocks];
        for (i, &b) in assignment.iter().enumerate() {
            if b as usize >= num_blocks {
                return Err(PartitionError::Invalid(format!(
                    "node {i} assigned to block {b}, only {num_blocks} blocks"
                )));
            }
            counts[b as usize] += 1;
        }
        let cap = balance_cap(n, num_blocks, balance_eps);
        if let Some((worst, &sz)) = counts.iter().enumerate().max_by_key(|&(_, &c)| c) {
            if sz > cap {
                return Err(PartitionError::Invalid(format!(
                    "block {worst} has {sz} nodes, cap is {cap}"
                )));
            }
        }
        let mut block_bounds = vec![0usize; num_blocks + 1];
        for b in 0..num_blocks {
            block_bounds[b + 1] = block_bounds[b] + counts[b];
        }
        let mut cursor = block_bounds.clone();
        let mut permutation = vec![0u32; n];
        for (i, &b) in assignment.iter().enumerate() {
            permutation[cursor[b as usize]] = i as u32;
            cursor[b as usize] += 1;
        }
        Ok(Partitioning {
            num_blocks,
            assignment,
            permutation,
            block_bounds,
            balance_eps,
        })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// `permutation[new_position] = old_node`.
    pub fn permutation(&self) -> &[u32] {
        &self.permutation
    }

    pub fn block_bounds(&self) -> &[usize] {
        &self.block_bounds
    }

    pub fn balance_eps(&self) -> f64 {
        self.balance_eps
    }

    /// Nodes of block `b`, in ascending node order.
    pub fn block_nodes(&self, b: usize) -> &[u32] {
        &self.permutation[self.block_bounds[b]..self.block_bounds[b + 1]]
    }

    pub fn block_size(&self, b: usize) -> usize {
        self.block_bounds[b + 1] - self.block_bounds[b]
    }

    pub fn max_block_size(&self) -> usize {
        (0..self.num_blocks).map(|b| self.block_size(b)).max().unwrap_or(0)
    }

    /// Write one block id per line.
    pub fn save(&self, path: &Path) -> Result<(), PartitionError> {
        let file = File::create(path).map_err(|e| PartitionError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            for &b in &self.assignment {
                writeln!(w, "{b}")?;
            }
            w.flush()
        })();
        res.map_err(|e| PartitionError::io(path, e))
    }
}

/// Load an externally produced assignment (one block id per line). The stored
/// imbalance is the one actually achieved by the file.
pub fn load_partition(path: &Path, n: usize, num_blocks: usize) -> Result<Partitioning, PartitionError> {
    let file = File::open(path).map_err(|e| PartitionError::io(path, e))?;
    let r = BufReader::new(file);
    let mut assignment = Vec::with_capacity(n);
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| PartitionError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let b: u32 = t.parse().map_err(|_| PartitionError::Parse {
            path: path.display().to_string(),
            detail: format!("line {lineno}: bad block id {t:?}"),
        })?;
        if b as usize >= num_blocks {
            return Err(PartitionError::Parse {
                path: path.display().to_string(),
                detail: format!("line {lineno}: block id {b} out of range (num_blocks = {num_blocks})"),
            });
        }
        assignment.push(b);
    }
    if assignment.len() != n {
        return Err(PartitionError::Parse {
            path: path.display().to_string(),
            detail: format!("expected {n} block ids, found {}", assignment.len()),
        });
    }
    let mut counts = vec![0usize; num_blocks];
    for &b in &assignment {
        counts[b as usize] += 1;
    }
    let max_sz = counts.iter().copied().max().unwrap_or(0);
    // Smallest eps whose cap admits this file's largest block.
    let achieved_eps = ((max_sz as f64 * num_blocks as f64 / n as f64) - 1.0).max(0.0);
    Partitioning::from_assignment(assignment, num_blocks, achieved_eps)
}

/// Total weight of edges whose endpoints lie in different blocks.
pub fn cut_weight(g: &AffinityGraph, p: &Partitioning) -> Result<f64, PartitionError> {
    if p.n() != g.n() {
        return Err(PartitionError::Mismatch(format!(
            "partitioning covers {} nodes, graph has {}",
            p.n(),
            g.n()
        )));
    }
    let assign = p.assignment();
    let mut cut = 0.0f64;
    for i in 0..g.n() {
        let (nbrs, ws) = g.neighbors(i);
        for (&j, &w) in nbrs.iter().zip(ws) {
            if (j as usize) > i && assign[i] != assign[j as usize] {
                cut += w as f64;
            }
        }
    }
    Ok(cut)
}

/// Reindex graph and dataset by the partitioning's permutation so each block
/// is contiguous; the returned partitioning has the identity permutation.
pub fn permute(
    g: &AffinityGraph,
    ds: &DataSet,
    p: &Partitioning,
) -> Result<(AffinityGraph, DataSet, Partitioning), PartitionError> {
    let n = g.n();
    if p.n() != n || ds.n() != n {
        return Err(PartitionError::Mismatch(format!(
            "graph has {n} nodes, dataset {} points, partitioning {}",
            ds.n(),
            p.n()
        )));
    }
    let perm = p.permutation();
    let mut inv = vec![0u32; n];
    for (new_i, &old_i) in perm.iter().enumerate() {
        inv[old_i as usize] = new_i as u32;
    }

    let d = ds.d();
    let mut features = ndarray::Array2::<f32>::zeros((n, d));
    let mut labels = vec![0i32; n];
    let old_features = ds.features();
    for new_i in 0..n {
        let old_i = perm[new_i] as usize;
        for j in 0..d {
            features[[new_i, j]] = old_features[[old_i, j]];
        }
        labels[new_i] = ds.labels()[old_i];
    }
    let new_ds = DataSet::new(features, labels, ds.num_classes())
        .map_err(|e| PartitionError::Invalid(format!("permuted dataset invalid: {e}")))?;

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut weights = Vec::new();
    row_ptr.push(0);
    let mut row: Vec<(u32, f32)> = Vec::new();
    for &old_i in perm {
        row.clear();
        let (nbrs, ws) = g.neighbors(old_i as usize);
        for (&old_j, &w) in nbrs.iter().zip(ws) {
            row.push((inv[old_j as usize], w));
        }
        row.sort_unstable_by_key(|&(j, _)| j);
        for &(j, w) in row.iter() {
            col_idx.push(j);
            weights.push(w);
        }
        row_ptr.push(col_idx.len());
    }
    let new_g = AffinityGraph::from_csr(n, row_ptr, col_idx, weights)
        .map_err(|e| PartitionError::Invalid(format!("permuted graph invalid: {e}")))?;

    let new_assign: Vec<u32> = perm.iter().map(|&o| p.assignment()[o as usize]).collect();
    let new_p = Partitioning::from_assignment(new_assign, p.num_blocks(), p.balance_eps())?;
    debug_assert!(new_p.permutation().iter().enumerate().all(|(i, &v)| i == v as usize));
    Ok((new_g, new_ds, new_p))
}

/// Per-run diagnostics from [`partition_with_stats`].
#[derive(Debug, Clone)]
pub struct PartitionStats {
    /// Number of coarsening levels below the input graph.
    pub coarsen_levels: usize,
    /// Cut weight after initial partitioning of the coarsest graph.
    pub initial_cut: f64,
    pub final_cut: f64,
    /// One trace per refinement phase: the cut before the phase followed by
    /// the cut after each pass. Refinement never increases the cut, so every
    /// trace is nonincreasing.
    pub refine_traces: Vec<Vec<f64>>,
}

/// Balanced k-way partition minimizing edge cut. Deterministic in `seed`.
pub fn partition(
    g: &AffinityGraph,
    num_blocks: usize,
    eps: f64,
    seed: u64,
) -> Result<Partitioning, PartitionError> {
    partition_with_stats(g, num_blocks, eps, seed).map(|(p, _)| p)
}

/// As [`partition`], also returning refinement diagnostics.
pub fn partition_with_stats(
    g: &AffinityGraph,
    num_blocks: usize,
    eps: f64,
    seed: u64,
) -> Result<(Partitioning, PartitionStats), PartitionError> {
    let n = g.n();
    if num_blocks < 2 {
        return Err(PartitionError::Config(format!(
            "need at least 2 blocks, got {num_blocks}"
        )));
    }
    if num_blocks > n {
        return Err(PartitionError::Config(format!(
            "{num_blocks} blocks exceed {n} nodes"
        )));
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(PartitionError::Config(format!(
            "eps must be finite and nonnegative, got {eps}"
        )));
    }
    let cap = balance_cap(n, num_blocks, eps);

    // Coarsening: heavy-edge matching until small enough or stalled.
    let target = COARSEN_FLOOR.max(4 * num_blocks);
    let mut levels: Vec<(WorkGraph, Vec<u32>)> = Vec::new();
    let mut cur = WorkGraph::from_affinity(g);
    while cur.n > target {
        let rng_seed = derive_seed(seed, COARSEN_STREAM, &[levels.len() as u64]);
        match coarsen_pass(&cur, cap, rng_seed) {
            None => break,
            Some((coarse, map)) => {
                if (coarse.n as f64) > MIN_SHRINK * cur.n as f64 {
                    break;
                }
                levels.push((cur, map));
                cur = coarse;
            }
        }
    }
    log::debug!(
        "coarsened {} -> {} nodes over {} levels",
        n,
        cur.n,
        levels.len()
    );

    // Initial partitioning of the coarsest graph by recursive bisection.
    let mut assign = vec![u32::MAX; cur.n];
    let all: Vec<u32> = (0..cur.n as u32).collect();
    bisect_recursive(&cur, &mut assign, all, 0, num_blocks as u32, cap, seed);
    debug_assert!(assign.iter().all(|&b| b != u32::MAX));

    let mut stats = PartitionStats {
        coarsen_levels: levels.len(),
        initial_cut: wg_cut(&cur, &assign),
        final_cut: 0.0,
        refine_traces: Vec::new(),
    };

    // Refine the coarsest assignment, then project through the levels,
    // repairing balance and refining at each one.
    let mut block_w = block_weights(&cur, &assign, num_blocks);
    repair_balance(&cur, &mut assign, &mut block_w, cap);
    stats.refine_traces.push(refine_level(&cur, &mut assign, &mut block_w, cap));
    for (fine, map) in levels.iter().rev() {
        let mut fine_assign = vec![0u32; fine.n];
        for v in 0..fine.n {
            fine_assign[v] = assign[map[v] as usize];
        }
        assign = fine_assign;
        block_w = block_weights(fine, &assign, num_blocks);
        repair_balance(fine, &mut assign, &mut block_w, cap);
        stats.refine_traces.push(refine_level(fine, &mut assign, &mut block_w, cap));
    }
    stats.final_cut = stats
        .refine_traces
        .last()
        .and_then(|t| t.last())
        .copied()
        .unwrap_or(stats.initial_cut);

    let p = Partitioning::from_assignment(assign, num_blocks, eps)?;
    log::debug!(
        "partitioned {} nodes into {} blocks: cut {:.4}, max block {}",
        n,
        num_blocks,
        stats.final_cut,
        p.max_block_size()
    );
    Ok((p, stats))
}

/// Working graph for the multilevel hierarchy: CSR with f64 weights plus
/// per-node weights (the number of original nodes a supernode contains).
struct WorkGraph {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    w: Vec<f64>,
    node_w: Vec<u32>,
}

impl WorkGraph {
    fn from_affinity(g: &AffinityGraph) -> Self {
        let n = g.n();
        let mut col = Vec::with_capacity(g.nnz());
        let mut w = Vec::with_capacity(g.nnz());
        for i in 0..n {
            let (nbrs, ws) = g.neighbors(i);
            col.extend_from_slice(nbrs);
            w.extend(ws.iter().map(|&x| x as f64));
        }
        WorkGraph {
            n,
            row_ptr: g.row_ptr().to_vec(),
            col,
            w,
            node_w: vec![1; n],
        }
    }

    fn neighbors(&self, v: usize) -> (&[u32], &[f64]) {
        let lo = self.row_ptr[v];
        let hi = self.row_ptr[v + 1];
        (&self.col[lo..hi], &self.w[lo..hi])
    }
}

/// One heavy-edge-matching pass. Returns the coarse graph and the
/// fine-to-coarse map, or None if nothing could be matched.
fn coarsen_pass(wg: &WorkGraph, cap: usize, rng_seed: u64) -> Option<(WorkGraph, Vec<u32>)> {
    let n = wg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);

    let mut coarse_id = vec![u32::MAX; n];
    let mut next_id = 0u32;
    let mut matched_pairs = 0usize;
    for &v in &order {
        let v = v as usize;
        if coarse_id[v] != u32::MAX {
            continue;
        }
        let (nbrs, ws) = wg.neighbors(v);
        let mut best: Option<u32> = None;
        let mut best_w = f64::NEG_INFINITY;
        for (&u, &w) in nbrs.iter().zip(ws) {
            if coarse_id[u as usize] != u32::MAX {
                continue;
            }
            if wg.node_w[v] as usize + wg.node_w[u as usize] as usize > cap {
                continue;
            }
            if w > best_w || (w == best_w && best.is_none_or(|b| u < b)) {
                best = Some(u);
                best_w = w;
            }
        }
        coarse_id[v] = next_id;
        if let Some(u) = best {
            coarse_id[u as usize] = next_id;
            matched_pairs += 1;
        }
        next_id += 1;
    }
    if matched_pairs == 0 {
        return None;
    }

    let cn = next_id as usize;
    let mut node_w = vec![0u32; cn];
    for v in 0..n {
        node_w[coarse_id[v] as usize] += wg.node_w[v];
    }
    // Aggregate fine edges between distinct supernodes.
    let mut edges: Vec<(u32, u32, f64)> = Vec::with_capacity(wg.col.len());
    for v in 0..n {
        let cv = coarse_id[v];
        let (nbrs, ws) = wg.neighbors(v);
        for (&u, &w) in nbrs.iter().zip(ws) {
            let cu = coarse_id[u as usize];
            if cu != cv {
                edges.push((cv, cu, w));
            }
        }
    }
    edges.sort_unstable_by_key(|&(a, b, _)| (a, b));
    let mut row_ptr = vec![0usize; cn + 1];
    let mut col = Vec::new();
    let mut w = Vec::new();
    let mut i = 0;
    while i < edges.len() {
        let (a, b, _) = edges[i];
        let mut sum = 0.0;
        while i < edges.len() && edges[i].0 == a && edges[i].1 == b {
            sum += edges[i].2;
            i += 1;
        }
        col.push(b);
        w.push(sum);
        row_ptr[a as usize + 1] = col.len();
    }
    // Rows without edges keep the previous offset.
    for r in 1..=cn {
        if row_ptr[r] == 0 {
            row_ptr[r] = row_ptr[r - 1];
        }
    }
    Some((
        WorkGraph {
            n: cn,
            row_ptr,
            col,
            w,
            node_w,
        },
        coarse_id,
    ))
}

fn block_weights(wg: &WorkGraph, assign: &[u32], num_blocks: usize) -> Vec<u64> {
    let mut bw = vec![0u64; num_blocks];
    for v in 0..wg.n {
        bw[assign[v] as usize] += wg.node_w[v] as u64;
    }
    bw
}

fn wg_cut(wg: &WorkGraph, assign: &[u32]) -> f64 {
    let mut cut = 0.0;
    for v in 0..wg.n {
        let (nbrs, ws) = wg.neighbors(v);
        for (&u, &w) in nbrs.iter().zip(ws) {
            if (u as usize) > v && assign[v] != assign[u as usize] {
                cut += w;
            }
        }
    }
    cut
}

/// Recursively split `node_set` into blocks `[block_offset, block_offset + b_count)`.
fn bisect_recursive(
    wg: &WorkGraph,
    assign: &mut [u32],
    node_set: Vec<u32>,
    block_offset: u32,
    b_count: u32,
    cap: usize,
    seed: u64,
) {
    if b_count == 1 || node_set.is_empty() {
        for &v in &node_set {
            assign[v as usize] = block_offset;
        }
        return;
    }
    let b_left = b_count.div_ceil(2);
    let b_right = b_count - b_left;
    let rng_seed = derive_seed(seed, BISECT_STREAM, &[block_offset as u64, b_count as u64]);
    let (left, right) = grow_bisection(wg, &node_set, b_left, b_right, cap, rng_seed);
    bisect_recursive(wg, assign, left, block_offset, b_left, cap, seed);
    bisect_recursive(wg, assign, right, block_offset + b_left, b_right, cap, seed);
}

/// Split `node_set` into two sides with weight targets proportional to the
/// block counts, by greedy region growing from several starts followed by
/// boundary refinement; the best attempt by (cap violation, cut) wins.
fn grow_bisection(
    wg: &WorkGraph,
    node_set: &[u32],
    b_left: u32,
    b_right: u32,
    cap: usize,
    rng_seed: u64,
) -> (Vec<u32>, Vec<u32>) {
    let total_w: u64 = node_set.iter().map(|&v| wg.node_w[v as usize] as u64).sum();
    let target_l = total_w as f64 * b_left as f64 / (b_left + b_right) as f64;
    let cap_l = cap as u64 * b_left as u64;
    let cap_r = cap as u64 * b_right as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut starts = node_set.to_vec();
    starts.shuffle(&mut rng);
    let attempts = if node_set.len() <= 32 {
        GROW_ATTEMPTS_SMALL
    } else {
        GROW_ATTEMPTS
    };
    starts.truncate(attempts.min(node_set.len()));

    let mut best: Option<(f64, f64, Vec<bool>)> = None; // (violation, cut, side)
    for &start in &starts {
        let (side, side_w) = grow_from(wg, node_set, start, target_l, cap_l, cap_r, total_w);
        let (side, side_w) = fm_passes(wg, node_set, side, side_w, cap_l, cap_r, total_w);
        let cut = side_cut(wg, node_set, &side);
        let viol = (side_w.saturating_sub(cap_l)) as f64
            + ((total_w - side_w).saturating_sub(cap_r)) as f64;
        let better = match &best {
            None => true,
            Some((bv, bc, _)) => (viol, cut) < (*bv, *bc),
        };
        if better {
            best = Some((viol, cut, side));
        }
    }
    let (_, _, side) = best.expect("at least one growth attempt");
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &v in node_set {
        if side[v as usize] {
            left.push(v);
        } else {
            right.push(v);
        }
    }
    (left, right)
}

/// Grow one side from `start` until it reaches its weight target and the
/// complement fits under its cap. Picks the unassigned in-set node with the
/// strongest connection to the side (ties by lowest index), jumping to the
/// lowest-index remaining node when the frontier is empty (disconnected
/// graphs). Returns the side membership mask (indexed by node id) and weight.
fn grow_from(
    wg: &WorkGraph,
    node_set: &[u32],
    start: u32,
    target_l: f64,
    cap_l: u64,
    cap_r: u64,
    total_w: u64,
) -> (Vec<bool>, u64) {
    let mut in_set = vec![false; wg.n];
    for &v in node_set {
        in_set[v as usize] = true;
    }
    let mut side = vec![false; wg.n];
    let mut conn = vec![0.0f64; wg.n];
    let mut side_w: u64 = 0;

    let add = |v: u32, side: &mut Vec<bool>, conn: &mut Vec<f64>, side_w: &mut u64| {
        side[v as usize] = true;
        *side_w += wg.node_w[v as usize] as u64;
        let (nbrs, ws) = wg.neighbors(v as usize);
        for (&u, &w) in nbrs.iter().zip(ws) {
            if in_set[u as usize] && !side[u as usize] {
                conn[u as usize] += w;
            }
        }
    };
    add(start, &mut side, &mut conn, &mut side_w);

    loop {
        let reached_target = (side_w as f64) >= target_l;
        let complement_fits = total_w - side_w <= cap_r;
        if reached_target && complement_fits {
            break;
        }
        // Strongest-connection candidate that fits under the side cap; fall
        // back to the lightest candidate once the side must overflow to keep
        // the complement feasible (coarse granularity; repaired later).
        let mut best: Option<u32> = None;
        let mut best_conn = f64::NEG_INFINITY;
        let mut lightest: Option<u32> = None;
        for &v in node_set {
            let vi = v as usize;
            if side[vi] {
                continue;
            }
            let fits = side_w + wg.node_w[vi] as u64 <= cap_l;
            if fits {
                let c = conn[vi];
                if c > best_conn || (c == best_conn && best.is_none_or(|b| v < b)) {
                    best = Some(v);
                    best_conn = c;
                }
            }
            match lightest {
                Some(l) if wg.node_w[l as usize] <= wg.node_w[vi] => {}
                _ => lightest = Some(v),
            }
        }
        let pick = match (best, reached_target) {
            (Some(v), false) => Some(v),
            // Target reached but complement still too heavy: keep growing.
            (Some(v), true) => Some(v),
            // Nothing fits under cap_l; overflow minimally only if the
            // complement would otherwise violate its cap.
            (None, _) if !complement_fits => lightest,
            (None, _) => None,
        };
        match pick {
            Some(v) => add(v, &mut side, &mut conn, &mut side_w),
            None => break,
        }
    }
    (side, side_w)
}

/// Boundary refinement for a bisection: single-node moves with positive gain
/// while balance permits, plus moves out of an over-cap side regardless of
/// gain (balance repair). Runs until a pass makes no move.
fn fm_passes(
    wg: &WorkGraph,
    node_set: &[u32],
    mut side: Vec<bool>,
    mut side_w: u64,
    cap_l: u64,
    cap_r: u64,
    total_w: u64,
) -> (Vec<bool>, u64) {
    for _ in 0..MAX_REFINE_PASSES {
        let mut moved = false;
        for &v in node_set {
            let vi = v as usize;
            let nw = wg.node_w[vi] as u64;
            let (nbrs, ws) = wg.neighbors(vi);
            let mut to_side = 0.0;
            let mut to_comp = 0.0;
            for (&u, &w) in nbrs.iter().zip(ws) {
                // Connections outside node_set are cut either way; ignore
                // them (node_set is kept sorted by construction).
                if side[u as usize] {
                    to_side += w;
                } else if node_set.binary_search(&u).is_ok() {
                    to_comp += w;
                }
            }
            let (gain, src_over, dst_w, dst_cap) = if side[vi] {
                (
                    to_comp - to_side,
                    side_w > cap_l,
                    total_w - side_w,
                    cap_r,
                )
            } else {
                (to_side - to_comp, total_w - side_w > cap_r, side_w, cap_l)
            };
            let dst_fits = dst_w + nw <= dst_cap;
            if dst_fits && (gain > 0.0 || src_over) {
                if side[vi] {
                    side[vi] = false;
                    side_w -= nw;
                } else {
                    side[vi] = true;
                    side_w += nw;
                }
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    (side, side_w)
}

fn side_cut(wg: &WorkGraph, node_set: &[u32], side: &[bool]) -> f64 {
    let mut in_set = vec![false; wg.n];
    for &v in node_set {
        in_set[v as usize] = true;
    }
    let mut cut = 0.0;
    for &v in node_set {
        let vi = v as usize;
        let (nbrs, ws) = wg.neighbors(vi);
        for (&u, &w) in nbrs.iter().zip(ws) {
            if (u as usize) > vi && in_set[u as usize] && side[vi] != side[u as usize] {
                cut += w;
            }
        }
    }
    cut
}

/// Move nodes out of over-cap blocks until every block fits, choosing the
/// move that loses the least cut each time. May increase the cut; at the
/// finest level (unit node weights) it always terminates with all blocks
/// under the cap, since some block has room whenever another is over.
fn repair_balance(wg: &WorkGraph, assign: &mut [u32], block_w: &mut [u64], cap: usize) {
    let cap = cap as u64;
    let num_blocks = block_w.len();
    let mut conn = vec![0.0f64; num_blocks];
    let mut touched: Vec<u32> = Vec::new();
    loop {
        let mut moved = false;
        for v in 0..wg.n {
            let a = assign[v] as usize;
            if block_w[a] <= cap {
                continue;
            }
            let nw = wg.node_w[v] as u64;
            for &t in &touched {
                conn[t as usize] = 0.0;
            }
            touched.clear();
            let (nbrs, ws) = wg.neighbors(v);
            for (&u, &w) in nbrs.iter().zip(ws) {
                let b = assign[u as usize];
                if conn[b as usize] == 0.0 {
                    touched.push(b);
                }
                conn[b as usize] += w;
            }
            // Best fitting destination by connection weight, falling back to
            // the lowest-index block with room.
            let mut best: Option<usize> = None;
            let mut best_gain = f64::NEG_INFINITY;
            for &t in &touched {
                let t = t as usize;
                if t == a || block_w[t] + nw > cap {
                    continue;
                }
                let gain = conn[t] - conn[a];
                if gain > best_gain || (gain == best_gain && best.is_none_or(|b| t < b)) {
                    best = Some(t);
                    best_gain = gain;
                }
            }
            if best.is_none() {
                best = (0..num_blocks).find(|&t| t != a && block_w[t] + nw <= cap);
            }
            if let Some(t) = best {
                assign[v] = t as u32;
                block_w[a] -= nw;
                block_w[t] += nw;
                moved = true;
            }
        }
        let any_over = block_w.iter().any(|&w| w > cap);
        if !any_over || !moved {
            break;
        }
    }
}

/// Positive-gain k-way refinement passes. Returns the cut trace: the cut
/// before refinement followed by the cut after each pass (nonincreasing).
fn refine_level(wg: &WorkGraph, assign: &mut [u32], block_w: &mut [u64], cap: usize) -> Vec<f64> {
    let cap = cap as u64;
    let num_blocks = block_w.len();
    let mut conn = vec![0.0f64; num_blocks];
    let mut touched: Vec<u32> = Vec::new();
    let mut trace = vec![wg_cut(wg, assign)];
    for _ in 0..MAX_REFINE_PASSES {
        let mut moves = 0usize;
        for v in 0..wg.n {
            let a = assign[v] as usize;
            let nw = wg.node_w[v] as u64;
            for &t in &touched {
                conn[t as usize] = 0.0;
            }
            touched.clear();
            let (nbrs, ws) = wg.neighbors(v);
            for (&u, &w) in nbrs.iter().zip(ws) {
                let b = assign[u as usize];
                if conn[b as usize] == 0.0 {
                    touched.push(b);
                }
                conn[b as usize] += w;
            }
            let own = conn[a];
            let mut best: Option<usize> = None;
            let mut best_conn = f64::NEG_INFINITY;
            for &t in &touched {
                let t = t as usize;
                if t == a || block_w[t] + nw > cap {
                    continue;
                }
                if conn[t] > best_conn || (conn[t] == best_conn && best.is_none_or(|b| t < b)) {
                    best = Some(t);
                    best_conn = conn[t];
                }
            }
            if let Some(t) = best {
                if best_conn - own > 0.0 {
                    assign[v] = t as u32;
                    block_w[a] -= nw;
                    block_w[t] += nw;
                    moves += 1;
                }
            }
        }
        trace.push(wg_cut(wg, assign));
        if moves == 0 {
            break;
        }
    }
    trace
}
