//! Symmetric kNN affinity graph with RBF edge weights.
//!
//! Each point is linked to its `k_nn` nearest Euclidean neighbors (exact
//! search), the directed graph is symmetrized by union, and edge weights are
//! `exp(-dist^e / (2 sigma^2))` where `e` is 1 by default with 2 available as
//! an option. The bandwidth defaults to the median of all kNN distances.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::DataSet;
use crate::util;

/// Magic bytes opening a binary graph file.
pub const GRAPH_MAGIC: &[u8; 4] = b"GCS1";
/// Current version of the binary graph format.
pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Smallest representable edge weight; RBF values that underflow f32 are
/// clamped here so stored weights stay strictly positive.
const MIN_WEIGHT: f32 = 1e-35;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph configuration: {0}")]
    Config(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("asymmetric graph: edge ({i}, {j}) has no reverse edge of equal weight")]
    Asymmetric { i: usize, j: usize },
    #[error("{path}: {detail} (byte offset {offset})")]
    Format {
        path: String,
        detail: String,
        offset: u64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GraphError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        GraphError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn format(path: &Path, detail: impl Into<String>, offset: u64) -> Self {
        GraphError::Format {
            path: path.display().to_string(),
            detail: detail.into(),
            offset,
        }
    }
}

/// Symmetric weighted sparse graph in compressed-row form.
///
/// Invariants, enforced by [`AffinityGraph::from_csr`]:
/// - `row_ptr` has n+1 nondecreasing entries ending at nnz;
/// - neighbor lists are sorted ascending with no duplicates and no self-loops;
/// - every weight lies in (0, 1] and the matrix is exactly symmetric
///   (bit-equal weights in both directions).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    weights: Vec<f32>,
    /// Cached per-node weight sums (both edge directions are stored, so this
    /// is the full weighted degree of each node).
    degree_sums: Vec<f64>,
}

impl AffinityGraph {
    /// Build from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        weights: Vec<f32>,
    ) -> Result<Self, GraphError> {
        if row_ptr.len() != n + 1 {
            return Err(GraphError::Invalid(format!(
                "row_ptr length {} does not match n+1 = {}",
                row_ptr.len(),
                n + 1
            )));
        }
        if row_ptr[0] != 0 {
            return Err(GraphError::Invalid("row_ptr must start at 0".into()));
        }
        let nnz = col_idx.len();
        if weights.len() != nnz {
            return Err(GraphError::Invalid(format!(
                "{} weights for {} edges",
                weights.len(),
                nnz
            )));
        }
        if row_ptr[n] != nnz {
            return Err(GraphError::Invalid(format!(
                "row_ptr[n] = {} does not match nnz = {nnz}",
                row_ptr[n]
            )));
        }
        for i in 0..n {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(GraphError::Invalid(format!("row_ptr decreases at row {i}")));
            }
            let lo = row_ptr[i];
            let hi = row_ptr[i + 1];
            for e in lo..hi {
                let j = col_idx[e] as usize;
                if j >= n {
                    return Err(GraphError::Invalid(format!(
                        "row {i}: neighbor {j} out of range (n = {n})"
                    )));
                }
                if j == i {
                    return Err(GraphError::Invalid(format!("row {i}: self-loop")));
                }
                if e > lo && col_idx[e - 1] >= col_idx[e] {
                    return Err(GraphError::Invalid(format!(
                        "row {i}: neighbors not strictly ascending at position {}",
                        e - lo
                    )));
                }
                let w = weights[e];
                if !(w > 0.0 && w <= 1.0) || !w.is_finite() {
                    return Err(GraphError::Invalid(format!(
                        "edge ({i}, {j}): weight {w} outside (0, 1]"
                    )));
                }
            }
        }
        let g = AffinityGraph {
            n,
            row_ptr,
            col_idx,
            weights,
            degree_sums: Vec::new(),
        };
        // Symmetry: each stored edge must have a bit-equal reverse edge.
        for i in 0..n {
            let (nbrs, ws) = g.neighbors(i);
            for (&j, &w) in nbrs.iter().zip(ws) {
                match g.edge_weight(j as usize, i as u32) {
                    Some(back) if back.to_bits() == w.to_bits() => {}
                    _ => return Err(GraphError::Asymmetric { i, j: j as usize }),
                }
            }
        }
        let degree_sums = (0..n)
            .map(|i| g.neighbors(i).1.iter().map(|&w| w as f64).sum())
            .collect();
        Ok(AffinityGraph { degree_sums, ..g })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored (directed) edges; twice the undirected edge count.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    /// Neighbor indices and weights of node `i`, sorted by index.
    pub fn neighbors(&self, i: usize) -> (&[u32], &[f32]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.weights[lo..hi])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Sum of edge weights incident to `i`.
    pub fn degree_sum(&self, i: usize) -> f64 {
        self.degree_sums[i]
    }

    /// Weight of edge (i, j) if present.
    pub fn edge_weight(&self, i: usize, j: u32) -> Option<f32> {
        let (nbrs, ws) = self.neighbors(i);
        nbrs.binary_search(&j).ok().map(|pos| ws[pos])
    }

    /// Total weight over undirected edges (each edge counted once).
    pub fn total_edge_weight(&self) -> f64 {
        self.degree_sums.iter().sum::<f64>() / 2.0
    }
}

/// How the RBF bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    /// Median of all (node, kNN-neighbor) distances.
    Median,
    /// Explicit bandwidth, must be positive.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub k_nn: usize,
    pub sigma: SigmaMode,
    /// Exponent applied to the Euclidean distance in the RBF: 1 (default)
    /// uses the plain distance, 2 the squared distance.
    pub distance_exponent: u8,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k_nn: 10,
            sigma: SigmaMode::Median,
            distance_exponent: 1,
        }
    }
}

impl GraphConfig {
    fn validate(&self) -> Result<(), GraphError> {
        if self.k_nn == 0 {
            return Err(GraphError::Config("k_nn must be at least 1".into()));
        }
        if let SigmaMode::Fixed(s) = self.sigma {
            if !s.is_finite() || s <= 0.0 {
                return Err(GraphError::Config(format!("sigma must be positive, got {s}")));
            }
        }
        if self.distance_exponent != 1 && self.distance_exponent != 2 {
            return Err(GraphError::Config(format!(
                "distance_exponent must be 1 or 2, got {}",
                self.distance_exponent
            )));
        }
        Ok(())
    }
}

#[inline]
fn dist2(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let diff = *x as f64 - *y as f64;
        s += diff * diff;
    }
    s
}

/// Exact kNN search: for each node the k nearest others as (squared distance,
/// index), sorted ascending, ties broken by lower index.
fn knn_search(ds: &DataSet, k: usize) -> Result<Vec<Vec<(f64, u32)>>, GraphError> {
    let n = ds.n();
    let d = ds.d();
    if n < k + 1 {
        return Err(GraphError::Config(format!(
            "need at least k_nn + 1 = {} points, got {n}",
            k + 1
        )));
    }
    let flat = ds
        .features()
        .to_slice()
        .expect("dataset features are contiguous")
        .to_vec();
    let rows: Vec<Vec<(f64, u32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &flat[i * d..(i + 1) * d];
            let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                cand.push((dist2(xi, &flat[j * d..(j + 1) * d]), j as u32));
            }
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand
        })
        .collect();
    Ok(rows)
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    }
}

fn median_from_knn(ds: &DataSet, knn: &[Vec<(f64, u32)>]) -> Result<f64, GraphError> {
    let mut dists: Vec<f64> = knn
        .iter()
        .flat_map(|row| row.iter().map(|&(d2, _)| d2.sqrt()))
        .collect();
    dists.sort_unstable_by(f64::total_cmp);
    let med = median_of_sorted(&dists);
    if med > 0.0 {
        return Ok(med);
    }
    // Duplicate-heavy neighborhoods: fall back to the smallest positive kNN
    // distance, then to the smallest positive distance over all pairs.
    if let Some(&p) = dists.iter().find(|&&x| x > 0.0) {
        return Ok(p);
    }
    let n = ds.n();
    let d = ds.d();
    let flat = ds.features().to_slice().expect("contiguous features");
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = dist2(&flat[i * d..(i + 1) * d], &flat[j * d..(j + 1) * d]);
            if d2 > 0.0 {
                best = best.min(d2.sqrt());
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(GraphError::DegenerateData(
            "all pairwise distances are zero".into(),
        ))
    }
}

/// Median of all (node, kNN-neighbor) Euclidean distances; the default RBF
/// bandwidth. Falls back to the smallest positive distance when the median
/// is zero (duplicate-only neighborhoods).
pub fn median_sigma(ds: &DataSet, k_nn: usize) -> Result<f64, GraphError> {
    if k_nn == 0 {
        return Err(GraphError::Config("k_nn must be at least 1".into()));
    }
    let knn = knn_search(ds, k_nn)?;
    median_from_knn(ds, &knn)
}

/// Build the symmetric kNN affinity graph: exact k-nearest-neighbor search,
/// RBF weights `exp(-dist^e / (2 sigma^2))`, symmetrization by union (the
/// weight depends only on the distance, so both directions agree).
pub fn build_knn(ds: &DataSet, cfg: &GraphConfig) -> Result<AffinityGraph, GraphError> {
    cfg.validate()?;
    let n = ds.n();
    let knn = knn_search(ds, cfg.k_nn)?;
    let sigma = match cfg.sigma {
        SigmaMode::Fixed(s) => s,
        SigmaMode::Median => median_from_knn(ds, &knn)?,
    };
    let denom = 2.0 * sigma * sigma;
    let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::with_capacity(2 * cfg.k_nn); n];
    for (i, cand) in knn.iter().enumerate() {
        for &(d2, j) in cand {
            let expo = match cfg.distance_exponent {
                1 => d2.sqrt(),
                _ => d2,
            };
            let w = ((-expo / denom).exp() as f32).clamp(MIN_WEIGHT, 1.0);
            rows[i].push((j, w));
            rows[j as usize].push((i as u32, w));
        }
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut weights = Vec::new();
    row_ptr.push(0);
    for row in &mut rows {
        row.sort_unstable_by_key(|&(j, _)| j);
        row.dedup_by(|a, b| {
            // Duplicates arise when i and j select each other; the weight is
            // computed from the same distance both times.
            debug_assert!(a.0 != b.0 || a.1.to_bits() == b.1.to_bits());
            a.0 == b.0
        });
        for &(j, w) in row.iter() {
            col_idx.push(j);
            weights.push(w);
        }
        row_ptr.push(col_idx.len());
    }
    let g = AffinityGraph::from_csr(n, row_ptr, col_idx, weights)?;
    debug_assert!({
        let mean_deg = g.nnz() as f64 / n as f64;
        mean_deg >= cfg.k_nn as f64 && mean_deg <= 2.0 * cfg.k_nn as f64
    });
    Ok(g)
}

/// Write `g` to `path`: binary format by default, the `i j w` edge-list text
/// format when the extension is `.txt`.
pub fn save_graph(g: &AffinityGraph, path: &Path) -> Result<(), GraphError> {
    let is_text = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("txt"))
        .unwrap_or(false);
    if is_text {
        save_graph_text(g, path)
    } else {
        save_graph_binary(g, path)
    }
}

/// Load a graph saved by [`save_graph`], validating all invariants.
pub fn load_graph(path: &Path) -> Result<AffinityGraph, GraphError> {
    let is_text = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("txt"))
        .unwrap_or(false);
    if is_text {
        load_graph_text(path)
    } else {
        load_graph_binary(path)
    }
}

fn save_graph_binary(g: &AffinityGraph, path: &Path) -> Result<(), GraphError> {
    let file = File::create(path).map_err(|e| GraphError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(GRAPH_MAGIC)?;
        util::write_u32_le(&mut w, GRAPH_FORMAT_VERSION)?;
        util::write_u64_le(&mut w, g.n as u64)?;
        util::write_u64_le(&mut w, g.nnz() as u64)?;
        for &p in &g.row_ptr {
            util::write_u64_le(&mut w, p as u64)?;
        }
        for &c in &g.col_idx {
            util::write_u64_le(&mut w, c as u64)?;
        }
        for &x in &g.weights {
            util::write_f32_le(&mut w, x)?;
        }
        w.flush()
    })();
    res.map_err(|e| GraphError::io(path, e))
}

fn load_graph_binary(path: &Path) -> Result<AffinityGraph, GraphError> {
    let file = File::open(path).map_err(|e| GraphError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| GraphError::io(path, e))?;
    if &magic != GRAPH_MAGIC {
        return Err(GraphError::format(
            path,
            format!("bad magic {magic:?}, expected {GRAPH_MAGIC:?} (\"GCS1\")"),
            0,
        ));
    }
    let version = util::read_u32_le(&mut r).map_err(|e| GraphError::io(path, e))?;
    if version != GRAPH_FORMAT_VERSION {
        return Err(GraphError::format(
            path,
            format!("unsupported version {version}, expected {GRAPH_FORMAT_VERSION}"),
            4,
        ));
    }
    let n = util::read_u64_le(&mut r).map_err(|e| GraphError::io(path, e))? as usize;
    let nnz = util::read_u64_le(&mut r).map_err(|e| GraphError::io(path, e))? as usize;
    let mut row_ptr = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let offset = 24 + 8 * i as u64;
        let p = util::read_u64_le(&mut r)
            .map_err(|_| GraphError::format(path, format!("truncated in row_ptr at {i}"), offset))?;
        row_ptr.push(p as usize);
    }
    if row_ptr[n] != nnz {
        return Err(GraphError::format(
            path,
            format!("row_ptr[n] = {} does not match header nnz = {nnz}", row_ptr[n]),
            24 + 8 * n as u64,
        ));
    }
    let col_base = 24 + 8 * (n as u64 + 1);
    let mut col_idx = Vec::with_capacity(nnz);
    for e in 0..nnz {
        let c = util::read_u64_le(&mut r).map_err(|_| {
            GraphError::format(path, format!("truncated in col_idx at {e}"), col_base + 8 * e as u64)
        })?;
        if c >= n as u64 {
            return Err(GraphError::format(
                path,
                format!("neighbor index {c} out of range (n = {n})"),
                col_base + 8 * e as u64,
            ));
        }
        col_idx.push(c as u32);
    }
    let w_base = col_base + 8 * nnz as u64;
    let mut weights = Vec::with_capacity(nnz);
    for e in 0..nnz {
        let x = util::read_f32_le(&mut r).map_err(|_| {
            GraphError::format(path, format!("truncated in weights at {e}"), w_base + 4 * e as u64)
        })?;
        weights.push(x);
    }
    AffinityGraph::from_csr(n, row_ptr, col_idx, weights)
}

fn save_graph_text(g: &AffinityGraph, path: &Path) -> Result<(), GraphError> {
    let file = File::create(path).map_err(|e| GraphError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        for i in 0..g.n {
            let (nbrs, ws) = g.neighbors(i);
            for (&j, &x) in nbrs.iter().zip(ws) {
                if (j as usize) > i {
                    writeln!(w, "{i} {j} {x}")?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| GraphError::io(path, e))
}

fn load_graph_text(path: &Path) -> Result<AffinityGraph, GraphError> {
    let file = File::open(path).map_err(|e| GraphError::io(path, e))?;
    let r = BufReader::new(file);
    let mut edges: Vec<(u32, u32, f32)> = Vec::new();
    let mut max_node = 0u32;
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| GraphError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (i, j, x) = match (it.next(), it.next(), it.next(), it.next()) {
            (Some(a), Some(b), Some(c), None) => {
                let i: u32 = a.parse().map_err(|_| {
                    GraphError::format(path, format!("line {lineno}: bad node id {a:?}"), 0)
                })?;
                let j: u32 = b.parse().map_err(|_| {
                    GraphError::format(path, format!("line {lineno}: bad node id {b:?}"), 0)
                })?;
                let x: f32 = c.parse().map_err(|_| {
                    GraphError::format(path, format!("line {lineno}: bad weight {c:?}"), 0)
                })?;
                (i, j, x)
            }
            _ => {
                return Err(GraphError::format(
                    path,
                    format!("line {lineno}: expected \"i j w\""),
                    0,
                ))
            }
        };
        if i == j {
            return Err(GraphError::Invalid(format!("line {lineno}: self-loop on node {i}")));
        }
        max_node = max_node.max(i).max(j);
        edges.push((i, j, x));
    }
    if edges.is_empty() {
        return Err(GraphError::format(path, "no edges".to_string(), 0));
    }
    let n = max_node as usize + 1;
    let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n];
    for &(i, j, x) in &edges {
        rows[i as usize].push((j, x));
        rows[j as usize].push((i, x));
    }
    let mut row_ptr = vec![0usize];
    let mut col_idx = Vec::new();
    let mut weights = Vec::new();
    for row in &mut rows {
        row.sort_unstable_by_key(|&(j, _)| j);
        for &(j, x) in row.iter() {
            col_idx.push(j);
            weights.push(x);
        }
        row_ptr.push(col_idx.len());
    }
    AffinityGraph::from_csr(n, row_ptr, col_idx, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, DataSet, SyntheticSpec};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn dataset_from_rows(rows: &[Vec<f32>]) -> DataSet {
        let n = rows.len();
        let d = rows[0].len();
        let mut f = Array2::<f32>::zeros((n, d));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                f[[i, j]] = v;
            }
        }
        DataSet::new(f, vec![crate::dataio::UNLABELED; n], 2).unwrap()
    }

    /// O(n^2) reference: directed kNN by full sort, symmetrized by union,
    /// same weight formula. Returns per-row sorted (neighbor, weight).
    fn brute_knn(ds: &DataSet, k: usize, sigma: f64, expo: u8) -> Vec<Vec<(u32, f32)>> {
        let n = ds.n();
        let d = ds.d();
        let flat = ds.features().to_slice().unwrap();
        let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n];
        for i in 0..n {
            let mut all: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(&flat[i * d..(i + 1) * d], &flat[j * d..(j + 1) * d]), j as u32))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d2, j) in all.iter().take(k) {
                let e = if expo == 1 { d2.sqrt() } else { d2 };
                let w = (((-e / (2.0 * sigma * sigma)).exp()) as f32).clamp(MIN_WEIGHT, 1.0);
                rows[i].push((j, w));
                rows[j as usize].push((i as u32, w));
            }
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|&(j, _)| j);
            row.dedup_by_key(|p| p.0);
        }
        rows
    }

    fn assert_graph_matches(g: &AffinityGraph, want: &[Vec<(u32, f32)>]) {
        assert_eq!(g.n(), want.len());
        for (i, row) in want.iter().enumerate() {
            let (nbrs, ws) = g.neighbors(i);
            let got: Vec<(u32, f32)> = nbrs.iter().copied().zip(ws.iter().copied()).collect();
            assert_eq!(&got, row, "row {i} differs");
        }
    }

    #[test]
    fn zero_distance_gives_unit_weight() {
        let ds = dataset_from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![9.0, 9.0]]);
        let g = build_knn(
            &ds,
            &GraphConfig {
                k_nn: 1,
                sigma: SigmaMode::Fixed(1.0),
                distance_exponent: 1,
            },
        )
        .unwrap();
        assert_eq!(g.edge_weight(0, 1), Some(1.0));
        assert_eq!(g.edge_weight(1, 0), Some(1.0));
    }

    #[test]
    fn rbf_matches_closed_form() {
        // distance 2 with sigma 1: exponent 1 gives exp(-2/2) = e^-1.
        let ds = dataset_from_rows(&[vec![0.0], vec![2.0]]);
        let cfg = GraphConfig {
            k_nn: 1,
            sigma: SigmaMode::Fixed(1.0),
            distance_exponent: 1,
        };
        let g = build_knn(&ds, &cfg).unwrap();
        let w = g.edge_weight(0, 1).unwrap() as f64;
        assert!((w - (-1.0f64).exp()).abs() < 1e-7, "w = {w}");
        // exponent 2: distance sqrt(2) gives exp(-2/2) = e^-1 as well.
        let ds = dataset_from_rows(&[vec![0.0], vec![2.0f32.sqrt()]]);
        let cfg = GraphConfig {
            distance_exponent: 2,
            ..cfg
        };
        let g = build_knn(&ds, &cfg).unwrap();
        let w = g.edge_weight(0, 1).unwrap() as f64;
        assert!((w - (-1.0f64).exp()).abs() < 1e-7, "w = {w}");
    }

    #[test]
    fn line_graph_matches_brute_force() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![i as f32 * 1.5, 0.0]).collect();
        let ds = dataset_from_rows(&rows);
        let g = build_knn(
            &ds,
            &GraphConfig {
                k_nn: 2,
                sigma: SigmaMode::Fixed(2.0),
                distance_exponent: 1,
            },
        )
        .unwrap();
        let want = brute_knn(&ds, 2, 2.0, 1);
        assert_graph_matches(&g, &want);
        // Interior nodes keep degree 2, endpoints pick up an extra edge from
        // symmetrization of their second-nearest neighbor.
        assert_eq!(g.degree(10), 2);
        assert!(g.degree(0) >= 2);
    }

    #[test]
    fn median_of_constant_distances() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32 * 3.0]).collect();
        let ds = dataset_from_rows(&rows);
        assert_eq!(median_sigma(&ds, 1).unwrap(), 3.0);
    }

    #[test]
    fn median_definition() {
        assert_eq!(median_of_sorted(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3.0);
        assert_eq!(median_of_sorted(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(median_of_sorted(&[7.0]), 7.0);
    }

    #[test]
    fn median_matches_brute_force_on_blobs() {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 120,
            d: 6,
            num_classes: 3,
            clusters_per_class: 2,
            noise_sigma: 0.4,
            seed: 77,
        })
        .unwrap();
        let k = 3;
        // Independent median: full sort per node, collect k smallest.
        let n = ds.n();
        let d = ds.d();
        let flat = ds.features().to_slice().unwrap();
        let mut dists = Vec::new();
        for i in 0..n {
            let mut all: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(&flat[i * d..(i + 1) * d], &flat[j * d..(j + 1) * d]), j as u32))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d2, _) in all.iter().take(k) {
                dists.push(d2.sqrt());
            }
        }
        dists.sort_unstable_by(f64::total_cmp);
        let want = median_of_sorted(&dists);
        assert_eq!(median_sigma(&ds, k).unwrap(), want);
    }

    #[test]
    fn median_falls_back_to_smallest_positive_distance() {
        // Three duplicate pairs; every kNN distance at k=1 is zero.
        let ds = dataset_from_rows(&[
            vec![0.0],
            vec![0.0],
            vec![10.0],
            vec![10.0],
            vec![21.0],
            vec![21.0],
        ]);
        assert_eq!(median_sigma(&ds, 1).unwrap(), 10.0);
    }

    #[test]
    fn all_identical_points_is_degenerate() {
        let ds = dataset_from_rows(&[vec![4.0], vec![4.0], vec![4.0]]);
        assert!(matches!(
            median_sigma(&ds, 1),
            Err(GraphError::DegenerateData(_))
        ));
    }

    #[test]
    fn too_few_points_is_config_error() {
        let ds = dataset_from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        assert!(matches!(
            build_knn(&ds, &GraphConfig { k_nn: 3, ..Default::default() }),
            Err(GraphError::Config(_))
        ));
    }

    #[test]
    fn binary_round_trip() {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 60,
            d: 4,
            num_classes: 3,
            clusters_per_class: 2,
            noise_sigma: 0.3,
            seed: 5,
        })
        .unwrap();
        let g = build_knn(&ds, &GraphConfig::default()).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.gcs1");
        save_graph(&g, &path).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn text_round_trip() {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 30,
            d: 3,
            num_classes: 2,
            clusters_per_class: 2,
            noise_sigma: 0.3,
            seed: 6,
        })
        .unwrap();
        let g = build_knn(&ds, &GraphConfig { k_nn: 2, ..Default::default() }).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.txt");
        save_graph(&g, &path).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn asymmetric_file_is_rejected() {
        let ds = dataset_from_rows(&[vec![0.0], vec![1.0], vec![5.0]]);
        let g = build_knn(
            &ds,
            &GraphConfig { k_nn: 1, sigma: SigmaMode::Fixed(1.0), distance_exponent: 1 },
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.gcs1");
        save_graph(&g, &path).unwrap();
        // Corrupt the last stored weight so one direction disagrees.
        let mut bytes = std::fs::read(&path).unwrap();
        let len = bytes.len();
        bytes[len - 4..].copy_from_slice(&0.123f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_graph(&path).unwrap_err();
        assert!(matches!(err, GraphError::Asymmetric { .. }), "{err}");
    }

    #[test]
    fn nnz_header_mismatch_is_format_error() {
        let ds = dataset_from_rows(&[vec![0.0], vec![1.0], vec![5.0]]);
        let g = build_knn(
            &ds,
            &GraphConfig { k_nn: 1, sigma: SigmaMode::Fixed(1.0), distance_exponent: 1 },
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.gcs1");
        save_graph(&g, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[16..24].copy_from_slice(&999u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_graph(&path).unwrap_err();
        assert!(err.to_string().contains("nnz"), "{err}");
    }

    #[test]
    fn self_loop_in_text_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.txt");
        std::fs::write(&path, "0 1 0.5\n1 1 0.5\n").unwrap();
        let err = load_graph(&path).unwrap_err();
        assert!(err.to_string().contains("self-loop"), "{err}");
    }

    #[test]
    fn cross_class_edges_are_rare_on_clustered_data() {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 1000,
            d: 20,
            num_classes: 10,
            clusters_per_class: 5,
            noise_sigma: 0.3,
            seed: 9,
        })
        .unwrap();
        let g = build_knn(&ds, &GraphConfig::default()).unwrap();
        let labels = ds.labels();
        let mut cross = 0usize;
        let mut total = 0usize;
        for i in 0..g.n() {
            for &j in g.neighbors(i).0 {
                if (j as usize) > i {
                    total += 1;
                    if labels[i] != labels[j as usize] {
                        cross += 1;
                    }
                }
            }
        }
        let frac = cross as f64 / total as f64;
        assert!(frac < 0.05, "cross-class edge fraction {frac} (= {cross}/{total})");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn prop_build_matches_brute_force(
            n in 6usize..40,
            d in 1usize..4,
            k in 1usize..5,
            seed in any::<u64>(),
            coarse in proptest::bool::ANY,
        ) {
            prop_assume!(n > k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse grids produce many exact duplicates and distance ties,
            // exercising the index tie-breaking rules.
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            if coarse {
                                rng.random_range(0..3) as f32
                            } else {
                                rng.random::<f32>() * 10.0
                            }
                        })
                        .collect()
                })
                .collect();
            let ds = dataset_from_rows(&rows);
            let cfg = GraphConfig { k_nn: k, sigma: SigmaMode::Fixed(1.7), distance_exponent: 1 };
            let g = build_knn(&ds, &cfg).unwrap();
            let want = brute_knn(&ds, k, 1.7, 1);
            assert_graph_matches(&g, &want);
            // Structural invariants.
            let mean_deg = g.nnz() as f64 / g.n() as f64;
            prop_assert!(mean_deg >= k as f64 && mean_deg <= 2.0 * k as f64);
            for i in 0..g.n() {
                prop_assert!(g.degree(i) >= 1);
                let (nbrs, ws) = g.neighbors(i);
                for (&j, &w) in nbrs.iter().zip(ws) {
                    prop_assert!(w > 0.0 && w <= 1.0);
                    prop_assert_eq!(g.edge_weight(j as usize, i as u32).map(f32::to_bits), Some(w.to_bits()));
                }
            }
        }
    }
}
