//! Dataset ingestion, synthetic data generation, label subsampling, and the
//! bit-exact on-disk feature/label formats.
//!
//! A [`DataSet`] is an immutable n×d feature matrix plus optional per-point
//! class labels. Labeled and unlabeled points live in the same matrix; the
//! label mask tells them apart. All downstream stages (graph construction,
//! partitioning, training) share the dataset read-only.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::util;

/// Magic bytes opening a binary feature file.
pub const FEATURE_MAGIC: &[u8; 4] = b"GSS1";
/// Magic bytes opening a binary label file.
pub const LABEL_MAGIC: &[u8; 4] = b"GSL1";
/// Current version of both binary formats.
pub const FORMAT_VERSION: u32 = 1;

/// Sentinel in label files and in-memory label vectors for "unlabeled".
pub const UNLABELED: i32 = -1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataSet(String),
    #[error("label ratio {0} outside (0, 1]")]
    BadRatio(f64),
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

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn format(path: &Path, detail: impl Into<String>, offset: u64) -> Self {
        DataError::Format {
            path: path.display().to_string(),
            detail: detail.into(),
            offset,
        }
    }
}

/// Feature matrix with optional per-point labels.
///
/// Invariants, enforced at construction:
/// - n ≥ 1, d ≥ 1, `num_classes` ≥ 2;
/// - `labels[i]` is either [`UNLABELED`] or a class index in `[0, num_classes)`;
/// - `label_mask[i]` is true exactly when `labels[i]` is a real class index.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    features: Array2<f32>,
    labels: Vec<i32>,
    label_mask: Vec<bool>,
    num_classes: u32,
}

impl DataSet {
    /// Build a dataset, validating all invariants. `labels` uses
    /// [`UNLABELED`] for points without a label.
    pub fn new(features: Array2<f32>, labels: Vec<i32>, num_classes: u32) -> Result<Self, DataError> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(DataError::InvalidDataSet(format!(
                "feature matrix must be nonempty, got {n}x{d}"
            )));
        }
        if num_classes < 2 {
            return Err(DataError::InvalidDataSet(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if labels.len() != n {
            return Err(DataError::InvalidDataSet(format!(
                "label count {} does not match point count {n}",
                labels.len()
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != UNLABELED && (l < 0 || l as u32 >= num_classes) {
                return Err(DataError::InvalidDataSet(format!(
                    "label {l} at row {i} outside [0, {num_classes})"
                )));
            }
        }
        let label_mask = labels.iter().map(|&l| l != UNLABELED).collect();
        Ok(DataSet {
            features,
            labels,
            label_mask,
            num_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    /// Raw labels; [`UNLABELED`] marks unlabeled points.
    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn label_mask(&self) -> &[bool] {
        &self.label_mask
    }

    pub fn label_of(&self, i: usize) -> Option<u32> {
        if self.label_mask[i] {
            Some(self.labels[i] as u32)
        } else {
            None
        }
    }

    pub fn num_labeled(&self) -> usize {
        self.label_mask.iter().filter(|&&m| m).count()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.label_mask.iter().all(|&m| m)
    }

    /// Labeled-point count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes as usize];
        for (i, &m) in self.label_mask.iter().enumerate() {
            if m {
                counts[self.labels[i] as usize] += 1;
            }
        }
        counts
    }
}

/// Parameters of the synthetic cluster generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub num_classes: u32,
    /// Number of Gaussian clusters making up each class.
    pub clusters_per_class: usize,
    /// Isotropic ambient noise added to every point.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.n < self.num_classes as usize {
            return Err(DataError::InvalidSpec(format!(
                "n = {} smaller than class count {}",
                self.n, self.num_classes
            )));
        }
        if self.d == 0 {
            return Err(DataError::InvalidSpec("dimension must be positive".into()));
        }
        if self.clusters_per_class == 0 {
            return Err(DataError::InvalidSpec(
                "clusters_per_class must be positive".into(),
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            return Err(DataError::InvalidSpec(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

// Internal scales of the generator. Cluster centers scatter isotropically
// and classes are assigned to clusters round-robin, so spatial neighborhoods
// carry no class signal and any grouping of nearby clusters mixes classes.
// Each cluster's points spread along a random low-dimensional manifold whose
// diameter is a fixed fraction of the typical center separation: wide enough
// that classifying a whole cluster from one labeled point requires
// propagating along the manifold, narrow enough that nearest neighbors stay
// within the cluster.
const CLUSTER_SCALE: f64 = 3.0;
/// Within-cluster pairwise distance as a fraction of the typical
/// center-to-center distance, at any dimension.
const WITHIN_FRACTION: f64 = 0.5;
/// Dimension of each cluster's manifold (capped by d).
const SUBSPACE_DIM: usize = 3;

fn sample_normal_vec(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma)
        .collect()
}

/// Draw `q` orthonormal d-vectors by Gram-Schmidt on Gaussian samples.
fn sample_orthonormal_basis(rng: &mut ChaCha8Rng, d: usize, q: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(q);
    while basis.len() < q {
        let mut v = sample_normal_vec(rng, d, 1.0);
        for u in &basis {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue; // essentially-zero residual; resample
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    basis
}

/// Generate a fully labeled synthetic dataset: `num_classes *
/// clusters_per_class` clusters with isotropically scattered centers, each
/// spreading its points along its own random low-dimensional manifold plus
/// isotropic ambient noise, with the cluster's class fixed per cluster.
/// Class sizes are balanced within ±1 and the point order is shuffled.
/// Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DataSet, DataError> {
    spec.validate()?;
    let n = spec.n;
    let d = spec.d;
    let c = spec.num_classes as usize;
    let q = SUBSPACE_DIM.min(d);
    // Within-cluster offset norm such that intra-cluster pairwise distances
    // are WITHIN_FRACTION of the center-to-center scale at any dimension.
    let within_scale = WITHIN_FRACTION * CLUSTER_SCALE * (d as f64 / q as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut labels: Vec<i32> = Vec::with_capacity(n);
    for class in 0..c {
        // First n % c classes get the extra point.
        let count = n / c + usize::from(class < n % c);
        let clusters: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..spec.clusters_per_class)
            .map(|_| {
                let center = sample_normal_vec(&mut rng, d, CLUSTER_SCALE);
                let basis = sample_orthonormal_basis(&mut rng, d, q);
                (center, basis)
            })
            .collect();
        for idx in 0..count {
            let (cc, basis) = &clusters[idx % spec.clusters_per_class];
            let y = sample_normal_vec(&mut rng, q, within_scale);
            let noise = sample_normal_vec(&mut rng, d, spec.noise_sigma);
            let mut x = cc.clone();
            for (j, b) in basis.iter().enumerate() {
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi += y[j] * bi;
                }
            }
            for (xi, ni) in x.iter_mut().zip(&noise) {
                *xi += ni;
            }
            rows.push(x);
            labels.push(class as i32);
        }
    }

    // Shuffle point order so downstream index order carries no class signal.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut features = Array2::<f32>::zeros((n, d));
    let mut shuffled_labels = vec![0i32; n];
    for (new_i, &old_i) in order.iter().enumerate() {
        for j in 0..d {
            features[[new_i, j]] = rows[old_i][j] as f32;
        }
        shuffled_labels[new_i] = labels[old_i];
    }
    DataSet::new(features, shuffled_labels, spec.num_classes)
}

/// Stratified label subsampling: per class, keep `round(ratio * n_c)` labels
/// (at least one), chosen uniformly at random; everything else becomes
/// unlabeled. Features are untouched. Deterministic in `seed`.
pub fn drop_labels(ds: &DataSet, ratio: f64, seed: u64) -> Result<DataSet, DataError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    if !ds.is_fully_labeled() {
        return Err(DataError::InvalidDataSet(
            "label subsampling expects a fully labeled dataset".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = ds.num_classes() as usize;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in ds.labels().iter().enumerate() {
        per_class[l as usize].push(i);
    }
    let mut labels = ds.labels().to_vec();
    for (class, idxs) in per_class.iter_mut().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        let mut keep = (ratio * idxs.len() as f64).round() as usize;
        if keep == 0 {
            log::warn!(
                "class {class}: ratio {ratio} would keep 0 of {} labels; keeping 1",
                idxs.len()
            );
            keep = 1;
        }
        idxs.shuffle(&mut rng);
        for &i in idxs.iter().skip(keep) {
            labels[i] = UNLABELED;
        }
    }
    DataSet::new(ds.features.clone(), labels, ds.num_classes())
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().map(|e| e.eq_ignore_ascii_case(ext)).unwrap_or(false)
}

/// Write the feature matrix (and optionally the labels) of `ds`. A `.csv`
/// extension selects the text format, anything else the binary format.
pub fn save_dataset(
    ds: &DataSet,
    features_path: &Path,
    labels_path: Option<&Path>,
) -> Result<(), DataError> {
    if has_extension(features_path, "csv") {
        save_features_csv(ds, features_path)?;
    } else {
        save_features_binary(ds, features_path)?;
    }
    if let Some(lp) = labels_path {
        if has_extension(lp, "csv") {
            save_labels_csv(ds, lp)?;
        } else {
            save_labels_binary(ds, lp)?;
        }
    }
    Ok(())
}

/// Write only the labels of `ds` (format chosen by extension, as in
/// [`save_dataset`]).
pub fn save_labels(ds: &DataSet, path: &Path) -> Result<(), DataError> {
    if has_extension(path, "csv") {
        save_labels_csv(ds, path)
    } else {
        save_labels_binary(ds, path)
    }
}

/// Load a dataset from a feature file and optionally a label file (formats
/// chosen by extension, as in [`save_dataset`]). Without a label file every
/// point is unlabeled and the class count defaults to the minimum of 2; load
/// a label file to get the real class count.
pub fn load_dataset(features_path: &Path, labels_path: Option<&Path>) -> Result<DataSet, DataError> {
    let features = if has_extension(features_path, "csv") {
        load_features_csv(features_path)?
    } else {
        load_features_binary(features_path)?
    };
    let n = features.nrows();
    match labels_path {
        None => DataSet::new(features, vec![UNLABELED; n], 2),
        Some(lp) => {
            let (labels, num_classes) = if has_extension(lp, "csv") {
                load_labels_csv(lp)?
            } else {
                load_labels_binary(lp)?
            };
            if labels.len() != n {
                return Err(DataError::format(
                    lp,
                    format!(
                        "label file has {} entries but feature file has {n} rows",
                        labels.len()
                    ),
                    0,
                ));
            }
            DataSet::new(features, labels, num_classes)
        }
    }
}

fn save_features_binary(ds: &DataSet, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        util::write_u32_le(&mut w, FORMAT_VERSION)?;
        util::write_u64_le(&mut w, ds.n() as u64)?;
        util::write_u64_le(&mut w, ds.d() as u64)?;
        for &v in ds.features.iter() {
            util::write_f32_le(&mut w, v)?;
        }
        w.flush()
    })();
    res.map_err(|e| DataError::io(path, e))
}

fn load_features_binary(path: &Path) -> Result<Array2<f32>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| DataError::io(path, e))?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::format(
            path,
            format!("bad magic {magic:?}, expected {FEATURE_MAGIC:?} (\"GSS1\")"),
            0,
        ));
    }
    let version = util::read_u32_le(&mut r).map_err(|e| DataError::io(path, e))?;
    if version != FORMAT_VERSION {
        return Err(DataError::format(
            path,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            4,
        ));
    }
    let n = util::read_u64_le(&mut r).map_err(|e| DataError::io(path, e))? as usize;
    let d = util::read_u64_le(&mut r).map_err(|e| DataError::io(path, e))? as usize;
    if n == 0 || d == 0 {
        return Err(DataError::format(path, format!("empty shape {n}x{d}"), 8));
    }
    let count = n
        .checked_mul(d)
        .ok_or_else(|| DataError::format(path, format!("shape {n}x{d} overflows"), 8))?;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|_| {
        DataError::format(path, format!("truncated: expected {count} f32 values"), 24)
    })?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| DataError::io(path, e))? != 0 {
        return Err(DataError::format(
            path,
            "trailing bytes after feature payload".to_string(),
            24 + count as u64 * 4,
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Array2::from_shape_vec((n, d), data)
        .map_err(|e| DataError::format(path, format!("shape error: {e}"), 24))
}

fn save_labels_binary(ds: &DataSet, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(LABEL_MAGIC)?;
        util::write_u32_le(&mut w, FORMAT_VERSION)?;
        util::write_u64_le(&mut w, ds.n() as u64)?;
        util::write_u32_le(&mut w, ds.num_classes())?;
        for &l in ds.labels() {
            util::write_i32_le(&mut w, l)?;
        }
        w.flush()
    })();
    res.map_err(|e| DataError::io(path, e))
}

fn load_labels_binary(path: &Path) -> Result<(Vec<i32>, u32), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| DataError::io(path, e))?;
    if &magic != LABEL_MAGIC {
        return Err(DataError::format(
            path,
            format!("bad magic {magic:?}, expected {LABEL_MAGIC:?} (\"GSL1\")"),
            0,
        ));
    }
    let version = util::read_u32_le(&mut r).map_err(|e| DataError::io(path, e))?;
    if version != FORMAT_VERSION {
        return Err(DataError::format(
            path,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            4,
        ));
    }
    let n = util::read_u64_le(&mut r).map_err(|e| DataError::io(path, e))? as usize;
    let num_classes = util::read_u32_le(&mut r).map_err(|e| DataError::io(path, e))?;
    if num_classes < 2 {
        return Err(DataError::format(
            path,
            format!("class count {num_classes} below 2"),
            16,
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let offset = 20 + 4 * i as u64;
        let l = util::read_i32_le(&mut r).map_err(|_| {
            DataError::format(path, format!("truncated at label row {i}"), offset)
        })?;
        if l != UNLABELED && (l < 0 || l as u32 >= num_classes) {
            return Err(DataError::format(
                path,
                format!("label {l} at row {i} outside [0, {num_classes})"),
                offset,
            ));
        }
        labels.push(l);
    }
    Ok((labels, num_classes))
}

fn save_features_csv(ds: &DataSet, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        let header: Vec<String> = (0..ds.d()).map(|j| format!("f{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in ds.features.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()
    })();
    res.map_err(|e| DataError::io(path, e))
}

fn load_features_csv(path: &Path) -> Result<Array2<f32>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let r = BufReader::new(file);
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::format(path, "empty file, expected header row".to_string(), 0))?;
    let header = header.map_err(|e| DataError::io(path, e))?;
    let d = header.split(',').count();
    let mut data: Vec<f32> = Vec::new();
    let mut n = 0usize;
    for (lineno, line) in lines {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d {
            return Err(DataError::format(
                path,
                format!("row {lineno} has {} columns, expected {d}", cells.len()),
                0,
            ));
        }
        for cell in cells {
            let v: f32 = cell.trim().parse().map_err(|_| {
                DataError::format(path, format!("row {lineno}: bad float {cell:?}"), 0)
            })?;
            data.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::format(path, "no data rows".to_string(), 0));
    }
    Array2::from_shape_vec((n, d), data)
        .map_err(|e| DataError::format(path, format!("shape error: {e}"), 0))
}

fn save_labels_csv(ds: &DataSet, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "label")?;
        for &l in ds.labels() {
            writeln!(w, "{l}")?;
        }
        w.flush()
    })();
    res.map_err(|e| DataError::io(path, e))
}

fn load_labels_csv(path: &Path) -> Result<(Vec<i32>, u32), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let r = BufReader::new(file);
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::format(path, "empty file, expected header row".to_string(), 0))?;
    let header = header.map_err(|e| DataError::io(path, e))?;
    if header.trim() != "label" {
        return Err(DataError::format(
            path,
            format!("expected header \"label\", got {header:?}"),
            0,
        ));
    }
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: i32 = line.trim().parse().map_err(|_| {
            DataError::format(path, format!("row {lineno}: bad label {line:?}"), 0)
        })?;
        if l < UNLABELED {
            return Err(DataError::format(
                path,
                format!("row {lineno}: label {l} below {UNLABELED}"),
                0,
            ));
        }
        labels.push(l);
    }
    // The CSV label format carries no explicit class count; infer it.
    let max_label = labels.iter().copied().max().unwrap_or(UNLABELED);
    let num_classes = (max_label + 1).max(2) as u32;
    Ok((labels, num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn spec(n: usize, c: u32, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n,
            d: 8,
            num_classes: c,
            clusters_per_class: 3,
            noise_sigma: 0.2,
            seed,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&spec(100, 4, 7)).unwrap();
        let b = generate_synthetic(&spec(100, 4, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_balances_classes() {
        let ds = generate_synthetic(&spec(100, 4, 7)).unwrap();
        assert_eq!(ds.class_counts(), vec![25, 25, 25, 25]);
        let ds = generate_synthetic(&spec(102, 4, 7)).unwrap();
        let mut counts = ds.class_counts();
        counts.sort_unstable();
        assert_eq!(counts, vec![25, 25, 26, 26]);
    }

    #[test]
    fn generator_rejects_bad_specs() {
        assert!(generate_synthetic(&spec(3, 4, 0)).is_err());
        let mut s = spec(100, 4, 0);
        s.noise_sigma = 0.0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(100, 4, 0);
        s.noise_sigma = -1.0;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn drop_labels_identity_at_ratio_one() {
        let ds = generate_synthetic(&spec(60, 3, 1)).unwrap();
        let out = drop_labels(&ds, 1.0, 9).unwrap();
        assert_eq!(ds, out);
        assert!(out.label_mask().iter().all(|&m| m));
    }

    #[test]
    fn drop_labels_stratified_counts() {
        // 1000 points over 10 balanced classes at 5% -> exactly 5 per class.
        let ds = generate_synthetic(&SyntheticSpec {
            n: 1000,
            d: 6,
            num_classes: 10,
            clusters_per_class: 2,
            noise_sigma: 0.2,
            seed: 3,
        })
        .unwrap();
        let out = drop_labels(&ds, 0.05, 11).unwrap();
        assert_eq!(out.num_labeled(), 50);
        assert!(out.class_counts().iter().all(|&c| c == 5));
    }

    #[test]
    fn drop_labels_keeps_at_least_one_per_class() {
        // A class of 10 points at ratio 0.02 rounds to 0; the guard keeps 1.
        let ds = generate_synthetic(&SyntheticSpec {
            n: 40,
            d: 4,
            num_classes: 4,
            clusters_per_class: 1,
            noise_sigma: 0.2,
            seed: 5,
        })
        .unwrap();
        let out = drop_labels(&ds, 0.02, 13).unwrap();
        assert!(out.class_counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn drop_labels_preserves_features() {
        let ds = generate_synthetic(&spec(80, 4, 2)).unwrap();
        let out = drop_labels(&ds, 0.3, 17).unwrap();
        assert_eq!(ds.features(), out.features());
        assert_eq!(ds.n(), out.n());
    }

    #[test]
    fn drop_labels_rejects_bad_inputs() {
        let ds = generate_synthetic(&spec(40, 4, 2)).unwrap();
        assert!(matches!(drop_labels(&ds, 0.0, 1), Err(DataError::BadRatio(_))));
        assert!(matches!(drop_labels(&ds, 1.5, 1), Err(DataError::BadRatio(_))));
        let partial = drop_labels(&ds, 0.5, 1).unwrap();
        assert!(drop_labels(&partial, 0.5, 1).is_err());
    }

    #[test]
    fn dataset_invariants_enforced() {
        let f = Array2::<f32>::zeros((3, 2));
        assert!(DataSet::new(f.clone(), vec![0, 1, 4], 3).is_err());
        assert!(DataSet::new(f.clone(), vec![0, 1, -2], 3).is_err());
        assert!(DataSet::new(f.clone(), vec![0, 1], 3).is_err());
        assert!(DataSet::new(f.clone(), vec![0, 1, 1], 1).is_err());
        let ds = DataSet::new(f, vec![0, UNLABELED, 1], 3).unwrap();
        assert_eq!(ds.label_mask(), &[true, false, true]);
        assert_eq!(ds.label_of(1), None);
        assert_eq!(ds.label_of(2), Some(1));
    }

    #[test]
    fn binary_round_trip() {
        let ds = generate_synthetic(&spec(50, 3, 21)).unwrap();
        let ds = drop_labels(&ds, 0.5, 4).unwrap();
        let dir = tempdir().unwrap();
        let fp = dir.path().join("x.gss1");
        let lp = dir.path().join("y.gsl1");
        save_dataset(&ds, &fp, Some(&lp)).unwrap();
        let back = load_dataset(&fp, Some(&lp)).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_synthetic(&spec(30, 3, 22)).unwrap();
        let dir = tempdir().unwrap();
        let fp = dir.path().join("x.csv");
        let lp = dir.path().join("y.csv");
        save_dataset(&ds, &fp, Some(&lp)).unwrap();
        let back = load_dataset(&fp, Some(&lp)).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn load_without_labels_gives_unlabeled_dataset() {
        let ds = generate_synthetic(&spec(30, 3, 23)).unwrap();
        let dir = tempdir().unwrap();
        let fp = dir.path().join("x.gss1");
        save_dataset(&ds, &fp, None).unwrap();
        let back = load_dataset(&fp, None).unwrap();
        assert_eq!(back.num_labeled(), 0);
        assert_eq!(back.features(), ds.features());
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempdir().unwrap();
        let fp = dir.path().join("x.gss1");
        std::fs::write(&fp, b"NOPE0000000000000000000000000000").unwrap();
        let err = load_dataset(&fp, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("GSS1"), "message should name the expected magic: {msg}");
    }

    #[test]
    fn truncated_features_are_reported() {
        let ds = generate_synthetic(&spec(30, 3, 24)).unwrap();
        let dir = tempdir().unwrap();
        let fp = dir.path().join("x.gss1");
        save_dataset(&ds, &fp, None).unwrap();
        let bytes = std::fs::read(&fp).unwrap();
        std::fs::write(&fp, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_dataset(&fp, None).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn out_of_range_label_names_row() {
        let ds = generate_synthetic(&spec(10, 2, 25)).unwrap();
        let dir = tempdir().unwrap();
        let fp = dir.path().join("x.gss1");
        let lp = dir.path().join("y.gsl1");
        save_dataset(&ds, &fp, Some(&lp)).unwrap();
        // Corrupt label row 4 to class index 3 (num_classes is 2).
        let mut bytes = std::fs::read(&lp).unwrap();
        let off = 20 + 4 * 4;
        bytes[off..off + 4].copy_from_slice(&3i32.to_le_bytes());
        std::fs::write(&lp, &bytes).unwrap();
        let err = load_dataset(&fp, Some(&lp)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 4"), "message should name the row: {msg}");
    }

    proptest! {
        #[test]
        fn prop_drop_labels_stratification(
            class_sizes in proptest::collection::vec(1usize..40, 2..6),
            ratio in 0.01f64..1.0,
            seed in any::<u64>(),
        ) {
            let c = class_sizes.len() as u32;
            let n: usize = class_sizes.iter().sum();
            let mut labels = Vec::new();
            for (class, &sz) in class_sizes.iter().enumerate() {
                labels.extend(std::iter::repeat_n(class as i32, sz));
            }
            let features = Array2::<f32>::zeros((n, 2));
            let ds = DataSet::new(features, labels, c).unwrap();
            let out = drop_labels(&ds, ratio, seed).unwrap();
            prop_assert_eq!(ds.features(), out.features());
            for (class, &sz) in class_sizes.iter().enumerate() {
                let kept = out.class_counts()[class] as f64;
                let want = ratio * sz as f64;
                prop_assert!(kept >= 1.0);
                prop_assert!((kept - want).abs() <= 1.0,
                    "class {} kept {} want {}", class, kept, want);
            }
        }

        #[test]
        fn prop_generator_pure(n in 8usize..60, c in 2u32..5, seed in any::<u64>()) {
            let s = SyntheticSpec {
                n, d: 5, num_classes: c, clusters_per_class: 2,
                noise_sigma: 0.3, seed,
            };
            let a = generate_synthetic(&s).unwrap();
            let b = generate_synthetic(&s).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn prop_binary_round_trip(n in 1usize..20, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let features = Array2::from_shape_fn((n, d), |_| rng.random::<f32>() * 100.0 - 50.0);
            let labels: Vec<i32> = (0..n).map(|_| rng.random_range(-1..3)).collect();
            let ds = DataSet::new(features, labels, 3).unwrap();
            let dir = tempdir().unwrap();
            let fp = dir.path().join("x.gss1");
            let lp = dir.path().join("y.gsl1");
            save_dataset(&ds, &fp, Some(&lp)).unwrap();
            let back = load_dataset(&fp, Some(&lp)).unwrap();
            prop_assert_eq!(ds, back);
        }
    }
}
