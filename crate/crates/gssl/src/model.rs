//! Feed-forward classifier with the composite semi-supervised loss, manual
//! gradients, dropout, and AdaGrad.
//!
//! The per-batch objective, averaged over the batch's nodes, is the
//! supervised cross-entropy on labeled nodes, plus the graph regularizer
//! γ·ω_ij·H^c(p_i, p_j) over ordered node pairs joined by a batch-internal
//! edge, minus (κ + γ·Σ_j ω_ij)·H(p_i) per node, plus λ‖W‖² (squared L2 over
//! weight matrices, once per batch). Gradients are computed analytically
//! through a single shared forward pass per batch; dropout masks are
//! deterministic in the batch's dropout seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::DataSet;
use crate::knngraph::AffinityGraph;
use crate::util::{read_f64_le, read_u32_le, read_u64_le, write_f64_le, write_u32_le, write_u64_le};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMD1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Probabilities are floored at this value inside logarithms.
const PROB_FLOOR: f64 = 1e-12;
/// AdaGrad denominator offset.
const ADAGRAD_DELTA: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch integrity: {0}")]
    Integrity(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite parameter {param} after update")]
    NonFiniteParam { param: String },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn format(path: &Path, detail: impl Into<String>) -> Self {
        ModelError::Format {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }
}

/// Weights of the loss terms. The uniform reference distribution of the
/// entropy regularizer is implicit (1/C per class).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub kappa: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.004,
            kappa: 0.01,
            lambda: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("kappa", self.kappa),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::Config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term loss breakdown; `total` is the sum of the four terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub graph: f64,
    pub entropy: f64,
    pub l2: f64,
}

/// Layer parameters, AdaGrad accumulators, and the dropout setting of the
/// classifier. Layer `l` maps width `dims[l]` to `dims[l+1]` via
/// `A·W_l + b_l`; hidden layers apply ReLU (and inverted dropout when
/// training), the final layer a max-subtracted softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    acc_w: Vec<Array2<f64>>,
    acc_b: Vec<Array1<f64>>,
    dropout_p: f64,
    init_seed: u64,
}

impl ModelState {
    /// Fresh state: weights N(0, 2/fan_in) (ReLU-appropriate), biases zero,
    /// accumulators zero. Deterministic in `init_seed`.
    pub fn new(layer_dims: &[usize], dropout_p: f64, init_seed: u64) -> Result<Self, ModelError> {
        if layer_dims.len() < 2 {
            return Err(ModelError::Config(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(ModelError::Config(format!(
                "zero-width layer in {layer_dims:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p must be in [0, 1), got {dropout_p}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut acc_w = Vec::new();
        let mut acc_b = Vec::new();
        for l in 0..layer_dims.len() - 1 {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let sigma = (2.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
            acc_w.push(Array2::zeros((fan_in, fan_out)));
            acc_b.push(Array1::zeros(fan_out));
        }
        Ok(ModelState {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            acc_w,
            acc_b,
            dropout_p,
            init_seed,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn weights(&self, l: usize) -> &Array2<f64> {
        &self.weights[l]
    }

    pub fn biases(&self, l: usize) -> &Array1<f64> {
        &self.biases[l]
    }

    pub fn acc_weights(&self, l: usize) -> &Array2<f64> {
        &self.acc_w[l]
    }

    pub fn acc_biases(&self, l: usize) -> &Array1<f64> {
        &self.acc_b[l]
    }

    /// Total number of scalar parameters (weights then biases, per layer).
    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Flat parameter access in a fixed order (layer 0 weights row-major,
    /// layer 0 biases, layer 1 weights, ...), for finite-difference probes.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if idx < w.len() {
                return w.as_slice().unwrap()[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            if idx < w.len() {
                w.as_slice_mut().unwrap()[idx] = value;
                return;
            }
            idx -= w.len();
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Sum of squared weight-matrix entries (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    /// Write a bit-exact checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let file = File::create(path).map_err(|e| ModelError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            w.write_all(CHECKPOINT_MAGIC)?;
            write_u32_le(&mut w, CHECKPOINT_VERSION)?;
            write_u32_le(&mut w, self.layer_dims.len() as u32)?;
            for &d in &self.layer_dims {
                write_u64_le(&mut w, d as u64)?;
            }
            write_f64_le(&mut w, self.dropout_p)?;
            write_u64_le(&mut w, self.init_seed)?;
            for l in 0..self.num_layers() {
                for &x in self.weights[l].iter() {
                    write_f64_le(&mut w, x)?;
                }
                for &x in self.biases[l].iter() {
                    write_f64_le(&mut w, x)?;
                }
            }
            for l in 0..self.num_layers() {
                for &x in self.acc_w[l].iter() {
                    write_f64_le(&mut w, x)?;
                }
                for &x in self.acc_b[l].iter() {
                    write_f64_le(&mut w, x)?;
                }
            }
            w.flush()
        })();
        res.map_err(|e| ModelError::io(path, e))
    }

    /// Load a checkpoint written by [`ModelState::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(|e| ModelError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| ModelError::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::format(
                path,
                format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            ));
        }
        let version = read_u32_le(&mut r).map_err(|e| ModelError::io(path, e))?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let ndims = read_u32_le(&mut r).map_err(|e| ModelError::io(path, e))? as usize;
        if !(2..=64).contains(&ndims) {
            return Err(ModelError::format(path, format!("implausible layer count {ndims}")));
        }
        let mut layer_dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let d = read_u64_le(&mut r).map_err(|e| ModelError::io(path, e))? as usize;
            if d == 0 {
                return Err(ModelError::format(path, "zero layer width"));
            }
            layer_dims.push(d);
        }
        let dropout_p = read_f64_le(&mut r).map_err(|e| ModelError::io(path, e))?;
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(ModelError::format(path, format!("bad dropout_p {dropout_p}")));
        }
        let init_seed = read_u64_le(&mut r).map_err(|e| ModelError::io(path, e))?;
        type LayerArrays = (Vec<Array2<f64>>, Vec<Array1<f64>>);
        let read_layer_pair = |r: &mut BufReader<File>| -> Result<LayerArrays, ModelError> {
            let mut ws = Vec::new();
            let mut bs = Vec::new();
            for l in 0..ndims - 1 {
                let (fi, fo) = (layer_dims[l], layer_dims[l + 1]);
                let mut w = Array2::zeros((fi, fo));
                for x in w.iter_mut() {
                    *x = read_f64_le(r).map_err(|e| ModelError::io(path, e))?;
                }
                let mut b = Array1::zeros(fo);
                for x in b.iter_mut() {
                    *x = read_f64_le(r).map_err(|e| ModelError::io(path, e))?;
                }
                ws.push(w);
                bs.push(b);
            }
            Ok((ws, bs))
        };
        let (weights, biases) = read_layer_pair(&mut r)?;
        let (acc_w, acc_b) = read_layer_pair(&mut r)?;
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(ModelError::format(path, "trailing bytes after checkpoint")),
            Err(e) => return Err(ModelError::io(path, e)),
        }
        if acc_w.iter().any(|a| a.iter().any(|&x| x < 0.0))
            || acc_b.iter().any(|a| a.iter().any(|&x| x < 0.0))
        {
            return Err(ModelError::format(path, "negative AdaGrad accumulator"));
        }
        Ok(ModelState {
            layer_dims,
            weights,
            biases,
            acc_w,
            acc_b,
            dropout_p,
            init_seed,
        })
    }
}

/// Gradient with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub d_w: Vec<Array2<f64>>,
    pub d_b: Vec<Array1<f64>>,
}

impl Gradient {
    pub fn zeros_like(state: &ModelState) -> Self {
        Gradient {
            d_w: state.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            d_b: state.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Flat access in the same order as [`ModelState::get_param`].
    pub fn get(&self, mut idx: usize) -> f64 {
        for (w, b) in self.d_w.iter().zip(&self.d_b) {
            if idx < w.len() {
                return w.as_slice().unwrap()[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("gradient index out of range");
    }
}

/// Forward-pass mode: training applies inverted dropout deterministic in the
/// seed; evaluation applies no dropout and no rescaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Gather batch rows of the dataset's features as f64 (exact promotion).
pub fn gather_features(ds: &DataSet, batch: &[u32]) -> Result<Array2<f64>, ModelError> {
    let feats = ds.features();
    let mut x = Array2::zeros((batch.len(), ds.d()));
    for (row, &i) in batch.iter().enumerate() {
        let i = i as usize;
        if i >= ds.n() {
            return Err(ModelError::Integrity(format!(
                "batch node {i} outside dataset of {} points",
                ds.n()
            )));
        }
        for j in 0..ds.d() {
            x[[row, j]] = f64::from(feats[[i, j]]);
        }
    }
    Ok(x)
}

struct ForwardCache {
    /// `acts[l]` is the input to layer `l` (post-ReLU, post-dropout);
    /// `acts[0]` is the batch features.
    acts: Vec<Array2<f64>>,
    /// `zs[l]` is the pre-activation output of layer `l`.
    zs: Vec<Array2<f64>>,
    /// Inverted-dropout masks (entries 0 or 1/(1-p)) per hidden layer.
    masks: Vec<Option<Array2<f64>>>,
    /// Softmax output.
    p: Array2<f64>,
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        // Max subtraction makes s >= 1; flooring keeps entries strictly
        // positive even when an exponent underflows.
        row.mapv_inplace(|v| (v / s).max(f64::MIN_POSITIVE));
    }
    p
}

fn forward_cached(
    state: &ModelState,
    x: &Array2<f64>,
    mode: ForwardMode,
) -> Result<ForwardCache, ModelError> {
    if x.ncols() != state.input_dim() {
        return Err(ModelError::Shape(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            state.input_dim()
        )));
    }
    let l_total = state.num_layers();
    let mut rng = match mode {
        ForwardMode::Train { dropout_seed } if state.dropout_p > 0.0 => {
            Some(ChaCha8Rng::seed_from_u64(dropout_seed))
        }
        _ => None,
    };
    let mut acts: Vec<Array2<f64>> = vec![x.clone()];
    let mut zs = Vec::new();
    let mut masks = Vec::new();
    for l in 0..l_total {
        let z = acts[l].dot(&state.weights[l]) + &state.biases[l];
        if l + 1 < l_total {
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = rng.as_mut().map(|rng| {
                let keep = 1.0 - state.dropout_p;
                Array2::from_shape_fn(h.raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            });
            if let Some(m) = &mask {
                h *= m;
            }
            masks.push(mask);
            zs.push(z);
            acts.push(h);
        } else {
            let p = softmax_rows(&z);
            zs.push(z);
            return Ok(ForwardCache { acts, zs, masks, p });
        }
    }
    unreachable!("at least one layer");
}

/// Run the classifier on a feature batch; each output row is a class
/// distribution (strictly positive, summing to 1 within 1e-12).
pub fn forward(state: &ModelState, x: &Array2<f64>, mode: ForwardMode) -> Result<Array2<f64>, ModelError> {
    forward_cached(state, x, mode).map(|c| c.p)
}

/// Resolved batch context: node -> row map and batch-internal weighted
/// degrees.
struct BatchContext {
    /// For each batch row, the weighted degree over batch-internal edges.
    internal_degree: Vec<f64>,
    /// Row index of each graph node present in the batch, else -1.
    row_of: Vec<i32>,
}

fn resolve_batch(g: &AffinityGraph, batch: &[u32]) -> Result<BatchContext, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Integrity("empty batch".into()));
    }
    let mut row_of = vec![-1i32; g.n()];
    for (row, &i) in batch.iter().enumerate() {
        let i = i as usize;
        if i >= g.n() {
            return Err(ModelError::Integrity(format!(
                "batch node {i} outside graph of {} nodes",
                g.n()
            )));
        }
        if row_of[i] >= 0 {
            return Err(ModelError::Integrity(format!("node {i} appears twice in batch")));
        }
        row_of[i] = row as i32;
    }
    let mut internal_degree = vec![0.0f64; batch.len()];
    for (row, &i) in batch.iter().enumerate() {
        let (nbrs, ws) = g.neighbors(i as usize);
        for (&j, &w) in nbrs.iter().zip(ws) {
            if row_of[j as usize] >= 0 {
                internal_degree[row] += f64::from(w);
            }
        }
    }
    Ok(BatchContext {
        internal_degree,
        row_of,
    })
}

fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Compute the loss breakdown for a batch given its forward output `p`;
/// when `grad_p` is given, also accumulate the gradient of the unnormalized
/// term sums with respect to each probability.
fn accumulate_terms(
    state: &ModelState,
    cfg: &LossConfig,
    g: &AffinityGraph,
    ds: &DataSet,
    batch: &[u32],
    p: &Array2<f64>,
    mut grad_p: Option<&mut Array2<f64>>,
) -> Result<LossBreakdown, ModelError> {
    cfg.validate()?;
    let n = batch.len();
    let c = state.num_classes();
    if ds.num_classes() as usize != c {
        return Err(ModelError::Shape(format!(
            "dataset has {} classes, model outputs {c}",
            ds.num_classes()
        )));
    }
    if p.nrows() != n || p.ncols() != c {
        return Err(ModelError::Shape(format!(
            "P is {}x{}, batch needs {n}x{c}",
            p.nrows(),
            p.ncols()
        )));
    }
    if ds.n() != g.n() {
        return Err(ModelError::Shape(format!(
            "dataset has {} points, graph {} nodes",
            ds.n(),
            g.n()
        )));
    }
    let ctx = resolve_batch(g, batch)?;

    // Supervised cross-entropy over labeled nodes.
    let mut sup_sum = 0.0;
    for (row, &i) in batch.iter().enumerate() {
        if let Some(t) = ds.label_of(i as usize) {
            let pt = p[[row, t as usize]];
            sup_sum -= ln_floored(pt);
            if let Some(gp) = grad_p.as_deref_mut() {
                if pt > PROB_FLOOR {
                    gp[[row, t as usize]] -= 1.0 / pt;
                }
            }
        }
    }

    // Graph cross-entropy over ordered batch-internal pairs.
    let mut graph_sum = 0.0;
    if cfg.gamma > 0.0 {
        for (row_i, &i) in batch.iter().enumerate() {
            let (nbrs, ws) = g.neighbors(i as usize);
            for (&j, &w) in nbrs.iter().zip(ws) {
                let row_j = ctx.row_of[j as usize];
                if row_j < 0 {
                    continue;
                }
                let row_j = row_j as usize;
                let w = f64::from(w);
                let mut hc = 0.0;
                for k in 0..c {
                    let pik = p[[row_i, k]];
                    let ljk = ln_floored(p[[row_j, k]]);
                    hc -= pik * ljk;
                    if let Some(gp) = grad_p.as_deref_mut() {
                        gp[[row_i, k]] -= cfg.gamma * w * ljk;
                        let pjk = p[[row_j, k]];
                        if pjk > PROB_FLOOR {
                            gp[[row_j, k]] -= cfg.gamma * w * pik / pjk;
                        }
                    }
                }
                graph_sum += cfg.gamma * w * hc;
            }
        }
    }

    // Entropy regularizer: -(kappa + gamma * internal degree) * H(p_i).
    let mut ent_sum = 0.0;
    for row in 0..n {
        let coeff = cfg.kappa + cfg.gamma * ctx.internal_degree[row];
        if coeff == 0.0 {
            continue;
        }
        let mut h = 0.0;
        for k in 0..c {
            let pik = p[[row, k]];
            let l = ln_floored(pik);
            h -= pik * l;
            if let Some(gp) = grad_p.as_deref_mut() {
                gp[[row, k]] += coeff * (l + if pik > PROB_FLOOR { 1.0 } else { 0.0 });
            }
        }
        ent_sum -= coeff * h;
    }

    let inv_n = 1.0 / n as f64;
    let supervised = sup_sum * inv_n;
    let graph = graph_sum * inv_n;
    let entropy = ent_sum * inv_n;
    let l2 = cfg.lambda * state.weight_sq_norm();
    Ok(LossBreakdown {
        total: supervised + graph + entropy + l2,
        supervised,
        graph,
        entropy,
        l2,
    })
}

/// Mean-per-node composite loss of a batch, given the forward output `p`
/// for exactly that batch.
pub fn batch_loss(
    state: &ModelState,
    cfg: &LossConfig,
    g: &AffinityGraph,
    ds: &DataSet,
    batch: &[u32],
    p: &Array2<f64>,
) -> Result<LossBreakdown, ModelError> {
    accumulate_terms(state, cfg, g, ds, batch, p, None)
}

/// Analytic gradient of [`batch_loss`] with respect to all parameters,
/// sharing a single forward pass (whose dropout mask is deterministic in
/// `dropout_seed`). Also returns the loss breakdown of that same pass.
pub fn batch_gradient(
    state: &ModelState,
    cfg: &LossConfig,
    g: &AffinityGraph,
    ds: &DataSet,
    batch: &[u32],
    dropout_seed: u64,
) -> Result<(Gradient, LossBreakdown), ModelError> {
    let x = gather_features(ds, batch)?;
    let cache = forward_cached(state, &x, ForwardMode::Train { dropout_seed })?;
    let mut grad_p = Array2::<f64>::zeros(cache.p.raw_dim());
    let breakdown = accumulate_terms(state, cfg, g, ds, batch, &cache.p, Some(&mut grad_p))?;

    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    // Softmax Jacobian: dZ[i,k] = p[i,k] * (G[i,k] - sum_j G[i,j] p[i,j]),
    // scaled by the 1/|batch| normalization of the term sums.
    let row_dot = (&grad_p * &cache.p).sum_axis(Axis(1));
    let mut dz = &cache.p * &(&grad_p - &row_dot.insert_axis(Axis(1)));
    dz.mapv_inplace(|v| v * inv_n);

    let l_total = state.num_layers();
    let mut grad = Gradient::zeros_like(state);
    for l in (0..l_total).rev() {
        grad.d_w[l] = cache.acts[l].t().dot(&dz);
        grad.d_b[l] = dz.sum_axis(Axis(0));
        if l > 0 {
            let mut da = dz.dot(&state.weights[l].t());
            if let Some(mask) = &cache.masks[l - 1] {
                da *= mask;
            }
            // ReLU gate on the hidden pre-activation.
            dz = da * &cache.zs[l - 1].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
        }
    }
    // Squared-L2 weight decay, once per batch (not normalized by batch size).
    for l in 0..l_total {
        grad.d_w[l].scaled_add(2.0 * cfg.lambda, &state.weights[l]);
    }
    Ok((grad, breakdown))
}

/// AdaGrad update: accumulator += g²; parameter -= lr·g/√(accumulator + δ).
/// A non-finite gradient is rejected without touching the state.
pub fn adagrad_step(state: &mut ModelState, grad: &Gradient, lr: f64) -> Result<(), ModelError> {
    if grad.d_w.len() != state.num_layers() || grad.d_b.len() != state.num_layers() {
        return Err(ModelError::Shape(format!(
            "gradient has {} layers, model {}",
            grad.d_w.len(),
            state.num_layers()
        )));
    }
    for l in 0..state.num_layers() {
        if grad.d_w[l].raw_dim() != state.weights[l].raw_dim()
            || grad.d_b[l].raw_dim() != state.biases[l].raw_dim()
        {
            return Err(ModelError::Shape(format!("gradient shape mismatch at layer {l}")));
        }
        if grad.d_w[l].iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteGradient { param: format!("W{l}") });
        }
        if grad.d_b[l].iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteGradient { param: format!("b{l}") });
        }
    }
    for l in 0..state.num_layers() {
        ndarray::Zip::from(&mut state.acc_w[l])
            .and(&mut state.weights[l])
            .and(&grad.d_w[l])
            .for_each(|acc, w, &g| {
                *acc += g * g;
                *w -= lr * g / (*acc + ADAGRAD_DELTA).sqrt();
            });
        ndarray::Zip::from(&mut state.acc_b[l])
            .and(&mut state.biases[l])
            .and(&grad.d_b[l])
            .for_each(|acc, b, &g| {
                *acc += g * g;
                *b -= lr * g / (*acc + ADAGRAD_DELTA).sqrt();
            });
    }
    for l in 0..state.num_layers() {
        if state.weights[l].iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteParam { param: format!("W{l}") });
        }
        if state.biases[l].iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteParam { param: format!("b{l}") });
        }
    }
    Ok(())
}
