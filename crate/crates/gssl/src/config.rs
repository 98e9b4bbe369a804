//! Run configuration: a plain-text `key = value` format with `#` comments
//! and dotted section prefixes, plus a canonical echo that re-parses to an
//! identical configuration.
//!
//! Unknown and duplicate keys are rejected so a typo cannot silently fall
//! back to a default. Every key has a documented default; an empty file (or
//! no file at all) is a complete, valid configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::knngraph::SigmaMode;
use crate::model::LossConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{location}: {detail}")]
    Parse { location: String, detail: String },
    #[error("{location}: unknown key `{key}`")]
    UnknownKey { location: String, key: String },
    #[error("{location}: duplicate key `{key}`")]
    DuplicateKey { location: String, key: String },
    #[error("invalid value for `{key}`: {detail}")]
    BadValue { key: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Synthetic-data keys (`gen.*`) plus the label subsampling ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct GenKeys {
    pub n: usize,
    pub d: usize,
    pub classes: u32,
    pub clusters_per_class: usize,
    pub noise_sigma: f64,
    pub label_ratio: f64,
}

/// Graph construction keys (`graph.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphKeys {
    pub k_nn: usize,
    pub sigma: SigmaMode,
    pub distance_exponent: u8,
}

/// Partitioning keys (`partition.*`). `blocks = 0` derives the block count
/// from the dataset size and the plan's block size.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionKeys {
    pub blocks: usize,
    pub eps: f64,
}

/// Meta-batch plan keys (`plan.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanKeys {
    pub block_size: usize,
    pub blocks_per_meta: usize,
}

/// Network shape keys (`model.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelKeys {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

/// Training-loop keys (`train.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainKeys {
    pub epochs: usize,
    pub base_lr: f64,
    pub workers: usize,
    pub lr_reset_epoch: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

/// Artifact file names (`data.*`), resolved relative to the run directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct DataKeys {
    pub features: String,
    pub labels: String,
    pub labels_full: String,
}

/// The complete configuration of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataKeys,
    pub gen: GenKeys,
    pub graph: GraphKeys,
    pub partition: PartitionKeys,
    pub plan: PlanKeys,
    pub loss: LossConfig,
    pub model: ModelKeys,
    pub train: TrainKeys,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataKeys {
                features: "features.gss1".into(),
                labels: "labels.gsl1".into(),
                labels_full: "labels_full.gsl1".into(),
            },
            gen: GenKeys {
                n: 10000,
                d: 20,
                classes: 10,
                clusters_per_class: 50,
                noise_sigma: 0.3,
                label_ratio: 0.05,
            },
            graph: GraphKeys {
                k_nn: 10,
                sigma: SigmaMode::Median,
                distance_exponent: 1,
            },
            partition: PartitionKeys { blocks: 0, eps: 0.05 },
            plan: PlanKeys {
                block_size: 128,
                blocks_per_meta: 8,
            },
            loss: LossConfig::default(),
            model: ModelKeys {
                hidden: vec![256, 256],
                dropout: 0.2,
            },
            train: TrainKeys {
                epochs: 30,
                base_lr: 0.001,
                workers: 1,
                lr_reset_epoch: 10,
                eval_every: 0,
                checkpoint_every: 1,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        detail: format!("`{value}`: {e}"),
    })
}

fn parse_hidden(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_num::<usize>(key, part.trim()))
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment. `location` names the source line
    /// (or override) for error messages.
    pub fn set(&mut self, key: &str, value: &str, location: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "data.features" => self.data.features = value.to_string(),
            "data.labels" => self.data.labels = value.to_string(),
            "data.labels_full" => self.data.labels_full = value.to_string(),
            "gen.n" => self.gen.n = parse_num(key, value)?,
            "gen.d" => self.gen.d = parse_num(key, value)?,
            "gen.classes" => self.gen.classes = parse_num(key, value)?,
            "gen.clusters_per_class" => self.gen.clusters_per_class = parse_num(key, value)?,
            "gen.noise_sigma" => self.gen.noise_sigma = parse_num(key, value)?,
            "gen.label_ratio" => self.gen.label_ratio = parse_num(key, value)?,
            "graph.k_nn" => self.graph.k_nn = parse_num(key, value)?,
            "graph.sigma" => {
                self.graph.sigma = if value == "median" {
                    SigmaMode::Median
                } else {
                    let s: f64 = parse_num(key, value)?;
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            detail: format!("sigma must be `median` or a positive number, got `{value}`"),
                        });
                    }
                    SigmaMode::Fixed(s)
                };
            }
            "graph.distance_exponent" => self.graph.distance_exponent = parse_num(key, value)?,
            "partition.blocks" => self.partition.blocks = parse_num(key, value)?,
            "partition.eps" => self.partition.eps = parse_num(key, value)?,
            "plan.block_size" => self.plan.block_size = parse_num(key, value)?,
            "plan.blocks_per_meta" => self.plan.blocks_per_meta = parse_num(key, value)?,
            "loss.gamma" => self.loss.gamma = parse_num(key, value)?,
            "loss.kappa" => self.loss.kappa = parse_num(key, value)?,
            "loss.lambda" => self.loss.lambda = parse_num(key, value)?,
            "model.hidden" => self.model.hidden = parse_hidden(key, value)?,
            "model.dropout" => self.model.dropout = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.base_lr" => self.train.base_lr = parse_num(key, value)?,
            "train.workers" => self.train.workers = parse_num(key, value)?,
            "train.lr_reset_epoch" => self.train.lr_reset_epoch = parse_num(key, value)?,
            "train.eval_every" => self.train.eval_every = parse_num(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    location: location.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parse a configuration text on top of the defaults. Duplicate keys are
    /// rejected; `source` names the text in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let location = format!("{source}:{}", lineno + 1);
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    location,
                    detail: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    location,
                    detail: "empty key".into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    location,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value, &location)?;
        }
        Ok(cfg)
    }

    /// Read and parse a configuration file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply `--set key=value` overrides (later entries win over the file,
    /// duplicates among overrides are allowed and apply in order).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), ConfigError> {
        for (i, pair) in pairs.iter().enumerate() {
            let location = format!("--set #{}", i + 1);
            let Some((key, value)) = pair.split_once('=') else {
                return Err(ConfigError::Parse {
                    location,
                    detail: format!("expected `key=value`, got `{pair}`"),
                });
            };
            self.set(key.trim(), value.trim(), &location)?;
        }
        Ok(())
    }

    /// Canonical echo: every key with its current value, grouped by section.
    /// Re-parsing the echo yields an identical configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "data.features = {}", self.data.features);
        let _ = writeln!(out, "data.labels = {}", self.data.labels);
        let _ = writeln!(out, "data.labels_full = {}", self.data.labels_full);
        let _ = writeln!(out, "gen.n = {}", self.gen.n);
        let _ = writeln!(out, "gen.d = {}", self.gen.d);
        let _ = writeln!(out, "gen.classes = {}", self.gen.classes);
        let _ = writeln!(out, "gen.clusters_per_class = {}", self.gen.clusters_per_class);
        let _ = writeln!(out, "gen.noise_sigma = {}", self.gen.noise_sigma);
        let _ = writeln!(out, "gen.label_ratio = {}", self.gen.label_ratio);
        let _ = writeln!(out, "graph.k_nn = {}", self.graph.k_nn);
        let sigma = match self.graph.sigma {
            SigmaMode::Median => "median".to_string(),
            SigmaMode::Fixed(s) => format!("{s}"),
        };
        let _ = writeln!(out, "graph.sigma = {sigma}");
        let _ = writeln!(out, "graph.distance_exponent = {}", self.graph.distance_exponent);
        let _ = writeln!(out, "partition.blocks = {}", self.partition.blocks);
        let _ = writeln!(out, "partition.eps = {}", self.partition.eps);
        let _ = writeln!(out, "plan.block_size = {}", self.plan.block_size);
        let _ = writeln!(out, "plan.blocks_per_meta = {}", self.plan.blocks_per_meta);
        let _ = writeln!(out, "loss.gamma = {}", self.loss.gamma);
        let _ = writeln!(out, "loss.kappa = {}", self.loss.kappa);
        let _ = writeln!(out, "loss.lambda = {}", self.loss.lambda);
        let hidden = self
            .model
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "model.hidden = {hidden}");
        let _ = writeln!(out, "model.dropout = {}", self.model.dropout);
        let _ = writeln!(out, "train.epochs = {}", self.train.epochs);
        let _ = writeln!(out, "train.base_lr = {}", self.train.base_lr);
        let _ = writeln!(out, "train.workers = {}", self.train.workers);
        let _ = writeln!(out, "train.lr_reset_epoch = {}", self.train.lr_reset_epoch);
        let _ = writeln!(out, "train.eval_every = {}", self.train.eval_every);
        let _ = writeln!(out, "train.checkpoint_every = {}", self.train.checkpoint_every);
        out
    }

    /// Range checks beyond syntax.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, detail: String| {
            Err(ConfigError::BadValue {
                key: key.to_string(),
                detail,
            })
        };
        if self.gen.n < 2 {
            return bad("gen.n", format!("need at least 2 points, got {}", self.gen.n));
        }
        if self.gen.d == 0 {
            return bad("gen.d", "need at least 1 feature".into());
        }
        if self.gen.classes < 2 {
            return bad("gen.classes", format!("need at least 2 classes, got {}", self.gen.classes));
        }
        if self.gen.clusters_per_class == 0 {
            return bad("gen.clusters_per_class", "must be at least 1".into());
        }
        if !(self.gen.noise_sigma >= 0.0 && self.gen.noise_sigma.is_finite()) {
            return bad("gen.noise_sigma", format!("must be finite and nonnegative, got {}", self.gen.noise_sigma));
        }
        if !(self.gen.label_ratio > 0.0 && self.gen.label_ratio <= 1.0) {
            return bad("gen.label_ratio", format!("must be in (0, 1], got {}", self.gen.label_ratio));
        }
        if self.graph.k_nn == 0 {
            return bad("graph.k_nn", "must be at least 1".into());
        }
        if !matches!(self.graph.distance_exponent, 1 | 2) {
            return bad("graph.distance_exponent", format!("must be 1 or 2, got {}", self.graph.distance_exponent));
        }
        if !(self.partition.eps >= 0.0 && self.partition.eps.is_finite()) {
            return bad("partition.eps", format!("must be finite and nonnegative, got {}", self.partition.eps));
        }
        if self.plan.block_size == 0 {
            return bad("plan.block_size", "must be at least 1".into());
        }
        if self.plan.blocks_per_meta == 0 {
            return bad("plan.blocks_per_meta", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout", format!("must be in [0, 1), got {}", self.model.dropout));
        }
        if !(self.train.base_lr > 0.0 && self.train.base_lr.is_finite()) {
            return bad("train.base_lr", format!("must be positive and finite, got {}", self.train.base_lr));
        }
        if self.train.workers == 0 {
            return bad("train.workers", "must be at least 1".into());
        }
        if self.train.lr_reset_epoch == 0 {
            return bad("train.lr_reset_epoch", "must be at least 1".into());
        }
        if self.train.checkpoint_every == 0 {
            return bad("train.checkpoint_every", "must be at least 1".into());
        }
        for (key, v) in [
            ("loss.gamma", self.loss.gamma),
            ("loss.kappa", self.loss.kappa),
            ("loss.lambda", self.loss.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    /// The number of partition blocks to use for a dataset of `n` points:
    /// the explicit setting, or ceil(n / block_size) when `blocks = 0`
    /// (clamped to at least 2 so a partition always exists).
    pub fn effective_blocks(&self, n: usize) -> usize {
        if self.partition.blocks > 0 {
            self.partition.blocks
        } else {
            n.div_ceil(self.plan.block_size).max(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("", "test").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = "
# a comment
  # indented comment

gen.n = 500
";
        let cfg = RunConfig::parse(text, "test").unwrap();
        assert_eq!(cfg.gen.n, 500);
    }

    #[test]
    fn echo_round_trips_to_identical_config() {
        let mut cfg = RunConfig { seed: 7, ..RunConfig::default() };
        cfg.gen.n = 1234;
        cfg.graph.sigma = SigmaMode::Fixed(1.75);
        cfg.model.hidden = vec![64, 32, 16];
        cfg.train.base_lr = 0.05;
        cfg.loss.lambda = 0.0;
        let echoed = cfg.echo();
        let back = RunConfig::parse(&echoed, "echo").unwrap();
        assert_eq!(back, cfg);
        // And the echo of the parse is textually identical.
        assert_eq!(back.echo(), echoed);
    }

    #[test]
    fn default_echo_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.echo(), "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = RunConfig::parse("gen.count = 5", "conf").unwrap_err();
        match err {
            ConfigError::UnknownKey { location, key } => {
                assert_eq!(location, "conf:1");
                assert_eq!(key, "gen.count");
            }
            other => panic!("expected UnknownKey, got {other}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = "gen.n = 5\ngen.n = 6";
        let err = RunConfig::parse(text, "conf").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { .. }), "got {err}");
    }

    #[test]
    fn missing_equals_rejected() {
        let err = RunConfig::parse("gen.n 5", "conf").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "got {err}");
    }

    #[test]
    fn bad_value_names_key() {
        let err = RunConfig::parse("gen.n = many", "conf").unwrap_err();
        match err {
            ConfigError::BadValue { key, .. } => assert_eq!(key, "gen.n"),
            other => panic!("expected BadValue, got {other}"),
        }
    }

    #[test]
    fn sigma_modes_parse() {
        let cfg = RunConfig::parse("graph.sigma = median", "c").unwrap();
        assert_eq!(cfg.graph.sigma, SigmaMode::Median);
        let cfg = RunConfig::parse("graph.sigma = 2.5", "c").unwrap();
        assert_eq!(cfg.graph.sigma, SigmaMode::Fixed(2.5));
        assert!(RunConfig::parse("graph.sigma = -1", "c").is_err());
        assert!(RunConfig::parse("graph.sigma = auto", "c").is_err());
    }

    #[test]
    fn hidden_list_parses() {
        let cfg = RunConfig::parse("model.hidden = 128, 64", "c").unwrap();
        assert_eq!(cfg.model.hidden, vec![128, 64]);
        let cfg = RunConfig::parse("model.hidden =", "c").unwrap();
        assert!(cfg.model.hidden.is_empty());
        assert!(RunConfig::parse("model.hidden = 128,x", "c").is_err());
    }

    #[test]
    fn overrides_win_in_order() {
        let mut cfg = RunConfig::parse("gen.n = 100", "c").unwrap();
        cfg.apply_overrides(&["gen.n=200".to_string(), "gen.n = 300".to_string()])
            .unwrap();
        assert_eq!(cfg.gen.n, 300);
        let err = cfg.apply_overrides(&["nonsense".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }

    #[test]
    fn validation_catches_ranges() {
        let cases = [
            "gen.n = 1",
            "gen.classes = 1",
            "gen.label_ratio = 0",
            "gen.label_ratio = 1.5",
            "graph.k_nn = 0",
            "graph.distance_exponent = 3",
            "model.dropout = 1",
            "train.base_lr = 0",
            "train.workers = 0",
            "plan.block_size = 0",
        ];
        for case in cases {
            let cfg = RunConfig::parse(case, "c").unwrap();
            assert!(cfg.validate().is_err(), "{case} should fail validation");
        }
    }

    #[test]
    fn effective_blocks_auto_derivation() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.effective_blocks(10000), 79);
        assert_eq!(cfg.effective_blocks(100), 2);
        let cfg = RunConfig::parse("partition.blocks = 16", "c").unwrap();
        assert_eq!(cfg.effective_blocks(10000), 16);
    }
}
