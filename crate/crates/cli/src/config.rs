//! Plain-text run configuration: one `section.key = value` per line.
//!
//! Every key has a default, so an empty file (or no file) is a complete
//! configuration. Keys not listed in [`RunConfig::entries`] are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use bigans_core::data::DatasetConfig;
use bigans_core::metrics::{parse_grid, MetricsConfig, Polarity, Protocol};
use bigans_core::models::{DiscriminatorConfig, GeneratorConfig, MRGeneratorConfig, WPGeneratorConfig};
use bigans_core::optim::OptimizerConfig;
use bigans_core::trainer::Schedule;
use bigans_core::{DType, FusionParams, FusionRule};
use bigans_core::losses::LossWeights;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorChoice {
    Identity,
    /// Seeded random conv/ReLU stack with the given widths.
    Random { seed: u64, widths: Vec<usize> },
    /// VGG-style weights read from an array file.
    Asset(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScorerChoice {
    None,
    Proxy,
    File { path: PathBuf, polarity: Polarity },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub data: DatasetConfig,
    /// Validation images for MR checkpoint selection; the training
    /// directory when unset.
    pub val_dir: Option<PathBuf>,
    pub val_pairs: usize,
    pub mr: MRGeneratorConfig,
    pub mr_epochs: u64,
    pub wp: WPGeneratorConfig,
    pub carry_discriminator: bool,
    pub disc_batchnorm: bool,
    pub disc_base_features: usize,
    pub disc_dense_features: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub extractor: ExtractorChoice,
    pub metrics: MetricsConfig,
    pub scorer: ScorerChoice,
    pub fusion: FusionParams,
    pub grid: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            data: DatasetConfig::default(),
            val_dir: None,
            val_pairs: 16,
            mr: MRGeneratorConfig::default(),
            mr_epochs: 600,
            wp: WPGeneratorConfig::default(),
            carry_discriminator: false,
            disc_batchnorm: true,
            disc_base_features: 64,
            disc_dense_features: 1024,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            extractor: ExtractorChoice::Random { seed: 0, widths: vec![16, 16] },
            metrics: MetricsConfig::default(),
            scorer: ScorerChoice::Proxy,
            fusion: FusionParams::default(),
            grid: "0:0.1:1".into(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value { key: key.into(), value: value.into(), reason: reason.into() }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn protocol_name(p: Protocol) -> &'static str {
    if p == Protocol::FULL_RGB {
        "rgb"
    } else {
        "y"
    }
}

impl RunConfig {
    /// Every key with its current value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (ex_kind, ex_seed, ex_widths, ex_asset) = match &self.extractor {
            ExtractorChoice::Identity => ("identity", 0, String::new(), String::new()),
            ExtractorChoice::Random { seed, widths } => (
                "random",
                *seed,
                widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
                String::new(),
            ),
            ExtractorChoice::Asset(p) => ("asset", 0, String::new(), p.display().to_string()),
        };
        let (scorer, scores, polarity) = match &self.scorer {
            ScorerChoice::None => ("none", String::new(), "lower"),
            ScorerChoice::Proxy => ("proxy", String::new(), "lower"),
            ScorerChoice::File { path, polarity } => (
                "file",
                path.display().to_string(),
                if *polarity == Polarity::LowerBetter { "lower" } else { "higher" },
            ),
        };
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.dtype", self.dtype.name().into()),
            ("data.hr_dir", self.data.hr_dir.display().to_string()),
            ("data.val_dir", opt_path(&self.val_dir)),
            ("data.val_pairs", self.val_pairs.to_string()),
            ("data.scale", self.data.scale.to_string()),
            ("data.lr_patch", self.data.lr_patch.to_string()),
            ("data.batch_size", self.data.batch_size.to_string()),
            ("data.flip", self.data.flip.to_string()),
            ("data.crops_per_image", self.data.crops_per_image.to_string()),
            ("mr.n_features", self.mr.n_features.to_string()),
            ("mr.n_mr_blocks", self.mr.n_mr_blocks.to_string()),
            ("mr.epochs", self.mr_epochs.to_string()),
            ("wp.n_features", self.wp.n_features.to_string()),
            ("wp.n_resblocks", self.wp.n_resblocks.to_string()),
            ("wp.carry_discriminator", self.carry_discriminator.to_string()),
            ("disc.batchnorm", self.disc_batchnorm.to_string()),
            ("disc.base_features", self.disc_base_features.to_string()),
            ("disc.dense_features", self.disc_dense_features.to_string()),
            ("optim.lr0", self.optimizer.lr0.to_string()),
            ("optim.beta1", self.optimizer.beta1.to_string()),
            ("optim.beta2", self.optimizer.beta2.to_string()),
            ("optim.eps", self.optimizer.eps.to_string()),
            ("schedule.total_iterations", self.schedule.total_iterations.to_string()),
            ("schedule.decay_at", self.schedule.decay_at.to_string()),
            ("schedule.decay_factor", self.schedule.decay_factor.to_string()),
            ("loss.lambda1", self.weights.lambda1.to_string()),
            ("loss.lambda2", self.weights.lambda2.to_string()),
            ("loss.extractor", ex_kind.into()),
            ("loss.extractor_seed", ex_seed.to_string()),
            ("loss.extractor_widths", ex_widths),
            ("loss.extractor_asset", ex_asset),
            ("metrics.rmse_protocol", protocol_name(self.metrics.rmse).into()),
            ("metrics.scorer", scorer.into()),
            ("metrics.scores", scores),
            ("metrics.scores_polarity", polarity.into()),
            ("fusion.xi", self.fusion.xi.to_string()),
            ("fusion.rule", match self.fusion.rule {
                FusionRule::Interpolating => "interpolating".into(),
                FusionRule::Literal => "literal".into(),
            }),
            ("sweep.grid", self.grid.clone()),
        ]
    }

    /// Sets one key. Extractor and scorer keys are collected by
    /// [`RunConfig::parse`] and applied together, so here they only update
    /// the matching variant's fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(bad(key, v, "expected f32 or f64")),
                }
            }
            "data.hr_dir" => self.data.hr_dir = PathBuf::from(v),
            "data.val_dir" => self.val_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.val_pairs" => self.val_pairs = parse(key, v)?,
            "data.scale" => self.data.scale = parse(key, v)?,
            "data.lr_patch" => self.data.lr_patch = parse(key, v)?,
            "data.batch_size" => self.data.batch_size = parse(key, v)?,
            "data.flip" => self.data.flip = parse(key, v)?,
            "data.crops_per_image" => self.data.crops_per_image = parse(key, v)?,
            "mr.n_features" => self.mr.n_features = parse(key, v)?,
            "mr.n_mr_blocks" => self.mr.n_mr_blocks = parse(key, v)?,
            "mr.epochs" => self.mr_epochs = parse(key, v)?,
            "wp.n_features" => self.wp.n_features = parse(key, v)?,
            "wp.n_resblocks" => self.wp.n_resblocks = parse(key, v)?,
            "wp.carry_discriminator" => self.carry_discriminator = parse(key, v)?,
            "disc.batchnorm" => self.disc_batchnorm = parse(key, v)?,
            "disc.base_features" => self.disc_base_features = parse(key, v)?,
            "disc.dense_features" => self.disc_dense_features = parse(key, v)?,
            "optim.lr0" => self.optimizer.lr0 = parse(key, v)?,
            "optim.beta1" => self.optimizer.beta1 = parse(key, v)?,
            "optim.beta2" => self.optimizer.beta2 = parse(key, v)?,
            "optim.eps" => self.optimizer.eps = parse(key, v)?,
            "schedule.total_iterations" => self.schedule.total_iterations = parse(key, v)?,
            "schedule.decay_at" => self.schedule.decay_at = parse(key, v)?,
            "schedule.decay_factor" => self.schedule.decay_factor = parse(key, v)?,
            "loss.lambda1" => self.weights.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.weights.lambda2 = parse(key, v)?,
            "loss.extractor" => {
                self.extractor = match v {
                    "identity" => ExtractorChoice::Identity,
                    "random" => match &self.extractor {
                        e @ ExtractorChoice::Random { .. } => e.clone(),
                        _ => ExtractorChoice::Random { seed: 0, widths: vec![16, 16] },
                    },
                    "asset" => match &self.extractor {
                        e @ ExtractorChoice::Asset(_) => e.clone(),
                        _ => ExtractorChoice::Asset(PathBuf::new()),
                    },
                    _ => return Err(bad(key, v, "expected identity, random or asset")),
                }
            }
            "loss.extractor_seed" => {
                let s = parse(key, v)?;
                if let ExtractorChoice::Random { seed, .. } = &mut self.extractor {
                    *seed = s;
                }
            }
            "loss.extractor_widths" => {
                if let ExtractorChoice::Random { widths, .. } = &mut self.extractor {
                    *widths = v
                        .split(',')
                        .map(|w| parse::<usize>(key, w.trim()))
                        .collect::<Result<_, _>>()?;
                }
            }
            "loss.extractor_asset" => {
                if let ExtractorChoice::Asset(p) = &mut self.extractor {
                    *p = PathBuf::from(v);
                }
            }
            "metrics.rmse_protocol" => {
                self.metrics.rmse = match v {
                    "y" => Protocol::STANDARD,
                    "rgb" => Protocol::FULL_RGB,
                    _ => return Err(bad(key, v, "expected y or rgb")),
                }
            }
            "metrics.scorer" => {
                self.scorer = match v {
                    "none" => ScorerChoice::None,
                    "proxy" => ScorerChoice::Proxy,
                    "file" => match &self.scorer {
                        s @ ScorerChoice::File { .. } => s.clone(),
                        _ => ScorerChoice::File { path: PathBuf::new(), polarity: Polarity::LowerBetter },
                    },
                    _ => return Err(bad(key, v, "expected none, proxy or file")),
                }
            }
            "metrics.scores" => {
                if let ScorerChoice::File { path, .. } = &mut self.scorer {
                    *path = PathBuf::from(v);
                }
            }
            "metrics.scores_polarity" => {
                let p = match v {
                    "lower" => Polarity::LowerBetter,
                    "higher" => Polarity::HigherBetter,
                    _ => return Err(bad(key, v, "expected lower or higher")),
                };
                if let ScorerChoice::File { polarity, .. } = &mut self.scorer {
                    *polarity = p;
                }
            }
            "fusion.xi" => self.fusion.xi = parse(key, v)?,
            "fusion.rule" => {
                self.fusion.rule = match v {
                    "interpolating" => FusionRule::Interpolating,
                    "literal" => FusionRule::Literal,
                    _ => return Err(bad(key, v, "expected interpolating or literal")),
                }
            }
            "sweep.grid" => self.grid = v.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Selector keys
    /// (`loss.extractor`, `metrics.scorer`) are applied before the keys that
    /// refine them, whatever their order in the text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let k = k.trim();
            if !k.contains('.') {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    /// Applies key/value overrides, selectors first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        let is_selector = |k: &str| k == "loss.extractor" || k == "metrics.scorer";
        for (k, v) in pairs.iter().filter(|(k, _)| is_selector(k)) {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| !is_selector(k)) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    /// `key = value` lines for every key; parses back to `self`.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |s: String| Err(ConfigError::Invalid(s));
        if self.data.scale != 4 {
            return inv(format!("data.scale must be 4 (both generators are x4), got {}", self.data.scale));
        }
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for g in [self.mr_generator(), self.wp_generator()] {
            g.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.disc_base_features == 0 || self.disc_dense_features == 0 {
            return inv("disc.base_features and disc.dense_features must be >= 1".into());
        }
        if self.discriminator().final_size() == 0 {
            return inv(format!("HR patch {} is too small for the discriminator", self.data.hr_patch()));
        }
        if self.val_pairs == 0 {
            return inv("data.val_pairs must be >= 1".into());
        }
        if self.mr_epochs == 0 {
            return inv("mr.epochs must be >= 1".into());
        }
        self.optimizer.validate().map_err(ConfigError::Invalid)?;
        self.schedule.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, w) in [("loss.lambda1", self.weights.lambda1), ("loss.lambda2", self.weights.lambda2)] {
            if !(w >= 0.0) || !w.is_finite() {
                return inv(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        match &self.extractor {
            ExtractorChoice::Random { widths, .. } if widths.is_empty() || widths.contains(&0) => {
                return inv("loss.extractor_widths must list positive widths".into());
            }
            ExtractorChoice::Asset(p) if p.as_os_str().is_empty() => {
                return inv("loss.extractor = asset needs loss.extractor_asset".into());
            }
            _ => {}
        }
        if let ScorerChoice::File { path, .. } = &self.scorer {
            if path.as_os_str().is_empty() {
                return inv("metrics.scorer = file needs metrics.scores".into());
            }
        }
        FusionParams::new(self.fusion.xi).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        parse_grid(&self.grid).map_err(|e| ConfigError::Invalid(format!("sweep.grid: {e}")))?;
        Ok(())
    }

    pub fn mr_generator(&self) -> GeneratorConfig {
        GeneratorConfig::Mr(self.mr.clone())
    }

    pub fn wp_generator(&self) -> GeneratorConfig {
        GeneratorConfig::Wp(self.wp.clone())
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            use_batchnorm: self.disc_batchnorm,
            base_features: self.disc_base_features,
            input_size: self.data.hr_patch(),
            dense_features: self.disc_dense_features,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig { seed: self.seed, ..self.data.clone() }
    }

    pub fn grid(&self) -> Vec<f64> {
        parse_grid(&self.grid).expect("validated grid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.fusion.xi, 0.73);
        assert_eq!(c.schedule.total_iterations, 2000);
        assert_eq!(c.discriminator().input_size, 96);
    }

    #[test]
    fn echo_parses_back() {
        let mut c = RunConfig::default();
        c.apply(&[
            ("loss.extractor".into(), "asset".into()),
            ("loss.extractor_asset".into(), "/tmp/vgg.bin".into()),
            ("metrics.scorer".into(), "file".into()),
            ("metrics.scores".into(), "s.csv".into()),
            ("metrics.scores_polarity".into(), "higher".into()),
            ("metrics.rmse_protocol".into(), "rgb".into()),
            ("data.val_dir".into(), "val".into()),
            ("optim.lr0".into(), "0.001".into()),
            ("run.dtype".into(), "f64".into()),
        ])
        .unwrap();
        assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.echo()).unwrap(), d);
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let c = RunConfig::default();
        for (k, v) in c.entries() {
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn selector_order_does_not_matter() {
        let a = RunConfig::parse("loss.extractor_widths = 4,5\nloss.extractor = random\n").unwrap();
        assert_eq!(a.extractor, ExtractorChoice::Random { seed: 0, widths: vec![4, 5] });
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(RunConfig::parse("mr.depth = 3"), Err(ConfigError::UnknownKey("mr.depth".into())));
        assert!(matches!(RunConfig::parse("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = 1"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(RunConfig::parse("run.seed = x"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("run.seed = 1\nrun.seed = 2"), Err(ConfigError::Duplicate(_))));
        assert!(matches!(RunConfig::parse("run.dtype = f16"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = RunConfig::parse("# toy\n\nrun.seed = 5 # trailing\n").unwrap();
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn validation_catches_inconsistent_values() {
        for text in [
            "data.scale = 2",
            "schedule.decay_at = 5000",
            "optim.beta1 = 1.0",
            "fusion.xi = -1",
            "sweep.grid = 1:0.1:0",
            "loss.extractor = asset",
            "metrics.scorer = file",
            "mr.n_mr_blocks = 0",
            "loss.lambda1 = -0.1",
            "data.lr_patch = 0",
        ] {
            let c = RunConfig::parse(text).unwrap();
            assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))), "{text}");
        }
    }
}
