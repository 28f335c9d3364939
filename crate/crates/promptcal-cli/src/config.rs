//! Experiment configuration: the on-disk TOML schema, defaults, method
//! registry, and the resolved form the manifest echoes.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use promptcal::bench::Shift;
use promptcal::embed::AugmentationConfig;
use promptcal::error::{Error, Result};
use promptcal::objective::{ClassifierConfig, LossWeights};
use promptcal::tuner::{OptimizerKind, TunerConfig};
use serde::{Deserialize, Serialize};

/// When set, replaces the config's seed list with this single seed.
pub const SEED_ENV_VAR: &str = "PROMPTCAL_SEED";

fn default_n_bins() -> usize {
    15
}

fn default_temperature() -> f64 {
    0.01
}

fn default_n_views() -> usize {
    64
}

fn default_noise_sigma() -> f64 {
    0.1
}

fn default_dropout_fraction() -> f64 {
    0.05
}

fn default_learning_rate() -> f64 {
    0.005
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_n_steps() -> usize {
    1
}

fn default_rho() -> f64 {
    0.1
}

fn default_d_tok() -> usize {
    64
}

fn default_d_embed() -> usize {
    32
}

/// Where test features come from: generated on the fly or read from a
/// precomputed bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n_classes: usize,
        samples_per_class: usize,
        d_raw: usize,
        cluster_sigma: f64,
        attribute_alignment: f64,
        #[serde(default = "Shift::none")]
        shift: Shift,
    },
    Bundle {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub d_tok: usize,
    pub d_embed: usize,
    pub projection_seed: u64,
    pub use_identity_projection: bool,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            d_tok: default_d_tok(),
            d_embed: default_d_embed(),
            projection_seed: 0,
            use_identity_projection: false,
        }
    }
}

impl EncoderSettings {
    pub fn to_library(&self) -> promptcal::embed::EncoderConfig {
        promptcal::embed::EncoderConfig {
            d_tok: self.d_tok,
            d_embed: self.d_embed,
            projection_seed: self.projection_seed,
            use_identity_projection: self.use_identity_projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSettings {
    pub temperature: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSettings {
    pub n_views: usize,
    pub noise_sigma: f64,
    pub dropout_fraction: f64,
}

impl Default for AugmentationSettings {
    fn default() -> Self {
        Self {
            n_views: default_n_views(),
            noise_sigma: default_noise_sigma(),
            dropout_fraction: default_dropout_fraction(),
        }
    }
}

impl AugmentationSettings {
    /// Augmentation for one sample; the seed picks the view stream.
    pub fn for_seed(&self, seed: u64) -> AugmentationConfig {
        AugmentationConfig {
            n_views: self.n_views,
            noise_sigma: self.noise_sigma,
            dropout_fraction: self.dropout_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerSettings {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub rho: f64,
    /// Tuning steps for methods that do not set their own count.
    pub n_steps: usize,
}

impl Default for TunerSettings {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            optimizer: OptimizerKind::AdaptiveMomentsDecoupledDecay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: 0.0,
            rho: default_rho(),
            n_steps: default_n_steps(),
        }
    }
}

impl TunerSettings {
    /// Library tuner config for a method running `n_steps` updates.
    pub fn to_library(&self, n_steps: usize, n_views: usize) -> TunerConfig {
        TunerConfig {
            learning_rate: self.learning_rate,
            n_steps,
            optimizer: self.optimizer,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            rho: self.rho,
            n_views,
        }
    }
}

/// One method entry as written in the config. Known registry names fill in
/// everything; unknown names must spell out every field.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub use_attributes: Option<bool>,
    pub top_m: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub ensemble: Option<bool>,
    pub n_steps: Option<usize>,
}

/// A fully determined method. `n_steps` of zero means no tuning at all.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedMethod {
    pub name: String,
    pub use_attributes: bool,
    pub top_m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub ensemble: bool,
    pub n_steps: usize,
}

impl ResolvedMethod {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Method name with filesystem-hostile characters replaced.
    pub fn file_stem(&self) -> String {
        file_stem_of(&self.name)
    }
}

/// Filesystem-safe form of a method name, used in per-method file names.
pub fn file_stem_of(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

struct MethodPreset {
    use_attributes: bool,
    top_m: usize,
    alpha: f64,
    beta: f64,
    /// None defers to the tuner table's step count.
    n_steps: Option<usize>,
}

/// Built-in method rows: the fixed template baseline, entropy-only tuning,
/// and tuning with the inter-class term alone or both dispersion terms.
fn builtin_preset(name: &str) -> Option<MethodPreset> {
    match name {
        "hard_prompt" => Some(MethodPreset {
            use_attributes: false,
            top_m: 0,
            alpha: 0.0,
            beta: 0.0,
            n_steps: Some(0),
        }),
        "tpt" => Some(MethodPreset {
            use_attributes: false,
            top_m: 0,
            alpha: 0.0,
            beta: 0.0,
            n_steps: None,
        }),
        "tpt_inter" => Some(MethodPreset {
            use_attributes: true,
            top_m: 2,
            alpha: 10.0,
            beta: 0.0,
            n_steps: None,
        }),
        "tpt_tca" => Some(MethodPreset {
            use_attributes: true,
            top_m: 2,
            alpha: 10.0,
            beta: 35.0,
            n_steps: None,
        }),
        _ => None,
    }
}

pub const BUILTIN_METHOD_NAMES: [&str; 4] = ["hard_prompt", "tpt", "tpt_inter", "tpt_tca"];

/// The experiment document as parsed from TOML.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_bins")]
    pub n_bins: usize,
    /// Per-sample numeric failures tolerated before a nonzero exit.
    #[serde(default)]
    pub failure_budget: usize,
    pub output_dir: PathBuf,
    pub catalog: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub classifier: ClassifierSettings,
    #[serde(default)]
    pub augmentation: AugmentationSettings,
    #[serde(default)]
    pub tuner: TunerSettings,
    pub methods: Vec<MethodConfig>,
}

/// A validated configuration with every default made explicit. Serializing
/// this is the manifest; the output directory stays out of it so a run's
/// artifacts do not depend on where they were written.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub n_bins: usize,
    pub failure_budget: usize,
    pub catalog: PathBuf,
    pub dataset: DatasetConfig,
    pub encoder: EncoderSettings,
    pub classifier: ClassifierSettings,
    pub augmentation: AugmentationSettings,
    pub tuner: TunerSettings,
    pub methods: Vec<ResolvedMethod>,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl ResolvedConfig {
    pub fn manifest_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))
    }
}

pub fn parse_config(text: &str) -> Result<RawConfig> {
    toml::from_str(text).map_err(|e| Error::Format(format!("config parse error: {e}")))
}

fn resolve_method(m: &MethodConfig, tuner: &TunerSettings) -> Result<ResolvedMethod> {
    if m.name.is_empty() || m.name.chars().any(|c| c.is_control()) {
        return Err(Error::InvalidArgument(
            "method names must be non-empty printable text".into(),
        ));
    }
    let resolved = match builtin_preset(&m.name) {
        Some(preset) => ResolvedMethod {
            name: m.name.clone(),
            use_attributes: m.use_attributes.unwrap_or(preset.use_attributes),
            top_m: m.top_m.unwrap_or(preset.top_m),
            alpha: m.alpha.unwrap_or(preset.alpha),
            beta: m.beta.unwrap_or(preset.beta),
            ensemble: m.ensemble.unwrap_or(false),
            n_steps: m.n_steps.or(preset.n_steps).unwrap_or(tuner.n_steps),
        },
        None => {
            let missing = |field: &str| {
                Error::InvalidArgument(format!(
                    "method {:?} is not one of {:?}; custom methods must set {field}",
                    m.name, BUILTIN_METHOD_NAMES
                ))
            };
            ResolvedMethod {
                name: m.name.clone(),
                use_attributes: m.use_attributes.ok_or_else(|| missing("use_attributes"))?,
                top_m: m.top_m.ok_or_else(|| missing("top_m"))?,
                alpha: m.alpha.ok_or_else(|| missing("alpha"))?,
                beta: m.beta.ok_or_else(|| missing("beta"))?,
                ensemble: m.ensemble.unwrap_or(false),
                n_steps: m.n_steps.ok_or_else(|| missing("n_steps"))?,
            }
        }
    };
    if resolved.use_attributes && resolved.top_m == 0 {
        return Err(Error::InvalidArgument(format!(
            "method {:?} uses attributes but top_m is 0",
            resolved.name
        )));
    }
    if !resolved.use_attributes && resolved.top_m != 0 {
        return Err(Error::InvalidArgument(format!(
            "method {:?} sets top_m but use_attributes is false",
            resolved.name
        )));
    }
    resolved.weights().validate()?;
    Ok(resolved)
}

/// Applies the seed override, materializes defaults, and validates every
/// table. Referenced paths must exist; content loads happen at run time.
pub fn resolve(raw: RawConfig, config_dir: &Path) -> Result<ResolvedConfig> {
    let seeds = match std::env::var(SEED_ENV_VAR) {
        Ok(text) => {
            let seed = text.parse::<u64>().map_err(|_| {
                Error::InvalidArgument(format!(
                    "{SEED_ENV_VAR} must be an unsigned integer, got {text:?}"
                ))
            })?;
            vec![seed]
        }
        Err(_) => raw.seeds,
    };
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("seeds list is empty".into()));
    }
    if raw.methods.is_empty() {
        return Err(Error::InvalidArgument("no methods configured".into()));
    }
    if raw.n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }

    let mut methods = Vec::with_capacity(raw.methods.len());
    let mut names = HashSet::new();
    let mut stems = HashSet::new();
    for m in &raw.methods {
        let resolved = resolve_method(m, &raw.tuner)?;
        if !names.insert(resolved.name.clone()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate method name {:?}",
                resolved.name
            )));
        }
        if !stems.insert(resolved.file_stem()) {
            return Err(Error::InvalidArgument(format!(
                "method name {:?} collides with another method's file name",
                resolved.name
            )));
        }
        methods.push(resolved);
    }

    // Paths in the config are relative to the config file.
    let catalog = config_dir.join(&raw.catalog);
    if !catalog.is_file() {
        return Err(Error::InvalidArgument(format!(
            "catalog not found: {}",
            catalog.display()
        )));
    }
    let dataset = match raw.dataset {
        DatasetConfig::Bundle { path } => {
            let path = config_dir.join(path);
            if !path.is_file() {
                return Err(Error::InvalidArgument(format!(
                    "feature bundle not found: {}",
                    path.display()
                )));
            }
            DatasetConfig::Bundle { path }
        }
        synthetic @ DatasetConfig::Synthetic { .. } => {
            synthetic_spec(&synthetic, 0)?.validate()?;
            synthetic
        }
    };

    // Each table validates through the library type it will become.
    promptcal::embed::Encoder::new(raw.encoder.to_library(), 0)?;
    ClassifierConfig::new(raw.classifier.temperature, 2)?;
    raw.augmentation.for_seed(0).validate()?;
    raw.tuner
        .to_library(raw.tuner.n_steps.max(1), raw.augmentation.n_views)
        .validate()?;
    for m in &methods {
        if m.n_steps > 0 {
            raw.tuner
                .to_library(m.n_steps, raw.augmentation.n_views)
                .validate()?;
        }
    }

    Ok(ResolvedConfig {
        name: raw.name,
        seeds,
        n_bins: raw.n_bins,
        failure_budget: raw.failure_budget,
        catalog,
        dataset,
        encoder: raw.encoder,
        classifier: raw.classifier,
        augmentation: raw.augmentation,
        tuner: raw.tuner,
        methods,
        output_dir: config_dir.join(raw.output_dir),
    })
}

/// Loads, resolves, and validates a config file.
pub fn load(path: &Path) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    resolve(parse_config(&text)?, dir)
}

/// The library-side synthetic spec for one run seed.
pub fn synthetic_spec(
    dataset: &DatasetConfig,
    seed: u64,
) -> Result<promptcal::bench::SyntheticSpec> {
    match dataset {
        DatasetConfig::Synthetic {
            n_classes,
            samples_per_class,
            d_raw,
            cluster_sigma,
            attribute_alignment,
            shift,
        } => Ok(promptcal::bench::SyntheticSpec {
            n_classes: *n_classes,
            samples_per_class: *samples_per_class,
            d_raw: *d_raw,
            cluster_sigma: *cluster_sigma,
            attribute_alignment: *attribute_alignment,
            shift: shift.clone(),
            seed,
        }),
        DatasetConfig::Bundle { .. } => Err(Error::InvalidArgument(
            "bundle datasets carry no synthetic spec".into(),
        )),
    }
}
