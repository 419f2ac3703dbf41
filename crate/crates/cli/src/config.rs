//! One JSON document configures every stage of the pipeline. A run loads
//! defaults, merges an optional config file over them, then applies
//! dotted-path flag overrides (`--loss.alpha=0.001`), so flags win over
//! the file and the file wins over defaults. The fully resolved document
//! is echoed into the run directory, which together with the recorded
//! input hashes and seeds is enough to reproduce a run bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use measure_core::{
    AugmentConfig, DomainWeighting, EncoderSpec, KernelConfig, LossConfig, OptimConfig,
    PretrainConfig, StagingConfig, SynthConfig,
};

/// Exit-code buckets. Bad input (2) covers schema violations, missing or
/// malformed files, and invalid arguments; contract (1) covers runs that
/// started from valid inputs and then broke a guarantee: divergence,
/// mismatched artifacts, a failed verification suite.
#[derive(Debug)]
pub enum CliError {
    BadInput(String),
    Contract(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::BadInput(_) => 2,
            CliError::Contract(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::BadInput(m) | CliError::Contract(m) => m,
        }
    }
}

impl From<measure_core::Error> for CliError {
    fn from(e: measure_core::Error) -> Self {
        use measure_core::Error;
        match e {
            Error::NonFiniteGradient { .. }
            | Error::CheckpointMismatch { .. }
            | Error::DegenerateBatch => CliError::Contract(e.to_string()),
            _ => CliError::BadInput(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::BadInput(format!("config: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::BadInput(e.to_string())
    }
}

/// Knobs for the information diagnostics (info.csv).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoConfig {
    /// Concentration handed to the alignment bound.
    pub kappa: f64,
    /// Neighbor order for the kNN entropy estimator.
    pub knn_k: usize,
    /// Epoch cap for the O(n^2) entropy estimate; the dataset is strided
    /// down to at most this many epochs, which keeps every domain in.
    pub max_samples: usize,
    /// Encoder tap to diagnose; None takes the deepest tap.
    pub level: Option<usize>,
}

impl Default for InfoConfig {
    fn default() -> Self {
        InfoConfig {
            kappa: 10.0,
            knn_k: 5,
            max_samples: 2048,
            level: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Synthetic benchmark generator.
    pub synth: SynthConfig,
    /// Encoder architecture; travels inside the encoder checkpoint, so
    /// downstream commands never have to repeat it.
    pub encoder: EncoderSpec,
    /// Pre-training objective.
    pub loss: LossConfig,
    /// View augmentations, shared by pre-training and the diagnostics.
    pub augment: AugmentConfig,
    /// Kernel for the score estimator.
    pub kernel: KernelConfig,
    /// Per-domain weighting of the entropy surrogate.
    pub weighting: DomainWeighting,
    /// Pre-training optimizer.
    pub optim: OptimConfig,
    /// Pre-training steps.
    pub steps: usize,
    /// Pre-training batch size (split across the two domains).
    pub batch_size: usize,
    /// Pre-training seed: encoder init plus the batch/augment streams.
    pub seed: u64,
    /// Sequence classifier trained on frozen features.
    pub staging: StagingConfig,
    /// Domain-level cross-validation: test chunk `fold` out of `folds`,
    /// domains shuffled once by `split_seed`.
    pub folds: usize,
    pub fold: usize,
    pub split_seed: u64,
    pub info: InfoConfig,
    /// Output root used when --out is absent; falls back to the
    /// MEASURE_OUT_ROOT environment variable, then "runs".
    pub out_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pc = PretrainConfig::default();
        RunConfig {
            synth: SynthConfig::default(),
            encoder: EncoderSpec::default(),
            loss: pc.loss,
            augment: pc.augment,
            kernel: pc.kernel,
            weighting: pc.weighting,
            optim: pc.optim,
            steps: pc.steps,
            batch_size: pc.batch_size,
            seed: pc.seed,
            staging: StagingConfig::default(),
            folds: 4,
            fold: 0,
            split_seed: 0,
            info: InfoConfig::default(),
            out_root: None,
        }
    }
}

impl RunConfig {
    /// Assemble the pre-training slice of the document.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optim: self.optim,
            loss: self.loss.clone(),
            kernel: self.kernel,
            weighting: self.weighting,
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.pretrain_config().validate(&self.encoder)?;
        self.staging.validate()?;
        if self.folds < 2 {
            return Err(CliError::BadInput(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if self.fold >= self.folds {
            return Err(CliError::BadInput(format!(
                "fold {} out of range for {} folds",
                self.fold, self.folds
            )));
        }
        if self.info.knn_k == 0 {
            return Err(CliError::BadInput("info.knn_k must be positive".into()));
        }
        if self.info.max_samples < 2 {
            return Err(CliError::BadInput(
                "info.max_samples must be at least 2".into(),
            ));
        }
        if !(self.info.kappa > 0.0) {
            return Err(CliError::BadInput(format!(
                "info.kappa must be positive, got {}",
                self.info.kappa
            )));
        }
        Ok(())
    }

    /// The tap the diagnostics run on: the configured one, or the deepest
    /// tap of the encoder actually in hand (which may come from a
    /// checkpoint rather than this config).
    pub fn info_level(&self, spec: &EncoderSpec) -> CliResult<usize> {
        let level = match self.info.level {
            Some(l) => l,
            None => *spec.taps.iter().max().expect("validated spec has taps"),
        };
        if !spec.taps.contains(&level) {
            return Err(CliError::BadInput(format!(
                "info.level {level} is not one of the encoder taps {:?}",
                spec.taps
            )));
        }
        Ok(level)
    }

    /// Pretty JSON echo with a trailing newline, the exact bytes written
    /// to every run directory.
    pub fn canonical_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Load the config file (when given), then apply `key.path=value`
/// overrides in order. Unknown keys and type mismatches are rejected when
/// the merged document is deserialized.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))?;
            let raw: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))?;
            // round-trip so a partial file picks up defaults and a typo
            // fails loudly before any override lands on it
            let cfg: RunConfig = serde_json::from_value(raw)
                .map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))?;
            serde_json::to_value(cfg)?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    for raw in overrides {
        apply_override(&mut doc, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(doc: &mut Value, raw: &str) -> CliResult<()> {
    let body = raw.strip_prefix("--").unwrap_or(raw);
    let Some((key, text)) = body.split_once('=') else {
        return Err(CliError::BadInput(format!(
            "override '{raw}' is not of the form key.path=value"
        )));
    };
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::BadInput(format!("override '{raw}' has an empty key")));
    }
    // values parse as JSON when they can (numbers, bools, arrays, null);
    // anything else is taken as a bare string, so enum variants need no quotes
    let leaf: Value =
        serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .ok_or_else(|| {
                CliError::BadInput(format!("override '{key}': '{part}' is not an object"))
            })?
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| CliError::BadInput(format!("override '{key}' descends into a scalar")))?
        .insert(parts.last().unwrap().to_string(), leaf);
    Ok(())
}

/// Top-level scalar config keys that double as CLI flags without a dot.
const TOP_LEVEL_KEYS: [&str; 8] = [
    "steps",
    "batch_size",
    "seed",
    "folds",
    "fold",
    "split_seed",
    "weighting",
    "out_root",
];

/// Pull config overrides out of argv before clap sees it. A token is an
/// override when it looks like --key=value and the key is either dotted
/// (--loss.alpha=0.001) or one of the top-level config scalars
/// (--seed=9). Everything else stays with clap.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        let is_override = arg.strip_prefix("--").is_some_and(|body| {
            body.split_once('=').is_some_and(|(key, _)| {
                key.contains('.') || TOP_LEVEL_KEYS.contains(&key)
            })
        });
        if is_override {
            overrides.push(arg);
        } else {
            rest.push(arg);
        }
    }
    (rest, overrides)
}

/// Where a command writes when --out is not given.
pub fn resolve_out(flag: Option<PathBuf>, cfg: &RunConfig, leaf: &str) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    let root = cfg
        .out_root
        .clone()
        .or_else(|| std::env::var_os("MEASURE_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(leaf)
}

pub fn sha256_hex(path: &Path) -> CliResult<String> {
    let bytes =
        fs::read(path).map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
