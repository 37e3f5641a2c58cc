//! Run configuration: one JSON file, dotted-path overrides, and a stable
//! digest of the resolved settings so every result row can be joined back to
//! the run that produced it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use recon_core::toyworld::LayoutGenConfig;
use recon_core::{NoiseSchedule, RectificationConfig, TargetMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Command failures split by exit code: usage and config problems exit 2,
/// runtime failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<recon_core::Error> for CliError {
    fn from(e: recon_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Sampling mode. `baseline` is the uncorrected pooled-conditioning sampler,
/// `rgr` adds rectification stages to it, `raca` is region-aligned
/// conditioning alone, `recon` is the full method (region alignment plus
/// rectification), `sdedit` noises the original to a strength and re-denoises,
/// and `masked` is the hard-masked attention ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Raca,
    Rgr,
    #[default]
    Recon,
    Sdedit,
    Masked,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunMode::Baseline => "baseline",
            RunMode::Raca => "raca",
            RunMode::Rgr => "rgr",
            RunMode::Recon => "recon",
            RunMode::Sdedit => "sdedit",
            RunMode::Masked => "masked",
        };
        f.write_str(s)
    }
}

/// What the mid-run probe looks at before detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTarget {
    Noisy,
    Onestep,
    #[default]
    Lookahead,
}

impl ProbeTarget {
    pub fn to_core(self) -> TargetMode {
        match self {
            ProbeTarget::Noisy => TargetMode::Noisy,
            ProbeTarget::Onestep => TargetMode::Onestep,
            ProbeTarget::Lookahead => TargetMode::Lookahead,
        }
    }
}

/// Layout generation parameters, used when no `layout_dir` is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateParams {
    pub num_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub min_categories: usize,
    pub gap: usize,
}

impl Default for GenerateParams {
    fn default() -> Self {
        let core = LayoutGenConfig::default();
        GenerateParams {
            num_scenes: 16,
            width: core.width,
            height: core.height,
            min_objects: core.min_objects,
            max_objects: core.max_objects,
            min_side: core.min_side,
            max_side: core.max_side,
            min_categories: core.min_categories,
            gap: core.gap,
        }
    }
}

impl GenerateParams {
    pub fn to_core(&self) -> LayoutGenConfig {
        LayoutGenConfig {
            width: self.width,
            height: self.height,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_side: self.min_side,
            max_side: self.max_side,
            min_categories: self.min_categories,
            gap: self.gap,
        }
    }
}

/// Noising schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_total: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 25,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> CliResult<NoiseSchedule> {
        NoiseSchedule::linear(self.t_total, self.beta_start, self.beta_end, self.ddim_steps)
            .map_err(|e| CliError::Usage(format!("config field 'schedule': {e}")))
    }
}

/// Rectification knobs, mirroring the core sampler configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifyParams {
    pub stage_fractions: Vec<f64>,
    pub lookahead_n: usize,
    pub tau: f64,
    pub target_mode: ProbeTarget,
    pub dilate_kernel: usize,
    pub reuse_initial_noise: bool,
}

impl Default for RectifyParams {
    fn default() -> Self {
        let core = RectificationConfig::default();
        RectifyParams {
            stage_fractions: core.stage_fractions,
            lookahead_n: core.lookahead_n,
            tau: core.tau,
            target_mode: ProbeTarget::Lookahead,
            dilate_kernel: core.dilate_kernel,
            reuse_initial_noise: core.reuse_initial_noise,
        }
    }
}

impl RectifyParams {
    pub fn to_core(&self) -> RectificationConfig {
        RectificationConfig {
            stage_fractions: self.stage_fractions.clone(),
            lookahead_n: self.lookahead_n,
            tau: self.tau,
            target_mode: self.target_mode.to_core(),
            dilate_kernel: self.dilate_kernel,
            reuse_initial_noise: self.reuse_initial_noise,
        }
    }
}

fn default_gamma() -> f64 {
    0.5
}

fn default_sdedit_strength() -> f64 {
    0.5
}

fn default_experiment_n() -> usize {
    200
}

/// The resolved run configuration. `seed` is mandatory and nothing here is
/// ever derived from the clock, so a config file pins a run completely.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub palette: Option<PathBuf>,
    #[serde(default)]
    pub layout_dir: Option<PathBuf>,
    #[serde(default)]
    pub generate: GenerateParams,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub rectify: RectifyParams,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_sdedit_strength")]
    pub sdedit_strength: f64,
    #[serde(default = "default_experiment_n")]
    pub experiment_n: usize,
}

impl RunConfig {
    /// Checks everything that can be checked before work starts: referenced
    /// paths must exist and numeric knobs must be in range.
    pub fn validate(&self) -> CliResult<()> {
        if let Some(p) = &self.palette {
            if !p.is_file() {
                return Err(CliError::Usage(format!(
                    "config field 'palette': {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(p) = &self.layout_dir {
            if !p.is_dir() {
                return Err(CliError::Usage(format!(
                    "config field 'layout_dir': {} is not a directory",
                    p.display()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CliError::Usage(format!(
                "config field 'gamma': {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(self.sdedit_strength > 0.0 && self.sdedit_strength <= 1.0) {
            return Err(CliError::Usage(format!(
                "config field 'sdedit_strength': {} outside (0, 1]",
                self.sdedit_strength
            )));
        }
        if self.experiment_n == 0 {
            return Err(CliError::Usage(
                "config field 'experiment_n': must be positive".into(),
            ));
        }
        self.schedule.build()?;
        self.rectify
            .to_core()
            .validate()
            .map_err(|e| CliError::Usage(format!("config field 'rectify': {e}")))?;
        Ok(())
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out_dir.as_deref().ok_or_else(|| {
            CliError::Usage("output directory required: set 'out_dir' in the config or pass --out".into())
        })
    }
}

/// A validated configuration plus its digest.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
}

/// Loads the config file (or starts from an empty object), applies `--set`
/// overrides in order, then the `--seed` and `--out` flags, and validates.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
    out_flag: Option<&Path>,
) -> CliResult<LoadedConfig> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("config file {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config file {}: {e}", p.display())))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    if !value.is_object() {
        return Err(CliError::Usage("config root must be a JSON object".into()));
    }
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    if let Some(seed) = seed_flag {
        value["seed"] = serde_json::json!(seed);
    }
    if let Some(out) = out_flag {
        value["out_dir"] = serde_json::json!(out.to_string_lossy());
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    config.validate()?;
    let hash = config_hash(&config)?;
    Ok(LoadedConfig { config, hash })
}

/// Applies one `key.path=value` override. The value is parsed as JSON when it
/// is valid JSON and kept as a string otherwise, so `mode=recon` and
/// `rectify.tau=0.4` both do the expected thing.
fn apply_set(root: &mut serde_json::Value, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set '{spec}': expected KEY=VALUE")))?;
    let mut segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Usage(format!("--set '{spec}': empty key segment")));
    }
    let leaf_key = segments.pop().expect("split always yields a segment");
    let leaf: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    for (i, seg) in segments.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!(
                "--set '{spec}': '{}' is not an object",
                segments[..i].join(".")
            ))
        })?;
        cursor = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("--set '{spec}': '{}' is not an object", segments.join("."))))?;
    obj.insert(leaf_key.to_string(), leaf);
    Ok(())
}

/// Digest of the resolved configuration. Location fields (`out_dir`,
/// `palette`, `layout_dir`) are replaced by the palette file's content, since
/// where files live does not change what a run computes but the palette's
/// content does. Twelve hex chars is plenty for joining result files.
pub fn config_hash(config: &RunConfig) -> CliResult<String> {
    let mut value =
        serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?;
    let obj = value.as_object_mut().expect("config serializes to an object");
    obj.remove("out_dir");
    obj.remove("palette");
    obj.remove("layout_dir");
    // serde_json maps are sorted by key, so this string is canonical.
    let canon = serde_json::to_string(&value).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    match &config.palette {
        Some(p) => hasher.update(fs::read(p)?),
        None => hasher.update(b"default-palette"),
    }
    let digest = hasher.finalize();
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}
