//! Scene preparation and the per-scene mode dispatch every command shares.

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recon_core::diffusion::{draw_noise, sdedit_sample};
use recon_core::raca::{build_conditioning, build_embeddings, DEFAULT_EMBED_DIM};
use recon_core::rgr::{run_recon, EMBEDDING_SEED_STREAM};
use recon_core::toyworld::{default_palette, generate_layout, load_layout, load_palette, sample_scene};
use recon_core::{
    derive_seed, ConditioningMode, ExactDenoiser, LatentGrid, NoiseSchedule, Palette,
    RectificationConfig, RectificationTrace, SceneSample,
};

use crate::config::{CliError, CliResult, RunConfig, RunMode};

/// Independent streams under one scene seed, so layout shape and pixel noise
/// never share randomness.
pub(crate) const LAYOUT_STREAM: u64 = 0x4c41_594f;
pub(crate) const IMAGE_STREAM: u64 = 0x494d_4147;

/// One input scene with its id and derived seed. The seed drives both the
/// scene draw and the sampling run for that scene.
pub struct PreparedScene {
    pub id: usize,
    pub seed: u64,
    pub scene: SceneSample,
}

pub fn load_palette_or_default(cfg: &RunConfig) -> CliResult<Palette> {
    match &cfg.palette {
        Some(p) => load_palette(p)
            .map_err(|e| CliError::Usage(format!("config field 'palette': {e}"))),
        None => Ok(default_palette()),
    }
}

/// Builds the scene list: layouts loaded from `layout_dir` (sorted by file
/// name) or generated from the config parameters. Scene images are always
/// drawn from the per-scene seed, so a run is a pure function of the config.
pub fn prepare_scenes(
    cfg: &RunConfig,
    palette: &Palette,
    count: Option<usize>,
) -> CliResult<Vec<PreparedScene>> {
    match &cfg.layout_dir {
        Some(dir) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| CliError::Usage(format!("config field 'layout_dir': {}: {e}", dir.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                .collect();
            files.sort();
            files
                .iter()
                .enumerate()
                .map(|(i, path)| {
                    let layout = load_layout(path, palette).map_err(|e| {
                        CliError::Usage(format!("config field 'layout_dir': {}: {e}", path.display()))
                    })?;
                    let seed = derive_seed(cfg.seed, i as u64);
                    let scene = sample_scene(&layout, palette, derive_seed(seed, IMAGE_STREAM))?;
                    Ok(PreparedScene { id: i, seed, scene })
                })
                .collect()
        }
        None => {
            let n = count.unwrap_or(cfg.generate.num_scenes);
            let gen = cfg.generate.to_core();
            (0..n)
                .map(|i| {
                    let seed = derive_seed(cfg.seed, i as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LAYOUT_STREAM));
                    let layout = generate_layout(&gen, palette, &mut rng)?;
                    let scene = sample_scene(&layout, palette, derive_seed(seed, IMAGE_STREAM))?;
                    Ok(PreparedScene { id: i, seed, scene })
                })
                .collect()
        }
    }
}

/// Conditioning used by each mode.
pub fn conditioning_mode(mode: RunMode) -> ConditioningMode {
    match mode {
        RunMode::Baseline | RunMode::Rgr => ConditioningMode::Global,
        RunMode::Raca | RunMode::Recon | RunMode::Sdedit => ConditioningMode::Raca,
        RunMode::Masked => ConditioningMode::Masked,
    }
}

/// Rectification stages used by each mode; only `rgr` and `recon` rectify.
pub fn rectification_for(mode: RunMode, rect: &RectificationConfig) -> RectificationConfig {
    match mode {
        RunMode::Rgr | RunMode::Recon => rect.clone(),
        _ => RectificationConfig {
            stage_fractions: Vec::new(),
            ..rect.clone()
        },
    }
}

pub struct RunOutput {
    pub image: LatentGrid,
    /// Present for the sampler modes; the sdedit path records no stages.
    pub trace: Option<RectificationTrace>,
}

/// Runs one scene under the given mode.
pub fn run_scene(
    mode: RunMode,
    scene: &SceneSample,
    palette: &Palette,
    schedule: &NoiseSchedule,
    rect: &RectificationConfig,
    gamma: f64,
    sdedit_strength: f64,
    seed: u64,
) -> recon_core::Result<RunOutput> {
    match mode {
        RunMode::Sdedit => {
            let image = run_sdedit(
                scene,
                palette,
                schedule,
                ConditioningMode::Raca,
                gamma,
                sdedit_strength,
                seed,
            )?;
            Ok(RunOutput { image, trace: None })
        }
        _ => {
            let (image, trace) = run_recon(
                scene,
                palette,
                schedule,
                conditioning_mode(mode),
                &rectification_for(mode, rect),
                gamma,
                seed,
            )?;
            Ok(RunOutput {
                image,
                trace: Some(trace),
            })
        }
    }
}

/// Noises the original to the configured strength and re-denoises it under
/// the given conditioning. The run's noise grid doubles as the attention
/// input, exactly as in the from-noise sampler.
pub fn run_sdedit(
    scene: &SceneSample,
    palette: &Palette,
    schedule: &NoiseSchedule,
    cond_mode: ConditioningMode,
    gamma: f64,
    strength: f64,
    seed: u64,
) -> recon_core::Result<LatentGrid> {
    let set = build_embeddings(palette, DEFAULT_EMBED_DIM, derive_seed(seed, EMBEDDING_SEED_STREAM))?;
    let z_attn = draw_noise(scene.image.h(), scene.image.w(), seed)?;
    let t_top = schedule.ddim_steps()[0];
    let conditioning = build_conditioning(
        &z_attn,
        &scene.layout,
        &set,
        palette,
        t_top,
        schedule,
        cond_mode,
        gamma,
    )?;
    let denoiser = ExactDenoiser::new(palette.clone(), conditioning)?;
    sdedit_sample(&scene.image, strength, &denoiser, schedule, seed)
}

/// Runs `f`, optionally inside a dedicated thread pool when `--jobs` asked
/// for a specific width.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
