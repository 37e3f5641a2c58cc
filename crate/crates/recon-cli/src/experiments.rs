//! Named experiment protocols. Each one runs a fixed design over a seeded
//! scene set, writes a summary CSV, and writes a plain-text report whose
//! checks state pass or fail for the trends the protocol is after.
//!
//! The statistics functions are separated from the command wrappers so the
//! acceptance suite can drive the same computations directly.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use recon_core::metrics::{frechet_distance, layout_consistency, leakage_score, micro_downstream_eval};
use recon_core::rgr::run_recon;
use recon_core::toyworld::{generate_layout, sample_scene};
use recon_core::{
    derive_seed, ConditioningMode, FeatureVector, GaussianSummary, LatentGrid, Layout,
    NoiseSchedule, Palette, RectificationConfig, RectificationTrace, SceneSample, TargetMode,
};

use crate::config::{CliError, CliResult, LoadedConfig, RunConfig, RunMode};
use crate::report::{csv_field, write_csv, write_text};
use crate::run::{
    load_palette_or_default, prepare_scenes, run_scene, run_sdedit, with_jobs, PreparedScene,
    IMAGE_STREAM, LAYOUT_STREAM,
};

pub const EXPERIMENTS: [&str; 6] = [
    "mask-schedule",
    "perception-target",
    "timestep-sweep",
    "component-ablation",
    "sdedit-compare",
    "downstream",
];

pub fn cmd_experiment(name: &str, loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    match name {
        "mask-schedule" => cmd_mask_schedule(loaded, jobs),
        "perception-target" => cmd_perception_target(loaded, jobs),
        "timestep-sweep" => cmd_timestep_sweep(loaded, jobs),
        "component-ablation" => cmd_component_ablation(loaded, jobs),
        "sdedit-compare" => cmd_sdedit_compare(loaded, jobs),
        "downstream" => cmd_downstream(loaded, jobs),
        _ => Err(CliError::Usage(format!(
            "unknown experiment '{name}'; expected one of: {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

/// One sampled arm entry: the output image and its layout agreement.
pub struct ArmRun {
    pub image: LatentGrid,
    pub trace: Option<RectificationTrace>,
    pub consistent: bool,
}

/// Runs every scene under one (mode, rectification) arm.
pub fn run_arm(
    scenes: &[PreparedScene],
    palette: &Palette,
    schedule: &NoiseSchedule,
    mode: RunMode,
    rect: &RectificationConfig,
    gamma: f64,
    sdedit_strength: f64,
) -> CliResult<Vec<ArmRun>> {
    scenes
        .par_iter()
        .map(|p| -> CliResult<ArmRun> {
            let out = run_scene(mode, &p.scene, palette, schedule, rect, gamma, sdedit_strength, p.seed)?;
            let (consistent, _, _) = layout_consistency(&out.image, &p.scene.layout, palette, rect.tau)?;
            Ok(ArmRun {
                image: out.image,
                trace: out.trace,
                consistent,
            })
        })
        .collect()
}

fn consistency_rate(arm: &[ArmRun]) -> f64 {
    arm.iter().filter(|r| r.consistent).count() as f64 / arm.len() as f64
}

/// Feature-space distance between an arm's outputs and the real scene draws.
fn frechet_vs_real(scenes: &[PreparedScene], arm: &[ArmRun]) -> CliResult<f64> {
    let real: Vec<FeatureVector> = scenes
        .iter()
        .map(|p| FeatureVector::compute(&p.scene.image, &p.scene.layout))
        .collect();
    let generated: Vec<FeatureVector> = scenes
        .iter()
        .zip(arm)
        .map(|(p, r)| FeatureVector::compute(&r.image, &p.scene.layout))
        .collect();
    Ok(frechet_distance(
        &GaussianSummary::from_features(&real)?,
        &GaussianSummary::from_features(&generated)?,
    )?)
}

fn corpus_of(scenes: &[PreparedScene], arm: &[ArmRun]) -> Vec<(Layout, LatentGrid)> {
    scenes
        .iter()
        .zip(arm)
        .map(|(p, r)| (p.scene.layout.clone(), r.image.clone()))
        .collect()
}

/// Fraction of pixels whose color moved more than three noise sigmas.
pub fn edit_area(a: &LatentGrid, b: &LatentGrid, pixel_sigma: f64) -> f64 {
    let threshold = 3.0 * pixel_sigma;
    let mut moved = 0usize;
    for y in 0..a.h() {
        for x in 0..a.w() {
            let pa = a.pixel(y, x);
            let pb = b.pixel(y, x);
            let d2 = (0..3).map(|c| (pa[c] - pb[c]).powi(2)).sum::<f64>();
            if d2.sqrt() > threshold {
                moved += 1;
            }
        }
    }
    moved as f64 / (a.h() * a.w()) as f64
}

fn experiment_dir(loaded: &LoadedConfig, name: &str) -> CliResult<PathBuf> {
    let dir = loaded.config.out_dir()?.join(name);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("output dir {}: {e}", dir.display())))?;
    Ok(dir)
}

fn report_lines(name: &str, loaded: &LoadedConfig, n: usize) -> Vec<String> {
    vec![
        format!("experiment: {name}"),
        format!("config_hash: {}", loaded.hash),
        format!("seed: {}", loaded.config.seed),
        format!("scenes: {n}"),
    ]
}

fn push_checks(lines: &mut Vec<String>, checks: &[(String, bool)]) {
    let mut all = true;
    for (label, ok) in checks {
        all &= ok;
        lines.push(format!("check {}: {}", label, if *ok { "PASS" } else { "FAIL" }));
    }
    lines.push(format!("overall: {}", if all { "PASS" } else { "FAIL" }));
}

// ---------------------------------------------------------------------------
// mask-schedule: mean rectified area per stage.

pub struct StageMean {
    pub t: usize,
    pub mean_area_ratio: f64,
}

pub fn mask_schedule_stats(
    scenes: &[PreparedScene],
    palette: &Palette,
    schedule: &NoiseSchedule,
    rect: &RectificationConfig,
    gamma: f64,
) -> CliResult<Vec<StageMean>> {
    let arm = run_arm(scenes, palette, schedule, RunMode::Rgr, rect, gamma, 0.5)?;
    let stage_ts = rect.stage_timesteps(schedule);
    let mut sums = vec![0.0f64; stage_ts.len()];
    for run in &arm {
        let trace = run.trace.as_ref().expect("sampler modes always trace");
        if trace.stages.len() != stage_ts.len() {
            return Err(CliError::Runtime(format!(
                "expected {} stage records, got {}",
                stage_ts.len(),
                trace.stages.len()
            )));
        }
        for (i, s) in trace.stages.iter().enumerate() {
            sums[i] += s.area_ratio;
        }
    }
    Ok(stage_ts
        .iter()
        .zip(&sums)
        .map(|(&t, &sum)| StageMean {
            t,
            mean_area_ratio: sum / arm.len() as f64,
        })
        .collect())
}

fn cmd_mask_schedule(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loaded.config;
    let dir = experiment_dir(loaded, "mask-schedule")?;
    let palette = load_palette_or_default(cfg)?;
    let schedule = cfg.schedule.build()?;
    let rect = cfg.rectify.to_core();
    if rect.stage_fractions.is_empty() {
        return Err(CliError::Usage(
            "mask-schedule needs a non-empty rectify.stage_fractions".into(),
        ));
    }
    let scenes = prepare_scenes(cfg, &palette, Some(cfg.experiment_n))?;
    let stats = with_jobs(jobs, || mask_schedule_stats(&scenes, &palette, &schedule, &rect, cfg.gamma))??;

    let rows: Vec<String> = stats
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{},{},{},{},{}", i, s.t, s.mean_area_ratio, scenes.len(), loaded.hash))
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        "stage_index,t,mean_mask_area_ratio,n_runs,config_hash",
        &rows,
    )?;

    let mut lines = report_lines("mask-schedule", loaded, scenes.len());
    for (i, s) in stats.iter().enumerate() {
        lines.push(format!(
            "stage {i} (t={}): mean mask area ratio {:.4}",
            s.t, s.mean_area_ratio
        ));
    }
    let non_increasing = stats.windows(2).all(|w| w[0].mean_area_ratio >= w[1].mean_area_ratio);
    push_checks(
        &mut lines,
        &[("mean mask area ratio non-increasing across stages".into(), non_increasing)],
    );
    write_text(&dir.join("report.txt"), &lines)
}

// ---------------------------------------------------------------------------
// perception-target: probe quality per target at the mid-trajectory stage.

pub struct TargetStat {
    pub name: &'static str,
    pub mean_fp: f64,
    pub mean_fn: f64,
}

impl TargetStat {
    pub fn mean_total(&self) -> f64 {
        self.mean_fp + self.mean_fn
    }
}

/// Runs a single rectification stage at half the trajectory under each probe
/// target and reports the mean probe error counts at that stage.
pub fn perception_target_stats(
    scenes: &[PreparedScene],
    palette: &Palette,
    schedule: &NoiseSchedule,
    rect: &RectificationConfig,
    gamma: f64,
) -> CliResult<Vec<TargetStat>> {
    let targets = [
        ("noisy", TargetMode::Noisy),
        ("onestep", TargetMode::Onestep),
        ("lookahead", TargetMode::Lookahead),
    ];
    targets
        .iter()
        .map(|&(name, target)| {
            let arm_rect = RectificationConfig {
                stage_fractions: vec![0.5],
                target_mode: target,
                ..rect.clone()
            };
            let arm = run_arm(scenes, palette, schedule, RunMode::Recon, &arm_rect, gamma, 0.5)?;
            let (mut fp, mut fn_) = (0.0f64, 0.0f64);
            for run in &arm {
                let stage = &run.trace.as_ref().expect("sampler modes always trace").stages[0];
                fp += stage.fp_count as f64;
                fn_ += stage.fn_count as f64;
            }
            Ok(TargetStat {
                name,
                mean_fp: fp / arm.len() as f64,
                mean_fn: fn_ / arm.len() as f64,
            })
        })
        .collect()
}

fn cmd_perception_target(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loadded_config(loaded);
    let dir = experiment_dir(loaded, "perception-target")?;
    let palette = load_palette_or_default(cfg)?;
    let schedule = cfg.schedule.build()?;
    let rect = cfg.rectify.to_core();
    let scenes = prepare_scenes(cfg, &palette, Some(cfg.experiment_n))?;
    let stats = with_jobs(jobs, || {
        perception_target_stats(&scenes, &palette, &schedule, &rect, cfg.gamma)
    })??;

    let rows: Vec<String> = stats
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{},{}",
                s.name,
                s.mean_fp,
                s.mean_fn,
                s.mean_total(),
                scenes.len(),
                loaded.hash
            )
        })
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        "target,mean_fp,mean_fn,mean_fp_plus_fn,n_runs,config_hash",
        &rows,
    )?;

    let mut lines = report_lines("perception-target", loaded, scenes.len());
    for s in &stats {
        lines.push(format!(
            "target {}: mean fp {:.3}, mean fn {:.3}, total {:.3}",
            s.name,
            s.mean_fp,
            s.mean_fn,
            s.mean_total()
        ));
    }
    let by_name = |n: &str| stats.iter().find(|s| s.name == n).expect("all targets present");
    let ordered = by_name("lookahead").mean_total() <= by_name("onestep").mean_total()
        && by_name("onestep").mean_total() <= by_name("noisy").mean_total();
    push_checks(
        &mut lines,
        &[("mean probe error lookahead <= onestep <= noisy".into(), ordered)],
    );
    write_text(&dir.join("report.txt"), &lines)
}

// ---------------------------------------------------------------------------
// timestep-sweep: the nine rectification schedules.

pub fn sweep_presets() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("none", vec![]),
        ("0.75", vec![0.75]),
        ("0.5", vec![0.5]),
        ("0.25", vec![0.25]),
        ("0.1", vec![0.1]),
        ("0.5,0.25", vec![0.5, 0.25]),
        ("0.5,0.25,0.1", vec![0.5, 0.25, 0.1]),
        ("0.75,0.5,0.25,0.1", vec![0.75, 0.5, 0.25, 0.1]),
        (
            "0.75,0.625,0.5,0.375,0.25,0.1",
            vec![0.75, 0.625, 0.5, 0.375, 0.25, 0.1],
        ),
    ]
}

pub struct SweepStat {
    pub name: &'static str,
    pub consistency: f64,
}

pub fn timestep_sweep_stats(
    scenes: &[PreparedScene],
    palette: &Palette,
    schedule: &NoiseSchedule,
    rect: &RectificationConfig,
    gamma: f64,
) -> CliResult<Vec<SweepStat>> {
    sweep_presets()
        .into_iter()
        .map(|(name, fractions)| {
            let arm_rect = RectificationConfig {
                stage_fractions: fractions,
                ..rect.clone()
            };
            let arm = run_arm(scenes, palette, schedule, RunMode::Rgr, &arm_rect, gamma, 0.5)?;
            Ok(SweepStat {
                name,
                consistency: consistency_rate(&arm),
            })
        })
        .collect()
}

fn cmd_timestep_sweep(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loaded.config;
    let dir = experiment_dir(loaded, "timestep-sweep")?;
    let palette = load_palette_or_default(cfg)?;
    let schedule = cfg.schedule.build()?;
    let rect = cfg.rectify.to_core();
    let scenes = prepare_scenes(cfg, &palette, Some(cfg.experiment_n))?;
    let stats = with_jobs(jobs, || {
        timestep_sweep_stats(&scenes, &palette, &schedule, &rect, cfg.gamma)
    })??;

    let rows: Vec<String> = stats
        .iter()
        .map(|s| format!("{},{},{},{}", csv_field(s.name), s.consistency, scenes.len(), loaded.hash))
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        "schedule,consistency_rate,n_runs,config_hash",
        &rows,
    )?;

    let mut lines = report_lines("timestep-sweep", loaded, scenes.len());
    for s in &stats {
        lines.push(format!("schedule [{}]: consistency rate {:.3}", s.name, s.consistency));
    }
    let by_name = |n: &str| stats.iter().find(|s| s.name == n).expect("preset present");
    let improved = by_name("0.75,0.5,0.25,0.1").consistency >= by_name("none").consistency;
    push_checks(
        &mut lines,
        &[(
            "four-stage schedule at least matches no rectification".into(),
            improved,
        )],
    );
    write_text(&dir.join("report.txt"), &lines)
}

// ---------------------------------------------------------------------------
// component-ablation: baseline vs +RGR vs +RGR+RACA.

pub struct AblationArm {
    pub name: &'static str,
    pub consistency: f64,
    pub leakage: f64,
    pub frechet: f64,
}

pub fn component_ablation_stats(
    scenes: &[PreparedScene],
    palette: &Palette,
    schedule: &NoiseSchedule,
    rect: &RectificationConfig,
    gamma: f64,
) -> CliResult<Vec<AblationArm>> {
    let arms = [
        ("baseline", RunMode::Baseline),
        ("rgr", RunMode::Rgr),
        ("recon", RunMode::Recon),
    ];
    arms.iter()
        .map(|&(name, mode)| {
            let arm = run_arm(scenes, palette, schedule, mode, rect, gamma, 0.5)?;
            let leakage = leakage_score(&corpus_of(scenes, &arm), palette)?;
            let frechet = frechet_vs_real(scenes, &arm)?;
            Ok(AblationArm {
                name,
                consistency: consistency_rate(&arm),
                leakage,
                frechet,
            })
        })
        .collect()
}

fn cmd_component_ablation(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loaded.config;
    let dir = experiment_dir(loaded, "component-ablation")?;
    let palette = load_palette_or_default(cfg)?;
    let schedule = cfg.schedule.build()?;
    let rect = cfg.rectify.to_core();
    let scenes = prepare_scenes(cfg, &palette, Some(cfg.experiment_n))?;
    let stats = with_jobs(jobs, || {
        component_ablation_stats(&scenes, &palette, &schedule, &rect, cfg.gamma)
    })??;

    let rows: Vec<String> = stats
        .iter()
        .map(|a| {
            format!(
                "{},{},{},{},{},{}",
                a.name, a.consistency, a.leakage, a.frechet, scenes.len(), loaded.hash
            )
        })
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        "arm,consistency_rate,leakage,frechet,n_runs,config_hash",
        &rows,
    )?;

    let mut lines = report_lines("component-ablation", loaded, scenes.len());
    for a in &stats {
        lines.push(format!(
            "arm {}: consistency {:.3}, leakage {:.3}, frechet {:.3}",
            a.name, a.consistency, a.leakage, a.frechet
        ));
    }
    let by_name = |n: &str| stats.iter().find(|a| a.name == n).expect("arm present");
    let (b, r, c) = (by_name("baseline"), by_name("rgr"), by_name("recon"));
    push_checks(
        &mut lines,
        &[
            ("consistency baseline < rgr".into(), b.consistency < r.consistency),
            ("consistency rgr <= recon".into(), r.consistency <= c.consistency),
            (
                "rgr gains at least 10 points over baseline".into(),
                r.consistency - b.consistency >= 0.10,
            ),
            ("frechet recon <= baseline".into(), c.frechet <= b.frechet),
        ],
    );
    write_text(&dir.join("report.txt"), &lines)
}

// ---------------------------------------------------------------------------
// sdedit-compare: the full method vs uniform-strength editing at matched
// mean edit area.

pub struct SdeditStats {
    pub recon_consistency: f64,
    pub recon_edit_area: f64,
    pub matched_strength: f64,
    pub sdedit_consistency: f64,
    pub sdedit_edit_area: f64,
}

pub fn sdedit_compare_stats(
    scenes: &[PreparedScene],
    palette: &Palette,
    schedule: &NoiseSchedule,
    rect: &RectificationConfig,
    gamma: f64,
) -> CliResult<SdeditStats> {
    let recon = run_arm(scenes, palette, schedule, RunMode::Recon, rect, gamma, 0.5)?;
    let sigma = palette.pixel_sigma();
    let recon_edit_area = scenes
        .iter()
        .zip(&recon)
        .map(|(p, r)| edit_area(&r.image, &p.scene.image, sigma))
        .sum::<f64>()
        / scenes.len() as f64;

    // Calibrate the editing strength on a scene subset so both arms touch a
    // comparable share of the canvas, then evaluate the chosen strength on
    // the full set. Uniform editing cannot target regions, so it gets the
    // pooled conditioning it would have in practice.
    let calibration = &scenes[..scenes.len().min(32)];
    let strengths: Vec<f64> = (1..=20).map(|k| k as f64 * 0.05).collect();
    let mut matched_strength = strengths[0];
    let mut best_gap = f64::INFINITY;
    for &strength in &strengths {
        let mean_area = calibration
            .par_iter()
            .map(|p| -> CliResult<f64> {
                let img = run_sdedit(
                    &p.scene,
                    palette,
                    schedule,
                    ConditioningMode::Global,
                    gamma,
                    strength,
                    p.seed,
                )?;
                Ok(edit_area(&img, &p.scene.image, sigma))
            })
            .collect::<CliResult<Vec<_>>>()?
            .iter()
            .sum::<f64>()
            / calibration.len() as f64;
        let gap = (mean_area - recon_edit_area).abs();
        if gap < best_gap {
            best_gap = gap;
            matched_strength = strength;
        }
    }

    let sdedit: Vec<(f64, bool)> = scenes
        .par_iter()
        .map(|p| -> CliResult<(f64, bool)> {
            let img = run_sdedit(
                &p.scene,
                palette,
                schedule,
                ConditioningMode::Global,
                gamma,
                matched_strength,
                p.seed,
            )?;
            let (consistent, _, _) = layout_consistency(&img, &p.scene.layout, palette, rect.tau)?;
            Ok((edit_area(&img, &p.scene.image, sigma), consistent))
        })
        .collect::<CliResult<Vec<_>>>()?;

    Ok(SdeditStats {
        recon_consistency: consistency_rate(&recon),
        recon_edit_area,
        matched_strength,
        sdedit_consistency: sdedit.iter().filter(|(_, ok)| *ok).count() as f64 / sdedit.len() as f64,
        sdedit_edit_area: sdedit.iter().map(|(a, _)| a).sum::<f64>() / sdedit.len() as f64,
    })
}

fn cmd_sdedit_compare(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loaded.config;
    let dir = experiment_dir(loaded, "sdedit-compare")?;
    let palette = load_palette_or_default(cfg)?;
    let schedule = cfg.schedule.build()?;
    let rect = cfg.rectify.to_core();
    let scenes = prepare_scenes(cfg, &palette, Some(cfg.experiment_n))?;
    let stats = with_jobs(jobs, || {
        sdedit_compare_stats(&scenes, &palette, &schedule, &rect, cfg.gamma)
    })??;

    let rows = vec![
        format!(
            "recon,,{},{},{},{}",
            stats.recon_edit_area, stats.recon_consistency, scenes.len(), loaded.hash
        ),
        format!(
            "sdedit,{},{},{},{},{}",
            stats.matched_strength, stats.sdedit_edit_area, stats.sdedit_consistency,
            scenes.len(), loaded.hash
        ),
    ];
    write_csv(
        &dir.join("summary.csv"),
        "arm,strength,mean_edit_area,consistency_rate,n_scenes,config_hash",
        &rows,
    )?;

    let mut lines = report_lines("sdedit-compare", loaded, scenes.len());
    lines.push(format!(
        "recon: edit area {:.3}, consistency {:.3}",
        stats.recon_edit_area, stats.recon_consistency
    ));
    lines.push(format!(
        "sdedit (strength {:.2}): edit area {:.3}, consistency {:.3}",
        stats.matched_strength, stats.sdedit_edit_area, stats.sdedit_consistency
    ));
    push_checks(
        &mut lines,
        &[(
            "recon consistency >= sdedit consistency at matched edit area".into(),
            stats.recon_consistency >= stats.sdedit_consistency,
        )],
    );
    write_text(&dir.join("report.txt"), &lines)
}

// ---------------------------------------------------------------------------
// downstream: does augmenting a tiny annotated set with generated scenes help
// a prototype classifier?

const DOWNSTREAM_STREAM: u64 = 0x6473_7472;
const DOWNSTREAM_REPS: usize = 10;
const N_REAL: usize = 5;
const N_AUG: usize = 15;
const N_TEST: usize = 20;

pub struct DownstreamRep {
    pub f1_real_only: f64,
    pub f1_augmented: f64,
    pub fallback_real: usize,
    pub fallback_augmented: usize,
}

pub fn downstream_stats(
    cfg: &RunConfig,
    palette: &Palette,
    schedule: &NoiseSchedule,
    rect: &RectificationConfig,
    gamma: f64,
) -> CliResult<Vec<DownstreamRep>> {
    let gen = cfg.generate.to_core();
    (0..DOWNSTREAM_REPS)
        .into_par_iter()
        .map(|rep| -> CliResult<DownstreamRep> {
            let base = derive_seed(cfg.seed, DOWNSTREAM_STREAM + rep as u64);
            let draw_scene = |j: u64| -> CliResult<SceneSample> {
                let s = derive_seed(base, j);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, LAYOUT_STREAM));
                let layout = generate_layout(&gen, palette, &mut rng)?;
                Ok(sample_scene(&layout, palette, derive_seed(s, IMAGE_STREAM))?)
            };
            let pair = |s: SceneSample| (s.layout.clone(), s.image);

            let real: Vec<(Layout, LatentGrid)> = (0..N_REAL as u64)
                .map(|j| draw_scene(j).map(pair))
                .collect::<CliResult<_>>()?;
            let augmented: Vec<(Layout, LatentGrid)> = (100..100 + N_AUG as u64)
                .map(|j| {
                    let scene = draw_scene(j)?;
                    let (image, _) = run_recon(
                        &scene,
                        palette,
                        schedule,
                        ConditioningMode::Raca,
                        rect,
                        gamma,
                        derive_seed(base, 5000 + j),
                    )?;
                    Ok((scene.layout.clone(), image))
                })
                .collect::<CliResult<_>>()?;
            let test: Vec<(Layout, LatentGrid)> = (200..200 + N_TEST as u64)
                .map(|j| draw_scene(j).map(pair))
                .collect::<CliResult<_>>()?;

            let report = micro_downstream_eval(&real, &augmented, &test, palette)?;
            Ok(DownstreamRep {
                f1_real_only: report.f1_real_only,
                f1_augmented: report.f1_augmented,
                fallback_real: report.fallback_real.len(),
                fallback_augmented: report.fallback_augmented.len(),
            })
        })
        .collect()
}

fn cmd_downstream(loaded: &LoadedConfig, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &loaded.config;
    let dir = experiment_dir(loaded, "downstream")?;
    let palette = load_palette_or_default(cfg)?;
    let schedule = cfg.schedule.build()?;
    let rect = cfg.rectify.to_core();
    let stats = with_jobs(jobs, || downstream_stats(cfg, &palette, &schedule, &rect, cfg.gamma))??;

    let rows: Vec<String> = stats
        .iter()
        .enumerate()
        .map(|(rep, r)| {
            format!(
                "{},{},{},{},{},{}",
                rep, r.f1_real_only, r.f1_augmented, r.fallback_real, r.fallback_augmented, loaded.hash
            )
        })
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        "repetition,f1_real_only,f1_augmented,fallback_real,fallback_augmented,config_hash",
        &rows,
    )?;

    let improved = stats.iter().filter(|r| r.f1_augmented >= r.f1_real_only).count();
    let mut lines = report_lines("downstream", loaded, DOWNSTREAM_REPS);
    lines.push(format!(
        "protocol: {N_REAL} real train scenes vs {N_REAL} real + {N_AUG} generated, {N_TEST} test scenes, {DOWNSTREAM_REPS} repetitions"
    ));
    for (rep, r) in stats.iter().enumerate() {
        lines.push(format!(
            "repetition {rep}: f1 real-only {:.4}, f1 augmented {:.4}",
            r.f1_real_only, r.f1_augmented
        ));
    }
    lines.push(format!("augmented at least matches real-only in {improved}/{DOWNSTREAM_REPS} repetitions"));
    push_checks(
        &mut lines,
        &[(
            "augmented f1 >= real-only f1 in at least 8 of 10 repetitions".into(),
            improved >= 8,
        )],
    );
    write_text(&dir.join("report.txt"), &lines)
}

fn loadded_config(loaded: &LoadedConfig) -> &RunConfig {
    &loaded.config
}
