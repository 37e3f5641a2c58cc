//! Detection-guided rectification: probe the trajectory mid-flight with the
//! perception stack, mark regions that drifted away from the layout, and
//! re-inject forward-noised original content exactly there.
//!
//! A run has two phases. Before sampling, the original image is screened
//! once: spurious detections (content with no annotation) get their regions
//! cut out of the structural control map so the sampler is never steered
//! toward them. During sampling, at a handful of scheduled timesteps, a
//! probe image is decoded per [`TargetMode`], detections are matched against
//! the layout, and the union of false-positive regions (segmented on the
//! probe) and false-negative regions (segmented on the original) becomes the
//! rectification mask: masked pixels are replaced by the original forward-
//! noised to the current timestep, off-mask pixels pass through untouched.

use std::cell::RefCell;

use crate::denoiser::{ConditioningMode, ExactDenoiser};
use crate::diffusion::{
    draw_noise, fast_lookahead, noise_to_t, sample_loop, Hook, NoiseSchedule, SamplerState,
};
use crate::error::{Error, Result};
use crate::perception::{
    detect, exclusive_dilate, mask_union, match_by_iou, segment_regions, BinaryMask,
};
use crate::raca::{
    attention_summaries, build_embeddings, conditioning_from_attention, DEFAULT_EMBED_DIM,
};
use crate::toyworld::{
    make_control_map, BBox, CategoryId, ControlMap, LatentGrid, Palette, SceneSample,
    MIN_BOX_AREA,
};

/// Seed stream for a run's text embeddings.
pub const EMBEDDING_SEED_STREAM: u64 = 0x7445_8a1c;
/// Seed stream for per-stage fresh rectification noise (only used when
/// `reuse_initial_noise` is off).
pub const STAGE_NOISE_SEED_STREAM: u64 = 0x9d2f_33b7;

/// Which image the mid-trajectory perception probe looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// The raw noisy latent itself.
    Noisy,
    /// The clean-point prediction from the current latent.
    Onestep,
    /// Advance a few reverse steps first, then take the clean-point
    /// prediction from there.
    Lookahead,
}

/// Knobs for the rectification schedule and its perception feedback.
#[derive(Debug, Clone)]
pub struct RectificationConfig {
    /// Trajectory positions (fractions of the total timestep range) where
    /// rectification fires; strictly decreasing, each in (0,1). Empty means
    /// no rectification at all.
    pub stage_fractions: Vec<f64>,
    /// Reverse steps to advance for the [`TargetMode::Lookahead`] probe.
    pub lookahead_n: usize,
    /// IoU threshold for matching probe detections against the layout.
    pub tau: f64,
    pub target_mode: TargetMode,
    /// Odd kernel width for the exclusive dilation of initial masks.
    pub dilate_kernel: usize,
    /// Reuse the run's initial noise when forward-noising the original at a
    /// stage; otherwise draw a fresh per-stage seeded noise.
    pub reuse_initial_noise: bool,
}

impl Default for RectificationConfig {
    fn default() -> Self {
        RectificationConfig {
            stage_fractions: vec![0.75, 0.50, 0.25, 0.10],
            lookahead_n: 5,
            tau: 0.5,
            target_mode: TargetMode::Lookahead,
            dilate_kernel: 7,
            reuse_initial_noise: true,
        }
    }
}

impl RectificationConfig {
    pub fn validate(&self) -> Result<()> {
        for pair in self.stage_fractions.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::validation(format!(
                    "stage fractions must be strictly decreasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        for f in &self.stage_fractions {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::validation(format!("stage fraction {f} outside (0,1)")));
            }
        }
        if self.lookahead_n == 0 {
            return Err(Error::validation("lookahead_n must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::validation(format!("tau {} outside (0,1]", self.tau)));
        }
        if self.dilate_kernel % 2 == 0 || self.dilate_kernel == 0 {
            return Err(Error::validation(format!(
                "dilation kernel {} must be odd",
                self.dilate_kernel
            )));
        }
        Ok(())
    }

    /// Maps each stage fraction f to the grid timestep nearest
    /// round(f * (T-1)). Fractions that land on the same grid step collapse
    /// to one stage; the result is strictly decreasing.
    pub fn stage_timesteps(&self, schedule: &NoiseSchedule) -> Vec<usize> {
        let top = (schedule.t_total() - 1) as f64;
        let mut out: Vec<usize> = Vec::with_capacity(self.stage_fractions.len());
        for f in &self.stage_fractions {
            let t = schedule.nearest_ddim_step((f * top).round() as usize);
            if out.last() != Some(&t) {
                out.push(t);
            }
        }
        out
    }
}

/// Artifacts of the pre-sampling screen of the original image.
#[derive(Debug, Clone)]
pub struct Stage1Record {
    /// Dilated region mask per layout object, pairwise disjoint.
    pub gt_masks: Vec<BinaryMask>,
    /// Dilated region mask per spurious detection on the original.
    pub fp_masks: Vec<BinaryMask>,
    /// Layout control map with all spurious regions zeroed.
    pub control_map: ControlMap,
}

/// One rectification stage as it happened.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub t: usize,
    pub mask: BinaryMask,
    /// Mask pixels over total pixels.
    pub area_ratio: f64,
    pub fp_count: usize,
    pub fn_count: usize,
}

/// Full per-run record: the initial screen plus one entry per fired stage,
/// in visit order (descending t).
#[derive(Debug, Clone)]
pub struct RectificationTrace {
    pub stage1: Stage1Record,
    pub stages: Vec<StageRecord>,
}

/// Output of one perception probe.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub mask: BinaryMask,
    pub fp_count: usize,
    pub fn_count: usize,
    /// Timestep the probe image lives at (0 for clean-point predictions that
    /// ran to completion).
    pub t_probe: usize,
}

/// Rewrites overlapping masks so every pixel belongs to at most one; the
/// highest-index claimant wins, mirroring layout paint order (and letting
/// spurious-region masks take precedence over ground-truth fallbacks).
fn disjointify(masks: &mut [BinaryMask]) {
    if masks.len() < 2 {
        return;
    }
    let (h, w) = (masks[0].h(), masks[0].w());
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (i, m) in masks.iter().enumerate() {
        for (y, x) in m.iter_true() {
            owner[y * w + x] = Some(i);
        }
    }
    for (i, m) in masks.iter_mut().enumerate() {
        let claimed: Vec<(usize, usize)> = m
            .iter_true()
            .filter(|(y, x)| owner[y * w + x] != Some(i))
            .collect();
        for (y, x) in claimed {
            m.set(y, x, false);
        }
    }
}

/// Screens the original image before sampling: detections that match no
/// annotation are spurious, their regions (and the annotated regions) are
/// segmented and exclusively dilated, and the control map is zeroed wherever
/// a spurious region lands. A clean original keeps its control map
/// untouched.
pub fn prepare_initial_masks(
    scene: &SceneSample,
    palette: &Palette,
    config: &RectificationConfig,
) -> Result<Stage1Record> {
    config.validate()?;
    let layout = &scene.layout;
    let detections = detect(&scene.image, palette, MIN_BOX_AREA)?;
    let matching = match_by_iou(&detections, layout.objects(), config.tau)?;

    let mut boxes: Vec<(BBox, Option<CategoryId>)> = layout
        .objects()
        .iter()
        .map(|o| (o.bbox, Some(o.label)))
        .collect();
    for &i in &matching.fp {
        boxes.push((detections[i].bbox, Some(detections[i].label)));
    }
    let mut masks = segment_regions(&scene.image, &boxes, palette)?;
    disjointify(&mut masks);
    let dilated = exclusive_dilate(&masks, config.dilate_kernel)?;

    let n_gt = layout.objects().len();
    let gt_masks = dilated[..n_gt].to_vec();
    let fp_masks = dilated[n_gt..].to_vec();

    let base = make_control_map(layout);
    let mut data = base.data().to_vec();
    for m in &fp_masks {
        for (y, x) in m.iter_true() {
            data[y * base.w() + x] = 0.0;
        }
    }
    let control_map = ControlMap::from_vec(base.h(), base.w(), data)?;
    Ok(Stage1Record {
        gt_masks,
        fp_masks,
        control_map,
    })
}

/// Builds the rectification mask for one probe: false-positive regions are
/// segmented on the probe image (erase what should not be there),
/// false-negative regions on the original (restore what is missing), and the
/// mask is their union.
pub fn build_rectification_mask(
    z_probe: &LatentGrid,
    t_probe: usize,
    scene: &SceneSample,
    palette: &Palette,
    config: &RectificationConfig,
) -> Result<ProbeReport> {
    let layout = &scene.layout;
    if !z_probe.same_shape(&scene.image) {
        return Err(Error::shape(
            "build_rectification_mask",
            format!("{}x{}", scene.image.h(), scene.image.w()),
            format!("{}x{}", z_probe.h(), z_probe.w()),
        ));
    }
    let detections = detect(z_probe, palette, MIN_BOX_AREA)?;
    let matching = match_by_iou(&detections, layout.objects(), config.tau)?;

    let mut parts: Vec<BinaryMask> = Vec::new();
    if !matching.fp.is_empty() {
        let boxes: Vec<(BBox, Option<CategoryId>)> = matching
            .fp
            .iter()
            .map(|&i| (detections[i].bbox, Some(detections[i].label)))
            .collect();
        parts.extend(segment_regions(z_probe, &boxes, palette)?);
    }
    if !matching.fn_.is_empty() {
        let boxes: Vec<(BBox, Option<CategoryId>)> = matching
            .fn_
            .iter()
            .map(|&i| {
                let o = &layout.objects()[i];
                (o.bbox, Some(o.label))
            })
            .collect();
        parts.extend(segment_regions(&scene.image, &boxes, palette)?);
    }
    let mask = if parts.is_empty() {
        BinaryMask::zeros(z_probe.h(), z_probe.w())?
    } else {
        mask_union(z_probe.h(), z_probe.w(), &parts)?
    };
    Ok(ProbeReport {
        fp_count: matching.fp.len(),
        fn_count: matching.fn_.len(),
        mask,
        t_probe,
    })
}

/// Masked latent replacement: the original-derived latent on mask pixels,
/// the current latent elsewhere. Pure per-pixel selection, so both branches
/// pass through bit-exactly.
pub fn masked_blend(
    z_orig_t: &LatentGrid,
    z_t: &LatentGrid,
    mask: &BinaryMask,
) -> Result<LatentGrid> {
    if !z_orig_t.same_shape(z_t) {
        return Err(Error::shape(
            "masked_blend",
            format!("{}x{}", z_t.h(), z_t.w()),
            format!("{}x{}", z_orig_t.h(), z_orig_t.w()),
        ));
    }
    if mask.h() != z_t.h() || mask.w() != z_t.w() {
        return Err(Error::shape(
            "masked_blend",
            format!("{}x{} mask", z_t.h(), z_t.w()),
            format!("{}x{}", mask.h(), mask.w()),
        ));
    }
    let mut out = z_t.clone();
    for (y, x) in mask.iter_true() {
        out.set_pixel(y, x, z_orig_t.pixel(y, x));
    }
    Ok(out)
}

/// Decodes the probe image for one stage per the configured target mode and
/// runs the perception feedback on it.
fn probe_and_mask(
    z_t: &LatentGrid,
    t: usize,
    scene: &SceneSample,
    palette: &Palette,
    schedule: &NoiseSchedule,
    denoiser: &ExactDenoiser,
    eps_init: &LatentGrid,
    config: &RectificationConfig,
) -> Result<ProbeReport> {
    match config.target_mode {
        TargetMode::Noisy => build_rectification_mask(z_t, t, scene, palette, config),
        TargetMode::Onestep => {
            let out = denoiser.denoise(z_t, t, schedule)?;
            build_rectification_mask(&out.z0_hat, t, scene, palette, config)
        }
        TargetMode::Lookahead => {
            let step_index = schedule.ddim_index_of(t).ok_or_else(|| {
                Error::invalid(format!("rectification stage t={t} is off the sampling grid"))
            })?;
            let state = SamplerState {
                z: z_t.clone(),
                step_index,
                initial_noise: eps_init.clone(),
                rng_seed: 0,
            };
            let ahead = fast_lookahead(&state, config.lookahead_n, denoiser, schedule)?;
            if ahead.completed {
                build_rectification_mask(&ahead.z, 0, scene, palette, config)
            } else {
                let out = denoiser.denoise(&ahead.z, ahead.t, schedule)?;
                build_rectification_mask(&out.z0_hat, ahead.t, scene, palette, config)
            }
        }
    }
}

/// Full rectified sampling run. The initial screen suppresses spurious
/// control, attention over the initial noise builds the conditioning, and
/// the sampler runs with a rectification hook at every stage timestep. An
/// empty stage list degenerates to the plain conditioned sampler.
pub fn run_recon(
    scene: &SceneSample,
    palette: &Palette,
    schedule: &NoiseSchedule,
    mode: ConditioningMode,
    config: &RectificationConfig,
    gamma: f64,
    seed: u64,
) -> Result<(LatentGrid, RectificationTrace)> {
    config.validate()?;
    let layout = &scene.layout;
    let stage1 = prepare_initial_masks(scene, palette, config)?;

    let set = build_embeddings(
        palette,
        DEFAULT_EMBED_DIM,
        crate::derive_seed(seed, EMBEDDING_SEED_STREAM),
    )?;
    let z_init = draw_noise(layout.height(), layout.width(), seed)?;
    let t_start = schedule.ddim_steps()[0];
    let summaries = attention_summaries(&z_init, layout, &set, palette, t_start, schedule, mode)?;
    let conditioning = conditioning_from_attention(
        &summaries,
        mode,
        layout,
        &set,
        palette,
        gamma,
        stage1.control_map.clone(),
    )?;
    let denoiser = ExactDenoiser::new(palette.clone(), conditioning)?;

    let stage_ts = config.stage_timesteps(schedule);
    let records: RefCell<Vec<StageRecord>> = RefCell::new(Vec::new());
    let mut hooks: Vec<Hook<'_>> = Vec::new();
    if !stage_ts.is_empty() {
        let denoiser_ref = &denoiser;
        let z_init_ref = &z_init;
        let records_ref = &records;
        hooks.push(Hook::new(
            move |t| stage_ts.contains(&t),
            move |z_t, t| {
                let report =
                    probe_and_mask(z_t, t, scene, palette, schedule, denoiser_ref, z_init_ref, config)?;
                let eps = if config.reuse_initial_noise {
                    z_init_ref.clone()
                } else {
                    draw_noise(
                        z_t.h(),
                        z_t.w(),
                        crate::derive_seed(
                            crate::derive_seed(seed, STAGE_NOISE_SEED_STREAM),
                            t as u64,
                        ),
                    )?
                };
                let z_orig_t = noise_to_t(&scene.image, &eps, t, schedule)?;
                let blended = masked_blend(&z_orig_t, z_t, &report.mask)?;
                let area_ratio =
                    report.mask.count() as f64 / (z_t.h() as f64 * z_t.w() as f64);
                records_ref.borrow_mut().push(StageRecord {
                    t,
                    mask: report.mask,
                    area_ratio,
                    fp_count: report.fp_count,
                    fn_count: report.fn_count,
                });
                Ok(blended)
            },
        ));
    }
    let (image, _events) = sample_loop(z_init.clone(), &denoiser, schedule, &mut hooks)?;
    drop(hooks);
    let stages = records.into_inner();
    Ok((image, RectificationTrace { stage1, stages }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{sample_scene, CategorySpec, ColorComponent, Layout, LayoutObject};
    use std::collections::BTreeSet;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn comp(mean: [f64; 3], weight: f64) -> ColorComponent {
        ColorComponent { mean, weight }
    }

    fn plain_palette() -> Palette {
        Palette::new(
            0.05,
            vec![
                CategorySpec::new(0, "bg", vec![comp([0.5, 0.5, 0.5], 1.0)]).unwrap(),
                CategorySpec::new(1, "red", vec![comp([0.9, 0.1, 0.1], 1.0)]).unwrap(),
                CategorySpec::new(2, "blue", vec![comp([0.1, 0.1, 0.9], 1.0)]).unwrap(),
            ],
        )
        .unwrap()
    }

    fn two_category_layout(palette: &Palette) -> Layout {
        Layout::new(
            24,
            24,
            vec![
                LayoutObject { bbox: bx(2, 2, 9, 9), label: 1 },
                LayoutObject { bbox: bx(12, 2, 19, 9), label: 2 },
                LayoutObject { bbox: bx(2, 12, 9, 19), label: 1 },
            ],
            BTreeSet::from([1, 2]),
            palette,
        )
        .unwrap()
    }

    fn clean_scene(seed: u64) -> (Palette, SceneSample) {
        let palette = plain_palette();
        let layout = two_category_layout(&palette);
        let scene = sample_scene(&layout, &palette, seed).unwrap();
        (palette, scene)
    }

    fn paint(image: &mut LatentGrid, x0: usize, y0: usize, x1: usize, y1: usize, c: [f64; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                image.set_pixel(y, x, c);
            }
        }
    }

    #[test]
    fn config_validates_and_maps_stages() {
        let cfg = RectificationConfig::default();
        cfg.validate().unwrap();
        let s = NoiseSchedule::default_linear();
        assert_eq!(cfg.stage_timesteps(&s), vec![749, 500, 250, 83]);

        // Two fractions snapping to one grid step collapse to one stage.
        let near = RectificationConfig {
            stage_fractions: vec![0.5, 0.499],
            ..RectificationConfig::default()
        };
        near.validate().unwrap();
        assert_eq!(near.stage_timesteps(&s), vec![500]);

        let empty = RectificationConfig {
            stage_fractions: vec![],
            ..RectificationConfig::default()
        };
        empty.validate().unwrap();
        assert!(empty.stage_timesteps(&s).is_empty());

        let bad = |cfg: RectificationConfig| cfg.validate().unwrap_err();
        bad(RectificationConfig {
            stage_fractions: vec![0.5, 0.5],
            ..RectificationConfig::default()
        });
        bad(RectificationConfig {
            stage_fractions: vec![0.25, 0.75],
            ..RectificationConfig::default()
        });
        bad(RectificationConfig {
            stage_fractions: vec![1.0],
            ..RectificationConfig::default()
        });
        bad(RectificationConfig {
            lookahead_n: 0,
            ..RectificationConfig::default()
        });
        bad(RectificationConfig {
            dilate_kernel: 4,
            ..RectificationConfig::default()
        });
        bad(RectificationConfig {
            tau: 0.0,
            ..RectificationConfig::default()
        });
        bad(RectificationConfig {
            tau: 1.5,
            ..RectificationConfig::default()
        });
    }

    #[test]
    fn clean_original_keeps_its_control_map() {
        let (palette, scene) = clean_scene(41);
        let cfg = RectificationConfig::default();
        let rec = prepare_initial_masks(&scene, &palette, &cfg).unwrap();
        assert!(rec.fp_masks.is_empty());
        assert_eq!(rec.gt_masks.len(), 3);
        let base = make_control_map(&scene.layout);
        assert_eq!(rec.control_map.data(), base.data());
        // Dilated object masks stay pairwise disjoint and keep their cores.
        for i in 0..3 {
            let b = scene.layout.objects()[i].bbox;
            let (cy, cx) = ((b.y0() + b.y1()) / 2, (b.x0() + b.x1()) / 2);
            assert!(rec.gt_masks[i].get(cy, cx));
            for j in i + 1..3 {
                for (y, x) in rec.gt_masks[i].iter_true() {
                    assert!(!rec.gt_masks[j].get(y, x));
                }
            }
        }
    }

    #[test]
    fn spurious_content_cuts_the_control_map() {
        let (palette, mut scene) = clean_scene(42);
        // Paint category-2 content across the right flank of object 3
        // (category 1, box x in [2,9), y in [12,19)) and the background next
        // to it. The remnant of object 3 still matches its annotation; the
        // painted block matches nothing and becomes a spurious detection.
        paint(&mut scene.image, 6, 11, 14, 19, [0.1, 0.1, 0.9]);
        let cfg = RectificationConfig::default();
        let rec = prepare_initial_masks(&scene, &palette, &cfg).unwrap();
        assert_eq!(rec.fp_masks.len(), 1, "one spurious region");

        let base = make_control_map(&scene.layout);
        // Object 3's right perimeter column sits under the painted block:
        // control there must be gone, while its left column survives.
        assert!(base.is_active(15, 8));
        assert!(!rec.control_map.is_active(15, 8));
        assert!(base.is_active(15, 2));
        assert!(rec.control_map.is_active(15, 2));
        // Other objects' perimeters are untouched.
        assert!(rec.control_map.is_active(5, 2));
        assert!(rec.control_map.is_active(5, 12));
        // No active control anywhere in the suppressed region.
        for (y, x) in rec.fp_masks[0].iter_true() {
            assert!(!rec.control_map.is_active(y, x), "active control at ({y},{x})");
        }
        // The suppressed region covers the painted block.
        for y in 11..19 {
            for x in 6..14 {
                assert!(rec.fp_masks[0].get(y, x), "({y},{x}) outside the spurious mask");
            }
        }
    }

    #[test]
    fn faithful_probe_needs_no_rectification() {
        let (palette, scene) = clean_scene(43);
        let cfg = RectificationConfig::default();
        let probe = scene.image.clone();
        let report = build_rectification_mask(&probe, 500, &scene, &palette, &cfg).unwrap();
        assert_eq!(report.mask.count(), 0);
        assert_eq!(report.fp_count, 0);
        assert_eq!(report.fn_count, 0);
    }

    #[test]
    fn missing_object_is_restored_from_the_original() {
        let (palette, scene) = clean_scene(44);
        let cfg = RectificationConfig::default();
        // Erase object 2 (category 2, box x in [12,19), y in [2,9)) from the
        // probe by painting background over it.
        let mut probe = scene.image.clone();
        paint(&mut probe, 12, 2, 19, 9, [0.5, 0.5, 0.5]);
        let report = build_rectification_mask(&probe, 250, &scene, &palette, &cfg).unwrap();
        assert_eq!(report.fn_count, 1);
        assert_eq!(report.fp_count, 0);
        // The mask restores the object's pixels as they are in the original.
        for y in 2..9 {
            for x in 12..19 {
                assert!(report.mask.get(y, x), "({y},{x}) missing from the mask");
            }
        }
    }

    #[test]
    fn extra_object_is_erased_from_the_probe() {
        let (palette, scene) = clean_scene(45);
        let cfg = RectificationConfig::default();
        // Add an isolated category-2 block in the empty quadrant.
        let mut probe = scene.image.clone();
        paint(&mut probe, 12, 12, 20, 20, [0.1, 0.1, 0.9]);
        let report = build_rectification_mask(&probe, 250, &scene, &palette, &cfg).unwrap();
        assert_eq!(report.fp_count, 1);
        assert_eq!(report.fn_count, 0);
        for y in 12..20 {
            for x in 12..20 {
                assert!(report.mask.get(y, x), "({y},{x}) missing from the mask");
            }
        }
    }

    #[test]
    fn blend_selects_pixels_bit_exactly() {
        let a = draw_noise(8, 8, 1).unwrap();
        let b = draw_noise(8, 8, 2).unwrap();
        let all = BinaryMask::from_fn(8, 8, |_, _| true).unwrap();
        let none = BinaryMask::zeros(8, 8).unwrap();
        let checker = BinaryMask::from_fn(8, 8, |y, x| (y + x) % 2 == 0).unwrap();

        assert_eq!(masked_blend(&a, &b, &all).unwrap().data(), a.data());
        assert_eq!(masked_blend(&a, &b, &none).unwrap().data(), b.data());
        let mixed = masked_blend(&a, &b, &checker).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if (y + x) % 2 == 0 { a.pixel(y, x) } else { b.pixel(y, x) };
                assert_eq!(mixed.pixel(y, x), want);
            }
        }
        let small = BinaryMask::zeros(4, 8).unwrap();
        assert!(masked_blend(&a, &b, &small).is_err());
    }

    #[test]
    fn empty_schedule_is_the_plain_conditioned_sampler() {
        let (palette, scene) = clean_scene(46);
        let schedule = NoiseSchedule::default_linear();
        let cfg = RectificationConfig {
            stage_fractions: vec![],
            ..RectificationConfig::default()
        };
        let seed = 77;
        let gamma = 0.5;
        let (image, trace) = run_recon(
            &scene,
            &palette,
            &schedule,
            ConditioningMode::Global,
            &cfg,
            gamma,
            seed,
        )
        .unwrap();
        assert!(trace.stages.is_empty());

        // The same pipeline assembled by hand, with no hooks at all.
        let set = build_embeddings(
            &palette,
            DEFAULT_EMBED_DIM,
            crate::derive_seed(seed, EMBEDDING_SEED_STREAM),
        )
        .unwrap();
        let z_init = draw_noise(24, 24, seed).unwrap();
        let stage1 = prepare_initial_masks(&scene, &palette, &cfg).unwrap();
        let summaries = attention_summaries(
            &z_init,
            &scene.layout,
            &set,
            &palette,
            999,
            &schedule,
            ConditioningMode::Global,
        )
        .unwrap();
        let cond = conditioning_from_attention(
            &summaries,
            ConditioningMode::Global,
            &scene.layout,
            &set,
            &palette,
            gamma,
            stage1.control_map,
        )
        .unwrap();
        let den = ExactDenoiser::new(palette.clone(), cond).unwrap();
        let (manual, _) = sample_loop(z_init, &den, &schedule, &mut []).unwrap();
        assert_eq!(image.data(), manual.data());
    }

    #[test]
    fn trace_lists_stages_in_descending_time() {
        let (palette, scene) = clean_scene(47);
        let schedule = NoiseSchedule::default_linear();
        let cfg = RectificationConfig::default();
        let (_, trace) = run_recon(
            &scene,
            &palette,
            &schedule,
            ConditioningMode::Global,
            &cfg,
            0.5,
            5,
        )
        .unwrap();
        let ts: Vec<usize> = trace.stages.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![749, 500, 250, 83]);
        for s in &trace.stages {
            assert!(s.area_ratio >= 0.0 && s.area_ratio <= 1.0);
            assert_eq!(s.area_ratio, s.mask.count() as f64 / (24.0 * 24.0));
        }
        assert_eq!(trace.stage1.gt_masks.len(), 3);
    }

    #[test]
    fn clean_run_rectifies_nothing_and_matches_the_baseline() {
        // With per-region single-component conditioning the clean-point
        // prediction is detector-perfect from the very first probe, so every
        // stage mask is empty and rectification must be a no-op.
        let (palette, scene) = clean_scene(48);
        let schedule = NoiseSchedule::default_linear();
        let full = RectificationConfig::default();
        let none = RectificationConfig {
            stage_fractions: vec![],
            ..RectificationConfig::default()
        };
        let (rectified, trace) = run_recon(
            &scene,
            &palette,
            &schedule,
            ConditioningMode::Raca,
            &full,
            0.5,
            9,
        )
        .unwrap();
        let (baseline, _) = run_recon(
            &scene,
            &palette,
            &schedule,
            ConditioningMode::Raca,
            &none,
            0.5,
            9,
        )
        .unwrap();
        for s in &trace.stages {
            assert_eq!(s.mask.count(), 0, "stage t={} rectified {} pixels", s.t, s.mask.count());
        }
        assert_eq!(rectified.data(), baseline.data());
    }

    #[test]
    fn off_mask_pixels_follow_the_hook_free_trajectory() {
        // In a one-component-per-category world the conditioned denoiser is
        // strictly per-pixel (responsibilities are pinned at 1), so a masked
        // rewrite can never bleed into off-mask pixels: they must track the
        // hook-free run bit for bit.
        let (palette, scene) = clean_scene(49);
        let schedule = NoiseSchedule::default_linear();
        let seed = 31;
        let set = build_embeddings(
            &palette,
            DEFAULT_EMBED_DIM,
            crate::derive_seed(seed, EMBEDDING_SEED_STREAM),
        )
        .unwrap();
        let z_init = draw_noise(24, 24, seed).unwrap();
        let summaries = attention_summaries(
            &z_init,
            &scene.layout,
            &set,
            &palette,
            999,
            &schedule,
            ConditioningMode::Raca,
        )
        .unwrap();
        let cond = conditioning_from_attention(
            &summaries,
            ConditioningMode::Raca,
            &scene.layout,
            &set,
            &palette,
            0.5,
            make_control_map(&scene.layout),
        )
        .unwrap();
        let den = ExactDenoiser::new(palette.clone(), cond).unwrap();

        let (free, _) = sample_loop(z_init.clone(), &den, &schedule, &mut []).unwrap();

        let mask = BinaryMask::from_fn(24, 24, |y, x| (y + x) % 2 == 0).unwrap();
        let mut hooks = vec![Hook::new(
            |t| t == 500 || t == 250,
            |z, t| {
                let z_orig = noise_to_t(&scene.image, &z_init, t, &schedule)?;
                masked_blend(&z_orig, z, &mask)
            },
        )];
        let (hooked, _) = sample_loop(z_init.clone(), &den, &schedule, &mut hooks).unwrap();
        drop(hooks);

        let mut touched = 0;
        for y in 0..24 {
            for x in 0..24 {
                if mask.get(y, x) {
                    touched += 1;
                } else {
                    assert_eq!(hooked.pixel(y, x), free.pixel(y, x), "pixel ({y},{x}) drifted");
                }
            }
        }
        assert!(touched > 0);
        // The rewrite really happened: masked pixels differ from the free run.
        assert_ne!(hooked.data(), free.data());
    }
}
