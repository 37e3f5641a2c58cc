//! Toy grounding model: pixel classifier, blob detector, box segmenter,
//! IoU matching, and the mask morphology used to build rectification masks.
//!
//! The classifier assigns a pixel to the nearest palette component when that
//! distance is below half the minimum inter-category separation, otherwise to
//! background. With the default palette and pixel noise this makes detection
//! an oracle on rendered scenes: feedback errors come from the sampler, never
//! from perception.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::toyworld::{color_distance, BBox, CategoryId, LatentGrid, LayoutObject, Palette, BACKGROUND};

/// Scores map mean classified-pixel distance onto [0,1] with this scale: a
/// blob whose pixels sit 0.2 away from their component scores zero.
const SCORE_DISTANCE_SCALE: f64 = 0.2;

/// Dense boolean grid aligned with a latent image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::validation("mask dimensions must be positive"));
        }
        Ok(BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
        })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut m = BinaryMask::zeros(h, w)?;
        for y in 0..h {
            for x in 0..w {
                m.bits[y * w + x] = f(y, x);
            }
        }
        Ok(m)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        assert!(y < self.h && x < self.w, "mask index out of range");
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        assert!(y < self.h && x < self.w, "mask index out of range");
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// Coordinates of set pixels in row-major order.
    pub fn iter_true(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.w;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// One detected blob: tight box, category, confidence, and its exact pixels.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BBox,
    pub label: CategoryId,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Outcome of greedy IoU matching. `tp` pairs (prediction index, ground-truth
/// index); `fp` and `fn_` hold the unmatched leftovers on each side.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl MatchResult {
    pub fn is_perfect(&self) -> bool {
        self.fp.is_empty() && self.fn_.is_empty()
    }
}

/// Intersection over union on the integer pixel grid.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Per-pixel classification: index of the nearest palette component's
/// category when within the acceptance radius, else background. Also returns
/// the distance to that nearest component for scoring.
fn classify(image: &LatentGrid, palette: &Palette) -> (Vec<CategoryId>, Vec<f64>) {
    let radius = 0.5 * palette.min_inter_category_distance();
    let n = image.h() * image.w();
    let mut classes = vec![BACKGROUND; n];
    let mut dists = vec![f64::INFINITY; n];
    for y in 0..image.h() {
        for x in 0..image.w() {
            let c = image.pixel(y, x);
            let mut best_cat = BACKGROUND;
            let mut best_d = f64::INFINITY;
            for (cat, _, comp) in palette.all_components() {
                let d = color_distance(&c, &comp.mean);
                if d < best_d {
                    best_d = d;
                    best_cat = cat;
                }
            }
            let i = y * image.w() + x;
            dists[i] = best_d;
            classes[i] = if best_d <= radius { best_cat } else { BACKGROUND };
        }
    }
    (classes, dists)
}

/// Classified category per pixel, row-major. Background where no component
/// is close enough.
pub(crate) fn classify_pixels(image: &LatentGrid, palette: &Palette) -> Vec<CategoryId> {
    classify(image, palette).0
}

/// Finds foreground blobs: 4-connected components of equal classified
/// category, kept when they span at least `min_area` pixels. Blobs are
/// reported in row-major order of their first pixel. `min_area` below the
/// box area floor is rejected, since a tight box around a smaller blob could
/// not be represented.
pub fn detect(image: &LatentGrid, palette: &Palette, min_area: usize) -> Result<Vec<Detection>> {
    if min_area < crate::toyworld::MIN_BOX_AREA {
        return Err(Error::validation(format!(
            "min_area {min_area} below the box area floor {}",
            crate::toyworld::MIN_BOX_AREA
        )));
    }
    let (h, w) = (image.h(), image.w());
    let (classes, dists) = classify(image, palette);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || classes[start] == BACKGROUND {
            continue;
        }
        let cat = classes[start];
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !seen[j] && classes[j] == cat {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut mask = BinaryMask::zeros(h, w)?;
        let mut dist_sum = 0.0;
        for &i in &pixels {
            let (y, x) = (i / w, i % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            mask.set(y, x, true);
            dist_sum += dists[i];
        }
        let score = (1.0 - dist_sum / pixels.len() as f64 / SCORE_DISTANCE_SCALE).clamp(0.0, 1.0);
        out.push(Detection {
            bbox: BBox::new(x0, y0, x1, y1)?,
            label: cat,
            score,
            mask,
        });
    }
    Ok(out)
}

/// Segments each box into the pixels inside it classified as the box's
/// label. Unlabeled boxes take the dominant non-background class inside;
/// when nothing inside classifies as foreground (or as the requested label)
/// the whole box is returned.
pub fn segment_regions(
    image: &LatentGrid,
    boxes: &[(BBox, Option<CategoryId>)],
    palette: &Palette,
) -> Result<Vec<BinaryMask>> {
    let (h, w) = (image.h(), image.w());
    for (b, _) in boxes {
        if b.x1() > w || b.y1() > h {
            return Err(Error::invalid(format!(
                "segment_regions: box ({},{},{},{}) exceeds the {w}x{h} frame",
                b.x0(),
                b.y0(),
                b.x1(),
                b.y1()
            )));
        }
    }
    let classes = classify_pixels(image, palette);
    let mut out = Vec::with_capacity(boxes.len());
    for (b, label) in boxes {
        let target = match label {
            Some(l) => Some(*l),
            None => {
                // Dominant non-background class inside the box; ties take the
                // smaller category id.
                let mut counts = std::collections::BTreeMap::new();
                for y in b.y0()..b.y1() {
                    for x in b.x0()..b.x1() {
                        let c = classes[y * w + x];
                        if c != BACKGROUND {
                            *counts.entry(c).or_insert(0usize) += 1;
                        }
                    }
                }
                counts.into_iter().max_by_key(|(c, n)| (*n, std::cmp::Reverse(*c))).map(|(c, _)| c)
            }
        };
        let mut mask = BinaryMask::zeros(h, w)?;
        let mut any = false;
        if let Some(t) = target {
            for y in b.y0()..b.y1() {
                for x in b.x0()..b.x1() {
                    if classes[y * w + x] == t {
                        mask.set(y, x, true);
                        any = true;
                    }
                }
            }
        }
        if !any {
            for y in b.y0()..b.y1() {
                for x in b.x0()..b.x1() {
                    mask.set(y, x, true);
                }
            }
        }
        out.push(mask);
    }
    Ok(out)
}

/// Greedy label-aware matching. Predictions are visited by descending score
/// (ties keep input order); each takes the unmatched ground truth with the
/// same label and the highest IoU at or above `tau` (IoU ties take the lower
/// ground-truth index). Leftover predictions are false positives, leftover
/// ground truths false negatives.
pub fn match_by_iou(preds: &[Detection], gts: &[LayoutObject], tau: f64) -> Result<MatchResult> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("match threshold {tau} outside (0,1]")));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| preds[*b].score.total_cmp(&preds[*a].score).then(a.cmp(b)));
    let mut gt_taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for pi in order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] || g.label != p.label {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= tau && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                result.tp.push((pi, gi));
            }
            None => result.fp.push(pi),
        }
    }
    result.fn_ = gt_taken
        .iter()
        .enumerate()
        .filter(|(_, t)| !**t)
        .map(|(gi, _)| gi)
        .collect();
    result.tp.sort_unstable();
    result.fp.sort_unstable();
    Ok(result)
}

/// Chebyshev distance from each pixel to the mask's set region, capped at
/// `radius` (pixels beyond it read usize::MAX). Computed by iterated
/// 8-neighborhood expansion, one ring per round.
fn chebyshev_distance_map(mask: &BinaryMask, radius: usize) -> Vec<usize> {
    let (h, w) = (mask.h(), mask.w());
    let mut dist = vec![usize::MAX; h * w];
    for (y, x) in mask.iter_true() {
        dist[y * w + x] = 0;
    }
    for d in 1..=radius {
        let prev = dist.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if prev[i] != usize::MAX {
                    continue;
                }
                let mut near = false;
                'scan: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                            && prev[ny as usize * w + nx as usize] < d
                        {
                            near = true;
                            break 'scan;
                        }
                    }
                }
                if near {
                    dist[i] = d;
                }
            }
        }
    }
    dist
}

/// Dilates every mask by a square kernel without letting the results touch:
/// a pixel claimed by several dilations goes to the mask whose original
/// region is nearest in Chebyshev distance, ties to the lower index. Inputs
/// must be pairwise disjoint; outputs are disjoint supersets of the inputs.
pub fn exclusive_dilate(masks: &[BinaryMask], kernel: usize) -> Result<Vec<BinaryMask>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::validation(format!("kernel {kernel} must be odd and positive")));
    }
    if masks.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (masks[0].h(), masks[0].w());
    for (i, m) in masks.iter().enumerate() {
        if !m.same_shape(&masks[0]) {
            return Err(Error::shape(
                "exclusive_dilate",
                format!("{h}x{w}"),
                format!("mask {i} is {}x{}", m.h(), m.w()),
            ));
        }
    }
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            if masks[i].iter_true().any(|(y, x)| masks[j].get(y, x)) {
                return Err(Error::invalid(format!("input masks {i} and {j} overlap")));
            }
        }
    }
    let radius = kernel / 2;
    if radius == 0 {
        return Ok(masks.to_vec());
    }
    let dists: Vec<Vec<usize>> = masks.iter().map(|m| chebyshev_distance_map(m, radius)).collect();
    let mut out: Vec<BinaryMask> = masks
        .iter()
        .map(|_| BinaryMask::zeros(h, w))
        .collect::<Result<_>>()?;
    for i in 0..h * w {
        let mut winner: Option<(usize, usize)> = None;
        for (mi, dm) in dists.iter().enumerate() {
            if dm[i] <= radius && winner.is_none_or(|(_, wd)| dm[i] < wd) {
                winner = Some((mi, dm[i]));
            }
        }
        if let Some((mi, _)) = winner {
            out[mi].bits[i] = true;
        }
    }
    Ok(out)
}

/// Pixelwise OR over masks of the stated shape; the empty list yields the
/// all-false mask.
pub fn mask_union(h: usize, w: usize, masks: &[BinaryMask]) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(h, w)?;
    for (i, m) in masks.iter().enumerate() {
        if m.h() != h || m.w() != w {
            return Err(Error::shape(
                "mask_union",
                format!("{h}x{w}"),
                format!("mask {i} is {}x{}", m.h(), m.w()),
            ));
        }
        for (o, b) in out.bits.iter_mut().zip(&m.bits) {
            *o |= *b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{
        default_palette, generate_layout, render_mean_field, sample_scene, Layout, LayoutGenConfig,
    };
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BBox, label: CategoryId, score: f64) -> Detection {
        Detection {
            mask: BinaryMask::zeros(b.y1().max(1), b.x1().max(1)).unwrap(),
            bbox: b,
            label,
            score,
        }
    }

    fn obj(b: BBox, label: CategoryId) -> LayoutObject {
        LayoutObject { bbox: b, label }
    }

    #[test]
    fn iou_matches_rasterized_count() {
        let a = bx(0, 0, 8, 8);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bx(20, 20, 28, 28);
        assert_eq!(iou(&a, &far), 0.0);
        // Quarter-shifted squares give exactly 1/7.
        let b = bx(4, 4, 12, 12);
        let got = iou(&a, &b);
        // Independent oracle: count cells on a raster.
        let (mut inter, mut uni) = (0, 0);
        for y in 0..16 {
            for x in 0..16 {
                let ina = a.contains(x, y);
                let inb = b.contains(x, y);
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    uni += 1;
                }
            }
        }
        assert_eq!((inter, uni), (16, 112));
        assert!((got - inter as f64 / uni as f64).abs() < 1e-15);
        assert!((got - 1.0 / 7.0).abs() < 1e-15);
        // Symmetry.
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn detector_is_exact_on_clean_renders() {
        let palette = default_palette();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LayoutGenConfig::default();
        for _ in 0..20 {
            let layout = generate_layout(&cfg, &palette, &mut rng).unwrap();
            let choice: Vec<usize> = vec![0; layout.objects().len() + 1];
            let image = render_mean_field(&layout, &palette, &choice).unwrap();
            let dets = detect(&image, &palette, 16).unwrap();
            assert_eq!(dets.len(), layout.objects().len());
            let m = match_by_iou(&dets, layout.objects(), 0.5).unwrap();
            assert!(m.is_perfect());
            for (pi, gi) in &m.tp {
                let d = &dets[*pi];
                let g = &layout.objects()[*gi];
                assert_eq!(d.bbox, g.bbox);
                assert_eq!(d.label, g.label);
                assert_eq!(d.score, 1.0);
                assert_eq!(d.mask.count(), g.bbox.area());
            }
        }
    }

    #[test]
    fn detector_is_exact_on_noisy_scenes() {
        let palette = default_palette();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LayoutGenConfig::default();
        for i in 0..20 {
            let layout = generate_layout(&cfg, &palette, &mut rng).unwrap();
            let scene = sample_scene(&layout, &palette, 1000 + i).unwrap();
            let dets = detect(&scene.image, &palette, 16).unwrap();
            let m = match_by_iou(&dets, layout.objects(), 0.5).unwrap();
            assert!(m.is_perfect(), "scene {i}: fp={:?} fn={:?}", m.fp, m.fn_);
        }
    }

    #[test]
    fn pure_noise_has_no_detections() {
        let palette = default_palette();
        for seed in 0..100 {
            let noise = crate::diffusion::draw_noise(32, 32, seed).unwrap();
            let dets = detect(&noise, &palette, 16).unwrap();
            assert!(dets.is_empty(), "seed {seed}: {} spurious blobs", dets.len());
        }
    }

    #[test]
    fn detect_rejects_sub_floor_min_area() {
        let palette = default_palette();
        let img = LatentGrid::zeros(8, 8).unwrap();
        assert!(detect(&img, &palette, 4).is_err());
    }

    #[test]
    fn segmenter_recovers_exact_and_partial_regions() {
        let palette = default_palette();
        let b = bx(2, 2, 8, 8);
        let layout = Layout::new(
            16,
            16,
            vec![obj(b, 1), obj(bx(10, 10, 14, 14), 2), obj(bx(10, 2, 14, 6), 3)],
            BTreeSet::from([1, 2, 3]),
            &palette,
        )
        .unwrap();
        let image = render_mean_field(&layout, &palette, &[0, 0, 0, 0]).unwrap();
        // Full GT box: mask = exact object pixels.
        let masks = segment_regions(&image, &[(b, Some(1))], &palette).unwrap();
        assert_eq!(masks[0].count(), b.area());
        for y in b.y0()..b.y1() {
            for x in b.x0()..b.x1() {
                assert!(masks[0].get(y, x));
            }
        }
        // Box half-covering the object: only the covered half is returned.
        let half = bx(2, 2, 5, 8);
        let masks = segment_regions(&image, &[(half, Some(1))], &palette).unwrap();
        assert_eq!(masks[0].count(), half.area());
        // Wrong label inside the box: fallback to the full box.
        let masks = segment_regions(&image, &[(b, Some(2))], &palette).unwrap();
        assert_eq!(masks[0].count(), b.area());
        // Unlabeled box picks the dominant class.
        let masks = segment_regions(&image, &[(bx(0, 0, 9, 9), None)], &palette).unwrap();
        assert_eq!(masks[0].count(), b.area());
        // Pure background box: fallback full box.
        let bg = bx(0, 10, 6, 16);
        let masks = segment_regions(&image, &[(bg, None)], &palette).unwrap();
        assert_eq!(masks[0].count(), bg.area());
        // Out-of-frame box is refused.
        assert!(segment_regions(&image, &[(bx(10, 10, 20, 20), Some(1))], &palette).is_err());
    }

    #[test]
    fn matching_handles_labels_scores_and_thresholds() {
        // Empty predictions: everything is a miss.
        let gts = vec![obj(bx(0, 0, 6, 6), 1), obj(bx(10, 10, 16, 16), 2)];
        let m = match_by_iou(&[], &gts, 0.5).unwrap();
        assert_eq!(m.fn_, vec![0, 1]);
        assert!(m.tp.is_empty() && m.fp.is_empty());

        // Perfect predictions match one-to-one.
        let preds = vec![det(bx(0, 0, 6, 6), 1, 1.0), det(bx(10, 10, 16, 16), 2, 1.0)];
        let m = match_by_iou(&preds, &gts, 0.5).unwrap();
        assert_eq!(m.tp, vec![(0, 0), (1, 1)]);
        assert!(m.is_perfect());

        // Wrong label at the right place: fp plus fn.
        let preds = vec![det(bx(0, 0, 6, 6), 1, 0.9), det(bx(10, 10, 16, 16), 1, 0.8)];
        let m = match_by_iou(&preds, &gts, 0.5).unwrap();
        assert_eq!(m.tp, vec![(0, 0)]);
        assert_eq!(m.fp, vec![1]);
        assert_eq!(m.fn_, vec![1]);

        // Below-threshold overlap does not match.
        let preds = vec![det(bx(3, 0, 9, 6), 1, 1.0)]; // IoU = 18/54 = 1/3
        let m = match_by_iou(&preds, &gts, 0.5).unwrap();
        assert_eq!(m.fp, vec![0]);
        assert!(match_by_iou(&preds, &gts, 0.0).is_err());
    }

    /// Exhaustive assignment search: maximum number of valid (label-equal,
    /// IoU >= tau) pairs over all injective pred -> gt maps.
    fn brute_force_tp(preds: &[Detection], gts: &[LayoutObject], tau: f64) -> usize {
        fn go(pi: usize, preds: &[Detection], gts: &[LayoutObject], taken: &mut [bool], tau: f64) -> usize {
            if pi == preds.len() {
                return 0;
            }
            // Skip this prediction.
            let mut best = go(pi + 1, preds, gts, taken, tau);
            for gi in 0..gts.len() {
                if !taken[gi]
                    && gts[gi].label == preds[pi].label
                    && iou(&preds[pi].bbox, &gts[gi].bbox) >= tau
                {
                    taken[gi] = true;
                    best = best.max(1 + go(pi + 1, preds, gts, taken, tau));
                    taken[gi] = false;
                }
            }
            best
        }
        go(0, preds, gts, &mut vec![false; gts.len()], tau)
    }

    #[test]
    fn greedy_matching_is_optimal_on_separated_scenes() {
        // Random small instances with generator-style separated GTs: greedy
        // must reach the brute-force optimum.
        let palette = default_palette();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LayoutGenConfig {
            width: 48,
            height: 48,
            max_objects: 4,
            ..LayoutGenConfig::default()
        };
        for _ in 0..50 {
            let layout = generate_layout(&cfg, &palette, &mut rng).unwrap();
            let gts = layout.objects();
            // Predictions: jittered copies of a random subset plus one stray.
            let mut preds = Vec::new();
            for g in gts {
                if rng.random::<f64>() < 0.8 {
                    let dx = rng.random_range(0..3usize);
                    let b = bx(
                        g.bbox.x0() + dx,
                        g.bbox.y0(),
                        (g.bbox.x1() + dx).min(48),
                        g.bbox.y1(),
                    );
                    let label = if rng.random::<f64>() < 0.9 { g.label } else { 1 };
                    preds.push(det(b, label, rng.random::<f64>()));
                }
            }
            preds.push(det(bx(40, 40, 46, 46), 3, 0.5));
            let m = match_by_iou(&preds, gts, 0.5).unwrap();
            assert_eq!(m.tp.len(), brute_force_tp(&preds, gts, 0.5));
            assert_eq!(m.tp.len() + m.fp.len(), preds.len());
            assert_eq!(m.tp.len() + m.fn_.len(), gts.len());
        }
    }

    #[test]
    fn dilation_grows_clips_and_splits() {
        // Single pixel, kernel 7: full 7x7 block.
        let mut m = BinaryMask::zeros(16, 16).unwrap();
        m.set(8, 8, true);
        let out = exclusive_dilate(&[m.clone()], 7).unwrap();
        assert_eq!(out[0].count(), 49);
        assert!(out[0].get(5, 5) && out[0].get(11, 11) && !out[0].get(4, 8));

        // Clipped at the corner.
        let mut c = BinaryMask::zeros(16, 16).unwrap();
        c.set(0, 0, true);
        let out = exclusive_dilate(&[c], 7).unwrap();
        assert_eq!(out[0].count(), 16);

        // Kernel 1 is the identity.
        let out = exclusive_dilate(&[m.clone()], 1).unwrap();
        assert_eq!(out[0], m);

        // Even or zero kernels are refused.
        assert!(exclusive_dilate(&[m.clone()], 4).is_err());
        assert!(exclusive_dilate(&[m.clone()], 0).is_err());

        // Overlapping inputs are refused.
        assert!(exclusive_dilate(&[m.clone(), m.clone()], 3).is_err());
    }

    #[test]
    fn contested_pixels_go_to_the_nearest_region() {
        // Two single-pixel regions 4 apart, kernel 7: dilations overlap on
        // the mid band; every contested pixel must go to the closer seed,
        // ties to the first mask.
        let mut a = BinaryMask::zeros(16, 16).unwrap();
        a.set(8, 5, true);
        let mut b = BinaryMask::zeros(16, 16).unwrap();
        b.set(8, 9, true);
        let out = exclusive_dilate(&[a.clone(), b.clone()], 7).unwrap();
        // Brute force over the full grid.
        for y in 0..16 {
            for x in 0..16 {
                let da = (y as isize - 8).abs().max((x as isize - 5).abs()) as usize;
                let db = (y as isize - 8).abs().max((x as isize - 9).abs()) as usize;
                let expect_a = da <= 3 && (da < db || (da == db));
                let expect_b = db <= 3 && db < da;
                assert_eq!(out[0].get(y, x), expect_a, "({y},{x})");
                assert_eq!(out[1].get(y, x), expect_b, "({y},{x})");
            }
        }
        assert!(out[0].iter_true().all(|(y, x)| !out[1].get(y, x)));
    }

    #[test]
    fn dilation_outputs_partition_the_dilated_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kernel in [1usize, 3, 5, 7] {
            for _ in 0..10 {
                // Three random disjoint sprinkles.
                let mut masks = vec![
                    BinaryMask::zeros(24, 24).unwrap(),
                    BinaryMask::zeros(24, 24).unwrap(),
                    BinaryMask::zeros(24, 24).unwrap(),
                ];
                for _ in 0..30 {
                    let y = rng.random_range(0..24usize);
                    let x = rng.random_range(0..24usize);
                    let who = rng.random_range(0..3usize);
                    if !masks.iter().any(|m| m.get(y, x)) {
                        masks[who].set(y, x, true);
                    }
                }
                let out = exclusive_dilate(&masks, kernel).unwrap();
                let r = kernel / 2;
                for i in 0..3 {
                    // Superset of the input.
                    assert!(masks[i].iter_true().all(|(y, x)| out[i].get(y, x)));
                    // Pairwise disjoint.
                    for j in i + 1..3 {
                        assert!(out[i].iter_true().all(|(y, x)| !out[j].get(y, x)));
                    }
                }
                // Coverage: output union equals the union of plain dilations.
                let dil: Vec<Vec<usize>> =
                    masks.iter().map(|m| chebyshev_distance_map(m, r)).collect();
                for y in 0..24 {
                    for x in 0..24 {
                        let within = dil.iter().any(|dm| dm[y * 24 + x] <= r);
                        let claimed = out.iter().any(|m| m.get(y, x));
                        assert_eq!(within, claimed, "({y},{x}) kernel {kernel}");
                    }
                }
            }
        }
    }

    #[test]
    fn union_counts_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = BinaryMask::from_fn(10, 10, |_, _| rng.random::<f64>() < 0.3).unwrap();
        let b = BinaryMask::from_fn(10, 10, |_, _| rng.random::<f64>() < 0.3).unwrap();
        let u = mask_union(10, 10, &[a.clone(), b.clone()]).unwrap();
        let inter = a
            .iter_true()
            .filter(|(y, x)| b.get(*y, *x))
            .count();
        assert_eq!(u.count(), a.count() + b.count() - inter);

        // Identity and complement cases.
        let empty = BinaryMask::zeros(10, 10).unwrap();
        assert_eq!(mask_union(10, 10, &[a.clone(), empty]).unwrap(), a);
        let not_a = BinaryMask::from_fn(10, 10, |y, x| !a.get(y, x)).unwrap();
        assert_eq!(mask_union(10, 10, &[a.clone(), not_a]).unwrap().count(), 100);
        assert!(mask_union(10, 10, &[]).unwrap().is_empty());
        let small = BinaryMask::zeros(5, 5).unwrap();
        assert!(mask_union(10, 10, &[small]).is_err());
    }
}
