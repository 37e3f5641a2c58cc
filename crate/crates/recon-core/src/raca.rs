//! Text-side conditioning: category embeddings, scaled cross-attention, and
//! the per-region component priors fed to the denoiser.
//!
//! Categories get near-orthogonal unit embeddings; each palette component
//! gets a key equal to its category embedding plus an isometrically lifted,
//! gain-scaled copy of its mean color, so keys separate by category first and
//! by color within a category. Region queries are lifted latent pixels. The
//! three attention variants differ only in which keys a region may see:
//! region-aligned attention restricts object regions to their own category's
//! component keys, global attention exposes every caption category to every
//! region, and masked attention exposes the global key set through one round
//! of key self-attention before masking foreign logits, which is exactly why
//! masking alone fails to isolate regions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{allowed_support, region_partition, Conditioning, ConditioningMode};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::toyworld::{make_control_map, CategoryId, ControlMap, LatentGrid, Layout, Palette, BACKGROUND};

/// Maximum |cosine| allowed between distinct category embeddings.
const MAX_PAIRWISE_COSINE: f64 = 0.3;
/// Rejection-sampling budget per category.
const MAX_DRAWS: usize = 1000;
/// Scale on the lifted component color inside a component key. Large enough
/// that keys of same-category components order by color similarity ahead of
/// the shared category direction.
const COLOR_GAIN: f64 = 4.0;
/// Default embedding width.
pub const DEFAULT_EMBED_DIM: usize = 16;

const CAPTION_STREAM: u64 = u64::MAX - 1;
const LIFT_STREAM: u64 = u64::MAX - 2;

/// One category's text embedding.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub category: CategoryId,
    pub vector: Vec<f64>,
}

/// Per-pixel query tokens for one region.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub locations: Vec<(usize, usize)>,
    pub features: Vec<Vec<f64>>,
}

/// Everything text-side for one palette: category embeddings (unit norm,
/// pairwise |cos| bounded), an unconstrained caption embedding, the fixed
/// color lift, and the derived component keys in `all_components` order.
#[derive(Debug, Clone)]
pub struct TextEmbeddingSet {
    d: usize,
    embeddings: Vec<TextEmbedding>,
    caption: Vec<f64>,
    lift: [Vec<f64>; 3],
    component_keys: Vec<Vec<f64>>,
    component_categories: Vec<CategoryId>,
}

fn draw_unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rejection-draws one unit vector with |cos| at most the bound against all
/// `fixed` vectors.
fn draw_separated(rng: &mut ChaCha8Rng, d: usize, fixed: &[&[f64]]) -> Result<Vec<f64>> {
    for _ in 0..MAX_DRAWS {
        let v = draw_unit_vector(rng, d);
        if fixed.iter().all(|f| dot(&v, f).abs() <= MAX_PAIRWISE_COSINE) {
            return Ok(v);
        }
    }
    Err(Error::Construction(format!(
        "no unit vector with pairwise |cos| <= {MAX_PAIRWISE_COSINE} against {} fixed vectors in {MAX_DRAWS} draws (d = {d})",
        fixed.len()
    )))
}

/// Builds the embedding set for a palette. Each category draws from its own
/// seed-derived stream until the pairwise-cosine invariant holds against all
/// earlier categories; the caption embedding is unconstrained; the color
/// lift is a seeded orthonormal 3-frame, so lifted colors keep their
/// Euclidean geometry.
pub fn build_embeddings(palette: &Palette, d: usize, seed: u64) -> Result<TextEmbeddingSet> {
    let n_cats = palette.categories().len();
    if d < n_cats + 1 {
        return Err(Error::Construction(format!(
            "embedding width {d} below {} (categories + 1); near-orthogonality is unreachable",
            n_cats + 1
        )));
    }
    let mut embeddings: Vec<TextEmbedding> = Vec::with_capacity(n_cats);
    for spec in palette.categories() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, spec.id() as u64));
        let fixed: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
        let vector = draw_separated(&mut rng, d, &fixed)?;
        embeddings.push(TextEmbedding {
            category: spec.id(),
            vector,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, CAPTION_STREAM));
    let caption = draw_unit_vector(&mut rng, d);
    let lift = build_lift(d, seed);
    let mut set = TextEmbeddingSet {
        d,
        embeddings,
        caption,
        lift,
        component_keys: Vec::new(),
        component_categories: Vec::new(),
    };
    set.rebuild_keys(palette);
    Ok(set)
}

fn build_lift(d: usize, seed: u64) -> [Vec<f64>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, LIFT_STREAM));
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(3);
    while frame.len() < 3 {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for f in &frame {
            let c = dot(&v, f);
            for (vi, fi) in v.iter_mut().zip(f) {
                *vi -= c * fi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in &mut v {
                *vi /= norm;
            }
            frame.push(v);
        }
    }
    [frame[0].clone(), frame[1].clone(), frame[2].clone()]
}

impl TextEmbeddingSet {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn embeddings(&self) -> &[TextEmbedding] {
        &self.embeddings
    }

    pub fn category_embedding(&self, category: CategoryId) -> Option<&[f64]> {
        self.embeddings
            .iter()
            .find(|e| e.category == category)
            .map(|e| e.vector.as_slice())
    }

    pub fn caption_embedding(&self) -> &[f64] {
        &self.caption
    }

    /// Component keys in `Palette::all_components` order.
    pub fn component_keys(&self) -> &[Vec<f64>] {
        &self.component_keys
    }

    /// Category of each component key, parallel to [`component_keys`].
    pub fn component_categories(&self) -> &[CategoryId] {
        &self.component_categories
    }

    /// Isometric lift of a color into embedding space.
    pub fn lift_color(&self, c: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (ch, axis) in self.lift.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += c[ch] * a;
            }
        }
        out
    }

    fn rebuild_keys(&mut self, palette: &Palette) {
        self.component_keys.clear();
        self.component_categories.clear();
        for (cat, _, comp) in palette.all_components() {
            let e = self
                .category_embedding(cat)
                .expect("embeddings built from this palette cover every category");
            let lifted = self.lift_color(&comp.mean);
            let key: Vec<f64> = e
                .iter()
                .zip(&lifted)
                .map(|(ei, li)| ei + COLOR_GAIN * li)
                .collect();
            self.component_keys.push(key);
            self.component_categories.push(cat);
        }
    }

    /// Re-draws a single category's embedding from a fresh stream, keeping
    /// every other embedding bit-identical, and rebuilds that category's
    /// component keys. The pairwise-cosine invariant is re-enforced against
    /// the untouched embeddings.
    pub fn reseed_category(&self, palette: &Palette, category: CategoryId, seed: u64) -> Result<Self> {
        if self.category_embedding(category).is_none() {
            return Err(Error::invalid(format!("unknown category {category}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, category as u64));
        let fixed: Vec<&[f64]> = self
            .embeddings
            .iter()
            .filter(|e| e.category != category)
            .map(|e| e.vector.as_slice())
            .collect();
        let vector = draw_separated(&mut rng, self.d, &fixed)?;
        let mut out = self.clone();
        for e in &mut out.embeddings {
            if e.category == category {
                e.vector = vector.clone();
            }
        }
        out.rebuild_keys(palette);
        Ok(out)
    }
}

/// Scaled dot-product attention: row-wise softmax(q kT / sqrt(d_k)) v,
/// stabilized by row-max subtraction.
pub fn cross_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if k.is_empty() {
        return Err(Error::invalid("cross_attention: no keys"));
    }
    if k.len() != v.len() {
        return Err(Error::shape("cross_attention", format!("{} values", k.len()), format!("{}", v.len())));
    }
    let dk = k[0].len();
    if dk == 0 || k.iter().any(|r| r.len() != dk) {
        return Err(Error::invalid("cross_attention: ragged or empty key rows"));
    }
    let dv = v[0].len();
    if v.iter().any(|r| r.len() != dv) {
        return Err(Error::invalid("cross_attention: ragged value rows"));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Vec::with_capacity(q.len());
    for row in q {
        if row.len() != dk {
            return Err(Error::shape("cross_attention", format!("query width {dk}"), format!("{}", row.len())));
        }
        let logits: Vec<f64> = k.iter().map(|kr| dot(row, kr) * scale).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut o = vec![0.0; dv];
        for (e, vr) in exps.iter().zip(v) {
            let w = e / sum;
            for (oi, vi) in o.iter_mut().zip(vr) {
                *oi += w * vi;
            }
        }
        out.push(o);
    }
    Ok(out)
}

/// Lifted query tokens for a set of pixels.
fn region_tokens(z_t: &LatentGrid, region: &[usize], set: &TextEmbeddingSet) -> TokenGrid {
    let w = z_t.w();
    let mut locations = Vec::with_capacity(region.len());
    let mut features = Vec::with_capacity(region.len());
    for &i in region {
        let (y, x) = (i / w, i % w);
        locations.push((y, x));
        features.push(set.lift_color(&z_t.pixel(y, x)));
    }
    TokenGrid { locations, features }
}

fn mean_rows(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    if rows.is_empty() {
        return out;
    }
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

/// Keys a region sees, by mode. Object regions: own category's component
/// keys (region-aligned) or all caption categories' component keys (global).
/// The background region always sees the caption embedding plus the
/// background component keys.
fn region_keys(
    set: &TextEmbeddingSet,
    layout: &Layout,
    region: usize,
    global: bool,
) -> Result<Vec<Vec<f64>>> {
    if region == 0 {
        let mut keys = vec![set.caption_embedding().to_vec()];
        for (k, cat) in set.component_categories().iter().enumerate() {
            if *cat == BACKGROUND {
                keys.push(set.component_keys()[k].clone());
            }
        }
        return Ok(keys);
    }
    let label = layout.objects()[region - 1].label;
    if set.category_embedding(label).is_none() {
        return Err(Error::invalid(format!("region {region}: no embedding for category {label}")));
    }
    let keys: Vec<Vec<f64>> = set
        .component_categories()
        .iter()
        .enumerate()
        .filter(|(_, cat)| {
            if global {
                layout.caption().contains(cat)
            } else {
                **cat == label
            }
        })
        .map(|(k, _)| set.component_keys()[k].clone())
        .collect();
    if keys.is_empty() {
        return Err(Error::invalid(format!("region {region}: empty key set")));
    }
    Ok(keys)
}

fn attention_summaries_impl(
    z_t: &LatentGrid,
    layout: &Layout,
    set: &TextEmbeddingSet,
    t: usize,
    schedule: &NoiseSchedule,
    global: bool,
) -> Result<Vec<Vec<f64>>> {
    schedule.alpha_bar(t)?;
    if z_t.h() != layout.height() || z_t.w() != layout.width() {
        return Err(Error::shape(
            "attention",
            format!("{}x{}", layout.height(), layout.width()),
            format!("{}x{}", z_t.h(), z_t.w()),
        ));
    }
    let partition = region_partition(layout);
    let mut out = Vec::with_capacity(partition.len());
    for (r, region) in partition.iter().enumerate() {
        if region.is_empty() {
            // A fully occluded object contributes no tokens; downstream this
            // zero summary turns into a uniform prior over its support.
            out.push(vec![0.0; set.d()]);
            continue;
        }
        let keys = region_keys(set, layout, r, global)?;
        let tokens = region_tokens(z_t, region, set);
        let attended = cross_attention(&tokens.features, &keys, &keys)?;
        out.push(mean_rows(&attended, set.d()));
    }
    Ok(out)
}

/// Region-aligned attention: every object region attends only to its own
/// category's component keys; the background attends to the caption
/// embedding plus background component keys. Returns one mean attended
/// vector per region, regions ordered as in [`region_partition`].
pub fn region_aligned_attention(
    z_t: &LatentGrid,
    layout: &Layout,
    set: &TextEmbeddingSet,
    _palette: &Palette,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    attention_summaries_impl(z_t, layout, set, t, schedule, false)
}

/// Global attention: object regions attend to the union of all caption
/// categories' component keys, so early noisy queries pull in foreign
/// content. Background handling matches [`region_aligned_attention`].
pub fn global_attention(
    z_t: &LatentGrid,
    layout: &Layout,
    set: &TextEmbeddingSet,
    _palette: &Palette,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    attention_summaries_impl(z_t, layout, set, t, schedule, true)
}

/// Masked attention: the global key set first passes through one round of
/// self-attention over the category embeddings (entangling every category
/// into every key), then foreign logits are forced to -inf per region. The
/// masked softmax only sees own-category keys, but their values already
/// carry foreign embeddings, so the output still depends on them.
pub fn masked_attention(
    z_t: &LatentGrid,
    layout: &Layout,
    set: &TextEmbeddingSet,
    palette: &Palette,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    schedule.alpha_bar(t)?;
    if z_t.h() != layout.height() || z_t.w() != layout.width() {
        return Err(Error::shape(
            "attention",
            format!("{}x{}", layout.height(), layout.width()),
            format!("{}x{}", z_t.h(), z_t.w()),
        ));
    }
    // Entangle the category embeddings with one self-attention round, then
    // rebuild component keys from the entangled embeddings.
    let e: Vec<Vec<f64>> = set.embeddings().iter().map(|te| te.vector.clone()).collect();
    let entangled = cross_attention(&e, &e, &e)?;
    let mut tangled_set = set.clone();
    for (te, v) in tangled_set.embeddings.iter_mut().zip(entangled) {
        te.vector = v;
    }
    tangled_set.rebuild_keys(palette);

    let partition = region_partition(layout);
    let mut out = Vec::with_capacity(partition.len());
    for (r, region) in partition.iter().enumerate() {
        if region.is_empty() {
            out.push(vec![0.0; set.d()]);
            continue;
        }
        // Global key set for the region, plus a parallel mask of which keys
        // are native to it.
        let (keys, native): (Vec<Vec<f64>>, Vec<bool>) = if r == 0 {
            let mut keys = vec![tangled_set.caption_embedding().to_vec()];
            let mut native = vec![true];
            for (k, cat) in tangled_set.component_categories().iter().enumerate() {
                if *cat == BACKGROUND || layout.caption().contains(cat) {
                    keys.push(tangled_set.component_keys()[k].clone());
                    native.push(*cat == BACKGROUND);
                }
            }
            (keys, native)
        } else {
            let label = layout.objects()[r - 1].label;
            let mut keys = Vec::new();
            let mut native = Vec::new();
            for (k, cat) in tangled_set.component_categories().iter().enumerate() {
                if layout.caption().contains(cat) {
                    keys.push(tangled_set.component_keys()[k].clone());
                    native.push(*cat == label);
                }
            }
            (keys, native)
        };
        let tokens = region_tokens(z_t, region, &tangled_set);
        let scale = 1.0 / (set.d() as f64).sqrt();
        let mut rows = Vec::with_capacity(tokens.features.len());
        for q in &tokens.features {
            let logits: Vec<f64> = keys
                .iter()
                .zip(&native)
                .map(|(kr, nat)| if *nat { dot(q, kr) * scale } else { f64::NEG_INFINITY })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut o = vec![0.0; set.d()];
            for (e, vr) in exps.iter().zip(&keys) {
                if *e > 0.0 {
                    let w = e / sum;
                    for (oi, vi) in o.iter_mut().zip(vr) {
                        *oi += w * vi;
                    }
                }
            }
            rows.push(o);
        }
        out.push(mean_rows(&rows, set.d()));
    }
    Ok(out)
}

/// Turns per-region attention summaries into full conditioning: each
/// region's prior is the softmax of (summary . key / sqrt(d)) over the
/// mode's allowed component support, and the layout perimeter map carries
/// the control signal.
pub fn conditioning_from_attention(
    summaries: &[Vec<f64>],
    mode: ConditioningMode,
    layout: &Layout,
    set: &TextEmbeddingSet,
    palette: &Palette,
    gamma: f64,
    control_map: ControlMap,
) -> Result<Conditioning> {
    let n_regions = layout.objects().len() + 1;
    if summaries.len() != n_regions {
        return Err(Error::validation(format!(
            "expected {n_regions} summaries, got {}",
            summaries.len()
        )));
    }
    let n_comp = set.component_keys().len();
    let scale = 1.0 / (set.d() as f64).sqrt();
    let mut priors = Vec::with_capacity(n_regions);
    for (r, summary) in summaries.iter().enumerate() {
        if summary.len() != set.d() {
            return Err(Error::shape(
                "conditioning_from_attention",
                format!("summary width {}", set.d()),
                format!("{}", summary.len()),
            ));
        }
        let support = allowed_support(palette, layout, mode, r);
        let logits: Vec<f64> = support
            .iter()
            .map(|k| dot(summary, &set.component_keys()[*k]) * scale)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut prior = vec![0.0; n_comp];
        for (k, e) in support.iter().zip(&exps) {
            prior[*k] = e / sum;
        }
        priors.push(prior);
    }
    Conditioning::new(layout.clone(), mode, priors, control_map, gamma, palette)
}

/// Mode-dispatched summaries.
pub fn attention_summaries(
    z_t: &LatentGrid,
    layout: &Layout,
    set: &TextEmbeddingSet,
    palette: &Palette,
    t: usize,
    schedule: &NoiseSchedule,
    mode: ConditioningMode,
) -> Result<Vec<Vec<f64>>> {
    match mode {
        ConditioningMode::Raca => region_aligned_attention(z_t, layout, set, palette, t, schedule),
        ConditioningMode::Global => global_attention(z_t, layout, set, palette, t, schedule),
        ConditioningMode::Masked => masked_attention(z_t, layout, set, palette, t, schedule),
    }
}

/// One-call conditioning: summaries from the latent at `t`, priors over the
/// mode's support, perimeter control map.
pub fn build_conditioning(
    z_t: &LatentGrid,
    layout: &Layout,
    set: &TextEmbeddingSet,
    palette: &Palette,
    t: usize,
    schedule: &NoiseSchedule,
    mode: ConditioningMode,
    gamma: f64,
) -> Result<Conditioning> {
    let summaries = attention_summaries(z_t, layout, set, palette, t, schedule, mode)?;
    conditioning_from_attention(
        &summaries,
        mode,
        layout,
        set,
        palette,
        gamma,
        make_control_map(layout),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::draw_noise;
    use crate::toyworld::{default_palette, BBox, CategorySpec, ColorComponent, LayoutObject};
    use std::collections::BTreeSet;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn obj(b: BBox, label: CategoryId) -> LayoutObject {
        LayoutObject { bbox: b, label }
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
                obj(bx(2, 2, 9, 9), 1),
                obj(bx(12, 2, 19, 9), 2),
                obj(bx(2, 12, 9, 19), 1),
            ],
            BTreeSet::from([1, 2]),
            palette,
        )
        .unwrap()
    }

    fn single_category_layout(palette: &Palette) -> Layout {
        Layout::new(
            24,
            24,
            vec![
                obj(bx(2, 2, 9, 9), 1),
                obj(bx(12, 2, 19, 9), 1),
                obj(bx(2, 12, 9, 19), 1),
            ],
            BTreeSet::from([1]),
            palette,
        )
        .unwrap()
    }

    #[test]
    fn embeddings_are_deterministic_and_separated() {
        let palette = default_palette();
        let a = build_embeddings(&palette, 16, 42).unwrap();
        let b = build_embeddings(&palette, 16, 42).unwrap();
        assert_eq!(a.embeddings().len(), 5);
        for (ea, eb) in a.embeddings().iter().zip(b.embeddings()) {
            assert_eq!(ea.vector, eb.vector);
        }
        assert_eq!(a.caption_embedding(), b.caption_embedding());
        // All 10 pairwise cosines bounded; unit norms.
        for i in 0..5 {
            let vi = &a.embeddings()[i].vector;
            assert!((dot(vi, vi) - 1.0).abs() < 1e-12);
            for j in i + 1..5 {
                let c = dot(vi, &a.embeddings()[j].vector);
                assert!(c.abs() <= MAX_PAIRWISE_COSINE, "cos({i},{j}) = {c}");
            }
        }
        // Different seed, different embeddings.
        let c = build_embeddings(&palette, 16, 43).unwrap();
        assert_ne!(a.embeddings()[0].vector, c.embeddings()[0].vector);
        // The lift is an isometry.
        let u = a.lift_color(&[0.3, -0.2, 0.9]);
        let norm2: f64 = dot(&u, &u);
        assert!((norm2 - (0.09 + 0.04 + 0.81)).abs() < 1e-12);
    }

    #[test]
    fn narrow_embedding_width_fails_construction() {
        let palette = default_palette();
        let err = build_embeddings(&palette, 2, 1).unwrap_err();
        assert!(matches!(err, Error::Construction(_)), "{err}");
        assert!(build_embeddings(&palette, 5, 1).is_err());
        assert!(build_embeddings(&palette, 6, 1).is_ok());
    }

    #[test]
    fn attention_matches_hand_softmax() {
        // Singleton key: output equals the value row for any query.
        let out = cross_attention(&[vec![3.0]], &[vec![0.5]], &[vec![7.0, -1.0]]).unwrap();
        assert_eq!(out, vec![vec![7.0, -1.0]]);
        // Identical keys: uniform weights, column mean of V.
        let out = cross_attention(
            &[vec![1.0, 2.0]],
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]],
            &[vec![3.0], vec![6.0], vec![0.0]],
        )
        .unwrap();
        assert!((out[0][0] - 3.0).abs() < 1e-12);
        // Frozen two-key example: softmax(+-2) over values (1, 0).
        let out = cross_attention(&[vec![2.0]], &[vec![1.0], vec![-1.0]], &[vec![1.0], vec![0.0]]).unwrap();
        assert!((out[0][0] - 0.9820137900379085).abs() < 1e-12);
        // Weights sum to one: with identity values the row is a distribution.
        let out = cross_attention(
            &[vec![0.3, -0.7]],
            &[vec![1.0, 0.2], vec![-0.4, 0.9]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        assert!((out[0][0] + out[0][1] - 1.0).abs() < 1e-12);
        assert!(out[0].iter().all(|w| *w > 0.0));
        // No keys is an error; ragged inputs are errors.
        assert!(cross_attention(&[vec![1.0]], &[], &[]).is_err());
        assert!(cross_attention(&[vec![1.0]], &[vec![1.0]], &[]).is_err());
        assert!(cross_attention(&[vec![1.0, 2.0]], &[vec![1.0]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn region_attention_reduces_to_plain_attention() {
        let palette = plain_palette();
        let layout = single_category_layout(&palette);
        let set = build_embeddings(&palette, 16, 7).unwrap();
        let s = NoiseSchedule::default_linear();
        let z = draw_noise(24, 24, 3).unwrap();
        let got = region_aligned_attention(&z, &layout, &set, &palette, 500, &s).unwrap();

        // Oracle for region 1: direct cross-attention over its pixels with
        // its category's keys.
        let partition = region_partition(&layout);
        let keys = region_keys(&set, &layout, 1, false).unwrap();
        let tokens = region_tokens(&z, &partition[1], &set);
        let attended = cross_attention(&tokens.features, &keys, &keys).unwrap();
        let mean = mean_rows(&attended, 16);
        assert_eq!(got[1], mean);

        // Single-category caption: global and region-aligned agree bit-exactly.
        let glob = global_attention(&z, &layout, &set, &palette, 500, &s).unwrap();
        assert_eq!(got, glob);
    }

    #[test]
    fn foreign_embeddings_cannot_touch_aligned_regions() {
        let palette = plain_palette();
        let layout = two_category_layout(&palette);
        let set = build_embeddings(&palette, 16, 11).unwrap();
        let reseeded = set.reseed_category(&palette, 2, 999).unwrap();
        assert_ne!(
            set.category_embedding(2).unwrap(),
            reseeded.category_embedding(2).unwrap()
        );
        assert_eq!(
            set.category_embedding(1).unwrap(),
            reseeded.category_embedding(1).unwrap()
        );
        let s = NoiseSchedule::default_linear();
        let z = draw_noise(24, 24, 5).unwrap();
        let a = region_aligned_attention(&z, &layout, &set, &palette, 750, &s).unwrap();
        let b = region_aligned_attention(&z, &layout, &reseeded, &palette, 750, &s).unwrap();
        // Regions 1 and 3 are category 1: bit-identical summaries. Region 2
        // is category 2: must change. The background ignores both.
        assert_eq!(a[1], b[1]);
        assert_eq!(a[3], b[3]);
        assert_eq!(a[0], b[0]);
        assert_ne!(a[2], b[2]);

        // Global attention leaks into category-1 regions.
        let ga = global_attention(&z, &layout, &set, &palette, 750, &s).unwrap();
        let gb = global_attention(&z, &layout, &reseeded, &palette, 750, &s).unwrap();
        assert_ne!(ga[1], gb[1]);

        // Masked attention leaks too: the entangling round carries category
        // 2 into category 1 keys before the mask applies.
        let ma = masked_attention(&z, &layout, &set, &palette, 750, &s).unwrap();
        let mb = masked_attention(&z, &layout, &reseeded, &palette, 750, &s).unwrap();
        assert_ne!(ma[1], mb[1]);
    }

    /// Least-squares residual of `s` against the span of `basis`.
    fn span_residual(s: &[f64], basis: &[Vec<f64>]) -> f64 {
        let k = basis.len();
        let mut gram = nalgebra::DMatrix::zeros(k, k);
        let mut rhs = nalgebra::DVector::zeros(k);
        for i in 0..k {
            for j in 0..k {
                gram[(i, j)] = dot(&basis[i], &basis[j]);
            }
            rhs[i] = dot(&basis[i], s);
        }
        let coef = gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .expect("least squares");
        let mut res = s.to_vec();
        for (i, b) in basis.iter().enumerate() {
            for (r, x) in res.iter_mut().zip(b) {
                *r -= coef[i] * x;
            }
        }
        dot(&res, &res).sqrt()
    }

    #[test]
    fn summaries_live_in_their_value_span() {
        let palette = default_palette();
        let layout = Layout::new(
            24,
            24,
            vec![obj(bx(2, 2, 10, 10), 1), obj(bx(12, 12, 20, 20), 2), obj(bx(12, 2, 20, 10), 3)],
            BTreeSet::from([1, 2, 3]),
            &palette,
        )
        .unwrap();
        let set = build_embeddings(&palette, 16, 21).unwrap();
        let s = NoiseSchedule::default_linear();
        let z = draw_noise(24, 24, 17).unwrap();
        let sums = region_aligned_attention(&z, &layout, &set, &palette, 500, &s).unwrap();
        for r in 0..4 {
            let keys = region_keys(&set, &layout, r, false).unwrap();
            let res = span_residual(&sums[r], &keys);
            assert!(res < 1e-12, "region {r}: residual {res}");
        }
    }

    #[test]
    fn global_summaries_leave_the_own_span_at_high_noise() {
        // Early queries are noise, so a red region's global summary picks up
        // weight on the blue key; its residual against the red-only span is
        // macroscopic in every draw.
        let palette = plain_palette();
        let layout = two_category_layout(&palette);
        let set = build_embeddings(&palette, 16, 31).unwrap();
        let s = NoiseSchedule::default_linear();
        for seed in 0..100 {
            let z = draw_noise(24, 24, seed).unwrap();
            let sums = global_attention(&z, &layout, &set, &palette, 899, &s).unwrap();
            let own = region_keys(&set, &layout, 1, false).unwrap();
            let res = span_residual(&sums[1], &own);
            assert!(res > 0.01, "seed {seed}: residual {res}");
        }
    }

    #[test]
    fn priors_follow_summaries() {
        let palette = plain_palette();
        let layout = two_category_layout(&palette);
        let set = build_embeddings(&palette, 16, 3).unwrap();
        let control = make_control_map(&layout);
        let n_regions = 4;

        // Zero summaries: uniform prior over each support.
        let zeros = vec![vec![0.0; 16]; n_regions];
        let cond = conditioning_from_attention(
            &zeros,
            ConditioningMode::Global,
            &layout,
            &set,
            &palette,
            0.5,
            control.clone(),
        )
        .unwrap();
        for prior in cond.region_priors() {
            let support: Vec<f64> = prior.iter().copied().filter(|p| *p > 0.0).collect();
            for p in &support {
                assert!((p - 1.0 / support.len() as f64).abs() < 1e-12);
            }
        }

        // RACA support is exactly the region's own category.
        let cond = conditioning_from_attention(
            &zeros,
            ConditioningMode::Raca,
            &layout,
            &set,
            &palette,
            0.5,
            control.clone(),
        )
        .unwrap();
        let cats: Vec<CategoryId> = palette.all_components().map(|(c, _, _)| c).collect();
        for (r, prior) in cond.region_priors().iter().enumerate() {
            let own = if r == 0 { 0 } else { layout.objects()[r - 1].label };
            for (k, p) in prior.iter().enumerate() {
                assert_eq!(*p > 0.0, cats[k] == own, "region {r} component {k}");
            }
        }

        // A summary equal to a strongly scaled component key concentrates
        // the prior on that component.
        let red_key = set.component_keys()[1].clone();
        let mut sums = zeros.clone();
        sums[1] = red_key.iter().map(|x| 10.0 * x).collect();
        let cond = conditioning_from_attention(
            &sums,
            ConditioningMode::Global,
            &layout,
            &set,
            &palette,
            0.5,
            control,
        )
        .unwrap();
        let p = cond.region_priors()[1][1];
        assert!(p >= 0.95, "prior {p}");
    }
}
