//! Scene model: palettes of per-category color mixtures, box layouts, and the
//! pixel grids everything else operates on.
//!
//! The generative story is deliberately tiny. A layout places 3 to 8 labeled
//! boxes on a canvas; rendering picks one color component per region (the
//! background counts as a region) and paints component means with z-order =
//! list order; a scene adds iid N(0, pixel_sigma^2) per channel. Because the
//! whole prior is a finite Gaussian mixture, the denoiser in [`crate::denoiser`]
//! can invert it exactly.

mod io;

pub use io::{load_grid, load_layout, load_palette, save_grid, save_layout, save_palette, write_ppm};

use std::collections::BTreeSet;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Category identifier; `BACKGROUND` (= 0) is reserved.
pub type CategoryId = usize;

/// Reserved category id for the background region.
pub const BACKGROUND: CategoryId = 0;

/// Smallest legal box area in pixels.
pub const MIN_BOX_AREA: usize = 16;

/// Floor on the color distance between components of different categories.
pub const MIN_INTER_CATEGORY_DISTANCE: f64 = 0.2;

/// Upper bound on per-channel pixel noise.
pub const MAX_PIXEL_SIGMA: f64 = 0.1;

const MIN_OBJECTS: usize = 3;
const MAX_OBJECTS: usize = 8;
const WEIGHT_SUM_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Palette

/// One Gaussian mixture component: a mean color and its prior weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorComponent {
    pub mean: [f64; 3],
    pub weight: f64,
}

/// A category's mixture of color components.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    id: CategoryId,
    name: String,
    components: Vec<ColorComponent>,
}

impl CategorySpec {
    /// Validates: at least one component, means in [0,1]^3, positive weights
    /// summing to 1 within 1e-9.
    pub fn new(id: CategoryId, name: impl Into<String>, components: Vec<ColorComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::validation(format!("category {id}: no components")));
        }
        let mut sum = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) {
                return Err(Error::validation(format!(
                    "category {id} component {k}: weight {} not positive",
                    c.weight
                )));
            }
            sum += c.weight;
            for (ch, v) in c.mean.iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::validation(format!(
                        "category {id} component {k} channel {ch}: mean {v} outside [0,1]"
                    )));
                }
            }
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::validation(format!(
                "category {id}: component weights sum to {sum}, expected 1"
            )));
        }
        Ok(CategorySpec {
            id,
            name: name.into(),
            components,
        })
    }

    pub fn id(&self) -> CategoryId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn components(&self) -> &[ColorComponent] {
        &self.components
    }

    /// Prior-weighted mean color of the category.
    pub fn expected_color(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in &self.components {
            for ch in 0..3 {
                out[ch] += c.weight * c.mean[ch];
            }
        }
        out
    }
}

/// The world's color model: per-category mixtures plus the shared pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pixel_sigma: f64,
    categories: Vec<CategorySpec>,
    min_inter_category_distance: f64,
}

impl Palette {
    /// Validates: ids are exactly 0..C-1 in order (0 = background), pixel
    /// sigma in (0, 0.1], and every pair of components from different
    /// categories at least [`MIN_INTER_CATEGORY_DISTANCE`] apart in color.
    pub fn new(pixel_sigma: f64, categories: Vec<CategorySpec>) -> Result<Self> {
        if !(pixel_sigma > 0.0 && pixel_sigma <= MAX_PIXEL_SIGMA) {
            return Err(Error::validation(format!(
                "pixel_sigma {pixel_sigma} outside (0, {MAX_PIXEL_SIGMA}]"
            )));
        }
        if categories.is_empty() {
            return Err(Error::validation("palette has no categories"));
        }
        for (i, cat) in categories.iter().enumerate() {
            if cat.id != i {
                return Err(Error::validation(format!(
                    "category ids must be 0..C-1 without gaps; position {i} has id {}",
                    cat.id
                )));
            }
        }
        let mut min_dist = f64::INFINITY;
        for a in &categories {
            for b in &categories {
                if a.id >= b.id {
                    continue;
                }
                for ca in &a.components {
                    for cb in &b.components {
                        min_dist = min_dist.min(color_distance(&ca.mean, &cb.mean));
                    }
                }
            }
        }
        if categories.len() > 1 && min_dist < MIN_INTER_CATEGORY_DISTANCE {
            return Err(Error::validation(format!(
                "inter-category component distance {min_dist:.4} below {MIN_INTER_CATEGORY_DISTANCE}"
            )));
        }
        Ok(Palette {
            pixel_sigma,
            categories,
            min_inter_category_distance: min_dist,
        })
    }

    pub fn pixel_sigma(&self) -> f64 {
        self.pixel_sigma
    }

    pub fn categories(&self) -> &[CategorySpec] {
        &self.categories
    }

    pub fn category(&self, id: CategoryId) -> Option<&CategorySpec> {
        self.categories.get(id)
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Smallest color distance between components of different categories
    /// (infinite for a single-category palette).
    pub fn min_inter_category_distance(&self) -> f64 {
        self.min_inter_category_distance
    }

    /// All (category, component index, component) triples in id order.
    pub fn all_components(&self) -> impl Iterator<Item = (CategoryId, usize, &ColorComponent)> {
        self.categories
            .iter()
            .flat_map(|cat| cat.components.iter().enumerate().map(move |(k, c)| (cat.id, k, c)))
    }
}

pub(crate) fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for ch in 0..3 {
        let d = a[ch] - b[ch];
        s += d * d;
    }
    s.sqrt()
}

/// Built-in five-category palette (background + four object categories).
///
/// Component colors are placed so the smallest inter-category distance is
/// ~0.5, which keeps the nearest-mean pixel classifier essentially exact at
/// the default noise level while same-category variants stay close enough to
/// overlap under heavy diffusion noise.
pub fn default_palette() -> Palette {
    let cats = vec![
        CategorySpec::new(
            0,
            "background",
            vec![
                ColorComponent { mean: [0.50, 0.50, 0.50], weight: 0.6 },
                ColorComponent { mean: [0.62, 0.62, 0.62], weight: 0.4 },
            ],
        )
        .expect("static palette"),
        CategorySpec::new(
            1,
            "crimson",
            vec![
                ColorComponent { mean: [0.85, 0.10, 0.12], weight: 0.5 },
                ColorComponent { mean: [0.72, 0.05, 0.28], weight: 0.3 },
                ColorComponent { mean: [0.95, 0.22, 0.10], weight: 0.2 },
            ],
        )
        .expect("static palette"),
        CategorySpec::new(
            2,
            "cobalt",
            vec![
                ColorComponent { mean: [0.10, 0.15, 0.88], weight: 0.5 },
                ColorComponent { mean: [0.08, 0.30, 0.80], weight: 0.3 },
                ColorComponent { mean: [0.30, 0.10, 0.95], weight: 0.2 },
            ],
        )
        .expect("static palette"),
        CategorySpec::new(
            3,
            "viridian",
            vec![
                ColorComponent { mean: [0.10, 0.75, 0.22], weight: 0.6 },
                ColorComponent { mean: [0.25, 0.88, 0.10], weight: 0.4 },
            ],
        )
        .expect("static palette"),
        CategorySpec::new(
            4,
            "amber",
            vec![
                ColorComponent { mean: [0.90, 0.85, 0.15], weight: 0.5 },
                ColorComponent { mean: [0.78, 0.72, 0.05], weight: 0.5 },
            ],
        )
        .expect("static palette"),
    ];
    Palette::new(0.05, cats).expect("static palette")
}

// ---------------------------------------------------------------------------
// Layout

/// Axis-aligned half-open pixel box: [x0, x1) x [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl BBox {
    /// Validates x0 < x1, y0 < y1, and area >= [`MIN_BOX_AREA`].
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::validation(format!(
                "degenerate box [{x0},{y0},{x1},{y1}]"
            )));
        }
        let area = (x1 - x0) * (y1 - y0);
        if area < MIN_BOX_AREA {
            return Err(Error::validation(format!(
                "box area {area} below minimum {MIN_BOX_AREA}"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> usize {
        self.x0
    }
    pub fn y0(&self) -> usize {
        self.y0
    }
    pub fn x1(&self) -> usize {
        self.x1
    }
    pub fn y1(&self) -> usize {
        self.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Intersection area with another box.
    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

/// One placed object: a box plus its category label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutObject {
    pub bbox: BBox,
    pub label: CategoryId,
}

/// A full scene description: canvas size, ordered objects (later objects
/// paint over earlier ones), and the caption's category set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    width: usize,
    height: usize,
    objects: Vec<LayoutObject>,
    caption: BTreeSet<CategoryId>,
}

impl Layout {
    /// Validates: positive canvas, 3..=8 objects inside the canvas, every
    /// label a known non-background palette category, caption covering all
    /// labels and containing only known categories.
    pub fn new(
        width: usize,
        height: usize,
        objects: Vec<LayoutObject>,
        caption: BTreeSet<CategoryId>,
        palette: &Palette,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("canvas dimensions must be positive"));
        }
        if objects.len() < MIN_OBJECTS || objects.len() > MAX_OBJECTS {
            return Err(Error::validation(format!(
                "object count {} outside {MIN_OBJECTS}..={MAX_OBJECTS}",
                objects.len()
            )));
        }
        for (i, obj) in objects.iter().enumerate() {
            if obj.bbox.x1 > width || obj.bbox.y1 > height {
                return Err(Error::validation(format!(
                    "object {i} extends outside the {width}x{height} canvas"
                )));
            }
            if obj.label == BACKGROUND {
                return Err(Error::validation(format!(
                    "object {i} uses the reserved background label"
                )));
            }
            if palette.category(obj.label).is_none() {
                return Err(Error::validation(format!(
                    "object {i}: unknown category id {}",
                    obj.label
                )));
            }
            if !caption.contains(&obj.label) {
                return Err(Error::validation(format!(
                    "object {i}: label {} missing from caption",
                    obj.label
                )));
            }
        }
        for id in &caption {
            if *id == BACKGROUND || palette.category(*id).is_none() {
                return Err(Error::validation(format!("caption: unknown category id {id}")));
            }
        }
        Ok(Layout {
            width,
            height,
            objects,
            caption,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn objects(&self) -> &[LayoutObject] {
        &self.objects
    }

    pub fn caption(&self) -> &BTreeSet<CategoryId> {
        &self.caption
    }
}

// ---------------------------------------------------------------------------
// Grids

/// H x W x 3 grid of reals; latents live in pixel space (identity decoder).
/// Data is row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::validation("grid dimensions must be positive"));
        }
        Ok(LatentGrid {
            h,
            w,
            data: vec![0.0; h * w * 3],
        })
    }

    /// Wraps an existing buffer; length must be h*w*3 and all values finite.
    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::validation("grid dimensions must be positive"));
        }
        if data.len() != h * w * 3 {
            return Err(Error::shape(
                "LatentGrid::from_vec",
                format!("{} values", h * w * 3),
                format!("{}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("grid contains non-finite values"));
        }
        Ok(LatentGrid { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn num_pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.w + x) * 3
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x) + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x);
        self.data[i + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = self.idx(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, v: [f64; 3]) {
        let i = self.idx(y, x);
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub(crate) fn expect_same_shape(&self, other: &LatentGrid, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                format!("{}x{}", self.h, self.w),
                format!("{}x{}", other.h, other.w),
            ))
        }
    }

    /// Elementwise combine with another grid of the same shape.
    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.expect_same_shape(other, "LatentGrid::zip_map")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        LatentGrid::from_vec(self.h, self.w, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.expect_same_shape(other, "LatentGrid::mean_abs_diff")?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.expect_same_shape(other, "LatentGrid::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// H x W scalar map in [0,1]; nonzero pixels mark active control edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ControlMap {
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::validation("control map dimensions must be positive"));
        }
        Ok(ControlMap {
            h,
            w,
            data: vec![0.0; h * w],
        })
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "ControlMap::from_vec",
                format!("{} values", h * w),
                format!("{}", data.len()),
            ));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::validation("control values must lie in [0,1]"));
        }
        ControlMap::zeros(h, w).map(|mut m| {
            m.data = data;
            m
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v.clamp(0.0, 1.0);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True where the control signal is active (nonzero).
    pub fn is_active(&self, y: usize, x: usize) -> bool {
        self.get(y, x) > 0.0
    }

    pub fn count_active(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }
}

// ---------------------------------------------------------------------------
// Rendering and sampling

/// A rendered scene: the layout, the component drawn for each region
/// (index 0 = background, index i+1 = object i), and the noisy image.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub layout: Layout,
    pub component_choice: Vec<usize>,
    pub image: LatentGrid,
}

/// Paints the mean image for the given component choices: background first,
/// then objects in list order (later objects overwrite overlaps).
///
/// `component_choice[0]` selects the background component,
/// `component_choice[i+1]` the component of object i.
pub fn render_mean_field(
    layout: &Layout,
    palette: &Palette,
    component_choice: &[usize],
) -> Result<LatentGrid> {
    if component_choice.len() != layout.objects().len() + 1 {
        return Err(Error::shape(
            "render_mean_field",
            format!("{} component choices", layout.objects().len() + 1),
            format!("{}", component_choice.len()),
        ));
    }
    let pick = |cat: CategoryId, k: usize| -> Result<[f64; 3]> {
        let spec = palette
            .category(cat)
            .ok_or_else(|| Error::validation(format!("unknown category id {cat}")))?;
        spec.components()
            .get(k)
            .map(|c| c.mean)
            .ok_or_else(|| Error::validation(format!("category {cat} has no component {k}")))
    };

    let bg = pick(BACKGROUND, component_choice[0])?;
    let mut grid = LatentGrid::zeros(layout.height(), layout.width())?;
    for y in 0..layout.height() {
        for x in 0..layout.width() {
            grid.set_pixel(y, x, bg);
        }
    }
    for (i, obj) in layout.objects().iter().enumerate() {
        let mean = pick(obj.label, component_choice[i + 1])?;
        for y in obj.bbox.y0()..obj.bbox.y1() {
            for x in obj.bbox.x0()..obj.bbox.x1() {
                grid.set_pixel(y, x, mean);
            }
        }
    }
    Ok(grid)
}

fn draw_component(rng: &mut ChaCha8Rng, spec: &CategorySpec) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, c) in spec.components().iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return k;
        }
    }
    spec.components().len() - 1
}

/// Draws a full scene: one component per region from the category priors,
/// then the mean field plus iid N(0, pixel_sigma^2) per channel.
///
/// Draw order is fixed for reproducibility: background component, object
/// components in list order, then noise row-major with channels innermost.
pub fn sample_scene(layout: &Layout, palette: &Palette, seed: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut choice = Vec::with_capacity(layout.objects().len() + 1);
    choice.push(draw_component(
        &mut rng,
        palette.category(BACKGROUND).expect("palette has background"),
    ));
    for obj in layout.objects() {
        let spec = palette
            .category(obj.label)
            .ok_or_else(|| Error::validation(format!("unknown category id {}", obj.label)))?;
        choice.push(draw_component(&mut rng, spec));
    }
    let mut image = render_mean_field(layout, palette, &choice)?;
    let sigma = palette.pixel_sigma();
    for v in image.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * n;
    }
    Ok(SceneSample {
        layout: layout.clone(),
        component_choice: choice,
        image,
    })
}

/// Control map for a layout: value 1 on each box perimeter (the 1-pixel ring
/// just inside the half-open box), 0 elsewhere; overlapping perimeters union.
pub fn make_control_map(layout: &Layout) -> ControlMap {
    let mut map = ControlMap::zeros(layout.height(), layout.width()).expect("layout canvas is positive");
    for obj in layout.objects() {
        let b = &obj.bbox;
        for x in b.x0()..b.x1() {
            map.set(b.y0(), x, 1.0);
            map.set(b.y1() - 1, x, 1.0);
        }
        for y in b.y0()..b.y1() {
            map.set(y, b.x0(), 1.0);
            map.set(y, b.x1() - 1, 1.0);
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Layout generation

/// Knobs for random layout generation.
#[derive(Debug, Clone)]
pub struct LayoutGenConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box side range, inclusive.
    pub min_side: usize,
    pub max_side: usize,
    /// Minimum number of distinct labels across the layout.
    pub min_categories: usize,
    /// Empty pixels required between any two boxes (keeps same-category
    /// blobs from merging under the connected-component detector).
    pub gap: usize,
}

impl Default for LayoutGenConfig {
    fn default() -> Self {
        LayoutGenConfig {
            width: 64,
            height: 64,
            min_objects: MIN_OBJECTS,
            max_objects: MAX_OBJECTS,
            min_side: 6,
            max_side: 16,
            min_categories: 2,
            gap: 1,
        }
    }
}

fn boxes_conflict(a: &BBox, b: &BBox, gap: usize) -> bool {
    // Expand one box by the gap and test overlap.
    let ax0 = a.x0().saturating_sub(gap);
    let ay0 = a.y0().saturating_sub(gap);
    let ax1 = a.x1() + gap;
    let ay1 = a.y1() + gap;
    ax0 < b.x1() && b.x0() < ax1 && ay0 < b.y1() && b.y0() < ay1
}

/// Rejection-samples a layout: gap-separated boxes with sides in the
/// configured range and at least `min_categories` distinct labels. Fails with
/// a construction error when the canvas cannot host the request.
pub fn generate_layout(cfg: &LayoutGenConfig, palette: &Palette, rng: &mut ChaCha8Rng) -> Result<Layout> {
    if cfg.min_objects < MIN_OBJECTS || cfg.max_objects > MAX_OBJECTS || cfg.min_objects > cfg.max_objects {
        return Err(Error::validation(format!(
            "object count range {}..={} outside {MIN_OBJECTS}..={MAX_OBJECTS}",
            cfg.min_objects, cfg.max_objects
        )));
    }
    if cfg.min_side * cfg.min_side < MIN_BOX_AREA {
        return Err(Error::validation(format!(
            "min_side {} gives boxes below the {MIN_BOX_AREA}px area floor",
            cfg.min_side
        )));
    }
    if cfg.min_side > cfg.max_side || cfg.max_side > cfg.width.min(cfg.height) {
        return Err(Error::validation("box side range does not fit the canvas"));
    }
    let fg: Vec<CategoryId> = palette
        .categories()
        .iter()
        .map(|c| c.id())
        .filter(|id| *id != BACKGROUND)
        .collect();
    if fg.len() < cfg.min_categories {
        return Err(Error::validation(format!(
            "palette has {} object categories, {} required",
            fg.len(),
            cfg.min_categories
        )));
    }

    const RESTARTS: usize = 200;
    const PLACEMENT_TRIES: usize = 200;
    for _ in 0..RESTARTS {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        'place: while boxes.len() < n {
            for _ in 0..PLACEMENT_TRIES {
                let w = rng.random_range(cfg.min_side..=cfg.max_side);
                let h = rng.random_range(cfg.min_side..=cfg.max_side);
                let x0 = rng.random_range(0..=cfg.width - w);
                let y0 = rng.random_range(0..=cfg.height - h);
                let candidate = BBox::new(x0, y0, x0 + w, y0 + h)?;
                if boxes.iter().all(|b| !boxes_conflict(b, &candidate, cfg.gap)) {
                    boxes.push(candidate);
                    continue 'place;
                }
            }
            break 'place; // couldn't place this box; restart
        }
        if boxes.len() < n {
            continue;
        }
        // Labels: uniform over object categories, re-drawn until the layout
        // carries enough distinct ones.
        for _ in 0..PLACEMENT_TRIES {
            let labels: Vec<CategoryId> = (0..n).map(|_| fg[rng.random_range(0..fg.len())]).collect();
            let distinct: BTreeSet<CategoryId> = labels.iter().copied().collect();
            if distinct.len() < cfg.min_categories.min(n) {
                continue;
            }
            let objects = boxes
                .iter()
                .zip(&labels)
                .map(|(bbox, label)| LayoutObject {
                    bbox: *bbox,
                    label: *label,
                })
                .collect();
            return Layout::new(cfg.width, cfg.height, objects, distinct, palette);
        }
    }
    Err(Error::Construction(
        "generate_layout: placement budget exhausted".into(),
    ))
}

#[cfg(test)]
mod tests;
