//! Corpus-level evaluation: per-image feature descriptors and their Gaussian
//! Fréchet distance, layout-consistency and leakage rates, rectified-area
//! histograms, and a miniature downstream-training experiment.
//!
//! All functions here are pure aggregation over finished images and traces;
//! nothing samples or mutates. CSV emission lives with the command front end.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::perception::{classify_pixels, detect, match_by_iou, BinaryMask};
use crate::rgr::RectificationTrace;
use crate::toyworld::{
    CategoryId, CategorySpec, ColorComponent, LatentGrid, Layout, Palette, BACKGROUND,
    MIN_BOX_AREA,
};

/// Feature width: 8 region slots x 3 channels + 8 bins x 3 channels.
pub const FEATURE_DIM: usize = 48;
const REGION_SLOTS: usize = 8;
const HIST_BINS: usize = 8;
/// Upper edge of the area histogram's log range; components larger than this
/// land in the last bin.
pub const MAX_HISTOGRAM_AREA: usize = 4096;

/// Fixed-width image descriptor: mean color of each annotated region (in
/// object order, zero-padded to 8 slots) followed by a global 8-bin
/// per-channel color histogram. Histogram entries count pixels, so each
/// channel's bins sum to the pixel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: [f64; FEATURE_DIM],
}

impl FeatureVector {
    pub fn compute(image: &LatentGrid, layout: &Layout) -> FeatureVector {
        let mut values = [0.0; FEATURE_DIM];
        for (i, obj) in layout.objects().iter().take(REGION_SLOTS).enumerate() {
            let b = obj.bbox;
            let mut sum = [0.0; 3];
            for y in b.y0()..b.y1() {
                for x in b.x0()..b.x1() {
                    let p = image.pixel(y, x);
                    for ch in 0..3 {
                        sum[ch] += p[ch];
                    }
                }
            }
            for ch in 0..3 {
                values[3 * i + ch] = sum[ch] / b.area() as f64;
            }
        }
        let hist_base = 3 * REGION_SLOTS;
        for y in 0..image.h() {
            for x in 0..image.w() {
                let p = image.pixel(y, x);
                for ch in 0..3 {
                    let bin = ((p[ch] * HIST_BINS as f64).floor() as isize)
                        .clamp(0, HIST_BINS as isize - 1) as usize;
                    values[hist_base + HIST_BINS * ch + bin] += 1.0;
                }
            }
        }
        FeatureVector { values }
    }

    pub fn values(&self) -> &[f64; FEATURE_DIM] {
        &self.values
    }
}

/// First two moments of a feature corpus: mean vector plus sample
/// covariance. Validated symmetric within 1e-10 with eigenvalues above
/// -1e-8, so downstream square roots are well defined.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::shape(
                "GaussianSummary::new",
                format!("{d}x{d} covariance"),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("summary moments must be finite"));
        }
        for i in 0..d {
            for j in i + 1..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 {
                    return Err(Error::validation(format!(
                        "covariance asymmetric at ({i},{j}): {} vs {}",
                        cov[(i, j)],
                        cov[(j, i)]
                    )));
                }
            }
        }
        let eigen = cov.clone().symmetric_eigen();
        if eigen.eigenvalues.iter().any(|l| *l < -1e-8) {
            return Err(Error::invalid(format!(
                "covariance has eigenvalue {} below tolerance",
                eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
            )));
        }
        Ok(GaussianSummary { mean, cov })
    }

    /// Mean and sample covariance (n-1 denominator) of a feature corpus.
    pub fn from_features(features: &[FeatureVector]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::validation(format!(
                "need at least 2 feature vectors for a sample covariance, got {n}"
            )));
        }
        if features
            .iter()
            .any(|f| f.values.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::validation("feature vectors must be finite"));
        }
        let d = FEATURE_DIM;
        let mut mean = DVector::zeros(d);
        for f in features {
            for (i, v) in f.values.iter().enumerate() {
                mean[i] += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let x = DVector::from_iterator(d, f.values.iter().cloned()) - &mean;
            cov += &x * x.transpose();
        }
        cov /= (n - 1) as f64;
        // Symmetrize away accumulation roundoff before validation.
        cov = (&cov + cov.transpose()) * 0.5;
        GaussianSummary::new(mean, cov)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Symmetric square root with small negative eigenvalues (roundoff) clipped
/// to zero; eigenvalues below the tolerance are a caller error.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let mut roots = eigen.eigenvalues.clone();
    for l in roots.iter_mut() {
        if *l < -1e-8 {
            return Err(Error::invalid(format!(
                "matrix eigenvalue {l} below PSD tolerance"
            )));
        }
        *l = l.max(0.0).sqrt();
    }
    Ok(&eigen.eigenvectors * DMatrix::from_diagonal(&roots) * eigen.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian summaries:
/// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), the cross term
/// computed through the symmetric product S_a^{1/2} S_b S_a^{1/2}. Clamped
/// at zero against roundoff.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);

    let sqrt_a = sqrt_psd(&a.cov)?;
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let mut tr_sqrt = 0.0;
    for l in eigen.eigenvalues.iter() {
        if *l < -1e-8 {
            return Err(Error::invalid(format!(
                "cross-covariance eigenvalue {l} below PSD tolerance"
            )));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Whether the image's detections match its annotation exactly, plus the
/// false-positive and false-negative counts behind the verdict.
pub fn layout_consistency(
    image: &LatentGrid,
    layout: &Layout,
    palette: &Palette,
    tau: f64,
) -> Result<(bool, usize, usize)> {
    let detections = detect(image, palette, MIN_BOX_AREA)?;
    let matching = match_by_iou(&detections, layout.objects(), tau)?;
    Ok((
        matching.fp.is_empty() && matching.fn_.is_empty(),
        matching.fp.len(),
        matching.fn_.len(),
    ))
}

/// Dominant non-background class among the pixels of one box, ties to the
/// smaller id; None when the box holds background only.
fn dominant_category(
    classes: &[CategoryId],
    w: usize,
    bbox: &crate::toyworld::BBox,
) -> Option<CategoryId> {
    let mut counts: std::collections::BTreeMap<CategoryId, usize> = std::collections::BTreeMap::new();
    for y in bbox.y0()..bbox.y1() {
        for x in bbox.x0()..bbox.x1() {
            let c = classes[y * w + x];
            if c != BACKGROUND {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
        .map(|(c, _)| c)
}

/// Fraction of annotated regions whose dominant pixel class disagrees with
/// the annotation. Requires at least two caption categories per layout,
/// since leakage is only defined where a foreign category exists to leak.
pub fn leakage_score(corpus: &[(Layout, LatentGrid)], palette: &Palette) -> Result<f64> {
    let mut regions = 0usize;
    let mut leaked = 0usize;
    for (i, (layout, image)) in corpus.iter().enumerate() {
        if layout.caption().len() < 2 {
            return Err(Error::validation(format!(
                "corpus item {i}: leakage needs at least 2 caption categories, got {}",
                layout.caption().len()
            )));
        }
        if image.h() != layout.height() || image.w() != layout.width() {
            return Err(Error::shape(
                "leakage_score",
                format!("{}x{}", layout.height(), layout.width()),
                format!("{}x{}", image.h(), image.w()),
            ));
        }
        let classes = classify_pixels(image, palette);
        for obj in layout.objects() {
            regions += 1;
            if dominant_category(&classes, image.w(), &obj.bbox) != Some(obj.label) {
                leaked += 1;
            }
        }
    }
    if regions == 0 {
        return Ok(0.0);
    }
    Ok(leaked as f64 / regions as f64)
}

/// Histogram of rectified connected-component areas over fixed log-spaced
/// bins spanning [1, MAX_HISTOGRAM_AREA]; larger components land in the last
/// bin.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaHistogram {
    /// bins + 1 ascending edges, edges[0] = 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl AreaHistogram {
    pub fn bin_of(&self, area: usize) -> usize {
        let bins = self.counts.len();
        let frac = (area.max(1) as f64).ln() / (MAX_HISTOGRAM_AREA as f64).ln();
        ((frac * bins as f64).floor() as usize).min(bins - 1)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Areas of the 4-connected components of a mask.
fn component_areas(mask: &BinaryMask) -> Vec<usize> {
    let (h, w) = (mask.h(), mask.w());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sy, sx) || seen[sy * w + sx] {
                continue;
            }
            seen[sy * w + sx] = true;
            let mut area = 0usize;
            let mut queue = VecDeque::from([(sy, sx)]);
            while let Some((y, x)) = queue.pop_front() {
                area += 1;
                let mut push = |ny: usize, nx: usize| {
                    if mask.get(ny, nx) && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x);
                }
                if y + 1 < h {
                    push(y + 1, x);
                }
                if x > 0 {
                    push(y, x - 1);
                }
                if x + 1 < w {
                    push(y, x + 1);
                }
            }
            out.push(area);
        }
    }
    out
}

/// Pools every rectified connected component across all stages of all traces
/// into one log-binned area histogram.
pub fn area_histogram(traces: &[RectificationTrace], bins: usize) -> Result<AreaHistogram> {
    if bins == 0 {
        return Err(Error::validation("area histogram needs at least one bin"));
    }
    let log_max = (MAX_HISTOGRAM_AREA as f64).ln();
    let edges: Vec<f64> = (0..=bins)
        .map(|i| (log_max * i as f64 / bins as f64).exp())
        .collect();
    let mut hist = AreaHistogram {
        edges,
        counts: vec![0; bins],
    };
    for trace in traces {
        for stage in &trace.stages {
            for area in component_areas(&stage.mask) {
                let b = hist.bin_of(area);
                hist.counts[b] += 1;
            }
        }
    }
    Ok(hist)
}

/// Outcome of the miniature trainability experiment.
#[derive(Debug, Clone)]
pub struct DownstreamReport {
    pub f1_real_only: f64,
    pub f1_augmented: f64,
    /// Categories whose prototype fell back to the palette mean because the
    /// real-only training set never showed them.
    pub fallback_real: Vec<CategoryId>,
    /// Same for the augmented training set.
    pub fallback_augmented: Vec<CategoryId>,
}

/// Per-category mean colors estimated from a training corpus: object
/// categories average their annotated-box pixels; the background averages
/// everything outside all boxes. Categories the corpus never shows fall back
/// to the palette's own expected color and are reported.
fn estimate_prototypes(
    pairs: &[(Layout, LatentGrid)],
    palette: &Palette,
) -> (Vec<CategorySpec>, Vec<CategoryId>) {
    let n_cats = palette.categories().len();
    let mut sums = vec![[0.0f64; 3]; n_cats];
    let mut counts = vec![0usize; n_cats];
    for (layout, image) in pairs {
        let mut covered = vec![false; layout.height() * layout.width()];
        for obj in layout.objects() {
            let b = obj.bbox;
            for y in b.y0()..b.y1() {
                for x in b.x0()..b.x1() {
                    covered[y * layout.width() + x] = true;
                }
            }
        }
        // Later objects overwrite earlier ones when boxes overlap, matching
        // paint order.
        let mut owner = vec![BACKGROUND; layout.height() * layout.width()];
        for obj in layout.objects() {
            let b = obj.bbox;
            for y in b.y0()..b.y1() {
                for x in b.x0()..b.x1() {
                    owner[y * layout.width() + x] = obj.label;
                }
            }
        }
        for y in 0..layout.height() {
            for x in 0..layout.width() {
                let idx = y * layout.width() + x;
                let cat = if covered[idx] { owner[idx] } else { BACKGROUND };
                let p = image.pixel(y, x);
                for ch in 0..3 {
                    sums[cat][ch] += p[ch];
                }
                counts[cat] += 1;
            }
        }
    }
    let mut specs = Vec::with_capacity(n_cats);
    let mut fallbacks = Vec::new();
    for spec in palette.categories() {
        let id = spec.id();
        let mean = if counts[id] > 0 {
            let mut m = [0.0; 3];
            for ch in 0..3 {
                m[ch] = (sums[id][ch] / counts[id] as f64).clamp(0.0, 1.0);
            }
            m
        } else {
            fallbacks.push(id);
            spec.expected_color()
        };
        specs.push(
            CategorySpec::new(id, spec.name(), vec![ColorComponent { mean, weight: 1.0 }])
                .expect("prototype component is a valid unit-weight mixture"),
        );
    }
    (specs, fallbacks)
}

fn pooled_f1(
    proto_palette: &Palette,
    test: &[(Layout, LatentGrid)],
    tau: f64,
) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (layout, image) in test {
        let detections = detect(image, proto_palette, MIN_BOX_AREA)?;
        let matching = match_by_iou(&detections, layout.objects(), tau)?;
        tp += matching.tp.len();
        fp += matching.fp.len();
        fn_ += matching.fn_.len();
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Trains two prototype detectors, one on the real corpus alone and one on
/// real plus generated pairs, and scores both on the held-out test corpus
/// with pooled F1 at IoU 0.5.
pub fn micro_downstream_eval(
    train_real: &[(Layout, LatentGrid)],
    train_aug: &[(Layout, LatentGrid)],
    test: &[(Layout, LatentGrid)],
    palette: &Palette,
) -> Result<DownstreamReport> {
    let (real_specs, fallback_real) = estimate_prototypes(train_real, palette);
    let real_palette = Palette::new(palette.pixel_sigma(), real_specs)?;
    let f1_real_only = pooled_f1(&real_palette, test, 0.5)?;

    let mut combined: Vec<(Layout, LatentGrid)> = train_real.to_vec();
    combined.extend(train_aug.iter().cloned());
    let (aug_specs, fallback_augmented) = estimate_prototypes(&combined, palette);
    let aug_palette = Palette::new(palette.pixel_sigma(), aug_specs)?;
    let f1_augmented = pooled_f1(&aug_palette, test, 0.5)?;

    Ok(DownstreamReport {
        f1_real_only,
        f1_augmented,
        fallback_real,
        fallback_augmented,
    })
}
