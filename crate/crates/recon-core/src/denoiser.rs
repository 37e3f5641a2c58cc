//! Exact conditional denoiser for the toy world.
//!
//! Every scene region holds one mixture component's color plus iid Gaussian
//! pixel noise, so the posterior over components given a noisy latent is
//! available in closed form, and the clean-image estimate is the
//! responsibility-weighted per-pixel posterior mean. Conditioning carries the
//! per-region component priors (produced by the attention side), the layout
//! control map, and the control strength.
//!
//! Probability tables over components are dense vectors aligned with
//! [`Palette::all_components`] order. Region indexing is fixed everywhere:
//! index 0 is the background, index i+1 is layout object i.

use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::toyworld::{CategoryId, ControlMap, LatentGrid, Layout, Palette, BACKGROUND};

/// Prior/posterior support rule for conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Every region may draw on all caption categories plus background.
    Global,
    /// Each region is restricted to its own category's components.
    Raca,
    /// Global support with post-hoc attention masking upstream; support rules
    /// match [`ConditioningMode::Global`].
    Masked,
}

/// Per-run conditioning: region component priors, layout control, strength.
#[derive(Debug, Clone)]
pub struct Conditioning {
    layout: Layout,
    mode: ConditioningMode,
    region_priors: Vec<Vec<f64>>,
    control_map: ControlMap,
    gamma: f64,
}

/// Category a region draws its own components from: background for region 0,
/// the object's label otherwise.
pub fn region_category(layout: &Layout, region: usize) -> CategoryId {
    if region == 0 {
        BACKGROUND
    } else {
        layout.objects()[region - 1].label
    }
}

/// Component indices (in `all_components` order) a region may use under the
/// given mode.
pub(crate) fn allowed_support(
    palette: &Palette,
    layout: &Layout,
    mode: ConditioningMode,
    region: usize,
) -> Vec<usize> {
    let own = region_category(layout, region);
    palette
        .all_components()
        .enumerate()
        .filter(|(_, (cat, _, _))| match mode {
            ConditioningMode::Raca => *cat == own,
            ConditioningMode::Global | ConditioningMode::Masked => {
                *cat == BACKGROUND || layout.caption().contains(cat)
            }
        })
        .map(|(i, _)| i)
        .collect()
}

impl Conditioning {
    pub fn new(
        layout: Layout,
        mode: ConditioningMode,
        region_priors: Vec<Vec<f64>>,
        control_map: ControlMap,
        gamma: f64,
        palette: &Palette,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::validation(format!("gamma {gamma} outside [0,1]")));
        }
        if control_map.h() != layout.height() || control_map.w() != layout.width() {
            return Err(Error::shape(
                "conditioning control map",
                format!("{}x{}", layout.height(), layout.width()),
                format!("{}x{}", control_map.h(), control_map.w()),
            ));
        }
        let cond = Conditioning {
            layout,
            mode,
            region_priors,
            control_map,
            gamma,
        };
        cond.validate_against(palette)?;
        Ok(cond)
    }

    /// Uniform priors over each region's allowed support, with the layout's
    /// own perimeter control map.
    pub fn uniform(layout: Layout, mode: ConditioningMode, palette: &Palette, gamma: f64) -> Result<Self> {
        let control_map = crate::toyworld::make_control_map(&layout);
        let n_comp = palette.all_components().count();
        let mut priors = Vec::with_capacity(layout.objects().len() + 1);
        for region in 0..=layout.objects().len() {
            let support = allowed_support(palette, &layout, mode, region);
            let mut p = vec![0.0; n_comp];
            for i in &support {
                p[*i] = 1.0 / support.len() as f64;
            }
            priors.push(p);
        }
        Conditioning::new(layout, mode, priors, control_map, gamma, palette)
    }

    /// Re-checks the prior tables against a palette: one table per region,
    /// entries nonnegative summing to 1, support within the mode's rule.
    pub fn validate_against(&self, palette: &Palette) -> Result<()> {
        let n_regions = self.layout.objects().len() + 1;
        if self.region_priors.len() != n_regions {
            return Err(Error::validation(format!(
                "expected {n_regions} region priors, got {}",
                self.region_priors.len()
            )));
        }
        let n_comp = palette.all_components().count();
        for (r, prior) in self.region_priors.iter().enumerate() {
            if prior.len() != n_comp {
                return Err(Error::validation(format!(
                    "region {r}: prior has {} entries, palette has {n_comp} components",
                    prior.len()
                )));
            }
            if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::validation(format!("region {r}: negative or non-finite prior")));
            }
            let sum: f64 = prior.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!("region {r}: prior sums to {sum}, not 1")));
            }
            let support = allowed_support(palette, &self.layout, self.mode, r);
            for (i, p) in prior.iter().enumerate() {
                if *p > 0.0 && !support.contains(&i) {
                    return Err(Error::validation(format!(
                        "region {r}: prior mass {p} on component {i} outside the {:?} support",
                        self.mode
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    pub fn region_priors(&self) -> &[Vec<f64>] {
        &self.region_priors
    }

    pub fn control_map(&self) -> &ControlMap {
        &self.control_map
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Replaces the control map (rectification suppresses control around
    /// false-positive regions). Shape must match the layout.
    pub fn with_control_map(mut self, control_map: ControlMap) -> Result<Self> {
        if control_map.h() != self.layout.height() || control_map.w() != self.layout.width() {
            return Err(Error::shape(
                "conditioning control map",
                format!("{}x{}", self.layout.height(), self.layout.width()),
                format!("{}x{}", control_map.h(), control_map.w()),
            ));
        }
        self.control_map = control_map;
        Ok(self)
    }
}

/// Region index owning each pixel, row-major: background unless inside an
/// object box, with later objects claiming overlapped pixels.
fn owner_map(layout: &Layout) -> Vec<usize> {
    let (h, w) = (layout.height(), layout.width());
    let mut owner = vec![0usize; h * w];
    for (i, obj) in layout.objects().iter().enumerate() {
        for y in obj.bbox.y0()..obj.bbox.y1() {
            for x in obj.bbox.x0()..obj.bbox.x1() {
                owner[y * w + x] = i + 1;
            }
        }
    }
    owner
}

/// Splits the frame into one pixel set per region: element 0 is the
/// background, element i+1 the pixels owned by object i (its box minus
/// pixels claimed by later overlapping objects). The sets partition the
/// frame exactly.
pub fn region_partition(layout: &Layout) -> Vec<Vec<usize>> {
    let owner = owner_map(layout);
    let mut sets = vec![Vec::new(); layout.objects().len() + 1];
    for (i, r) in owner.iter().enumerate() {
        sets[*r].push(i);
    }
    sets
}

/// Exact per-channel posterior mean E[z0 | z_t, component]: under
/// z0 ~ N(mu, sigma0^2 I) and z_t = sqrt(ab) z0 + sqrt(1-ab) eps,
/// the posterior is Gaussian with mean
/// (sqrt(ab) sigma0^2 z_t + (1-ab) mu) / (ab sigma0^2 + 1 - ab).
pub fn gaussian_posterior_mean(z_t_pixel: [f64; 3], mu: [f64; 3], sigma0: f64, alpha_bar_t: f64) -> [f64; 3] {
    assert!(
        alpha_bar_t > 0.0 && alpha_bar_t <= 1.0,
        "alpha_bar {alpha_bar_t} outside (0,1]"
    );
    let s2 = sigma0 * sigma0;
    let den = alpha_bar_t * s2 + (1.0 - alpha_bar_t);
    let a = alpha_bar_t.sqrt() * s2 / den;
    let b = (1.0 - alpha_bar_t) / den;
    [
        a * z_t_pixel[0] + b * mu[0],
        a * z_t_pixel[1] + b * mu[1],
        a * z_t_pixel[2] + b * mu[2],
    ]
}

/// Posterior over components for one region: the prior reweighted by the
/// region's pixel evidence under each component's forward-noised density
/// N(sqrt(ab) mu, (ab sigma0^2 + 1 - ab) I), normalized with max-subtraction.
/// Zero-prior components stay at exactly zero.
pub fn region_responsibilities(
    z_t: &LatentGrid,
    region: &[usize],
    prior: &[f64],
    palette: &Palette,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if region.is_empty() {
        return Err(Error::invalid("region_responsibilities: empty region"));
    }
    let n_comp = palette.all_components().count();
    if prior.len() != n_comp {
        return Err(Error::validation(format!(
            "prior has {} entries, palette has {n_comp} components",
            prior.len()
        )));
    }
    if !prior.iter().any(|p| *p > 0.0) {
        return Err(Error::invalid("region_responsibilities: all priors zero"));
    }
    let ab = schedule.alpha_bar(t)?;
    let s2 = palette.pixel_sigma() * palette.pixel_sigma();
    let var = ab * s2 + (1.0 - ab);
    let sab = ab.sqrt();
    let data = z_t.data();
    // Shared normalization constants cancel in the softmax, so only the
    // quadratic term is accumulated.
    let mut logw: Vec<f64> = Vec::with_capacity(prior.len());
    for (k, (_, _, comp)) in palette.all_components().enumerate() {
        if prior[k] <= 0.0 {
            logw.push(f64::NEG_INFINITY);
            continue;
        }
        let m = [sab * comp.mean[0], sab * comp.mean[1], sab * comp.mean[2]];
        let mut q = 0.0;
        for &i in region {
            let base = i * 3;
            for c in 0..3 {
                let d = data[base + c] - m[c];
                q += d * d;
            }
        }
        logw.push(prior[k].ln() - q / (2.0 * var));
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Per-region snap target: the component mean of the region's own category
/// that best explains the current estimate (minimum summed squared distance,
/// ties to the lower component index). Equivalent to the maximum-likelihood
/// component under the shared-variance pixel model.
fn snap_targets(z0_hat: &LatentGrid, palette: &Palette, layout: &Layout, owner: &[usize]) -> Vec<[f64; 3]> {
    let comps: Vec<(CategoryId, [f64; 3])> = palette
        .all_components()
        .map(|(cat, _, comp)| (cat, comp.mean))
        .collect();
    let n_regions = layout.objects().len() + 1;
    // Accumulate squared distances per (region, component).
    let mut dist = vec![vec![0.0f64; comps.len()]; n_regions];
    let data = z0_hat.data();
    for (i, r) in owner.iter().enumerate() {
        let base = i * 3;
        for (k, (_, mean)) in comps.iter().enumerate() {
            let mut q = 0.0;
            for c in 0..3 {
                let d = data[base + c] - mean[c];
                q += d * d;
            }
            dist[*r][k] += q;
        }
    }
    (0..n_regions)
        .map(|r| {
            let own = region_category(layout, r);
            let mut best: Option<(f64, [f64; 3])> = None;
            for (k, (cat, mean)) in comps.iter().enumerate() {
                if *cat != own {
                    continue;
                }
                let q = dist[r][k];
                if best.is_none_or(|(bq, _)| q < bq) {
                    best = Some((q, *mean));
                }
            }
            best.expect("every region category has components").1
        })
        .collect()
}

fn apply_control_impl(
    z0_hat: &LatentGrid,
    control_map: &ControlMap,
    owner: &[usize],
    targets: &[[f64; 3]],
    gamma: f64,
) -> Result<LatentGrid> {
    let (h, w) = (z0_hat.h(), z0_hat.w());
    let mut out = z0_hat.clone();
    if gamma == 0.0 {
        return Ok(out);
    }
    for y in 0..h {
        for x in 0..w {
            let mut near_edge = false;
            'scan: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                        && control_map.is_active(ny as usize, nx as usize)
                    {
                        near_edge = true;
                        break 'scan;
                    }
                }
            }
            if !near_edge {
                continue;
            }
            let target = targets[owner[y * w + x]];
            let p = z0_hat.pixel(y, x);
            out.set_pixel(
                y,
                x,
                [
                    p[0] + gamma * (target[0] - p[0]),
                    p[1] + gamma * (target[1] - p[1]),
                    p[2] + gamma * (target[2] - p[2]),
                ],
            );
        }
    }
    Ok(out)
}

/// Residual edge control: pixels within one pixel of an active control edge
/// move a gamma fraction toward their region's best-fitting own-category
/// component mean; everything else passes through. Gamma 0 is the identity,
/// gamma 1 snaps edge pixels fully.
pub fn apply_control(
    z0_hat: &LatentGrid,
    control_map: &ControlMap,
    layout: &Layout,
    palette: &Palette,
    gamma: f64,
) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::validation(format!("gamma {gamma} outside [0,1]")));
    }
    if control_map.h() != z0_hat.h() || control_map.w() != z0_hat.w() {
        return Err(Error::shape(
            "apply_control",
            format!("{}x{}", z0_hat.h(), z0_hat.w()),
            format!("{}x{}", control_map.h(), control_map.w()),
        ));
    }
    if layout.height() != z0_hat.h() || layout.width() != z0_hat.w() {
        return Err(Error::shape(
            "apply_control layout",
            format!("{}x{}", z0_hat.h(), z0_hat.w()),
            format!("{}x{}", layout.height(), layout.width()),
        ));
    }
    let owner = owner_map(layout);
    let targets = snap_targets(z0_hat, palette, layout, &owner);
    apply_control_impl(z0_hat, control_map, &owner, &targets, gamma)
}

/// Full denoiser output: controlled clean estimate, the algebraically
/// consistent noise estimate, and the per-region component posteriors.
#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub z0_hat: LatentGrid,
    pub eps_hat: LatentGrid,
    pub region_responsibilities: Vec<Vec<f64>>,
}

/// Closed-form conditional denoiser bound to one palette and conditioning.
/// The region partition and owner map are precomputed at construction.
pub struct ExactDenoiser {
    palette: Palette,
    conditioning: Conditioning,
    partition: Vec<Vec<usize>>,
    owner: Vec<usize>,
}

impl ExactDenoiser {
    pub fn new(palette: Palette, conditioning: Conditioning) -> Result<Self> {
        conditioning.validate_against(&palette)?;
        let partition = region_partition(conditioning.layout());
        let owner = owner_map(conditioning.layout());
        Ok(ExactDenoiser {
            palette,
            conditioning,
            partition,
            owner,
        })
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn conditioning(&self) -> &Conditioning {
        &self.conditioning
    }

    /// Exact posterior denoise of `z_t`: per-region component posteriors,
    /// responsibility-weighted posterior-mean clean estimate, edge control,
    /// and the eps estimate that reproduces `z_t` exactly through the
    /// forward map.
    pub fn denoise(&self, z_t: &LatentGrid, t: usize, schedule: &NoiseSchedule) -> Result<DenoiseOutput> {
        let layout = self.conditioning.layout();
        if z_t.h() != layout.height() || z_t.w() != layout.width() {
            return Err(Error::shape(
                "denoise",
                format!("{}x{}", layout.height(), layout.width()),
                format!("{}x{}", z_t.h(), z_t.w()),
            ));
        }
        let ab = schedule.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(Error::Singularity(format!(
                "alpha_bar({t}) = {ab}; eps is undefined without noise"
            )));
        }
        let comps: Vec<[f64; 3]> = self.palette.all_components().map(|(_, _, c)| c.mean).collect();
        let sigma0 = self.palette.pixel_sigma();
        let mut resp_all = Vec::with_capacity(self.partition.len());
        let mut z0 = LatentGrid::zeros(z_t.h(), z_t.w())?;
        for (r, region) in self.partition.iter().enumerate() {
            let resp = region_responsibilities(
                z_t,
                region,
                &self.conditioning.region_priors()[r],
                &self.palette,
                t,
                schedule,
            )?;
            let active: Vec<(usize, f64)> = resp
                .iter()
                .copied()
                .enumerate()
                .filter(|(_, p)| *p > 0.0)
                .collect();
            for &i in region {
                let base = i * 3;
                let pix = [z_t.data()[base], z_t.data()[base + 1], z_t.data()[base + 2]];
                let mut acc = [0.0f64; 3];
                for (k, p) in &active {
                    let m = gaussian_posterior_mean(pix, comps[*k], sigma0, ab);
                    acc[0] += p * m[0];
                    acc[1] += p * m[1];
                    acc[2] += p * m[2];
                }
                z0.data_mut()[base] = acc[0];
                z0.data_mut()[base + 1] = acc[1];
                z0.data_mut()[base + 2] = acc[2];
            }
            resp_all.push(resp);
        }
        let targets = snap_targets(&z0, &self.palette, layout, &self.owner);
        let z0 = apply_control_impl(
            &z0,
            self.conditioning.control_map(),
            &self.owner,
            &targets,
            self.conditioning.gamma(),
        )?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps_hat = z_t.zip_map(&z0, |z, x| (z - sa * x) / sb)?;
        Ok(DenoiseOutput {
            z0_hat: z0,
            eps_hat,
            region_responsibilities: resp_all,
        })
    }
}

impl diffusion::Denoiser for ExactDenoiser {
    fn predict_eps(&self, z_t: &LatentGrid, t: usize, schedule: &NoiseSchedule) -> Result<LatentGrid> {
        Ok(self.denoise(z_t, t, schedule)?.eps_hat)
    }
}
