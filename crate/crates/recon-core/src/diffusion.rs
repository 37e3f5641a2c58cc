//! DDIM machinery over the cumulative-product noise schedule.
//!
//! Conventions used everywhere: timesteps are 0-based indices `t in 0..T`,
//! `alpha_bar(t)` is the cumulative product of `1 - beta` up to and including
//! `t`, the forward map is `z_t = sqrt(alpha_bar) z_0 + sqrt(1-alpha_bar) eps`,
//! and reverse steps are deterministic (eta = 0): each step re-estimates z_0
//! and re-noises it to the previous grid timestep. A step whose target is the
//! end of the trajectory returns the clean estimate itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::toyworld::LatentGrid;

/// Beta schedule plus everything derived from it, including the DDIM
/// sub-grid. Construction validates the whole contract, so a value of this
/// type is always usable.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bar: Vec<f64>,
    ddim_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas and a DDIM step count.
    ///
    /// Validates: T >= 2, each beta in (0,1), alpha_bar strictly decreasing
    /// with alpha_bar(0) > 0.99 and alpha_bar(T-1) < 0.01, and
    /// 2 <= num_ddim_steps <= T. The DDIM grid is evenly spaced from T-1
    /// down to 0, both endpoints included.
    pub fn from_betas(betas: Vec<f64>, num_ddim_steps: usize) -> Result<Self> {
        let t_total = betas.len();
        if t_total < 2 {
            return Err(Error::validation("schedule needs at least 2 timesteps"));
        }
        for (t, b) in betas.iter().enumerate() {
            if !(*b > 0.0 && *b < 1.0) {
                return Err(Error::validation(format!("beta[{t}] = {b} outside (0,1)")));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_total);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bar.push(prod);
        }
        if alpha_bar[0] <= 0.99 {
            return Err(Error::validation(format!(
                "alpha_bar at t=0 is {}, must exceed 0.99",
                alpha_bar[0]
            )));
        }
        if alpha_bar[t_total - 1] >= 0.01 {
            return Err(Error::validation(format!(
                "alpha_bar at t=T-1 is {}, must be below 0.01",
                alpha_bar[t_total - 1]
            )));
        }
        if !(2..=t_total).contains(&num_ddim_steps) {
            return Err(Error::validation(format!(
                "num_ddim_steps {num_ddim_steps} outside 2..={t_total}"
            )));
        }
        let n = num_ddim_steps;
        let ddim_steps: Vec<usize> = (0..n)
            .map(|i| (((t_total - 1) * (n - 1 - i)) as f64 / (n - 1) as f64).round() as usize)
            .collect();
        if !ddim_steps.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::validation("ddim grid is not strictly decreasing"));
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bar,
            ddim_steps,
        })
    }

    /// The standard linear schedule.
    pub fn linear(t_total: usize, beta_start: f64, beta_end: f64, num_ddim_steps: usize) -> Result<Self> {
        if t_total < 2 {
            return Err(Error::validation("schedule needs at least 2 timesteps"));
        }
        let betas = (0..t_total)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64)
            .collect();
        NoiseSchedule::from_betas(betas, num_ddim_steps)
    }

    /// Default schedule used throughout: T = 1000, betas 1e-4..0.02, 25 steps.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02, 25).expect("static schedule")
    }

    pub fn t_total(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..{}", self.t_total())))
    }

    /// Timesteps visited by the deterministic sampler, strictly decreasing,
    /// first = T-1 and last = 0.
    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// Position of a timestep in the DDIM grid, if it lies on it.
    pub fn ddim_index_of(&self, t: usize) -> Option<usize> {
        self.ddim_steps.iter().position(|s| *s == t)
    }

    /// Grid timestep nearest to `t`; equidistant pairs resolve to the larger
    /// (earlier) timestep.
    pub fn nearest_ddim_step(&self, t: usize) -> usize {
        let mut best = self.ddim_steps[0];
        let mut best_d = usize::MAX;
        for s in &self.ddim_steps {
            let d = s.abs_diff(t);
            if d < best_d || (d == best_d && *s > best) {
                best = *s;
                best_d = d;
            }
        }
        best
    }
}

/// Standard normal grid from a dedicated seeded stream (row-major pixels,
/// channels innermost).
pub fn draw_noise(h: usize, w: usize, seed: u64) -> Result<LatentGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = LatentGrid::zeros(h, w)?;
    for v in grid.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    Ok(grid)
}

/// Forward map: z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps.
pub fn noise_to_t(z0: &LatentGrid, eps: &LatentGrid, t: usize, schedule: &NoiseSchedule) -> Result<LatentGrid> {
    let ab = schedule.alpha_bar(t)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| sa * z + sb * e)
}

/// Inverts the forward map given the noise estimate:
/// z_0 = (z_t - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar).
pub fn predict_z0(z_t: &LatentGrid, eps: &LatentGrid, t: usize, schedule: &NoiseSchedule) -> Result<LatentGrid> {
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Singularity(format!(
            "alpha_bar({t}) = {ab}; cannot divide by sqrt(alpha_bar)"
        )));
    }
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps, |z, e| (z - sb * e) / sa)
}

/// One deterministic reverse step. `t_prev = None` ends the trajectory and
/// returns the clean estimate; otherwise `t_prev` must be a smaller timestep.
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let z0_hat = predict_z0(z_t, eps_hat, t, schedule)?;
    match t_prev {
        None => Ok(z0_hat),
        Some(tp) => {
            if tp >= t {
                return Err(Error::invalid(format!(
                    "ddim_step: t_prev {tp} must be below t {t}"
                )));
            }
            let ab = schedule.alpha_bar(tp)?;
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            z0_hat.zip_map(eps_hat, |z, e| sa * z + sb * e)
        }
    }
}

/// Anything that can predict the forward noise for a latent at timestep t.
pub trait Denoiser {
    fn predict_eps(&self, z_t: &LatentGrid, t: usize, schedule: &NoiseSchedule) -> Result<LatentGrid>;
}

/// A latent-rewrite callback bound to a timestep predicate. After the sampler
/// computes the latent at a grid timestep t with `applies_at(t)`, `rewrite`
/// replaces it. The rewrite must preserve the grid shape; a mismatch aborts
/// the run as a contract violation.
pub struct Hook<'a> {
    pub applies_at: Box<dyn Fn(usize) -> bool + 'a>,
    pub rewrite: Box<dyn FnMut(&LatentGrid, usize) -> Result<LatentGrid> + 'a>,
}

impl<'a> Hook<'a> {
    pub fn new(
        applies_at: impl Fn(usize) -> bool + 'a,
        rewrite: impl FnMut(&LatentGrid, usize) -> Result<LatentGrid> + 'a,
    ) -> Self {
        Hook {
            applies_at: Box::new(applies_at),
            rewrite: Box::new(rewrite),
        }
    }
}

/// One sampler visit: the grid timestep and whether any hook rewrote the
/// latent there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEvent {
    pub t: usize,
    pub hook_applied: bool,
}

/// Mid-trajectory sampler position: the latent sits at
/// `schedule.ddim_steps()[step_index]`. `initial_noise` is the z_T draw kept
/// for later reuse; `rng_seed` is the run seed that produced it.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub z: LatentGrid,
    pub step_index: usize,
    pub initial_noise: LatentGrid,
    pub rng_seed: u64,
}

fn apply_hooks(z: &mut LatentGrid, t: usize, hooks: &mut [Hook<'_>]) -> Result<bool> {
    let mut applied = false;
    for hook in hooks.iter_mut() {
        if (hook.applies_at)(t) {
            let replacement = (hook.rewrite)(z, t)?;
            if !replacement.same_shape(z) {
                return Err(Error::ContractViolation(format!(
                    "hook rewrite at t={t} changed the grid shape to {}x{}",
                    replacement.h(),
                    replacement.w()
                )));
            }
            *z = replacement;
            applied = true;
        }
    }
    Ok(applied)
}

/// Runs the deterministic sampler from `start_index` on the DDIM grid.
/// Hooks fire at every visited grid timestep, including the starting one.
fn run_from(
    z_init: LatentGrid,
    start_index: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    hooks: &mut [Hook<'_>],
) -> Result<(LatentGrid, Vec<StepEvent>)> {
    let steps = schedule.ddim_steps();
    debug_assert!(start_index < steps.len());
    let mut z = z_init;
    let mut events = Vec::with_capacity(steps.len() - start_index);
    let applied = apply_hooks(&mut z, steps[start_index], hooks)?;
    events.push(StepEvent {
        t: steps[start_index],
        hook_applied: applied,
    });
    for i in start_index..steps.len() {
        let t = steps[i];
        let eps_hat = denoiser.predict_eps(&z, t, schedule)?;
        if !eps_hat.same_shape(&z) {
            return Err(Error::ContractViolation(format!(
                "denoiser returned {}x{} noise for a {}x{} latent",
                eps_hat.h(),
                eps_hat.w(),
                z.h(),
                z.w()
            )));
        }
        let t_prev = steps.get(i + 1).copied();
        z = ddim_step(&z, &eps_hat, t, t_prev, schedule)?;
        if let Some(tp) = t_prev {
            let applied = apply_hooks(&mut z, tp, hooks)?;
            events.push(StepEvent {
                t: tp,
                hook_applied: applied,
            });
        }
    }
    Ok((z, events))
}

/// Full deterministic sampling pass from pure noise. The caller draws z_T
/// (see [`draw_noise`]); the returned trace holds one event per visited grid
/// timestep in visit order.
pub fn sample_loop(
    z_t_initial: LatentGrid,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    hooks: &mut [Hook<'_>],
) -> Result<(LatentGrid, Vec<StepEvent>)> {
    run_from(z_t_initial, 0, denoiser, schedule, hooks)
}

/// Result of running the sampler ahead without committing to it. When the
/// trajectory finished, `completed` is set, `z` is the final clean output and
/// `t` reports 0.
#[derive(Debug, Clone)]
pub struct LookaheadResult {
    pub z: LatentGrid,
    pub t: usize,
    pub completed: bool,
}

/// Copies the state and advances `min(n, steps remaining)` reverse steps.
/// `n = 0` is rejected: a zero-step probe is always a caller bug.
pub fn fast_lookahead(
    state: &SamplerState,
    n: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LookaheadResult> {
    if n == 0 {
        return Err(Error::invalid("fast_lookahead: n must be positive"));
    }
    let steps = schedule.ddim_steps();
    if state.step_index >= steps.len() {
        return Err(Error::invalid(format!(
            "fast_lookahead: step_index {} outside the {}-step grid",
            state.step_index,
            steps.len()
        )));
    }
    let remaining = steps.len() - state.step_index;
    let k = n.min(remaining);
    let mut z = state.z.clone();
    for j in 0..k {
        let i = state.step_index + j;
        let t = steps[i];
        let eps_hat = denoiser.predict_eps(&z, t, schedule)?;
        z = ddim_step(&z, &eps_hat, t, steps.get(i + 1).copied(), schedule)?;
    }
    if state.step_index + k == steps.len() {
        Ok(LookaheadResult {
            z,
            t: 0,
            completed: true,
        })
    } else {
        Ok(LookaheadResult {
            z,
            t: steps[state.step_index + k],
            completed: false,
        })
    }
}

/// Edit-by-renoising: forward-noises the original to the grid timestep
/// nearest round(strength * (T-1)) with a fresh seeded draw, then runs the
/// plain loop from there. Strength must lie in (0, 1].
pub fn sdedit_sample(
    x_orig: &LatentGrid,
    strength: f64,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LatentGrid> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::invalid(format!("sdedit strength {strength} outside (0,1]")));
    }
    let t_raw = (strength * (schedule.t_total() - 1) as f64).round() as usize;
    let t_start = schedule.nearest_ddim_step(t_raw);
    let start_index = schedule.ddim_index_of(t_start).expect("nearest step is on the grid");
    let eps = draw_noise(x_orig.h(), x_orig.w(), seed)?;
    let z = noise_to_t(x_orig, &eps, t_start, schedule)?;
    let (out, _) = run_from(z, start_index, denoiser, schedule, &mut [])?;
    Ok(out)
}
