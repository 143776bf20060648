//! Noise schedules and sampling-step grids.
//!
//! The base forward process is variance preserving over integer steps
//! `t = 0..T`: a clean sample is corrupted to `alpha_t x + sigma_t eps` where
//! `alpha_t^2` follows the squared quadratic polynomial `(1 - (t/T)^2)^2`,
//! squeezed into `[precision, 1 - precision]` by an affine map so it stays
//! strictly monotone, and `sigma_t = sqrt(1 - alpha_t^2)`. Keeping the
//! precision floor on `alpha^2` rather than on `alpha` bounds the
//! noise-to-signal ratio at `t = T` by `1/sqrt(precision)`, which is what
//! keeps the first denoising step of any sampler numerically sane.
//!
//! Few-step samplers walk a [`NoiseGrid`]: either uniformly spaced steps, or
//! steps placed by inverting the EDM sigma ladder
//! `sigma_i = (sigma_max^(1/rho) + i/(N-1) (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`
//! through the variance-preserving relation, which gives
//! `t/T = sqrt(1 - sqrt(1 - (i/(N-1))^(2 rho)))`. Grids are emitted from high
//! noise to low, carry the continuous step fraction alongside the rounded
//! integer step, and deduplicate rounding collisions by nudging later entries
//! up one step.

use crate::{Error, Result};
use std::io::Write;

/// Variance-preserving schedule over integer steps `0..=t_total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseSchedule {
    t_total: usize,
    precision: f64,
}

impl Default for BaseSchedule {
    fn default() -> Self {
        BaseSchedule::new(1000).unwrap()
    }
}

impl BaseSchedule {
    pub const PRECISION: f64 = 1e-5;

    pub fn new(t_total: usize) -> Result<Self> {
        if t_total < 2 {
            return Err(Error::invalid("schedule needs at least 2 steps"));
        }
        Ok(BaseSchedule {
            t_total,
            precision: Self::PRECISION,
        })
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    /// Signal coefficient at step `t`, strictly decreasing from
    /// `sqrt(1 - precision)` at `t = 0` to `sqrt(precision)` at `t = T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t <= self.t_total, "step {t} beyond schedule end {}", self.t_total);
        let frac = t as f64 / self.t_total as f64;
        let poly = 1.0 - frac * frac;
        ((1.0 - 2.0 * self.precision) * poly * poly + self.precision).sqrt()
    }

    /// Noise coefficient at step `t`, defined so `alpha^2 + sigma^2 = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        let a = self.alpha(t);
        (1.0 - a * a).sqrt()
    }

    pub fn alpha_sigma(&self, t: usize) -> (f64, f64) {
        (self.alpha(t), self.sigma(t))
    }
}

/// One sampling step: the rounded integer step, the continuous step fraction
/// it was rounded from, and the schedule coefficients at the integer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridEntry {
    pub t: usize,
    pub t_frac: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Sampling steps ordered from high noise (first) to low noise (last).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid {
    entries: Vec<GridEntry>,
}

impl NoiseGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GridEntry] {
        &self.entries
    }

    /// Builds a grid from explicit integer steps, highest noise first. The
    /// standard ladders run from `T` down to `0`, but a hand-picked ladder
    /// only has to be strictly decreasing and within the base range.
    pub fn from_steps(steps: &[usize], base: &BaseSchedule) -> Result<NoiseGrid> {
        if steps.len() < 2 {
            return Err(Error::invalid("a sampling grid needs at least two steps"));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("grid steps must strictly decrease"));
        }
        if steps[0] > base.t_total() {
            return Err(Error::invalid(format!(
                "grid step {} exceeds the base range {}",
                steps[0],
                base.t_total()
            )));
        }
        let t_total = base.t_total() as f64;
        let entries = steps
            .iter()
            .map(|&t| {
                let (alpha, sigma) = base.alpha_sigma(t);
                GridEntry {
                    t,
                    t_frac: t as f64 / t_total,
                    alpha,
                    sigma,
                }
            })
            .collect();
        Ok(NoiseGrid { entries })
    }

    pub fn entry(&self, k: usize) -> GridEntry {
        self.entries[k]
    }

    /// Fraction of entries whose continuous step fraction falls below
    /// `threshold`. Uses the pre-rounding fractions, so it reflects where the
    /// ladder put mass rather than where rounding collisions pushed steps.
    pub fn frac_below(&self, threshold: f64) -> f64 {
        let hits = self.entries.iter().filter(|e| e.t_frac < threshold).count();
        hits as f64 / self.entries.len() as f64
    }

    /// Writes `i,t,alpha,sigma` rows in emitted (high-noise-first) order.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "i,t,alpha,sigma")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(w, "{i},{},{:.11e},{:.11e}", e.t, e.alpha, e.sigma)?;
        }
        Ok(())
    }
}

/// Grid placement rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridKind {
    Uniform,
    Respaced { rho: f64 },
}

impl GridKind {
    pub fn build(&self, n: usize, base: &BaseSchedule) -> Result<NoiseGrid> {
        match *self {
            GridKind::Uniform => uniform_grid(n, base),
            GridKind::Respaced { rho } => respace(n, rho, base),
        }
    }
}

/// Rounds half away from zero: `0.5 -> 1`, `-0.5 -> -1`.
pub(crate) fn round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

/// Geometric-like sigma ladder, descending from `sigma_max` to `sigma_min`.
pub fn edm_sigmas(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("sigma ladder needs at least 2 entries"));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(Error::invalid(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let lo = sigma_min.powf(1.0 / rho);
    let hi = sigma_max.powf(1.0 / rho);
    Ok((0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            (hi + frac * (lo - hi)).powf(rho)
        })
        .collect())
}

/// Continuous step fraction for ladder index `i` of `n`: the sigma ladder with
/// `sigma_min -> 0`, `sigma_max -> 1` pulled back through the
/// variance-preserving relation `sigma(t)^2 = 1 - (1 - (t/T)^2)^2`.
fn respace_frac(i: usize, n: usize, rho: f64) -> f64 {
    let frac = i as f64 / (n - 1) as f64;
    let u = frac.powf(2.0 * rho);
    (1.0 - (1.0 - u).sqrt()).sqrt()
}

fn grid_from_ascending(ts: Vec<(usize, f64)>, base: &BaseSchedule) -> Result<NoiseGrid> {
    let t_total = base.t_total();
    // Resolve rounding collisions: walk low to high, pushing duplicates up by
    // one step. If the cascade runs past t_total (the ladder was locally
    // denser than one entry per step), a second pass walks high to low and
    // pulls entries back under the ceiling; n <= t_total + 1 guarantees room.
    let mut fixed: Vec<(usize, f64)> = Vec::with_capacity(ts.len());
    for (t, frac) in ts {
        let t = match fixed.last() {
            Some(&(prev, _)) if t <= prev => prev + 1,
            _ => t,
        };
        fixed.push((t, frac));
    }
    if fixed.last().is_some_and(|&(t, _)| t > t_total) {
        let n = fixed.len();
        fixed[n - 1].0 = t_total;
        for i in (0..n - 1).rev() {
            let cap = fixed[i + 1].0 - 1;
            if fixed[i].0 > cap {
                fixed[i].0 = cap;
            }
        }
    }
    debug_assert!(fixed.windows(2).all(|w| w[0].0 < w[1].0));
    let mut entries: Vec<GridEntry> = fixed
        .into_iter()
        .map(|(t, t_frac)| {
            let (alpha, sigma) = base.alpha_sigma(t);
            GridEntry { t, t_frac, alpha, sigma }
        })
        .collect();
    entries.reverse(); // emit high noise first
    Ok(NoiseGrid { entries })
}

fn check_grid_size(n: usize, base: &BaseSchedule) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid("grid needs at least 2 entries"));
    }
    if n > base.t_total() + 1 {
        return Err(Error::invalid(format!(
            "cannot place {n} distinct steps in 0..={}",
            base.t_total()
        )));
    }
    Ok(())
}

/// Uniformly spaced steps from `t_total` down to 0.
pub fn uniform_grid(n: usize, base: &BaseSchedule) -> Result<NoiseGrid> {
    check_grid_size(n, base)?;
    let t_total = base.t_total() as f64;
    let ts = (0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            (round_half_away(frac * t_total) as usize, frac)
        })
        .collect();
    grid_from_ascending(ts, base)
}

/// Steps placed by the inverted sigma ladder, from `t_total` down to 0.
/// Large `rho` piles steps into the low-noise end.
pub fn respace(n: usize, rho: f64, base: &BaseSchedule) -> Result<NoiseGrid> {
    check_grid_size(n, base)?;
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let t_total = base.t_total() as f64;
    let ts = (0..n)
        .map(|i| {
            let frac = respace_frac(i, n, rho);
            (round_half_away(frac * t_total) as usize, frac)
        })
        .collect();
    grid_from_ascending(ts, base)
}
