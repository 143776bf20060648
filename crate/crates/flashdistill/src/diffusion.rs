//! Forward corruption, the denoising training loss, and the two samplers.
//!
//! Corruption follows the variance-preserving convention `y = alpha x +
//! sigma eps` with the coordinate block of `eps` projected to zero center of
//! mass, so corrupted clouds never leave the centered subspace. The loss is
//! the mean squared error between predicted and drawn noise on both blocks,
//! normalized per node.
//!
//! Both samplers walk a [`NoiseGrid`] from high noise to low and spend one
//! network evaluation per grid entry. The deterministic sampler re-noises
//! with the predicted noise itself; the few-step sampler re-noises with a
//! fresh draw per step and treats the network in x0-prediction form
//! `x = (z - sigma eps_hat) / alpha`. Sampler cores take the predictor as a
//! closure so an analytic score can stand in for the network.

use crate::egnn::{self, NetSpec, Seeds};
use crate::geom::{zero_com_project_in_place, PointSet};
use crate::netgrad::{GradReport, ParamVector};
use crate::rng::RngStream;
use crate::schedule::{BaseSchedule, NoiseGrid};
use crate::{Error, Result};

/// A corrupted cloud together with the exact noise that produced it.
#[derive(Debug, Clone)]
pub struct CorruptedSample {
    pub noisy: PointSet,
    pub eps: PointSet,
    pub t: usize,
    pub alpha: f64,
    pub sigma: f64,
}

/// Standard Gaussian draw shaped like a cloud, coordinate block centered.
pub fn draw_noise(n: usize, d: usize, rng: &mut RngStream) -> PointSet {
    let mut coords = rng.normal_vec(n * 3);
    zero_com_project_in_place(&mut coords, n);
    let feats = rng.normal_vec(n * d);
    PointSet::new(n, d, coords, feats).expect("gaussian draws are finite")
}

/// Diffuses `p` to step `t`: `y = alpha p + sigma eps` with freshly drawn,
/// coordinate-centered noise.
pub fn corrupt(p: &PointSet, t: usize, base: &BaseSchedule, rng: &mut RngStream) -> CorruptedSample {
    let eps = draw_noise(p.n_nodes(), p.feat_dim(), rng);
    corrupt_with(p, t, base, eps)
}

/// Deterministic corruption with caller-supplied noise.
pub fn corrupt_with(p: &PointSet, t: usize, base: &BaseSchedule, eps: PointSet) -> CorruptedSample {
    let (alpha, sigma) = base.alpha_sigma(t);
    let coords = p
        .coords()
        .iter()
        .zip(eps.coords())
        .map(|(x, e)| alpha * x + sigma * e)
        .collect();
    let feats = p
        .feats()
        .iter()
        .zip(eps.feats())
        .map(|(x, e)| alpha * x + sigma * e)
        .collect();
    let noisy = PointSet::new(p.n_nodes(), p.feat_dim(), coords, feats)
        .expect("corruption of finite inputs stays finite");
    CorruptedSample {
        noisy,
        eps,
        t,
        alpha,
        sigma,
    }
}

/// Noise level and draw used for one training sample.
#[derive(Debug, Clone)]
pub struct EpsDraw {
    pub t: usize,
    pub eps: PointSet,
}

/// Draws one `(t, eps)` pair per batch entry, with `t` uniform over
/// `[round(t_min_frac T), T]`.
pub fn draw_eps_batch(
    batch: &[PointSet],
    base: &BaseSchedule,
    rng: &mut RngStream,
    t_min_frac: f64,
) -> Vec<EpsDraw> {
    let t_lo = crate::schedule::round_half_away(t_min_frac * base.t_total() as f64) as usize;
    batch
        .iter()
        .map(|p| EpsDraw {
            t: rng.uniform_int(t_lo, base.t_total()),
            eps: draw_noise(p.n_nodes(), p.feat_dim(), rng),
        })
        .collect()
}

/// Denoising loss over a batch: each sample is corrupted at its own noise
/// level, the network predicts the noise, and the squared error on both
/// blocks is averaged per node and then over the batch. Conditioning values,
/// when present, are per sample.
pub fn eps_loss(
    spec: &NetSpec,
    params: &ParamVector,
    batch: &[PointSet],
    conds: Option<&[f64]>,
    base: &BaseSchedule,
    rng: &mut RngStream,
    t_min_frac: f64,
) -> Result<GradReport> {
    let draws = draw_eps_batch(batch, base, rng, t_min_frac);
    eps_loss_with_draws(spec, params, batch, conds, base, &draws)
}

/// Deterministic form of [`eps_loss`] with noise levels and draws supplied by
/// the caller; this is the entry point for gradient checking.
pub fn eps_loss_with_draws(
    spec: &NetSpec,
    params: &ParamVector,
    batch: &[PointSet],
    conds: Option<&[f64]>,
    base: &BaseSchedule,
    draws: &[EpsDraw],
) -> Result<GradReport> {
    if batch.is_empty() {
        return Err(Error::invalid("denoising loss needs a non-empty batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::invalid("one noise draw per batch entry required"));
    }
    if let Some(c) = conds {
        if c.len() != batch.len() {
            return Err(Error::invalid("one conditioning value per batch entry required"));
        }
    }
    let mut report = GradReport::zeros(spec.layout());
    let inv_b = 1.0 / batch.len() as f64;
    for (i, (p, draw)) in batch.iter().zip(draws).enumerate() {
        let cond = conds.map(|c| c[i]);
        let sample = corrupt_with(p, draw.t, base, draw.eps.clone());
        let (out, trace) = egnn::forward_traced(spec, params, &sample.noisy, draw.t, base, cond)?;
        let inv_n = 1.0 / p.n_nodes() as f64;
        let mut seed_x = vec![0.0; out.eps_x.len()];
        let mut seed_h = vec![0.0; out.eps_h.len()];
        for ((s, pred), target) in seed_x.iter_mut().zip(&out.eps_x).zip(sample.eps.coords()) {
            let r = pred - target;
            report.loss += r * r * inv_n * inv_b;
            *s = 2.0 * r * inv_n * inv_b;
        }
        for ((s, pred), target) in seed_h.iter_mut().zip(&out.eps_h).zip(sample.eps.feats()) {
            let r = pred - target;
            report.loss += r * r * inv_n * inv_b;
            *s = 2.0 * r * inv_n * inv_b;
        }
        let seeds = Seeds {
            eps_x: Some(seed_x),
            eps_h: Some(seed_h),
            ..Default::default()
        };
        let g = egnn::backward(spec, params, &trace, &seeds);
        report.grad.add_scaled(1.0, &g);
    }
    Ok(report)
}

fn finite_cloud(n: usize, d: usize, coords: Vec<f64>, feats: Vec<f64>, stage: &str) -> Result<PointSet> {
    PointSet::new(n, d, coords, feats)
        .map_err(|_| Error::numeric(format!("non-finite values during {stage}")))
}

/// x0-prediction `x = (z - sigma eps_hat) / alpha`, coordinate block
/// re-centered. Returns the pre-projection center-of-mass drift so callers
/// can log whether the update itself stayed in the centered subspace.
pub fn denoise_to_x0(z: &PointSet, eps_hat: &PointSet, alpha: f64, sigma: f64) -> Result<(PointSet, f64)> {
    if alpha < BaseSchedule::PRECISION {
        return Err(Error::numeric(format!(
            "signal coefficient {alpha} below the schedule floor"
        )));
    }
    if z.n_nodes() != eps_hat.n_nodes() || z.feat_dim() != eps_hat.feat_dim() {
        return Err(Error::invalid("state and noise prediction shapes differ"));
    }
    let mut coords: Vec<f64> = z
        .coords()
        .iter()
        .zip(eps_hat.coords())
        .map(|(zv, e)| (zv - sigma * e) / alpha)
        .collect();
    let feats = z
        .feats()
        .iter()
        .zip(eps_hat.feats())
        .map(|(zv, e)| (zv - sigma * e) / alpha)
        .collect();
    let drift = raw_drift(&coords, z.n_nodes());
    zero_com_project_in_place(&mut coords, z.n_nodes());
    let x = finite_cloud(z.n_nodes(), z.feat_dim(), coords, feats, "x0 prediction")?;
    Ok((x, drift))
}

fn raw_drift(coords: &[f64], n: usize) -> f64 {
    let mut mean = [0.0; 3];
    for row in coords.chunks_exact(3) {
        for a in 0..3 {
            mean[a] += row[a];
        }
    }
    mean.iter().map(|m| (m / n as f64).abs()).fold(0.0, f64::max)
}

/// Re-noises a clean prediction to a lower grid level: `z = alpha x +
/// sigma eps`, coordinate block re-centered; also reports pre-projection
/// drift.
pub fn renoise(x: &PointSet, eps: &PointSet, alpha: f64, sigma: f64) -> Result<(PointSet, f64)> {
    if x.n_nodes() != eps.n_nodes() || x.feat_dim() != eps.feat_dim() {
        return Err(Error::invalid("state and noise shapes differ"));
    }
    let mut coords: Vec<f64> = x
        .coords()
        .iter()
        .zip(eps.coords())
        .map(|(xv, e)| alpha * xv + sigma * e)
        .collect();
    let feats = x
        .feats()
        .iter()
        .zip(eps.feats())
        .map(|(xv, e)| alpha * xv + sigma * e)
        .collect();
    let drift = raw_drift(&coords, x.n_nodes());
    zero_com_project_in_place(&mut coords, x.n_nodes());
    let z = finite_cloud(x.n_nodes(), x.feat_dim(), coords, feats, "re-noising")?;
    Ok((z, drift))
}

/// Deterministic multi-step sampler over a predictor closure. One evaluation
/// per grid entry; between entries the state is rebuilt from the current
/// x0-prediction and the same predicted noise. Returns the final
/// x0-prediction and the per-step pre-projection drift log.
pub fn ddim_from<F>(
    eps_fn: &mut F,
    grid: &NoiseGrid,
    z0: PointSet,
) -> Result<(PointSet, Vec<f64>)>
where
    F: FnMut(&PointSet, usize) -> Result<PointSet>,
{
    let entries = grid.entries();
    let mut z = z0;
    let mut drifts = Vec::with_capacity(2 * entries.len());
    let mut x = None;
    for (i, e) in entries.iter().enumerate() {
        let eps_hat = eps_fn(&z, e.t)?;
        let (xi, dx) = denoise_to_x0(&z, &eps_hat, e.alpha, e.sigma)?;
        drifts.push(dx);
        if i + 1 < entries.len() {
            let next = entries[i + 1];
            let (zn, dz) = renoise(&xi, &eps_hat, next.alpha, next.sigma)?;
            drifts.push(dz);
            z = zn;
        }
        x = Some(xi);
    }
    Ok((x.expect("grids have at least two entries"), drifts))
}

/// Runs the first `k - 1` few-step iterations (predict, denoise, re-noise
/// with fresh noise) and returns the state entering the final application,
/// plus the drift log so far.
pub fn consistency_prefix<F>(
    eps_fn: &mut F,
    grid: &NoiseGrid,
    k: usize,
    z0: PointSet,
    step_eps: &[PointSet],
) -> Result<(PointSet, Vec<f64>)>
where
    F: FnMut(&PointSet, usize) -> Result<PointSet>,
{
    if k == 0 {
        return Err(Error::invalid("few-step sampling needs at least one step"));
    }
    if k > grid.len() {
        return Err(Error::invalid(format!(
            "{k} steps requested from a grid of {} entries",
            grid.len()
        )));
    }
    if step_eps.len() != k - 1 {
        return Err(Error::invalid(format!(
            "{k}-step sampling needs {} re-noising draws, got {}",
            k - 1,
            step_eps.len()
        )));
    }
    let mut z = z0;
    let mut drifts = Vec::with_capacity(2 * k);
    for s in 0..k - 1 {
        let e = grid.entry(s);
        let eps_hat = eps_fn(&z, e.t)?;
        let (x, dx) = denoise_to_x0(&z, &eps_hat, e.alpha, e.sigma)?;
        drifts.push(dx);
        let next = grid.entry(s + 1);
        let (zn, dz) = renoise(&x, &step_eps[s], next.alpha, next.sigma)?;
        drifts.push(dz);
        z = zn;
    }
    Ok((z, drifts))
}

/// Few-step sampler over a predictor closure: `k` evaluations on the first
/// `k` grid entries, fresh re-noising draws between them.
pub fn consistency_from<F>(
    eps_fn: &mut F,
    grid: &NoiseGrid,
    k: usize,
    z0: PointSet,
    step_eps: &[PointSet],
) -> Result<(PointSet, Vec<f64>)>
where
    F: FnMut(&PointSet, usize) -> Result<PointSet>,
{
    let (z, mut drifts) = consistency_prefix(eps_fn, grid, k, z0, step_eps)?;
    let e = grid.entry(k - 1);
    let eps_hat = eps_fn(&z, e.t)?;
    let (x, dx) = denoise_to_x0(&z, &eps_hat, e.alpha, e.sigma)?;
    drifts.push(dx);
    Ok((x, drifts))
}

/// Network predictor closure for the sampler cores.
pub fn net_eps_fn<'a>(
    spec: &'a NetSpec,
    params: &'a ParamVector,
    base: &'a BaseSchedule,
    cond: Option<f64>,
) -> impl FnMut(&PointSet, usize) -> Result<PointSet> + 'a {
    move |p: &PointSet, t: usize| {
        let out = egnn::forward(spec, params, p, t, base, cond)?;
        PointSet::new(p.n_nodes(), spec.feat_dim, out.eps_x, out.eps_h)
    }
}

/// Deterministic multi-step sampling with the network, drift log included.
pub fn ddim_sample_traced(
    spec: &NetSpec,
    params: &ParamVector,
    grid: &NoiseGrid,
    base: &BaseSchedule,
    n_nodes: usize,
    rng: &mut RngStream,
    cond: Option<f64>,
) -> Result<(PointSet, Vec<f64>)> {
    let z0 = draw_noise(n_nodes, spec.feat_dim, rng);
    let mut f = net_eps_fn(spec, params, base, cond);
    ddim_from(&mut f, grid, z0)
}

pub fn ddim_sample(
    spec: &NetSpec,
    params: &ParamVector,
    grid: &NoiseGrid,
    base: &BaseSchedule,
    n_nodes: usize,
    rng: &mut RngStream,
    cond: Option<f64>,
) -> Result<PointSet> {
    ddim_sample_traced(spec, params, grid, base, n_nodes, rng, cond).map(|(p, _)| p)
}

/// Few-step sampling with the network, drift log included. Consumes the
/// first `k` grid entries.
pub fn consistency_sample_traced(
    spec: &NetSpec,
    params: &ParamVector,
    grid: &NoiseGrid,
    base: &BaseSchedule,
    k: usize,
    n_nodes: usize,
    rng: &mut RngStream,
    cond: Option<f64>,
) -> Result<(PointSet, Vec<f64>)> {
    let z0 = draw_noise(n_nodes, spec.feat_dim, rng);
    let step_eps: Vec<PointSet> = (0..k.saturating_sub(1))
        .map(|_| draw_noise(n_nodes, spec.feat_dim, rng))
        .collect();
    let mut f = net_eps_fn(spec, params, base, cond);
    consistency_from(&mut f, grid, k, z0, &step_eps)
}

pub fn consistency_sample(
    spec: &NetSpec,
    params: &ParamVector,
    grid: &NoiseGrid,
    base: &BaseSchedule,
    k: usize,
    n_nodes: usize,
    rng: &mut RngStream,
    cond: Option<f64>,
) -> Result<PointSet> {
    consistency_sample_traced(spec, params, grid, base, k, n_nodes, rng, cond).map(|(p, _)| p)
}
