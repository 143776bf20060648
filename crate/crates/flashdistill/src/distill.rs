//! Distribution-matching gradient assembly for the few-step generator.
//!
//! The generator update direction is the score gap between the frozen
//! teacher and the tracking fake-score model, evaluated at a corrupted
//! student sample and pushed through the last rollout step only. The whole
//! thing is realized as the gradient of the surrogate
//!
//! ```text
//! L = mean_b 1/2 || x_b - stopgrad(x_b - eta h_b (s_fake - s_real)) ||^2
//! ```
//!
//! whose parameter gradient is exactly the weighted score gap contracted
//! with the generator Jacobian. `h` generalizes the objective across
//! f-divergences: constant one recovers reverse KL, the density ratio gives
//! forward KL, and `r/(r+1)` gives Jensen-Shannon, with the ratio read off a
//! discriminator probability. `eta` is a per-batch scale normalizer.
//!
//! The pieces that know about networks live behind [`DmdModel`], so the
//! analytic Gaussian oracle can drive the exact same code path as the
//! point-cloud stack.

use crate::diffusion::corrupt_with;
use crate::disc::{self, DiscSpec};
use crate::egnn::{self, NetSpec};
use crate::geom::{zero_com_project_in_place, PointSet};
use crate::netgrad::{GradReport, Layout, ParamVector};
use crate::rng::RngStream;
use crate::schedule::{BaseSchedule, NoiseGrid};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Divergence whose weighting the generator gradient uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivKind {
    ReverseKl,
    ForwardKl,
    Js,
}

impl std::str::FromStr for DivKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse_kl" => Ok(DivKind::ReverseKl),
            "forward_kl" => Ok(DivKind::ForwardKl),
            "js" => Ok(DivKind::Js),
            other => Err(Error::invalid(format!(
                "unknown divergence '{other}' (expected reverse_kl, forward_kl, or js)"
            ))),
        }
    }
}

impl std::fmt::Display for DivKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DivKind::ReverseKl => "reverse_kl",
            DivKind::ForwardKl => "forward_kl",
            DivKind::Js => "js",
        })
    }
}

/// Weighting configuration for the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSpec {
    pub kind: DivKind,
    /// Mixing coefficient for the Jensen-Shannon term added on top of the
    /// reverse-KL gradient.
    pub lambda_js: f64,
    pub ratio_clamp: (f64, f64),
    /// Per-batch scale normalizer on the score gap; the analytic oracle
    /// tests switch it off because their closed forms assume unit scale.
    pub use_normalizer: bool,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        DivergenceSpec {
            kind: DivKind::ReverseKl,
            lambda_js: 0.1,
            ratio_clamp: (1e-3, 1e3),
            use_normalizer: true,
        }
    }
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_clamp.0 > 0.0 && self.ratio_clamp.0 < self.ratio_clamp.1) {
            return Err(Error::invalid("ratio clamp must satisfy 0 < lo < hi"));
        }
        if !self.lambda_js.is_finite() || self.lambda_js < 0.0 {
            return Err(Error::invalid("lambda_js must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-sample weight `f''(r) r^2` for the chosen divergence.
pub fn fdiv_weight(kind: DivKind, r: f64) -> f64 {
    match kind {
        DivKind::ReverseKl => 1.0,
        DivKind::ForwardKl => r,
        DivKind::Js => r / (r + 1.0),
    }
}

const PROB_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

/// Density ratio from a discriminator's real-class probability, with the
/// probability and the ratio both clamped.
pub fn ratio_from_disc(p_real_prob: f64, ratio_clamp: (f64, f64)) -> f64 {
    let p = p_real_prob.clamp(PROB_CLAMP.0, PROB_CLAMP.1);
    (p / (1.0 - p)).clamp(ratio_clamp.0, ratio_clamp.1)
}

/// Pre-drawn randomness for one generator sample: the prior draw, the
/// re-noising draws for the rollout, the noise level and corruption draw for
/// the score evaluation, and the conditioning value.
#[derive(Debug, Clone)]
pub struct DmdDraw {
    pub z0: PointSet,
    pub rollout_eps: Vec<PointSet>,
    pub t: usize,
    pub corrupt_eps: PointSet,
    pub cond: Option<f64>,
}

impl DmdDraw {
    /// Samples one draw for a `k`-step rollout of an `n x d` cloud; the
    /// score noise level is uniform over `[round(0.02T), round(0.98T)]`.
    pub fn sample(
        n: usize,
        d: usize,
        k: usize,
        base: &BaseSchedule,
        rng: &mut RngStream,
        cond: Option<f64>,
    ) -> DmdDraw {
        let t_total = base.t_total() as f64;
        let lo = crate::schedule::round_half_away(0.02 * t_total) as usize;
        let hi = crate::schedule::round_half_away(0.98 * t_total) as usize;
        DmdDraw {
            z0: crate::diffusion::draw_noise(n, d, rng),
            rollout_eps: (0..k.saturating_sub(1))
                .map(|_| crate::diffusion::draw_noise(n, d, rng))
                .collect(),
            t: rng.uniform_int(lo, hi),
            corrupt_eps: crate::diffusion::draw_noise(n, d, rng),
            cond,
        }
    }
}

/// Everything the distillation step needs from a concrete model family:
/// the student rollout with its last-step pullback, the two score networks,
/// the teacher's clean-sample prediction, and optionally a discriminator.
pub trait DmdModel {
    /// Opaque record of one rollout, enough to pull a cotangent on the final
    /// sample back to generator parameters.
    type Rollout;

    fn base(&self) -> &BaseSchedule;
    fn gen_layout(&self) -> Arc<Layout>;

    /// Few-step student rollout consuming the first `k` grid entries, with
    /// gradients retained only through the final application.
    fn rollout(
        &self,
        grid: &NoiseGrid,
        k: usize,
        draw: &DmdDraw,
    ) -> Result<(PointSet, Self::Rollout)>;

    /// Contract a cotangent on the rollout output with the generator
    /// Jacobian of the final step.
    fn rollout_vjp(&self, rollout: &Self::Rollout, cotangent: &PointSet) -> Result<ParamVector>;

    /// Teacher score at the corrupted sample.
    fn score_real(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<PointSet>;

    /// Tracking fake score at the corrupted sample.
    fn score_fake(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<PointSet>;

    /// Teacher x0-prediction at the corrupted sample, used by the scale
    /// normalizer.
    fn x0_real(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<PointSet>;

    /// Real-class probability of the discriminator, if one is attached.
    fn disc_prob(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<Option<f64>>;
}

/// Generator gradient and per-batch diagnostics.
#[derive(Debug, Clone)]
pub struct DistillGrad {
    pub gen_grad: GradReport,
    pub mean_score_gap: f64,
    pub mean_weight: f64,
    pub eta: f64,
    pub t_values: Vec<usize>,
}

struct SamplePrep<R> {
    rollout: R,
    diff_coords: Vec<f64>,
    diff_feats: Vec<f64>,
    weight: f64,
    shape: (usize, usize),
}

/// Assembles the generator gradient for one batch of pre-drawn samples.
pub fn dmd_step<M: DmdModel>(
    model: &M,
    spec: &DivergenceSpec,
    grid: &NoiseGrid,
    k: usize,
    draws: &[DmdDraw],
) -> Result<DistillGrad> {
    spec.validate()?;
    if draws.is_empty() {
        return Err(Error::invalid("distillation step needs a non-empty batch"));
    }
    let base = model.base();
    let needs_disc = spec.kind != DivKind::ReverseKl || spec.lambda_js > 0.0;

    let mut preps: Vec<SamplePrep<M::Rollout>> = Vec::with_capacity(draws.len());
    let mut norm_sum = 0.0;
    let mut norm_count = 0usize;
    let mut gap_sum = 0.0;
    let mut weight_sum = 0.0;

    for draw in draws {
        let (x, rollout) = model.rollout(grid, k, draw)?;
        let corrupted = corrupt_with(&x, draw.t, base, draw.corrupt_eps.clone());
        let y = corrupted.noisy;
        let s_real = model.score_real(&y, draw.t, draw.cond)?;
        let s_fake = model.score_fake(&y, draw.t, draw.cond)?;

        let diff_coords: Vec<f64> = s_fake
            .coords()
            .iter()
            .zip(s_real.coords())
            .map(|(f, r)| f - r)
            .collect();
        let diff_feats: Vec<f64> = s_fake
            .feats()
            .iter()
            .zip(s_real.feats())
            .map(|(f, r)| f - r)
            .collect();
        if diff_coords.iter().chain(&diff_feats).any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite score gap at t={}",
                draw.t
            )));
        }
        let gap: f64 = diff_coords
            .iter()
            .chain(&diff_feats)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        gap_sum += gap;

        // Weight: plain reverse KL contributes 1; any Jensen-Shannon share
        // needs the discriminator's ratio estimate.
        let weight = if needs_disc {
            let p = model.disc_prob(&y, draw.t, draw.cond)?.ok_or_else(|| {
                Error::invalid("divergence weighting requires a discriminator")
            })?;
            let r = ratio_from_disc(p, spec.ratio_clamp);
            match spec.kind {
                DivKind::ReverseKl => 1.0 + spec.lambda_js * fdiv_weight(DivKind::Js, r),
                kind => fdiv_weight(kind, r),
            }
        } else {
            1.0
        };
        weight_sum += weight;

        if spec.use_normalizer {
            let x0_real = model.x0_real(&y, draw.t, draw.cond)?;
            for (a, b) in x
                .coords()
                .iter()
                .chain(x.feats())
                .zip(x0_real.coords().iter().chain(x0_real.feats()))
            {
                norm_sum += (a - b).abs();
                norm_count += 1;
            }
        }

        preps.push(SamplePrep {
            rollout,
            diff_coords,
            diff_feats,
            weight,
            shape: (x.n_nodes(), x.feat_dim()),
        });
    }

    let eta = if spec.use_normalizer {
        let mean_abs = norm_sum / norm_count as f64;
        if !(mean_abs.is_finite() && mean_abs > 0.0) {
            return Err(Error::numeric(format!(
                "degenerate normalizer {mean_abs} for the distillation step"
            )));
        }
        1.0 / mean_abs
    } else {
        1.0
    };

    let inv_b = 1.0 / draws.len() as f64;
    let mut gen_grad = GradReport::zeros(model.gen_layout());
    for prep in &preps {
        let scale = eta * prep.weight * inv_b;
        let (n, d) = prep.shape;
        let cot_coords: Vec<f64> = prep.diff_coords.iter().map(|v| v * scale).collect();
        let cot_feats: Vec<f64> = prep.diff_feats.iter().map(|v| v * scale).collect();
        gen_grad.loss += 0.5
            * cot_coords
                .iter()
                .chain(&cot_feats)
                .map(|v| v * v)
                .sum::<f64>()
            / inv_b;
        let cotangent = PointSet::new(n, d, cot_coords, cot_feats)?;
        let g = model.rollout_vjp(&prep.rollout, &cotangent)?;
        gen_grad.grad.add_scaled(1.0, &g);
    }
    if !gen_grad.grad.all_finite() || !gen_grad.loss.is_finite() {
        return Err(Error::numeric("non-finite generator gradient"));
    }

    Ok(DistillGrad {
        gen_grad,
        mean_score_gap: gap_sum * inv_b,
        mean_weight: weight_sum * inv_b,
        eta,
        t_values: draws.iter().map(|d| d.t).collect(),
    })
}

/// Point-cloud instantiation of [`DmdModel`]: one architecture shared by the
/// student generator and both score networks, with an optional ratio head
/// reading taps off the fake-score backbone.
#[derive(Debug, Clone)]
pub struct EgnnDmdModel {
    pub net: NetSpec,
    pub base: BaseSchedule,
    pub gen_params: ParamVector,
    pub real_params: ParamVector,
    pub fake_params: ParamVector,
    pub disc: Option<(DiscSpec, ParamVector)>,
}

/// Record of one few-step rollout: the traced final network application and
/// the schedule coefficients it was applied under.
#[derive(Debug)]
pub struct EgnnRollout {
    trace: egnn::EgnnTrace,
    alpha: f64,
    sigma: f64,
    n: usize,
}

impl EgnnDmdModel {
    fn score_from(
        &self,
        params: &ParamVector,
        y: &PointSet,
        t: usize,
        cond: Option<f64>,
    ) -> Result<PointSet> {
        let out = egnn::forward(&self.net, params, y, t, &self.base, cond)?;
        egnn::eps_to_score(&out, y.n_nodes(), self.net.feat_dim, self.base.sigma(t))
    }
}

impl DmdModel for EgnnDmdModel {
    type Rollout = EgnnRollout;

    fn base(&self) -> &BaseSchedule {
        &self.base
    }

    fn gen_layout(&self) -> Arc<Layout> {
        self.net.layout()
    }

    fn rollout(
        &self,
        grid: &NoiseGrid,
        k: usize,
        draw: &DmdDraw,
    ) -> Result<(PointSet, EgnnRollout)> {
        let (z, _) = {
            let mut f =
                crate::diffusion::net_eps_fn(&self.net, &self.gen_params, &self.base, draw.cond);
            crate::diffusion::consistency_prefix(
                &mut f,
                grid,
                k,
                draw.z0.clone(),
                &draw.rollout_eps,
            )?
        };
        let e = grid.entry(k - 1);
        let (out, trace) =
            egnn::forward_traced(&self.net, &self.gen_params, &z, e.t, &self.base, draw.cond)?;
        let n = z.n_nodes();
        let eps_hat = out.to_point_set(n, self.net.feat_dim)?;
        let (x, _) = crate::diffusion::denoise_to_x0(&z, &eps_hat, e.alpha, e.sigma)?;
        Ok((
            x,
            EgnnRollout {
                trace,
                alpha: e.alpha,
                sigma: e.sigma,
                n,
            },
        ))
    }

    fn rollout_vjp(&self, rollout: &EgnnRollout, cotangent: &PointSet) -> Result<ParamVector> {
        // The final application computes x = (z - sigma eps_hat) / alpha with
        // re-centered coordinates, and only eps_hat carries generator
        // parameters, so the seed on each noise block is the cotangent scaled
        // by -sigma/alpha. The coordinate seed is re-centered because the
        // projection is its own adjoint.
        let scale = -rollout.sigma / rollout.alpha;
        let mut seed_x: Vec<f64> = cotangent.coords().iter().map(|v| v * scale).collect();
        zero_com_project_in_place(&mut seed_x, rollout.n);
        let seed_h: Vec<f64> = cotangent.feats().iter().map(|v| v * scale).collect();
        let seeds = egnn::Seeds {
            eps_x: Some(seed_x),
            eps_h: Some(seed_h),
            layer_feats: Vec::new(),
        };
        Ok(egnn::backward(
            &self.net,
            &self.gen_params,
            &rollout.trace,
            &seeds,
        ))
    }

    fn score_real(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<PointSet> {
        self.score_from(&self.real_params, y, t, cond)
    }

    fn score_fake(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<PointSet> {
        self.score_from(&self.fake_params, y, t, cond)
    }

    fn x0_real(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<PointSet> {
        let out = egnn::forward(&self.net, &self.real_params, y, t, &self.base, cond)?;
        let eps_hat = out.to_point_set(y.n_nodes(), self.net.feat_dim)?;
        let (alpha, sigma) = self.base.alpha_sigma(t);
        let (x, _) = crate::diffusion::denoise_to_x0(y, &eps_hat, alpha, sigma)?;
        Ok(x)
    }

    fn disc_prob(&self, y: &PointSet, t: usize, cond: Option<f64>) -> Result<Option<f64>> {
        let Some((dspec, dparams)) = &self.disc else {
            return Ok(None);
        };
        let out = egnn::forward(&self.net, &self.fake_params, y, t, &self.base, cond)?;
        let taps = [
            out.layer_feats[dspec.tap_layers[0]].as_slice(),
            out.layer_feats[dspec.tap_layers[1]].as_slice(),
            out.layer_feats[dspec.tap_layers[2]].as_slice(),
        ];
        disc::disc_forward(dspec, dparams, taps, y.n_nodes(), self.net.hidden).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_kl_weight_is_constant_one() {
        for r in [1e-3, 0.1, 1.0, 42.0, 1e3] {
            assert_eq!(fdiv_weight(DivKind::ReverseKl, r), 1.0);
        }
    }

    #[test]
    fn js_weight_at_unit_ratio_is_half() {
        assert!((fdiv_weight(DivKind::Js, 1.0) - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn forward_kl_weight_is_the_ratio() {
        assert_eq!(fdiv_weight(DivKind::ForwardKl, 3.0), 3.0);
    }

    /// The weights should equal `f''(r) r^2` for each generator function
    /// `f`; confirm with central second differences.
    #[test]
    fn weights_match_second_derivatives_of_the_generators() {
        let f_rkl = |r: f64| -r.ln();
        let f_fkl = |r: f64| r * r.ln();
        let f_js = |r: f64| r * r.ln() - (r + 1.0) * ((r + 1.0) / 2.0).ln();
        let second = |f: &dyn Fn(f64) -> f64, r: f64| {
            let h = 1e-4 * r.max(1.0);
            (f(r + h) - 2.0 * f(r) + f(r - h)) / (h * h)
        };
        for r in [0.05, 0.3, 1.0, 2.5, 20.0] {
            assert!(
                (second(&f_rkl, r) * r * r - fdiv_weight(DivKind::ReverseKl, r)).abs() <= 1e-5
            );
            assert!((second(&f_fkl, r) * r * r - fdiv_weight(DivKind::ForwardKl, r)).abs() <= 1e-4 * r);
            assert!((second(&f_js, r) * r * r - fdiv_weight(DivKind::Js, r)).abs() <= 1e-5);
        }
    }

    #[test]
    fn ratio_reads_off_the_probability() {
        let clamp = (1e-3, 1e3);
        assert_eq!(ratio_from_disc(0.5, clamp), 1.0);
        assert!((ratio_from_disc(0.9, clamp) - 9.0).abs() <= 1e-12);
        assert_eq!(ratio_from_disc(1.0 - 1e-9, clamp), 1e3);
        assert_eq!(ratio_from_disc(1e-9, clamp), 1e-3);
    }

    #[test]
    fn js_weight_of_disc_ratio_recovers_the_probability() {
        let clamp = (1e-3, 1e3);
        for p in [0.01, 0.1, 0.35, 0.5, 0.77, 0.9, 0.99] {
            let w = fdiv_weight(DivKind::Js, ratio_from_disc(p, clamp));
            assert!((w - p).abs() <= 1e-12, "p={p} w={w}");
        }
    }

    #[test]
    fn divergence_spec_validation() {
        let mut s = DivergenceSpec::default();
        assert!(s.validate().is_ok());
        s.ratio_clamp = (2.0, 1.0);
        assert!(s.validate().is_err());
        s.ratio_clamp = (1e-3, 1e3);
        s.lambda_js = -0.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn draws_stay_in_the_trimmed_range() {
        let base = BaseSchedule::new(1000).unwrap();
        let mut rng = RngStream::labeled(9, "dmd-draws");
        for _ in 0..200 {
            let d = DmdDraw::sample(5, 2, 3, &base, &mut rng, Some(1.2));
            assert_eq!(d.z0.n_nodes(), 5);
            assert_eq!(d.z0.feat_dim(), 2);
            assert_eq!(d.rollout_eps.len(), 2);
            assert!((20..=980).contains(&d.t), "t={}", d.t);
            assert!(d.z0.com_drift() <= 1e-12);
            assert!(d.corrupt_eps.com_drift() <= 1e-12);
            assert_eq!(d.cond, Some(1.2));
        }
    }

    // Freshly drawn weights compound multiplicatively: big head outputs feed
    // the 1/alpha rescale, which feeds the score networks' features, and a
    // few layers of that defeats finite differences. The test networks scale
    // every nonzero segment down so each stage stays near unit magnitude.
    fn tame_net_params(spec: &NetSpec, rng: &mut RngStream) -> ParamVector {
        let mut p = spec.init_params_nonzero(rng);
        for v in p.segment_mut("embed.w") {
            *v *= 0.5;
        }
        for l in 0..spec.layers {
            for name in ["edge.w1", "edge.w2", "node.w1", "node.w2"] {
                for v in p.segment_mut(&format!("layer{l}.{name}")) {
                    *v *= 0.5;
                }
            }
            for v in p.segment_mut(&format!("layer{l}.coord.w2")) {
                *v *= 0.02;
            }
        }
        for v in p.segment_mut("head.w") {
            *v *= 0.02;
        }
        p
    }

    fn tame_disc_params(dspec: &DiscSpec, hidden: usize, rng: &mut RngStream) -> ParamVector {
        let mut p = dspec.init_params(hidden, rng);
        for i in 0..crate::disc::N_TAPS {
            for name in ["query", "key.w", "mlp.w1"] {
                for v in p.segment_mut(&format!("tap{i}.{name}")) {
                    *v *= 0.3;
                }
            }
            for v in p.segment_mut(&format!("tap{i}.mlp.w2")) {
                *v = 0.05 * rng.normal();
            }
        }
        p
    }

    fn test_model(seed: u64, with_disc: bool) -> EgnnDmdModel {
        let mut rng = RngStream::labeled(seed, "dmd-model");
        let net = NetSpec::new(16, 3, 2, 0).unwrap();
        let base = BaseSchedule::new(1000).unwrap();
        let disc = with_disc.then(|| {
            let dspec = DiscSpec {
                tap_layers: [0, 1, 2],
                attn_dim: 8,
                ..DiscSpec::with_defaults()
            };
            let dparams = tame_disc_params(&dspec, net.hidden, &mut rng);
            (dspec, dparams)
        });
        EgnnDmdModel {
            gen_params: tame_net_params(&net, &mut rng),
            real_params: tame_net_params(&net, &mut rng),
            fake_params: tame_net_params(&net, &mut rng),
            net,
            base,
            disc,
        }
    }

    /// Mid-noise ladder for the model tests: the production ladders start at
    /// `t = T`, where the prior rescaling amplifies untrained-network output
    /// by `1/precision` and drives finite differences out of range.
    fn mid_grid(base: &BaseSchedule) -> NoiseGrid {
        NoiseGrid::from_steps(&[600, 300, 0], base).unwrap()
    }

    fn test_draws(model: &EgnnDmdModel, k: usize, b: usize, seed: u64) -> Vec<DmdDraw> {
        let mut rng = RngStream::labeled(seed, "dmd-batch");
        (0..b)
            .map(|_| DmdDraw::sample(4, model.net.feat_dim, k, &model.base, &mut rng, None))
            .collect()
    }

    #[test]
    fn matched_score_networks_give_a_zero_update() {
        let mut model = test_model(11, false);
        model.fake_params = model.real_params.clone();
        let grid = mid_grid(&model.base);
        let draws = test_draws(&model, 2, 3, 12);
        let spec = DivergenceSpec {
            lambda_js: 0.0,
            ..DivergenceSpec::default()
        };
        let out = dmd_step(&model, &spec, &grid, 2, &draws).unwrap();
        assert_eq!(out.gen_grad.loss, 0.0);
        assert_eq!(out.mean_score_gap, 0.0);
        assert!(out.gen_grad.grad.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn plain_reverse_kl_never_consults_the_discriminator() {
        let bare = test_model(21, false);
        let mut armed = test_model(21, true);
        armed.gen_params = bare.gen_params.clone();
        armed.real_params = bare.real_params.clone();
        armed.fake_params = bare.fake_params.clone();
        let grid = mid_grid(&bare.base);
        let draws = test_draws(&bare, 1, 3, 22);
        let spec = DivergenceSpec {
            lambda_js: 0.0,
            ..DivergenceSpec::default()
        };
        let a = dmd_step(&bare, &spec, &grid, 1, &draws).unwrap();
        let b = dmd_step(&armed, &spec, &grid, 1, &draws).unwrap();
        assert_eq!(a.gen_grad.grad.values(), b.gen_grad.grad.values());
        assert_eq!(a.mean_weight, 1.0);
    }

    #[test]
    fn ratio_weighting_requires_a_discriminator() {
        let model = test_model(31, false);
        let grid = mid_grid(&model.base);
        let draws = test_draws(&model, 1, 2, 32);
        for spec in [
            DivergenceSpec {
                kind: DivKind::Js,
                lambda_js: 0.0,
                ..DivergenceSpec::default()
            },
            DivergenceSpec::default(),
        ] {
            let err = dmd_step(&model, &spec, &grid, 1, &draws).unwrap_err();
            assert!(err.to_string().contains("discriminator"), "{err}");
        }
    }

    #[test]
    fn js_mixing_is_linear_in_lambda() {
        let model = test_model(41, true);
        let grid = mid_grid(&model.base);
        let draws = test_draws(&model, 2, 3, 42);
        let run = |kind: DivKind, lambda: f64| {
            let spec = DivergenceSpec {
                kind,
                lambda_js: lambda,
                ..DivergenceSpec::default()
            };
            dmd_step(&model, &spec, &grid, 2, &draws).unwrap()
        };
        let mixed = run(DivKind::ReverseKl, 0.1);
        let plain = run(DivKind::ReverseKl, 0.0);
        let js = run(DivKind::Js, 0.0);
        for ((m, p), j) in mixed
            .gen_grad
            .grad
            .values()
            .iter()
            .zip(plain.gen_grad.grad.values())
            .zip(js.gen_grad.grad.values())
        {
            let want = p + 0.1 * j;
            assert!((m - want).abs() <= 1e-10 * (1.0 + m.abs()), "{m} vs {want}");
        }
        assert!(
            (mixed.mean_weight - (plain.mean_weight + 0.1 * js.mean_weight)).abs() <= 1e-12
        );
    }

    #[test]
    fn normalizer_rescales_the_update_uniformly() {
        let model = test_model(51, false);
        let grid = mid_grid(&model.base);
        let draws = test_draws(&model, 1, 3, 52);
        let run = |use_normalizer: bool| {
            let spec = DivergenceSpec {
                lambda_js: 0.0,
                use_normalizer,
                ..DivergenceSpec::default()
            };
            dmd_step(&model, &spec, &grid, 1, &draws).unwrap()
        };
        let scaled = run(true);
        let unit = run(false);
        assert_eq!(unit.eta, 1.0);
        assert!(scaled.eta.is_finite() && scaled.eta > 0.0 && scaled.eta != 1.0);
        for (s, u) in scaled
            .gen_grad
            .grad
            .values()
            .iter()
            .zip(unit.gen_grad.grad.values())
        {
            let want = scaled.eta * u;
            assert!((s - want).abs() <= 1e-12 * (1.0 + want.abs()), "{s} vs {want}");
        }
    }

    #[test]
    fn surrogate_gradient_matches_central_differences() {
        let model = test_model(61, false);
        let grid = NoiseGrid::from_steps(&[600, 0], &model.base).unwrap();
        let draws = test_draws(&model, 1, 2, 62);
        let spec = DivergenceSpec {
            lambda_js: 0.0,
            use_normalizer: false,
            ..DivergenceSpec::default()
        };
        let out = dmd_step(&model, &spec, &grid, 1, &draws).unwrap();

        // Freeze the mismatch targets at the evaluation point; the surrogate
        // treats the score gap as a constant, so the finite-difference
        // functional varies only through the rollout output.
        let mut targets = Vec::new();
        for draw in &draws {
            let (x, _) = model.rollout(&grid, 1, draw).unwrap();
            let y = corrupt_with(&x, draw.t, &model.base, draw.corrupt_eps.clone()).noisy;
            let s_real = model.score_real(&y, draw.t, draw.cond).unwrap();
            let s_fake = model.score_fake(&y, draw.t, draw.cond).unwrap();
            let coords: Vec<f64> = x
                .coords()
                .iter()
                .zip(s_fake.coords())
                .zip(s_real.coords())
                .map(|((xi, f), r)| xi - (f - r))
                .collect();
            let feats: Vec<f64> = x
                .feats()
                .iter()
                .zip(s_fake.feats())
                .zip(s_real.feats())
                .map(|((xi, f), r)| xi - (f - r))
                .collect();
            targets.push((coords, feats));
        }
        let f = |theta: &ParamVector| -> crate::Result<f64> {
            let mut probe = model.clone();
            probe.gen_params = theta.clone();
            let mut total = 0.0;
            for (draw, (tc, tf)) in draws.iter().zip(&targets) {
                let (x, _) = probe.rollout(&grid, 1, draw)?;
                let sq: f64 = x
                    .coords()
                    .iter()
                    .zip(tc)
                    .chain(x.feats().iter().zip(tf))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += 0.5 * sq;
            }
            Ok(total / draws.len() as f64)
        };
        let mut rng = RngStream::labeled(63, "dmd-gradcheck");
        let worst = crate::netgrad::grad_check(
            f,
            &out.gen_grad.grad,
            &model.gen_params,
            40,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn update_direction_is_invariant_under_input_rotation() {
        let model = test_model(71, false);
        let grid = mid_grid(&model.base);
        let spec = DivergenceSpec {
            lambda_js: 0.0,
            use_normalizer: false,
            ..DivergenceSpec::default()
        };
        let mut rng = RngStream::labeled(72, "dmd-rotations");
        for trial in 0..20 {
            let draws = test_draws(&model, 2, 2, 100 + trial);
            let rot = crate::geom::Rotation::random(&mut rng);
            let turned: Vec<DmdDraw> = draws
                .iter()
                .map(|d| DmdDraw {
                    z0: crate::geom::apply_rotation(&d.z0, &rot),
                    rollout_eps: d
                        .rollout_eps
                        .iter()
                        .map(|e| crate::geom::apply_rotation(e, &rot))
                        .collect(),
                    t: d.t,
                    corrupt_eps: crate::geom::apply_rotation(&d.corrupt_eps, &rot),
                    cond: d.cond,
                })
                .collect();
            let a = dmd_step(&model, &spec, &grid, 2, &draws).unwrap();
            let b = dmd_step(&model, &spec, &grid, 2, &turned).unwrap();
            for (ga, gb) in a
                .gen_grad
                .grad
                .values()
                .iter()
                .zip(b.gen_grad.grad.values())
            {
                assert!(
                    (ga - gb).abs() <= 1e-5 * (1.0 + ga.abs()),
                    "trial {trial}: {ga} vs {gb}"
                );
            }
        }
    }

    #[test]
    fn empty_batches_are_rejected() {
        let model = test_model(81, false);
        let grid = mid_grid(&model.base);
        let spec = DivergenceSpec::default();
        assert!(dmd_step(&model, &spec, &grid, 1, &[]).is_err());
    }
}

