//! Discriminator head over intermediate features of the fake-score network.
//!
//! Three backbone layers are tapped. Each tap pools its `N x hidden` feature
//! matrix into a single vector with a learnable query: attention scores are
//! `<q, W_k h_i> / sqrt(attn_dim)`, softmax over nodes, and the pooled vector
//! is the attention-weighted sum of the raw features. A small two-logit MLP
//! turns the pooled vector into a real-class probability, and the three tap
//! probabilities are averaged.
//!
//! The training loss is plain binary cross-entropy on corrupted inputs (real
//! and fake share the noise level per pair) plus an R1 penalty in
//! perturbation form on the real side. The backbone receives the adversarial
//! part of the gradient scaled by `gan_backbone_coeff`; the R1 term shapes
//! the head only.

use crate::diffusion::{corrupt_with, draw_noise};
use crate::egnn::{self, silu, silu_prime, NetSpec, Seeds};
use crate::geom::{zero_com_project_in_place, PointSet};
use crate::netgrad::{matvec, matvec_t_acc, outer_acc, Layout, LayoutBuilder, ParamVector};
use crate::rng::RngStream;
use crate::schedule::BaseSchedule;
use crate::{Error, Result};
use std::sync::Arc;

pub const N_TAPS: usize = 3;

/// Head architecture and training knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscSpec {
    pub tap_layers: [usize; N_TAPS],
    pub attn_dim: usize,
    pub r1_weight: f64,
    pub r1_sigma: f64,
    pub gan_backbone_coeff: f64,
}

impl DiscSpec {
    pub fn with_defaults() -> Self {
        DiscSpec {
            tap_layers: [1, 2, 3],
            attn_dim: 16,
            r1_weight: 1e-3,
            r1_sigma: 0.01,
            gan_backbone_coeff: 0.2,
        }
    }

    pub fn validate(&self, backbone_layers: usize) -> Result<()> {
        if self.attn_dim == 0 {
            return Err(Error::invalid("attention dimension must be positive"));
        }
        if self.r1_weight < 0.0 || self.r1_sigma <= 0.0 {
            return Err(Error::invalid("r1 settings out of range"));
        }
        let mut seen = [false; 64];
        for l in self.tap_layers {
            if l >= backbone_layers || l >= 64 {
                return Err(Error::invalid(format!(
                    "tap layer {l} outside the {backbone_layers}-layer backbone"
                )));
            }
            if seen[l] {
                return Err(Error::invalid("tap layers must be distinct"));
            }
            seen[l] = true;
        }
        Ok(())
    }

    /// Per tap: query vector, key projection, and the two-logit MLP.
    pub fn layout(&self, hidden: usize) -> Arc<Layout> {
        let m = self.attn_dim;
        let mut b = LayoutBuilder::new();
        for i in 0..N_TAPS {
            b.add(&format!("tap{i}.query"), m);
            b.add(&format!("tap{i}.key.w"), m * hidden);
            b.add(&format!("tap{i}.key.b"), m);
            b.add(&format!("tap{i}.mlp.w1"), m * hidden);
            b.add(&format!("tap{i}.mlp.b1"), m);
            b.add(&format!("tap{i}.mlp.w2"), 2 * m);
            b.add(&format!("tap{i}.mlp.b2"), 2);
        }
        b.build()
    }

    /// Gaussian weights except the final logit layers, which start at zero,
    /// so a fresh head outputs probability one half.
    pub fn init_params(&self, hidden: usize, rng: &mut RngStream) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout(hidden));
        for i in 0..N_TAPS {
            let q_std = (2.0 / self.attn_dim as f64).sqrt();
            for w in p.segment_mut(&format!("tap{i}.query")) {
                *w = q_std * rng.normal();
            }
            let k_std = (2.0 / hidden as f64).sqrt();
            for w in p.segment_mut(&format!("tap{i}.key.w")) {
                *w = k_std * rng.normal();
            }
            for w in p.segment_mut(&format!("tap{i}.mlp.w1")) {
                *w = k_std * rng.normal();
            }
        }
        p
    }
}

/// Everything the head backward pass needs from one evaluation.
#[derive(Debug, Clone)]
pub struct DiscTrace {
    n: usize,
    hidden: usize,
    taps: Vec<TapTrace>,
    pub p: f64,
}

#[derive(Debug, Clone)]
struct TapTrace {
    keys: Vec<f64>,   // n x attn_dim
    attn: Vec<f64>,   // n
    pooled: Vec<f64>, // hidden
    z1: Vec<f64>,     // attn_dim
    a1: Vec<f64>,     // attn_dim
    p_tap: f64,
}

fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Pools three tapped feature matrices and returns the averaged real-class
/// probability with a trace.
pub fn disc_forward_traced(
    spec: &DiscSpec,
    params: &ParamVector,
    taps: [&[f64]; N_TAPS],
    n: usize,
    hidden: usize,
) -> Result<(f64, DiscTrace)> {
    if n == 0 {
        return Err(Error::invalid("discriminator needs at least one node"));
    }
    let m = spec.attn_dim;
    let inv_sqrt = 1.0 / (m as f64).sqrt();
    let mut tap_traces = Vec::with_capacity(N_TAPS);
    let mut p_sum = 0.0;
    for (i, feats) in taps.iter().enumerate() {
        if feats.len() != n * hidden {
            return Err(Error::invalid("tap feature matrix has the wrong shape"));
        }
        let seg = |name: &str| params.segment(&format!("tap{i}.{name}"));
        let (q, k_w, k_b) = (seg("query"), seg("key.w"), seg("key.b"));
        let (w1, b1, w2, b2) = (seg("mlp.w1"), seg("mlp.b1"), seg("mlp.w2"), seg("mlp.b2"));

        let mut keys = vec![0.0; n * m];
        let mut scores = vec![0.0; n];
        for j in 0..n {
            matvec(k_w, k_b, &feats[j * hidden..(j + 1) * hidden], &mut keys[j * m..(j + 1) * m]);
            scores[j] = q
                .iter()
                .zip(&keys[j * m..(j + 1) * m])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * inv_sqrt;
        }
        softmax_inplace(&mut scores);
        let mut pooled = vec![0.0; hidden];
        for j in 0..n {
            for (g, f) in pooled.iter_mut().zip(&feats[j * hidden..(j + 1) * hidden]) {
                *g += scores[j] * f;
            }
        }
        let mut z1 = vec![0.0; m];
        matvec(w1, b1, &pooled, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|z| silu(*z)).collect();
        let mut logits = vec![0.0; 2];
        matvec(w2, b2, &a1, &mut logits);
        let p_tap = egnn::sigmoid(logits[0] - logits[1]);
        p_sum += p_tap;
        tap_traces.push(TapTrace {
            keys,
            attn: scores,
            pooled,
            z1,
            a1,
            p_tap,
        });
    }
    let p = p_sum / N_TAPS as f64;
    if !p.is_finite() {
        return Err(Error::numeric("discriminator probability is not finite"));
    }
    Ok((
        p,
        DiscTrace {
            n,
            hidden,
            taps: tap_traces,
            p,
        },
    ))
}

pub fn disc_forward(
    spec: &DiscSpec,
    params: &ParamVector,
    taps: [&[f64]; N_TAPS],
    n: usize,
    hidden: usize,
) -> Result<f64> {
    disc_forward_traced(spec, params, taps, n, hidden).map(|(p, _)| p)
}

/// Reverse pass for a unit cotangent on the probability. Returns head
/// parameter gradients and the gradient on each tapped feature matrix;
/// callers scale both by their actual `dL/dp`.
pub fn disc_backward(
    spec: &DiscSpec,
    params: &ParamVector,
    taps: [&[f64]; N_TAPS],
    trace: &DiscTrace,
) -> (ParamVector, Vec<Vec<f64>>) {
    let n = trace.n;
    let hidden = trace.hidden;
    let m = spec.attn_dim;
    let inv_sqrt = 1.0 / (m as f64).sqrt();
    let mut grads = ParamVector::zeros(params.layout().clone());
    let mut feat_grads = Vec::with_capacity(N_TAPS);
    for (i, feats) in taps.iter().enumerate() {
        let tr = &trace.taps[i];
        let seg = |name: &str| params.segment(&format!("tap{i}.{name}")).to_vec();
        let (q, k_w) = (seg("query"), seg("key.w"));
        let (w1, w2) = (seg("mlp.w1"), seg("mlp.w2"));

        // dp/dp_tap = 1/3; p_tap = sigmoid(l0 - l1).
        let dp_tap = 1.0 / N_TAPS as f64;
        let dz = dp_tap * tr.p_tap * (1.0 - tr.p_tap);
        let dlogits = [dz, -dz];

        let mut d_w2 = vec![0.0; 2 * m];
        let mut d_b2 = vec![0.0; 2];
        outer_acc(&mut d_w2, &mut d_b2, &dlogits, &tr.a1);
        let mut d_a1 = vec![0.0; m];
        matvec_t_acc(&w2, &dlogits, &mut d_a1);
        let d_z1: Vec<f64> = d_a1
            .iter()
            .zip(&tr.z1)
            .map(|(a, z)| a * silu_prime(*z))
            .collect();
        let mut d_w1 = vec![0.0; m * hidden];
        let mut d_b1 = vec![0.0; m];
        outer_acc(&mut d_w1, &mut d_b1, &d_z1, &tr.pooled);
        let mut d_pooled = vec![0.0; hidden];
        matvec_t_acc(&w1, &d_z1, &mut d_pooled);

        // pooled = sum_j attn_j feats_j
        let mut d_feats = vec![0.0; n * hidden];
        let mut d_attn = vec![0.0; n];
        for j in 0..n {
            let row = &feats[j * hidden..(j + 1) * hidden];
            d_attn[j] = d_pooled.iter().zip(row).map(|(a, b)| a * b).sum();
            for (df, dp) in d_feats[j * hidden..(j + 1) * hidden].iter_mut().zip(&d_pooled) {
                *df += tr.attn[j] * dp;
            }
        }
        // softmax jacobian
        let dot: f64 = tr.attn.iter().zip(&d_attn).map(|(a, b)| a * b).sum();
        let d_scores: Vec<f64> = tr
            .attn
            .iter()
            .zip(&d_attn)
            .map(|(a, da)| a * (da - dot))
            .collect();
        // scores_j = <q, keys_j> / sqrt(m)
        let mut d_q = vec![0.0; m];
        let mut d_kw = vec![0.0; m * hidden];
        let mut d_kb = vec![0.0; m];
        for j in 0..n {
            let ds = d_scores[j] * inv_sqrt;
            let key = &tr.keys[j * m..(j + 1) * m];
            for (dq, k) in d_q.iter_mut().zip(key) {
                *dq += ds * k;
            }
            let d_key: Vec<f64> = q.iter().map(|qv| ds * qv).collect();
            outer_acc(&mut d_kw, &mut d_kb, &d_key, &feats[j * hidden..(j + 1) * hidden]);
            matvec_t_acc(&k_w, &d_key, &mut d_feats[j * hidden..(j + 1) * hidden]);
        }

        let mut store = |name: &str, data: &[f64]| {
            grads
                .segment_mut(&format!("tap{i}.{name}"))
                .copy_from_slice(data);
        };
        store("query", &d_q);
        store("key.w", &d_kw);
        store("key.b", &d_kb);
        store("mlp.w1", &d_w1);
        store("mlp.b1", &d_b1);
        store("mlp.w2", &d_w2);
        store("mlp.b2", &d_b2);
        feat_grads.push(d_feats);
    }
    (grads, feat_grads)
}

/// Noise shared by one real/fake pair: the common step, the corruption draws
/// for both sides, and the R1 perturbation for the real side.
#[derive(Debug, Clone)]
pub struct GanDraw {
    pub t: usize,
    pub real_eps: PointSet,
    pub fake_eps: PointSet,
    pub r1_eps: PointSet,
}

/// Draws one [`GanDraw`] per pair; steps are uniform over the same trimmed
/// range the distillation gradient samples from.
pub fn draw_gan_batch(
    real: &[PointSet],
    fake: &[PointSet],
    base: &BaseSchedule,
    rng: &mut RngStream,
) -> Vec<GanDraw> {
    let t_total = base.t_total() as f64;
    let lo = crate::schedule::round_half_away(0.02 * t_total) as usize;
    let hi = crate::schedule::round_half_away(0.98 * t_total) as usize;
    real.iter()
        .zip(fake)
        .map(|(r, f)| GanDraw {
            t: rng.uniform_int(lo, hi),
            real_eps: draw_noise(r.n_nodes(), r.feat_dim(), rng),
            fake_eps: draw_noise(f.n_nodes(), f.feat_dim(), rng),
            r1_eps: draw_noise(r.n_nodes(), r.feat_dim(), rng),
        })
        .collect()
}

/// Losses and gradients from one discriminator step.
#[derive(Debug, Clone)]
pub struct GanReport {
    /// Binary cross-entropy part.
    pub loss: f64,
    /// Unweighted R1 penalty; the trained objective is
    /// `loss + r1_weight * r1`.
    pub r1: f64,
    pub disc_grad: ParamVector,
    pub backbone_grad: ParamVector,
    pub p_real_mean: f64,
    pub p_fake_mean: f64,
}

/// Evaluates the discriminator objective on paired real/fake batches with
/// fresh draws.
#[allow(clippy::too_many_arguments)]
pub fn gan_losses(
    net_spec: &NetSpec,
    fake_params: &ParamVector,
    disc_spec: &DiscSpec,
    disc_params: &ParamVector,
    real: &[PointSet],
    fake: &[PointSet],
    conds: Option<&[f64]>,
    base: &BaseSchedule,
    rng: &mut RngStream,
) -> Result<GanReport> {
    let draws = draw_gan_batch(real, fake, base, rng);
    gan_losses_with_draws(
        net_spec,
        fake_params,
        disc_spec,
        disc_params,
        real,
        fake,
        conds,
        base,
        &draws,
    )
}

struct TapView<'a> {
    feats: [&'a [f64]; N_TAPS],
}

fn tap_view<'a>(spec: &DiscSpec, layer_feats: &'a [Vec<f64>]) -> TapView<'a> {
    TapView {
        feats: [
            &layer_feats[spec.tap_layers[0]],
            &layer_feats[spec.tap_layers[1]],
            &layer_feats[spec.tap_layers[2]],
        ],
    }
}

/// Deterministic form of [`gan_losses`]; the entry point for gradient
/// checking.
#[allow(clippy::too_many_arguments)]
pub fn gan_losses_with_draws(
    net_spec: &NetSpec,
    fake_params: &ParamVector,
    disc_spec: &DiscSpec,
    disc_params: &ParamVector,
    real: &[PointSet],
    fake: &[PointSet],
    conds: Option<&[f64]>,
    base: &BaseSchedule,
    draws: &[GanDraw],
) -> Result<GanReport> {
    disc_spec.validate(net_spec.layers)?;
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid("discriminator batches must be non-empty"));
    }
    if real.len() != fake.len() || draws.len() != real.len() {
        return Err(Error::invalid(
            "real batch, fake batch and draws must pair up one to one",
        ));
    }
    if let Some(c) = conds {
        if c.len() != real.len() {
            return Err(Error::invalid("one conditioning value per pair required"));
        }
    }
    let hidden = net_spec.hidden;
    let inv_b = 1.0 / real.len() as f64;
    let mut report = GanReport {
        loss: 0.0,
        r1: 0.0,
        disc_grad: ParamVector::zeros(disc_params.layout().clone()),
        backbone_grad: ParamVector::zeros(fake_params.layout().clone()),
        p_real_mean: 0.0,
        p_fake_mean: 0.0,
    };
    let sigma_r1 = disc_spec.r1_sigma;

    for (j, draw) in draws.iter().enumerate() {
        let cond = conds.map(|c| c[j]);

        // Real side: corrupted input, plus its R1 perturbation.
        let y_real = corrupt_with(&real[j], draw.t, base, draw.real_eps.clone()).noisy;
        let (out_r, trace_r) =
            egnn::forward_traced(net_spec, fake_params, &y_real, draw.t, base, cond)?;
        let taps_r = tap_view(disc_spec, &out_r.layer_feats);
        let (p_r, dtrace_r) =
            disc_forward_traced(disc_spec, disc_params, taps_r.feats, y_real.n_nodes(), hidden)?;

        let mut pert_coords: Vec<f64> = y_real
            .coords()
            .iter()
            .zip(draw.r1_eps.coords())
            .map(|(y, e)| y + sigma_r1 * e)
            .collect();
        zero_com_project_in_place(&mut pert_coords, y_real.n_nodes());
        let pert_feats = y_real
            .feats()
            .iter()
            .zip(draw.r1_eps.feats())
            .map(|(y, e)| y + sigma_r1 * e)
            .collect();
        let y_pert = PointSet::new(y_real.n_nodes(), y_real.feat_dim(), pert_coords, pert_feats)?;
        let out_p = egnn::forward(net_spec, fake_params, &y_pert, draw.t, base, cond)?;
        let taps_p = tap_view(disc_spec, &out_p.layer_feats);
        let (p_pert, dtrace_p) =
            disc_forward_traced(disc_spec, disc_params, taps_p.feats, y_pert.n_nodes(), hidden)?;

        // Fake side.
        let y_fake = corrupt_with(&fake[j], draw.t, base, draw.fake_eps.clone()).noisy;
        let (out_f, trace_f) =
            egnn::forward_traced(net_spec, fake_params, &y_fake, draw.t, base, cond)?;
        let taps_f = tap_view(disc_spec, &out_f.layer_feats);
        let (p_f, dtrace_f) =
            disc_forward_traced(disc_spec, disc_params, taps_f.feats, y_fake.n_nodes(), hidden)?;

        let bce = -(p_r.ln()) - (1.0 - p_f).ln();
        let r1 = (p_r - p_pert).powi(2) / (sigma_r1 * sigma_r1);
        if !bce.is_finite() || !r1.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite discriminator loss at t={}",
                draw.t
            )));
        }
        report.loss += bce * inv_b;
        report.r1 += r1 * inv_b;
        report.p_real_mean += p_r * inv_b;
        report.p_fake_mean += p_f * inv_b;

        // Cotangents on the three probability outputs. The adversarial part
        // also drives the backbone; R1 shapes the head only.
        let bce_dp_r = -1.0 / p_r * inv_b;
        let bce_dp_f = 1.0 / (1.0 - p_f) * inv_b;
        let r1_dp_r = disc_spec.r1_weight * 2.0 * (p_r - p_pert) / (sigma_r1 * sigma_r1) * inv_b;
        let r1_dp_pert = -r1_dp_r;

        let (unit_disc_r, unit_feats_r) =
            disc_backward(disc_spec, disc_params, taps_r.feats, &dtrace_r);
        report.disc_grad.add_scaled(bce_dp_r + r1_dp_r, &unit_disc_r);
        let (unit_disc_p, _) = disc_backward(disc_spec, disc_params, taps_p.feats, &dtrace_p);
        report.disc_grad.add_scaled(r1_dp_pert, &unit_disc_p);
        let (unit_disc_f, unit_feats_f) =
            disc_backward(disc_spec, disc_params, taps_f.feats, &dtrace_f);
        report.disc_grad.add_scaled(bce_dp_f, &unit_disc_f);

        if disc_spec.gan_backbone_coeff != 0.0 {
            let scale_r = disc_spec.gan_backbone_coeff * bce_dp_r;
            let seeds_r = Seeds {
                layer_feats: disc_spec
                    .tap_layers
                    .iter()
                    .zip(&unit_feats_r)
                    .map(|(l, g)| (*l, g.iter().map(|v| v * scale_r).collect()))
                    .collect(),
                ..Default::default()
            };
            let g_r = egnn::backward(net_spec, fake_params, &trace_r, &seeds_r);
            report.backbone_grad.add_scaled(1.0, &g_r);

            let scale_f = disc_spec.gan_backbone_coeff * bce_dp_f;
            let seeds_f = Seeds {
                layer_feats: disc_spec
                    .tap_layers
                    .iter()
                    .zip(&unit_feats_f)
                    .map(|(l, g)| (*l, g.iter().map(|v| v * scale_f).collect()))
                    .collect(),
                ..Default::default()
            };
            let g_f = egnn::backward(net_spec, fake_params, &trace_f, &seeds_f);
            report.backbone_grad.add_scaled(1.0, &g_f);
        }
    }
    if !report.disc_grad.all_finite() || !report.backbone_grad.all_finite() {
        return Err(Error::numeric("non-finite discriminator gradients"));
    }
    Ok(report)
}
