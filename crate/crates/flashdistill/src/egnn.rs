//! Equivariant graph network predicting the corruption noise of a point set.
//!
//! The backbone follows the standard EGNN recipe on the fully connected node
//! graph. Node features are embedded linearly, then each layer computes pair
//! messages from the two endpoint features and the squared distance, moves
//! coordinates along pair displacements scaled by a learned gate, and updates
//! features residually from the aggregated messages:
//!
//! ```text
//! m_ij   = edge_mlp(h_i, h_j, |x_i - x_j|^2)
//! x_i   += (1/(N-1)) sum_{j!=i} (x_i - x_j) * gate_mlp(m_ij)
//! h_i   += node_mlp(h_i, sum_{j!=i} m_ij)
//! ```
//!
//! Each MLP is two linear layers with SiLU after the first (the edge MLP also
//! applies SiLU to its output, so messages are smooth). The normalized step
//! `t/T` and an optional conditioning scalar enter as extra input features.
//! The coordinate head is the accumulated displacement projected to zero
//! center of mass; the feature head is a linear readout of the final
//! features. Both heads are added to `sigma(t)` times the corresponding
//! input block, so the network learns the residual between the corruption
//! and its variance-matched estimate. The gate output layer and both readout
//! heads start at zero, so a fresh network predicts exactly `sigma(t)` times
//! its input.
//!
//! Gradients are hand-derived adjoints over a trace of the forward pass;
//! `netgrad::grad_check` is the correctness gate. Backward accepts adjoint
//! seeds on both noise blocks and on any per-layer feature matrix, which is
//! how the discriminator pushes its gradient into this backbone.

use crate::geom::{zero_com_project_in_place, PointSet};
use crate::netgrad::{matvec, matvec_t_acc, outer_acc, Layout, LayoutBuilder, ParamVector};
use crate::rng::RngStream;
use crate::schedule::BaseSchedule;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Architecture description; serialized into checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub hidden: usize,
    pub layers: usize,
    pub feat_dim: usize,
    pub cond_dim: usize,
}

impl NetSpec {
    pub fn new(hidden: usize, layers: usize, feat_dim: usize, cond_dim: usize) -> Result<Self> {
        let spec = NetSpec {
            hidden,
            layers,
            feat_dim,
            cond_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default width and depth with a given feature dimension.
    pub fn with_defaults(feat_dim: usize) -> Self {
        NetSpec {
            hidden: 64,
            layers: 4,
            feat_dim,
            cond_dim: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.feat_dim == 0 {
            return Err(Error::invalid("hidden, layers and feat_dim must be positive"));
        }
        if self.cond_dim > 1 {
            return Err(Error::invalid("cond_dim must be 0 or 1"));
        }
        Ok(())
    }

    /// Input feature width: data features, normalized time, optional cond.
    pub fn in_dim(&self) -> usize {
        self.feat_dim + 1 + self.cond_dim
    }

    /// Parameter layout: embedding, per-layer MLPs, feature head.
    pub fn layout(&self) -> Arc<Layout> {
        let h = self.hidden;
        let mut b = LayoutBuilder::new();
        b.add("embed.w", h * self.in_dim());
        b.add("embed.b", h);
        for l in 0..self.layers {
            b.add(&format!("layer{l}.edge.w1"), h * (2 * h + 1));
            b.add(&format!("layer{l}.edge.b1"), h);
            b.add(&format!("layer{l}.edge.w2"), h * h);
            b.add(&format!("layer{l}.edge.b2"), h);
            b.add(&format!("layer{l}.coord.w1"), h * h);
            b.add(&format!("layer{l}.coord.b1"), h);
            b.add(&format!("layer{l}.coord.w2"), h);
            b.add(&format!("layer{l}.coord.b2"), 1);
            b.add(&format!("layer{l}.node.w1"), h * 2 * h);
            b.add(&format!("layer{l}.node.b1"), h);
            b.add(&format!("layer{l}.node.w2"), h * h);
            b.add(&format!("layer{l}.node.b2"), h);
        }
        b.add("head.w", self.feat_dim * h);
        b.add("head.b", self.feat_dim);
        b.build()
    }

    /// Gaussian weights with variance `2 / fan_in`; biases, the coordinate
    /// gate output layer, and the feature head start at zero.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let layout = self.layout();
        let mut p = ParamVector::zeros(layout.clone());
        let h = self.hidden;
        let fills: Vec<(String, usize)> = {
            let mut v = vec![("embed.w".to_string(), self.in_dim())];
            for l in 0..self.layers {
                v.push((format!("layer{l}.edge.w1"), 2 * h + 1));
                v.push((format!("layer{l}.edge.w2"), h));
                v.push((format!("layer{l}.coord.w1"), h));
                v.push((format!("layer{l}.node.w1"), 2 * h));
                v.push((format!("layer{l}.node.w2"), h));
            }
            v
        };
        for (name, fan_in) in fills {
            let std = (2.0 / fan_in as f64).sqrt();
            for w in p.segment_mut(&name) {
                *w = std * rng.normal();
            }
        }
        p
    }

    /// Like [`Self::init_params`], but also randomizes the zero-initialized
    /// gate and head segments; used by tests that need nonzero noise output.
    pub fn init_params_nonzero(&self, rng: &mut RngStream) -> ParamVector {
        let mut p = self.init_params(rng);
        let h = self.hidden;
        for l in 0..self.layers {
            let std = (2.0 / h as f64).sqrt();
            for w in p.segment_mut(&format!("layer{l}.coord.w2")) {
                *w = std * rng.normal();
            }
        }
        let std = (2.0 / h as f64).sqrt();
        for w in p.segment_mut("head.w") {
            *w = std * rng.normal();
        }
        p
    }
}

/// Predicted noise: a coordinate block (zero center of mass), a feature
/// block, and the per-layer feature matrices for discriminator taps.
#[derive(Debug, Clone)]
pub struct EpsOut {
    pub eps_x: Vec<f64>,
    pub eps_h: Vec<f64>,
    pub layer_feats: Vec<Vec<f64>>,
}

impl EpsOut {
    pub fn to_point_set(&self, n: usize, d: usize) -> Result<PointSet> {
        PointSet::new(n, d, self.eps_x.clone(), self.eps_h.clone())
            .map_err(|_| Error::numeric("non-finite noise prediction"))
    }
}

/// Converts a noise prediction into a score: `s = -eps / sigma` on both
/// blocks. Errors when sigma is too small for the division to mean anything.
pub fn eps_to_score(eps: &EpsOut, n: usize, d: usize, sigma: f64) -> Result<PointSet> {
    if sigma <= 1e-6 {
        return Err(Error::numeric(format!(
            "sigma {sigma} too small for score conversion"
        )));
    }
    let coords = eps.eps_x.iter().map(|v| -v / sigma).collect();
    let feats = eps.eps_h.iter().map(|v| -v / sigma).collect();
    PointSet::new(n, d, coords, feats)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

pub(crate) fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn silu_slice(z: &[f64], out: &mut [f64]) {
    for (o, zi) in out.iter_mut().zip(z) {
        *o = silu(*zi);
    }
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct EgnnTrace {
    n: usize,
    t_frac: f64,
    input_rows: Vec<f64>, // n x in_dim
    h0: Vec<f64>,         // n x hidden (embedding output)
    layers: Vec<LayerTrace>,
    h_final: Vec<f64>, // n x hidden
}

#[derive(Debug, Clone)]
struct LayerTrace {
    h_in: Vec<f64>,  // n x hidden
    d: Vec<f64>,     // pairs x 3
    e_z1: Vec<f64>,  // pairs x hidden
    e_a1: Vec<f64>,  // pairs x hidden
    e_z2: Vec<f64>,  // pairs x hidden
    m: Vec<f64>,     // pairs x hidden (messages)
    c_z1: Vec<f64>,  // pairs x hidden
    c_a1: Vec<f64>,  // pairs x hidden
    gate: Vec<f64>,  // pairs
    msum: Vec<f64>,  // n x hidden
    n_z1: Vec<f64>,  // n x hidden
    n_a1: Vec<f64>,  // n x hidden
    x_out: Vec<f64>, // n x 3
    h_out: Vec<f64>, // n x hidden
}

/// Ordered pairs (i, j), i != j, in row-major order.
fn pair_count(n: usize) -> usize {
    n * (n - 1)
}

fn for_pairs(n: usize, mut f: impl FnMut(usize, usize, usize)) {
    let mut p = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                f(p, i, j);
                p += 1;
            }
        }
    }
}

fn check_forward_inputs(
    spec: &NetSpec,
    params: &ParamVector,
    p: &PointSet,
    t: usize,
    base: &BaseSchedule,
    cond: Option<f64>,
) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.layout().total_len() {
        return Err(Error::invalid("parameter vector does not match spec layout"));
    }
    if p.feat_dim() != spec.feat_dim {
        return Err(Error::invalid(format!(
            "input feature dim {} does not match spec {}",
            p.feat_dim(),
            spec.feat_dim
        )));
    }
    if t > base.t_total() {
        return Err(Error::invalid(format!(
            "step {t} beyond schedule end {}",
            base.t_total()
        )));
    }
    match (spec.cond_dim, cond) {
        (0, Some(_)) => return Err(Error::invalid("conditioning value given to unconditional net")),
        (1, None) => return Err(Error::invalid("conditional net needs a conditioning value")),
        _ => {}
    }
    // Centering is judged relative to the coordinate magnitude; a cloud far
    // from the data scale accumulates rounding in its mean that says nothing
    // about whether it was projected.
    let scale = p.coords().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if p.com_drift() > 1e-6 * scale {
        return Err(Error::invalid(format!(
            "input cloud is not centered (drift {:.2e})",
            p.com_drift()
        )));
    }
    Ok(())
}

/// Forward pass that records a full trace for [`backward`].
pub fn forward_traced(
    spec: &NetSpec,
    params: &ParamVector,
    p: &PointSet,
    t: usize,
    base: &BaseSchedule,
    cond: Option<f64>,
) -> Result<(EpsOut, EgnnTrace)> {
    check_forward_inputs(spec, params, p, t, base, cond)?;
    let n = p.n_nodes();
    let h = spec.hidden;
    let in_dim = spec.in_dim();
    let t_frac = t as f64 / base.t_total() as f64;

    // Assemble input rows [feats, t/T, cond?] and embed them.
    let mut input_rows = vec![0.0; n * in_dim];
    for i in 0..n {
        let row = &mut input_rows[i * in_dim..(i + 1) * in_dim];
        row[..spec.feat_dim].copy_from_slice(p.feat(i));
        row[spec.feat_dim] = t_frac;
        if let Some(c) = cond {
            row[spec.feat_dim + 1] = c;
        }
    }
    let (emb_w, emb_b) = (params.segment("embed.w"), params.segment("embed.b"));
    let mut h0 = vec![0.0; n * h];
    for i in 0..n {
        matvec(
            emb_w,
            emb_b,
            &input_rows[i * in_dim..(i + 1) * in_dim],
            &mut h0[i * h..(i + 1) * h],
        );
    }

    let mut x = p.coords().to_vec();
    let mut hf = h0.clone();
    let n_pairs = if n > 1 { pair_count(n) } else { 0 };
    let inv_deg = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let mut layers = Vec::with_capacity(spec.layers);
    let mut layer_feats = Vec::with_capacity(spec.layers);

    for l in 0..spec.layers {
        let seg = |name: &str| params.segment(&format!("layer{l}.{name}"));
        let (e_w1, e_b1, e_w2, e_b2) = (seg("edge.w1"), seg("edge.b1"), seg("edge.w2"), seg("edge.b2"));
        let (c_w1, c_b1, c_w2, c_b2) = (seg("coord.w1"), seg("coord.b1"), seg("coord.w2"), seg("coord.b2"));
        let (n_w1, n_b1, n_w2, n_b2) = (seg("node.w1"), seg("node.b1"), seg("node.w2"), seg("node.b2"));

        let mut tr = LayerTrace {
            h_in: hf.clone(),
            d: vec![0.0; n_pairs * 3],
            e_z1: vec![0.0; n_pairs * h],
            e_a1: vec![0.0; n_pairs * h],
            e_z2: vec![0.0; n_pairs * h],
            m: vec![0.0; n_pairs * h],
            c_z1: vec![0.0; n_pairs * h],
            c_a1: vec![0.0; n_pairs * h],
            gate: vec![0.0; n_pairs],
            msum: vec![0.0; n * h],
            n_z1: vec![0.0; n * h],
            n_a1: vec![0.0; n * h],
            x_out: x.clone(),
            h_out: vec![0.0; n * h],
        };

        let mut e_in = vec![0.0; 2 * h + 1];
        for_pairs(n, |pp, i, j| {
            let d = &mut tr.d[pp * 3..pp * 3 + 3];
            let mut q = 0.0;
            for a in 0..3 {
                d[a] = x[i * 3 + a] - x[j * 3 + a];
                q += d[a] * d[a];
            }
            e_in[..h].copy_from_slice(&hf[i * h..(i + 1) * h]);
            e_in[h..2 * h].copy_from_slice(&hf[j * h..(j + 1) * h]);
            e_in[2 * h] = q;

            let z1 = &mut tr.e_z1[pp * h..(pp + 1) * h];
            matvec(e_w1, e_b1, &e_in, z1);
            let a1 = &mut tr.e_a1[pp * h..(pp + 1) * h];
            silu_slice(&tr.e_z1[pp * h..(pp + 1) * h], a1);
            let z2 = &mut tr.e_z2[pp * h..(pp + 1) * h];
            matvec(e_w2, e_b2, &tr.e_a1[pp * h..(pp + 1) * h], z2);
            let m = &mut tr.m[pp * h..(pp + 1) * h];
            silu_slice(&tr.e_z2[pp * h..(pp + 1) * h], m);

            let cz1 = &mut tr.c_z1[pp * h..(pp + 1) * h];
            matvec(c_w1, c_b1, &tr.m[pp * h..(pp + 1) * h], cz1);
            let ca1 = &mut tr.c_a1[pp * h..(pp + 1) * h];
            silu_slice(&tr.c_z1[pp * h..(pp + 1) * h], ca1);
            let mut g = c_b2[0];
            for (w, a) in c_w2.iter().zip(tr.c_a1[pp * h..(pp + 1) * h].iter()) {
                g += w * a;
            }
            tr.gate[pp] = g;

            for a in 0..3 {
                tr.x_out[i * 3 + a] += inv_deg * tr.d[pp * 3 + a] * g;
            }
            for (s, m) in tr.msum[i * h..(i + 1) * h]
                .iter_mut()
                .zip(tr.m[pp * h..(pp + 1) * h].iter())
            {
                *s += m;
            }
        });

        let mut n_in = vec![0.0; 2 * h];
        for i in 0..n {
            n_in[..h].copy_from_slice(&hf[i * h..(i + 1) * h]);
            n_in[h..].copy_from_slice(&tr.msum[i * h..(i + 1) * h]);
            matvec(n_w1, n_b1, &n_in, &mut tr.n_z1[i * h..(i + 1) * h]);
            {
                let (z1s, a1s) = (&tr.n_z1[i * h..(i + 1) * h], &mut tr.n_a1[i * h..(i + 1) * h]);
                silu_slice(z1s, a1s);
            }
            let mut upd = vec![0.0; h];
            matvec(n_w2, n_b2, &tr.n_a1[i * h..(i + 1) * h], &mut upd);
            for (o, (base_h, u)) in tr.h_out[i * h..(i + 1) * h]
                .iter_mut()
                .zip(hf[i * h..(i + 1) * h].iter().zip(&upd))
            {
                *o = base_h + u;
            }
        }

        x = tr.x_out.clone();
        hf = tr.h_out.clone();
        layer_feats.push(tr.h_out.clone());
        layers.push(tr);
    }

    // Coordinate head: accumulated displacement, centered.
    let mut eps_x = vec![0.0; n * 3];
    for (e, (xe, x0)) in eps_x.iter_mut().zip(x.iter().zip(p.coords())) {
        *e = xe - x0;
    }
    zero_com_project_in_place(&mut eps_x, n);

    // Feature head: linear readout of the final features.
    let (head_w, head_b) = (params.segment("head.w"), params.segment("head.b"));
    let mut eps_h = vec![0.0; n * spec.feat_dim];
    for i in 0..n {
        matvec(
            head_w,
            head_b,
            &hf[i * h..(i + 1) * h],
            &mut eps_h[i * spec.feat_dim..(i + 1) * spec.feat_dim],
        );
    }

    // Output stage: both blocks ride on a sigma-scaled copy of the input.
    // At high noise the input is mostly the corruption itself, so the learned
    // part only has to supply the remainder, and a silent network already
    // makes the variance-matched guess; the skip is constant in the
    // parameters, so the adjoints below are untouched.
    let sigma = base.alpha_sigma(t).1;
    for (e, v) in eps_x.iter_mut().zip(p.coords()) {
        *e += sigma * v;
    }
    for (e, v) in eps_h.iter_mut().zip(p.feats()) {
        *e += sigma * v;
    }

    let out = EpsOut {
        eps_x,
        eps_h,
        layer_feats,
    };
    let trace = EgnnTrace {
        n,
        t_frac,
        input_rows,
        h0,
        layers,
        h_final: hf,
    };
    Ok((out, trace))
}

/// Forward pass without a trace.
pub fn forward(
    spec: &NetSpec,
    params: &ParamVector,
    p: &PointSet,
    t: usize,
    base: &BaseSchedule,
    cond: Option<f64>,
) -> Result<EpsOut> {
    forward_traced(spec, params, p, t, base, cond).map(|(out, _)| out)
}

/// Adjoint seeds for [`backward`]: cotangents on the two noise blocks and on
/// selected per-layer feature matrices.
#[derive(Debug, Clone, Default)]
pub struct Seeds {
    pub eps_x: Option<Vec<f64>>,
    pub eps_h: Option<Vec<f64>>,
    pub layer_feats: Vec<(usize, Vec<f64>)>,
}

/// Hand-derived reverse pass. Returns parameter gradients aligned with the
/// spec layout.
pub fn backward(
    spec: &NetSpec,
    params: &ParamVector,
    trace: &EgnnTrace,
    seeds: &Seeds,
) -> ParamVector {
    let n = trace.n;
    let h = spec.hidden;
    let mut grads = ParamVector::zeros(spec.layout());
    let inv_deg = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };

    // Adjoint on the final coordinate state: center the eps_x seed (the
    // projection is symmetric and idempotent).
    let mut a_x = vec![0.0; n * 3];
    if let Some(seed) = &seeds.eps_x {
        a_x.copy_from_slice(seed);
        zero_com_project_in_place(&mut a_x, n);
    }

    // Adjoint on the final feature state via the head, plus head gradients.
    let mut a_h = vec![0.0; n * h];
    if let Some(seed) = &seeds.eps_h {
        let head_w = params.segment("head.w").to_vec();
        let (mut dw, mut db) = (vec![0.0; spec.feat_dim * h], vec![0.0; spec.feat_dim]);
        for i in 0..n {
            let dy = &seed[i * spec.feat_dim..(i + 1) * spec.feat_dim];
            outer_acc(&mut dw, &mut db, dy, &trace.h_final[i * h..(i + 1) * h]);
            matvec_t_acc(&head_w, dy, &mut a_h[i * h..(i + 1) * h]);
        }
        grads.segment_mut("head.w").copy_from_slice(&dw);
        grads.segment_mut("head.b").copy_from_slice(&db);
    }

    for l in (0..spec.layers).rev() {
        // Discriminator-style taps attach directly to this layer's output.
        for (tap, seed) in &seeds.layer_feats {
            if *tap == l {
                for (a, s) in a_h.iter_mut().zip(seed) {
                    *a += s;
                }
            }
        }

        let tr = &trace.layers[l];
        let seg = |name: &str| params.segment(&format!("layer{l}.{name}")).to_vec();
        let (e_w1, e_w2) = (seg("edge.w1"), seg("edge.w2"));
        let (c_w1, c_w2) = (seg("coord.w1"), seg("coord.w2"));
        let (n_w1, n_w2) = (seg("node.w1"), seg("node.w2"));

        let gseg = |grads: &mut ParamVector, name: &str| -> std::ops::Range<usize> {
            grads.layout().range(&format!("layer{l}.{name}")).unwrap()
        };
        let mut d_e_w1 = vec![0.0; h * (2 * h + 1)];
        let mut d_e_b1 = vec![0.0; h];
        let mut d_e_w2 = vec![0.0; h * h];
        let mut d_e_b2 = vec![0.0; h];
        let mut d_c_w1 = vec![0.0; h * h];
        let mut d_c_b1 = vec![0.0; h];
        let mut d_c_w2 = vec![0.0; h];
        let mut d_c_b2 = vec![0.0; 1];
        let mut d_n_w1 = vec![0.0; h * 2 * h];
        let mut d_n_b1 = vec![0.0; h];
        let mut d_n_w2 = vec![0.0; h * h];
        let mut d_n_b2 = vec![0.0; h];

        // Node MLP backward: residual + update; produces message-sum adjoints.
        let mut a_h_in = vec![0.0; n * h];
        let mut a_msum = vec![0.0; n * h];
        let mut n_in = vec![0.0; 2 * h];
        for i in 0..n {
            let dy = &a_h[i * h..(i + 1) * h];
            // residual branch
            for (acc, d) in a_h_in[i * h..(i + 1) * h].iter_mut().zip(dy) {
                *acc += d;
            }
            outer_acc(&mut d_n_w2, &mut d_n_b2, dy, &tr.n_a1[i * h..(i + 1) * h]);
            let mut a_a1 = vec![0.0; h];
            matvec_t_acc(&n_w2, dy, &mut a_a1);
            let z1 = &tr.n_z1[i * h..(i + 1) * h];
            let delta1: Vec<f64> = a_a1
                .iter()
                .zip(z1)
                .map(|(a, z)| a * silu_prime(*z))
                .collect();
            n_in[..h].copy_from_slice(&tr.h_in[i * h..(i + 1) * h]);
            n_in[h..].copy_from_slice(&tr.msum[i * h..(i + 1) * h]);
            outer_acc(&mut d_n_w1, &mut d_n_b1, &delta1, &n_in);
            let mut a_nin = vec![0.0; 2 * h];
            matvec_t_acc(&n_w1, &delta1, &mut a_nin);
            for (acc, d) in a_h_in[i * h..(i + 1) * h].iter_mut().zip(&a_nin[..h]) {
                *acc += d;
            }
            for (acc, d) in a_msum[i * h..(i + 1) * h].iter_mut().zip(&a_nin[h..]) {
                *acc += d;
            }
        }

        // Coordinate update + pair backward.
        let mut a_x_in = a_x.clone(); // identity branch of x_out = x_in + ...
        let mut e_in = vec![0.0; 2 * h + 1];
        for_pairs(n, |pp, i, j| {
            let d = &tr.d[pp * 3..pp * 3 + 3];
            let a_xo = &a_x[i * 3..i * 3 + 3];

            // gate and displacement adjoints from the coordinate update
            let a_gate = inv_deg * (a_xo[0] * d[0] + a_xo[1] * d[1] + a_xo[2] * d[2]);
            let mut a_d = [
                inv_deg * tr.gate[pp] * a_xo[0],
                inv_deg * tr.gate[pp] * a_xo[1],
                inv_deg * tr.gate[pp] * a_xo[2],
            ];

            // gate MLP backward
            let ca1 = &tr.c_a1[pp * h..(pp + 1) * h];
            d_c_b2[0] += a_gate;
            for (dw, a) in d_c_w2.iter_mut().zip(ca1) {
                *dw += a_gate * a;
            }
            let cz1 = &tr.c_z1[pp * h..(pp + 1) * h];
            let delta_c: Vec<f64> = c_w2
                .iter()
                .zip(cz1)
                .map(|(w, z)| a_gate * w * silu_prime(*z))
                .collect();
            let m = &tr.m[pp * h..(pp + 1) * h];
            outer_acc(&mut d_c_w1, &mut d_c_b1, &delta_c, m);
            let mut a_m = vec![0.0; h];
            matvec_t_acc(&c_w1, &delta_c, &mut a_m);

            // aggregation branch
            for (am, s) in a_m.iter_mut().zip(&a_msum[i * h..(i + 1) * h]) {
                *am += s;
            }

            // edge MLP backward
            let z2 = &tr.e_z2[pp * h..(pp + 1) * h];
            let delta_e2: Vec<f64> = a_m
                .iter()
                .zip(z2)
                .map(|(a, z)| a * silu_prime(*z))
                .collect();
            outer_acc(&mut d_e_w2, &mut d_e_b2, &delta_e2, &tr.e_a1[pp * h..(pp + 1) * h]);
            let mut a_a1 = vec![0.0; h];
            matvec_t_acc(&e_w2, &delta_e2, &mut a_a1);
            let z1 = &tr.e_z1[pp * h..(pp + 1) * h];
            let delta_e1: Vec<f64> = a_a1
                .iter()
                .zip(z1)
                .map(|(a, z)| a * silu_prime(*z))
                .collect();
            let hi = &tr.h_in[i * h..(i + 1) * h];
            let hj = &tr.h_in[j * h..(j + 1) * h];
            let q = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            e_in[..h].copy_from_slice(hi);
            e_in[h..2 * h].copy_from_slice(hj);
            e_in[2 * h] = q;
            outer_acc(&mut d_e_w1, &mut d_e_b1, &delta_e1, &e_in);
            let mut a_ein = vec![0.0; 2 * h + 1];
            matvec_t_acc(&e_w1, &delta_e1, &mut a_ein);
            for (acc, dd) in a_h_in[i * h..(i + 1) * h].iter_mut().zip(&a_ein[..h]) {
                *acc += dd;
            }
            for (acc, dd) in a_h_in[j * h..(j + 1) * h].iter_mut().zip(&a_ein[h..2 * h]) {
                *acc += dd;
            }
            let a_q = a_ein[2 * h];

            // squared distance and displacement into coordinate adjoints
            for a in 0..3 {
                a_d[a] += 2.0 * a_q * d[a];
                a_x_in[i * 3 + a] += a_d[a];
                a_x_in[j * 3 + a] -= a_d[a];
            }
        });

        let store = |grads: &mut ParamVector, name: &str, data: &[f64]| {
            let r = gseg(grads, name);
            grads.values_mut()[r].copy_from_slice(data);
        };
        store(&mut grads, "edge.w1", &d_e_w1);
        store(&mut grads, "edge.b1", &d_e_b1);
        store(&mut grads, "edge.w2", &d_e_w2);
        store(&mut grads, "edge.b2", &d_e_b2);
        store(&mut grads, "coord.w1", &d_c_w1);
        store(&mut grads, "coord.b1", &d_c_b1);
        store(&mut grads, "coord.w2", &d_c_w2);
        store(&mut grads, "coord.b2", &d_c_b2);
        store(&mut grads, "node.w1", &d_n_w1);
        store(&mut grads, "node.b1", &d_n_b1);
        store(&mut grads, "node.w2", &d_n_w2);
        store(&mut grads, "node.b2", &d_n_b2);

        a_x = a_x_in;
        a_h = a_h_in;
    }

    // Embedding backward.
    let in_dim = spec.in_dim();
    let (mut dw, mut db) = (vec![0.0; h * in_dim], vec![0.0; h]);
    for i in 0..n {
        outer_acc(
            &mut dw,
            &mut db,
            &a_h[i * h..(i + 1) * h],
            &trace.input_rows[i * in_dim..(i + 1) * in_dim],
        );
    }
    grads.segment_mut("embed.w").copy_from_slice(&dw);
    grads.segment_mut("embed.b").copy_from_slice(&db);
    let _ = &trace.h0;
    let _ = trace.t_frac;
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_rotation, zero_com_project, Rotation};
    use crate::netgrad::{grad_check, rel_err};

    fn toy_spec() -> NetSpec {
        NetSpec::new(8, 3, 2, 0).unwrap()
    }

    fn random_cloud(rng: &mut RngStream, n: usize, d: usize) -> PointSet {
        let coords = rng.normal_vec(n * 3);
        let feats = rng.normal_vec(n * d);
        zero_com_project(&PointSet::new(n, d, coords, feats).unwrap())
    }

    #[test]
    fn fresh_network_predicts_the_scaled_input() {
        let spec = toy_spec();
        let mut rng = RngStream::new(1);
        let params = spec.init_params(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        let p = random_cloud(&mut rng, 5, 2);
        for t in [0, 500, 1000] {
            let sigma = base.alpha_sigma(t).1;
            let out = forward(&spec, &params, &p, t, &base, None).unwrap();
            for (e, v) in out.eps_x.iter().zip(p.coords()) {
                assert_eq!(*e, sigma * v);
            }
            for (e, v) in out.eps_h.iter().zip(p.feats()) {
                assert_eq!(*e, sigma * v);
            }
            assert_eq!(out.layer_feats.len(), 3);
            assert!(out.layer_feats[0].iter().any(|v| v.abs() > 1e-6));
        }
    }

    #[test]
    fn rotation_equivariance_and_feature_invariance() {
        let spec = toy_spec();
        let mut rng = RngStream::new(2);
        let params = spec.init_params_nonzero(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        for trial in 0..100 {
            let n = 3 + (trial % 5);
            let p = random_cloud(&mut rng, n, 2);
            let r = Rotation::random(&mut rng);
            let out = forward(&spec, &params, &p, 250, &base, None).unwrap();
            let out_rot = forward(&spec, &params, &apply_rotation(&p, &r), 250, &base, None).unwrap();

            let mut expected = out.eps_x.clone();
            r.apply_rows(&mut expected);
            for (a, b) in out_rot.eps_x.iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-6, "coord equivariance broke: {a} vs {b}");
            }
            for (a, b) in out_rot.eps_h.iter().zip(&out.eps_h) {
                assert!((a - b).abs() <= 1e-10, "feature invariance broke: {a} vs {b}");
            }
            for (fa, fb) in out_rot.layer_feats.iter().zip(&out.layer_feats) {
                for (a, b) in fa.iter().zip(fb) {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn eps_x_is_centered() {
        let spec = toy_spec();
        let mut rng = RngStream::new(3);
        let params = spec.init_params_nonzero(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        for _ in 0..20 {
            let p = random_cloud(&mut rng, 6, 2);
            let out = forward(&spec, &params, &p, 100, &base, None).unwrap();
            let eps = PointSet::new(6, 2, out.eps_x.clone(), out.eps_h.clone()).unwrap();
            assert!(eps.com_drift() <= 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = toy_spec();
        let mut rng = RngStream::new(4);
        let params = spec.init_params_nonzero(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        let p = random_cloud(&mut rng, 4, 2);
        let a = forward(&spec, &params, &p, 42, &base, None).unwrap();
        let b = forward(&spec, &params, &p, 42, &base, None).unwrap();
        for (x, y) in a.eps_x.iter().zip(&b.eps_x) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.eps_h.iter().zip(&b.eps_h) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn conditioning_is_validated_and_used() {
        let spec = NetSpec::new(8, 2, 2, 1).unwrap();
        let mut rng = RngStream::new(5);
        let params = spec.init_params_nonzero(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        let p = random_cloud(&mut rng, 4, 2);
        assert!(forward(&spec, &params, &p, 10, &base, None).is_err());
        let a = forward(&spec, &params, &p, 10, &base, Some(0.5)).unwrap();
        let b = forward(&spec, &params, &p, 10, &base, Some(1.5)).unwrap();
        let diff: f64 = a.eps_h.iter().zip(&b.eps_h).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "conditioning value must reach the output");

        let uncond = toy_spec();
        let up = uncond.init_params(&mut rng);
        assert!(forward(&uncond, &up, &p, 10, &base, Some(0.5)).is_err());
    }

    #[test]
    fn single_node_forward_works() {
        let spec = toy_spec();
        let mut rng = RngStream::new(6);
        let params = spec.init_params_nonzero(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        let p = PointSet::new(1, 2, vec![0.0; 3], vec![0.3, 0.7]).unwrap();
        let out = forward(&spec, &params, &p, 77, &base, None).unwrap();
        assert!(out.eps_x.iter().all(|v| v.abs() <= 1e-12));
        assert_eq!(out.eps_h.len(), 2);
    }

    #[test]
    fn eps_to_score_scales_and_guards() {
        let out = EpsOut {
            eps_x: vec![0.2, -0.4, 0.2, -0.2, 0.4, -0.2],
            eps_h: vec![1.0, -2.0, 0.0, 1.0],
            layer_feats: vec![],
        };
        let s = eps_to_score(&out, 2, 2, 0.5).unwrap();
        assert!((s.coords()[0] + 0.4).abs() < 1e-15);
        assert!((s.feats()[1] - 4.0).abs() < 1e-15);
        assert!(eps_to_score(&out, 2, 2, 1e-7).is_err());
    }

    /// Scalar functional of all outputs, used to exercise every adjoint path.
    fn weighted_output_loss(
        spec: &NetSpec,
        params: &ParamVector,
        p: &PointSet,
        wx: &[f64],
        wh: &[f64],
        wf: &[Vec<f64>],
    ) -> Result<f64> {
        let base = BaseSchedule::new(1000).unwrap();
        let out = forward(spec, params, p, 300, &base, None)?;
        let mut loss = 0.0;
        for (a, b) in out.eps_x.iter().zip(wx) {
            loss += a * b;
        }
        for (a, b) in out.eps_h.iter().zip(wh) {
            loss += a * b;
        }
        for (feats, w) in out.layer_feats.iter().zip(wf) {
            for (a, b) in feats.iter().zip(w) {
                loss += a * b;
            }
        }
        Ok(loss)
    }

    #[test]
    fn hand_adjoints_match_central_differences() {
        let spec = toy_spec();
        let mut rng = RngStream::new(7);
        let params = spec.init_params_nonzero(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        let p = random_cloud(&mut rng, 5, 2);
        let wx: Vec<f64> = rng.normal_vec(5 * 3);
        let wh: Vec<f64> = rng.normal_vec(5 * 2);
        let wf: Vec<Vec<f64>> = (0..spec.layers).map(|_| rng.normal_vec(5 * 8)).collect();

        let (_, trace) = forward_traced(&spec, &params, &p, 300, &base, None).unwrap();
        let seeds = Seeds {
            eps_x: Some(wx.clone()),
            eps_h: Some(wh.clone()),
            layer_feats: wf.iter().cloned().enumerate().collect(),
        };
        let grad = backward(&spec, &params, &trace, &seeds);

        let f = |q: &ParamVector| weighted_output_loss(&spec, q, &p, &wx, &wh, &wf);
        let err = grad_check(f, &grad, &params, 60, 1e-5, &mut rng).unwrap();
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn backward_is_deterministic_and_linear_in_seeds() {
        let spec = toy_spec();
        let mut rng = RngStream::new(8);
        let params = spec.init_params_nonzero(&mut rng);
        let base = BaseSchedule::new(1000).unwrap();
        let p = random_cloud(&mut rng, 4, 2);
        let (_, trace) = forward_traced(&spec, &params, &p, 10, &base, None).unwrap();

        let sx: Vec<f64> = rng.normal_vec(12);
        let sh: Vec<f64> = rng.normal_vec(8);
        let seeds_x = Seeds {
            eps_x: Some(sx.clone()),
            ..Default::default()
        };
        let seeds_h = Seeds {
            eps_h: Some(sh.clone()),
            ..Default::default()
        };
        let seeds_both = Seeds {
            eps_x: Some(sx),
            eps_h: Some(sh),
            ..Default::default()
        };
        let ga = backward(&spec, &params, &trace, &seeds_x);
        let gb = backward(&spec, &params, &trace, &seeds_h);
        let gboth = backward(&spec, &params, &trace, &seeds_both);
        for ((a, b), both) in ga.values().iter().zip(gb.values()).zip(gboth.values()) {
            assert!(rel_err(a + b, *both) <= 1e-12);
        }

        let again = backward(&spec, &params, &trace, &seeds_x);
        for (a, b) in ga.values().iter().zip(again.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
