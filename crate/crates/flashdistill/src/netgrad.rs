//! Flat parameter vectors, gradient reports, numerical gradient checking,
//! and the on-disk checkpoint format.
//!
//! Networks keep all weights in one [`ParamVector`]: a flat `Vec<f64>` plus a
//! named-segment [`Layout`] so callers can view a slice per weight matrix.
//! Gradients come back as a [`GradReport`] over the same layout. Analytic
//! adjoints are hand-derived per network; [`grad_check`] is the arbiter of
//! their correctness, probing random directions with central differences.
//! Detached quantities (targets built from scores, exponential averages) are
//! plain arrays that simply never enter a backward pass.

use crate::rng::RngStream;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Named, contiguous, non-overlapping segments covering a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<(String, usize, usize)>, // name, offset, len
    total: usize,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.segments.iter().map(|(n, o, l)| (n.as_str(), *o, *l))
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.segments
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, o, l)| *o..*o + *l)
    }
}

/// Builds a [`Layout`] by appending named segments.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    segments: Vec<(String, usize, usize)>,
    total: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment and returns its index range.
    pub fn add(&mut self, name: &str, len: usize) -> std::ops::Range<usize> {
        assert!(
            !self.segments.iter().any(|(n, _, _)| n == name),
            "duplicate segment name {name}"
        );
        let offset = self.total;
        self.segments.push((name.to_string(), offset, len));
        self.total += len;
        offset..offset + len
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout {
            segments: self.segments,
            total: self.total,
        })
    }
}

/// Flat parameter vector with a shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::invalid(format!(
                "value length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no segment named {name}"));
        &self.values[r]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("no segment named {name}"));
        &mut self.values[r]
    }

    /// `self += a * other` over the raw values.
    pub fn add_scaled(&mut self, a: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Loss value plus its gradient over a parameter vector.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub loss: f64,
    pub grad: ParamVector,
}

impl GradReport {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        GradReport {
            loss: 0.0,
            grad: ParamVector::zeros(layout),
        }
    }

    /// `self += a * other` on both loss and gradient.
    pub fn add_scaled(&mut self, a: f64, other: &GradReport) {
        self.loss += a * other.loss;
        self.grad.add_scaled(a, &other.grad);
    }

    pub fn scale(&mut self, a: f64) {
        self.loss *= a;
        for g in self.grad.values_mut() {
            *g *= a;
        }
    }
}

/// Relative error convention used across the crate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// `y = W x + b` with `W` row-major `out x in`.
pub(crate) fn matvec(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let (out_dim, in_dim) = (y.len(), x.len());
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(b.len(), out_dim);
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *yo = acc;
    }
}

/// `dx += W^T dy` with `W` row-major `out x in`.
pub(crate) fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let (out_dim, in_dim) = (dy.len(), dx.len());
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for (o, dyo) in dy.iter().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for (wi, dxi) in row.iter().zip(dx.iter_mut()) {
            *dxi += wi * dyo;
        }
    }
}

/// `dW += dy x^T` (and `db += dy`), accumulating weight gradients.
pub(crate) fn outer_acc(dw: &mut [f64], db: &mut [f64], dy: &[f64], x: &[f64]) {
    let in_dim = x.len();
    debug_assert_eq!(dw.len(), dy.len() * in_dim);
    for (o, dyo) in dy.iter().enumerate() {
        db[o] += dyo;
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for (ri, xi) in row.iter_mut().zip(x) {
            *ri += dyo * xi;
        }
    }
}

/// Checks an analytic gradient against central differences along random unit
/// directions. Returns the worst relative error between the analytic
/// directional derivative `grad . u` and `(f(p + eps u) - f(p - eps u)) / 2 eps`.
pub fn grad_check<F>(
    f: F,
    analytic_grad: &ParamVector,
    at: &ParamVector,
    n_directions: usize,
    eps: f64,
    rng: &mut RngStream,
) -> Result<f64>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if analytic_grad.len() != at.len() {
        return Err(Error::invalid("gradient and parameter lengths differ"));
    }
    let mut worst = 0.0f64;
    for k in 0..n_directions {
        let mut u = rng.normal_vec(at.len());
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        for v in &mut u {
            *v /= norm;
        }
        let analytic: f64 = analytic_grad
            .values()
            .iter()
            .zip(&u)
            .map(|(g, ui)| g * ui)
            .sum();
        let probe = |sign: f64| -> Result<f64> {
            let mut shifted = at.clone();
            for (x, ui) in shifted.values_mut().iter_mut().zip(&u) {
                *x += sign * eps * ui;
            }
            let val = f(&shifted)?;
            if !val.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at probe direction {k}, sign {}",
                    if sign > 0.0 { "+" } else { "-" }
                )));
            }
            Ok(val)
        };
        let plus = probe(1.0)?;
        let minus = probe(-1.0)?;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCP";
const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
}

/// Writes a checkpoint: schema version, a JSON metadata header (network
/// specs and friends), then each named parameter vector as its segments,
/// each segment stored as name, length, and raw little-endian f64 values.
pub fn save_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    vectors: &[(&str, &ParamVector)],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_u64(&mut w, meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    write_u32(&mut w, vectors.len() as u32)?;
    for (name, pv) in vectors {
        write_str(&mut w, name)?;
        let segs: Vec<(&str, usize, usize)> = pv.layout().segments().collect();
        write_u32(&mut w, segs.len() as u32)?;
        for (seg_name, offset, len) in segs {
            write_str(&mut w, seg_name)?;
            write_u64(&mut w, len as u64)?;
            for v in &pv.values()[offset..offset + len] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back: metadata JSON plus named parameter vectors.
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, ParamVector)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated file".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| Error::Checkpoint("truncated metadata".into()))?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_vectors = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(n_vectors as usize);
    for _ in 0..n_vectors {
        let vec_name = read_str(&mut r)?;
        let n_segments = read_u32(&mut r)?;
        let mut builder = LayoutBuilder::new();
        let mut values = Vec::new();
        for _ in 0..n_segments {
            let seg_name = read_str(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            builder.add(&seg_name, len);
            for _ in 0..len {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint("truncated segment data".into()))?;
                values.push(f64::from_le_bytes(buf));
            }
        }
        let pv = ParamVector::from_values(builder.build(), values)?;
        out.push((vec_name, pv));
    }
    Ok((meta, out))
}
