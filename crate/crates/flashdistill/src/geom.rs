//! Point clouds with per-node features, rigid rotations, and text I/O.
//!
//! A [`PointSet`] holds `n` nodes, each with a 3-d coordinate and a `d`-dim
//! feature row. Coordinates are treated as centered: every producer in the
//! pipeline projects the center of mass out, and consumers that assume a
//! centered cloud check it. Rotations act on row vectors from the right,
//! `x' = x R`, and never touch features.

use crate::rng::RngStream;
use crate::{Error, Result};
use std::io::{BufRead, Write};

/// Nodes with 3-d coordinates and `d`-dim features, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub(crate) coords: Vec<f64>,
    pub(crate) feats: Vec<f64>,
    n: usize,
    d: usize,
}

impl PointSet {
    /// Builds a point set after checking shapes and finiteness.
    pub fn new(n: usize, d: usize, coords: Vec<f64>, feats: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("point set needs at least one node"));
        }
        if coords.len() != n * 3 {
            return Err(Error::invalid(format!(
                "coords length {} does not match {n} nodes",
                coords.len()
            )));
        }
        if feats.len() != n * d {
            return Err(Error::invalid(format!(
                "feats length {} does not match {n}x{d}",
                feats.len()
            )));
        }
        if !coords.iter().chain(feats.iter()).all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite entry in point set"));
        }
        Ok(PointSet { coords, feats, n, d })
    }

    /// All-zero point set.
    pub fn zeros(n: usize, d: usize) -> Self {
        PointSet {
            coords: vec![0.0; n * 3],
            feats: vec![0.0; n * d],
            n,
            d,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn feat_dim(&self) -> usize {
        self.d
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn coord(&self, i: usize) -> [f64; 3] {
        [
            self.coords[3 * i],
            self.coords[3 * i + 1],
            self.coords[3 * i + 2],
        ]
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.d..(i + 1) * self.d]
    }

    /// Mean coordinate (center of mass with unit weights).
    pub fn coord_mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for i in 0..self.n {
            for a in 0..3 {
                m[a] += self.coords[3 * i + a];
            }
        }
        for a in &mut m {
            *a /= self.n as f64;
        }
        m
    }

    /// Largest absolute component of the coordinate mean.
    pub fn com_drift(&self) -> f64 {
        self.coord_mean().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Euclidean distance between nodes `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.coord(i);
        let b = self.coord(j);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// Radius of gyration, `sqrt(mean_i |x_i - xbar|^2)`.
    pub fn radius_of_gyration(&self) -> f64 {
        let m = self.coord_mean();
        let mut acc = 0.0;
        for i in 0..self.n {
            let c = self.coord(i);
            acc += (c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2) + (c[2] - m[2]).powi(2);
        }
        (acc / self.n as f64).sqrt()
    }

    /// Index of the largest feature entry per node (ties pick the lowest index).
    pub fn argmax_feat(&self, i: usize) -> usize {
        let row = self.feat(i);
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        best
    }
}

/// Subtracts the coordinate mean so the cloud is centered at the origin.
pub fn zero_com_project(p: &PointSet) -> PointSet {
    let mut out = p.clone();
    zero_com_project_in_place(&mut out.coords, out.n);
    out
}

/// In-place center-of-mass projection over a row-major `n x 3` buffer.
pub fn zero_com_project_in_place(coords: &mut [f64], n: usize) {
    debug_assert_eq!(coords.len(), n * 3);
    let mut m = [0.0f64; 3];
    for i in 0..n {
        for a in 0..3 {
            m[a] += coords[3 * i + a];
        }
    }
    for a in &mut m {
        *a /= n as f64;
    }
    for i in 0..n {
        for a in 0..3 {
            coords[3 * i + a] -= m[a];
        }
    }
}

/// Proper rotation of 3-space, stored row-major; acts on row vectors as `x R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `theta` radians about the z axis: `(1,0,0) -> (cos, sin, 0)`.
    pub fn about_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rotation {
            m: [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Haar-uniform random rotation via a normalized quaternion.
    pub fn random(rng: &mut RngStream) -> Self {
        loop {
            let q: Vec<f64> = rng.normal_vec(4);
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
            return Rotation {
                m: [
                    [
                        1.0 - 2.0 * (y * y + z * z),
                        2.0 * (x * y + w * z),
                        2.0 * (x * z - w * y),
                    ],
                    [
                        2.0 * (x * y - w * z),
                        1.0 - 2.0 * (x * x + z * z),
                        2.0 * (y * z + w * x),
                    ],
                    [
                        2.0 * (x * z + w * y),
                        2.0 * (y * z - w * x),
                        1.0 - 2.0 * (x * x + y * y),
                    ],
                ],
            };
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn transpose(&self) -> Rotation {
        let mut t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                t[i][j] = self.m[j][i];
            }
        }
        Rotation { m: t }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max abs entry of `R R^T - I`.
    pub fn orthogonality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += self.m[i][k] * self.m[j][k];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Rotates a single row vector.
    pub fn apply_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for j in 0..3 {
            out[j] = v[0] * self.m[0][j] + v[1] * self.m[1][j] + v[2] * self.m[2][j];
        }
        out
    }

    /// Rotates every row of a row-major `n x 3` buffer in place.
    pub fn apply_rows(&self, coords: &mut [f64]) {
        debug_assert_eq!(coords.len() % 3, 0);
        for row in coords.chunks_exact_mut(3) {
            let v = self.apply_vec([row[0], row[1], row[2]]);
            row.copy_from_slice(&v);
        }
    }
}

/// Rotates coordinates, leaves features alone.
pub fn apply_rotation(p: &PointSet, r: &Rotation) -> PointSet {
    let mut out = p.clone();
    r.apply_rows(&mut out.coords);
    out
}

/// Writes point sets in XYZ-style text: a node-count line, a comment line,
/// then one `type x y z f..` row per node with 9 significant digits.
/// Records are separated by a blank line.
pub fn write_xyz<W: Write>(w: &mut W, sets: &[PointSet], comment: &str) -> Result<()> {
    for (k, p) in sets.iter().enumerate() {
        if k > 0 {
            writeln!(w)?;
        }
        writeln!(w, "{}", p.n_nodes())?;
        writeln!(w, "{comment}")?;
        for i in 0..p.n_nodes() {
            let c = p.coord(i);
            let mut line = format!("{} {:.8e} {:.8e} {:.8e}", p.argmax_feat(i), c[0], c[1], c[2]);
            for f in p.feat(i) {
                line.push_str(&format!(" {f:.8e}"));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Reads the format produced by [`write_xyz`], skipping blank separator lines.
pub fn read_xyz<R: BufRead>(r: &mut R) -> Result<Vec<PointSet>> {
    let mut lines = Vec::new();
    for line in r.lines() {
        lines.push(line?);
    }
    let mut sets = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        if lines[pos].trim().is_empty() {
            pos += 1;
            continue;
        }
        let n: usize = lines[pos]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad node count line: {:?}", lines[pos])))?;
        if n == 0 {
            return Err(Error::Parse("record with zero nodes".into()));
        }
        pos += 2; // skip comment line
        if pos + n > lines.len() {
            return Err(Error::Parse("truncated record".into()));
        }
        let mut coords = Vec::with_capacity(n * 3);
        let mut feats = Vec::new();
        let mut d = None;
        for i in 0..n {
            let fields: Vec<&str> = lines[pos + i].split_whitespace().collect();
            if fields.len() < 5 {
                return Err(Error::Parse(format!("short node line: {:?}", lines[pos + i])));
            }
            let row_d = fields.len() - 4;
            match d {
                None => d = Some(row_d),
                Some(prev) if prev != row_d => {
                    return Err(Error::Parse("inconsistent feature dimension".into()))
                }
                _ => {}
            }
            for field in &fields[1..] {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad float {field:?}")))?;
                if coords.len() < (i + 1) * 3 {
                    coords.push(v);
                } else {
                    feats.push(v);
                }
            }
        }
        pos += n;
        sets.push(PointSet::new(n, d.unwrap(), coords, feats)?);
    }
    Ok(sets)
}
