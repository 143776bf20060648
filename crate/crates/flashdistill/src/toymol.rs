//! Two-element toy molecules with a distance lookup table for bonds.
//!
//! Element 0 (called A) has valence 1, element 1 (called B) has valence 2,
//! and a pair of atoms is bonded exactly when its distance falls inside the
//! interval for that type pair. The intervals are disjoint and well
//! separated, so stability is a sharp function of geometry.
//!
//! With these valences the only satisfiable connected graphs are chains
//! A-B-...-B-A (two atoms give the A-A pair). The generator embeds chains
//! with bonds at interval midpoints as planar zigzags whose joint angles stay
//! within [110, 180] degrees; that keeps every non-bonded pair strictly
//! outside all intervals while spreading the radius of gyration, which the
//! conditional task targets. A small coordinate jitter and a random rigid
//! pose follow, and each molecule is re-scored after the fact so the emitted
//! dataset is stable by construction.

use crate::geom::{zero_com_project, PointSet, Rotation};
use crate::rng::RngStream;
use crate::{Error, Result};
use serde::Serialize;
use std::collections::BTreeSet;

const N_TYPES: usize = 2;
const TYPE_A: usize = 0;
const TYPE_B: usize = 1;

/// Bond table, valences, and generation jitter for the toy chemistry.
#[derive(Debug, Clone)]
pub struct ToyChemSpec {
    /// Distance interval per unordered type pair, indexed symmetrically.
    bond_table: [[(f64, f64); N_TYPES]; N_TYPES],
    valence: [usize; N_TYPES],
    pub jitter_sigma: f64,
}

impl Default for ToyChemSpec {
    fn default() -> Self {
        let aa = (0.90, 1.10);
        let ab = (1.30, 1.50);
        let bb = (1.70, 1.90);
        ToyChemSpec {
            bond_table: [[aa, ab], [ab, bb]],
            valence: [1, 2],
            jitter_sigma: 0.01,
        }
    }
}

impl ToyChemSpec {
    pub fn feat_dim(&self) -> usize {
        N_TYPES
    }

    pub fn interval(&self, a: usize, b: usize) -> (f64, f64) {
        self.bond_table[a][b]
    }

    pub fn valence(&self, t: usize) -> usize {
        self.valence[t]
    }

    fn bond_length(&self, a: usize, b: usize) -> f64 {
        let (lo, hi) = self.interval(a, b);
        0.5 * (lo + hi)
    }

    fn bonded(&self, a: usize, b: usize, dist: f64) -> bool {
        let (lo, hi) = self.interval(a, b);
        (lo..=hi).contains(&dist)
    }
}

/// Aggregate sample quality. Atom stability pools atoms across all samples;
/// the other three are per-molecule fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MolMetrics {
    pub atom_stab: f64,
    pub mol_stab: f64,
    pub valid: f64,
    pub valid_unique: f64,
    pub n_samples: usize,
}

fn one_hot(t: usize) -> [f64; N_TYPES] {
    let mut f = [0.0; N_TYPES];
    f[t] = 1.0;
    f
}

/// Atom types along a chain of `n` atoms: A-A for two, A-B-...-B-A beyond.
fn chain_types(n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| if i == 0 || i == n - 1 { TYPE_A } else { TYPE_B })
        .collect()
}

/// Planar zigzag embedding of the size-`n` chain with bonds at interval
/// midpoints. `half_turns[k]` bends segment `k` away from the axis by up to
/// 35 degrees with alternating sign, which bounds every joint angle to
/// [110, 180] degrees and keeps the chain advancing monotonically.
pub(crate) fn chain_template(spec: &ToyChemSpec, n: usize, half_turns: &[f64]) -> PointSet {
    assert!(n >= 2, "chains need at least two atoms");
    assert_eq!(half_turns.len(), n - 1);
    let types = chain_types(n);
    let mut coords = vec![0.0; n * 3];
    let mut pos = [0.0f64; 3];
    for k in 0..n - 1 {
        let beta = half_turns[k];
        debug_assert!((0.0..=35.0f64.to_radians()).contains(&beta));
        let phi = if k % 2 == 0 { beta } else { -beta };
        let len = spec.bond_length(types[k], types[k + 1]);
        pos[0] += len * phi.cos();
        pos[1] += len * phi.sin();
        coords[(k + 1) * 3..(k + 1) * 3 + 3].copy_from_slice(&pos);
    }
    let feats = types.iter().flat_map(|t| one_hot(*t)).collect();
    PointSet::new(n, N_TYPES, coords, feats).expect("template coordinates are finite")
}

/// Per-molecule scoring: stable atom count, molecule stability, validity,
/// and the uniqueness key of valid molecules.
struct MoleculeReport {
    stable_atoms: usize,
    stable: bool,
    valid: bool,
    key: Option<String>,
}

fn score_molecule(p: &PointSet, spec: &ToyChemSpec) -> MoleculeReport {
    let n = p.n_nodes();
    let types: Vec<usize> = (0..n).map(|i| p.argmax_feat(i)).collect();
    let mut degree = vec![0usize; n];
    let mut bonds: Vec<(usize, usize)> = Vec::new();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if spec.bonded(types[i], types[j], p.distance(i, j)) {
                degree[i] += 1;
                degree[j] += 1;
                let (a, b) = (types[i].min(types[j]), types[i].max(types[j]));
                bonds.push((a, b));
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let stable_atoms = (0..n)
        .filter(|i| degree[*i] == spec.valence(types[*i]))
        .count();
    let stable = stable_atoms == n;
    let connected = {
        let r0 = root(&mut parent, 0);
        (1..n).all(|i| root(&mut parent, i) == r0)
    };
    let valid = stable && connected;
    let key = valid.then(|| {
        let mut counts = [0usize; N_TYPES];
        for t in &types {
            counts[*t] += 1;
        }
        bonds.sort_unstable();
        let bond_part: Vec<String> = bonds.iter().map(|(a, b)| format!("{a}{b}")).collect();
        format!("{:?}|{}", counts, bond_part.join(","))
    });
    MoleculeReport {
        stable_atoms,
        stable,
        valid,
        key,
    }
}

#[cfg(test)]
fn uniqueness_key(p: &PointSet, spec: &ToyChemSpec) -> Option<String> {
    score_molecule(p, spec).key
}

/// Scores a batch against the bond table.
pub fn compute_metrics(samples: &[PointSet], spec: &ToyChemSpec) -> Result<MolMetrics> {
    if samples.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if let Some(p) = samples.iter().find(|p| p.feat_dim() != N_TYPES) {
        return Err(Error::invalid(format!(
            "samples must carry {N_TYPES} type features, got {}",
            p.feat_dim()
        )));
    }
    let mut atoms = 0usize;
    let mut stable_atoms = 0usize;
    let mut stable_mols = 0usize;
    let mut valid_mols = 0usize;
    let mut keys = BTreeSet::new();
    for p in samples {
        let r = score_molecule(p, spec);
        atoms += p.n_nodes();
        stable_atoms += r.stable_atoms;
        stable_mols += r.stable as usize;
        valid_mols += r.valid as usize;
        if let Some(k) = r.key {
            keys.insert(k);
        }
    }
    let n = samples.len() as f64;
    Ok(MolMetrics {
        atom_stab: stable_atoms as f64 / atoms as f64,
        mol_stab: stable_mols as f64 / n,
        valid: valid_mols as f64 / n,
        valid_unique: keys.len() as f64 / n,
        n_samples: samples.len(),
    })
}

const MAX_REDRAWS: usize = 100;

/// Draws `n` molecules with sizes uniform over `size_range`, re-drawing any
/// embedding that fails its own stability check.
pub fn generate_dataset(
    spec: &ToyChemSpec,
    n: usize,
    size_range: (usize, usize),
    rng: &mut RngStream,
) -> Result<Vec<PointSet>> {
    let (lo, hi) = size_range;
    if lo < 2 || lo > hi || hi > 9 {
        return Err(Error::invalid(format!(
            "chain sizes {lo}..{hi} outside the supported 2..9 range"
        )));
    }
    let max_beta = 35.0f64.to_radians();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let size = rng.uniform_int(lo, hi);
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let half_turns: Vec<f64> = (0..size - 1)
                .map(|_| rng.uniform_range(0.0, max_beta))
                .collect();
            let template = chain_template(spec, size, &half_turns);
            let mut coords = template.coords().to_vec();
            for c in coords.iter_mut() {
                *c += spec.jitter_sigma * rng.normal();
            }
            let jittered =
                PointSet::new(size, N_TYPES, coords, template.feats().to_vec()).expect("finite");
            let centered = zero_com_project(&jittered);
            let posed = crate::geom::apply_rotation(&centered, &Rotation::random(rng));
            let report = score_molecule(&posed, spec);
            if report.valid {
                accepted = Some(posed);
                break;
            }
        }
        match accepted {
            Some(p) => out.push(p),
            None => {
                return Err(Error::invalid(format!(
                    "no stable size-{size} embedding found in {MAX_REDRAWS} draws \
                     (jitter {} too large for the bond intervals)",
                    spec.jitter_sigma
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::apply_rotation;

    #[test]
    fn pristine_dataset_is_stable_valid_and_centered() {
        let spec = ToyChemSpec::default();
        let mut rng = RngStream::new(30);
        let data = generate_dataset(&spec, 300, (3, 7), &mut rng).unwrap();
        let m = compute_metrics(&data, &spec).unwrap();
        assert!(m.mol_stab >= 0.99);
        assert_eq!(m.valid, 1.0);
        assert_eq!(m.atom_stab, 1.0);
        for p in &data {
            assert!(p.com_drift() <= 1e-8);
        }
    }

    #[test]
    fn straight_three_chain_sits_at_interval_midpoints() {
        let spec = ToyChemSpec::default();
        let p = chain_template(&spec, 3, &[0.0, 0.0]);
        assert!((p.distance(0, 1) - 1.40).abs() <= 1e-12);
        assert!((p.distance(1, 2) - 1.40).abs() <= 1e-12);
        assert!((p.distance(0, 2) - 2.80).abs() <= 1e-12);
        assert_eq!(p.argmax_feat(0), TYPE_A);
        assert_eq!(p.argmax_feat(1), TYPE_B);
    }

    #[test]
    fn bent_chains_keep_non_bonded_pairs_out_of_every_interval() {
        let spec = ToyChemSpec::default();
        let max_beta = 35.0f64.to_radians();
        let mut rng = RngStream::new(31);
        for _ in 0..200 {
            let n = rng.uniform_int(3, 9);
            let half_turns: Vec<f64> = (0..n - 1)
                .map(|_| rng.uniform_range(0.0, max_beta))
                .collect();
            let p = chain_template(&spec, n, &half_turns);
            for i in 0..n {
                for j in i + 2..n {
                    assert!(p.distance(i, j) > 1.90 + 0.05, "pair {i},{j} too close");
                }
            }
        }
    }

    #[test]
    fn coincident_atoms_are_completely_unstable() {
        let spec = ToyChemSpec::default();
        let feats = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let p = PointSet::new(4, 2, vec![0.0; 12], feats).unwrap();
        let m = compute_metrics(&[p], &spec).unwrap();
        assert_eq!(m.atom_stab, 0.0);
        assert_eq!(m.mol_stab, 0.0);
        assert_eq!(m.valid, 0.0);
        assert_eq!(m.valid_unique, 0.0);
    }

    #[test]
    fn duplicated_molecule_halves_uniqueness() {
        let spec = ToyChemSpec::default();
        let mut rng = RngStream::new(32);
        let data = generate_dataset(&spec, 1, (4, 4), &mut rng).unwrap();
        let batch = vec![data[0].clone(), data[0].clone()];
        let m = compute_metrics(&batch, &spec).unwrap();
        assert_eq!(m.valid, 1.0);
        assert_eq!(m.valid_unique, 0.5);
    }

    #[test]
    fn metrics_ignore_pose_and_node_order() {
        let spec = ToyChemSpec::default();
        let mut rng = RngStream::new(33);
        let data = generate_dataset(&spec, 20, (3, 6), &mut rng).unwrap();
        let base = compute_metrics(&data, &spec).unwrap();

        let rotated: Vec<PointSet> = data
            .iter()
            .map(|p| apply_rotation(p, &Rotation::random(&mut rng)))
            .collect();
        assert_eq!(compute_metrics(&rotated, &spec).unwrap(), base);

        let translated: Vec<PointSet> = data
            .iter()
            .map(|p| {
                let coords = p.coords().iter().enumerate().map(|(k, c)| c + [1.5, -2.0, 0.25][k % 3]).collect();
                PointSet::new(p.n_nodes(), p.feat_dim(), coords, p.feats().to_vec()).unwrap()
            })
            .collect();
        assert_eq!(compute_metrics(&translated, &spec).unwrap(), base);

        let permuted: Vec<PointSet> = data
            .iter()
            .map(|p| {
                let perm = rng.permutation(p.n_nodes());
                let mut coords = vec![0.0; p.coords().len()];
                let mut feats = vec![0.0; p.feats().len()];
                for (dst, src) in perm.iter().enumerate() {
                    coords[dst * 3..dst * 3 + 3].copy_from_slice(&p.coord(*src));
                    feats[dst * p.feat_dim()..(dst + 1) * p.feat_dim()].copy_from_slice(p.feat(*src));
                }
                PointSet::new(p.n_nodes(), p.feat_dim(), coords, feats).unwrap()
            })
            .collect();
        assert_eq!(compute_metrics(&permuted, &spec).unwrap(), base);
    }

    #[test]
    fn heavy_jitter_degrades_atom_stability() {
        let spec = ToyChemSpec::default();
        let mut rng = RngStream::new(34);
        let data = generate_dataset(&spec, 200, (3, 6), &mut rng).unwrap();
        let noisy: Vec<PointSet> = data
            .iter()
            .map(|p| {
                let coords = p.coords().iter().map(|c| c + 0.12 * rng.normal()).collect();
                PointSet::new(p.n_nodes(), p.feat_dim(), coords, p.feats().to_vec()).unwrap()
            })
            .collect();
        let clean = compute_metrics(&data, &spec).unwrap();
        let degraded = compute_metrics(&noisy, &spec).unwrap();
        assert!(degraded.atom_stab < clean.atom_stab);
        assert!(degraded.atom_stab < 0.9);
    }

    #[test]
    fn every_chain_size_has_a_distinct_uniqueness_key() {
        let spec = ToyChemSpec::default();
        let mut keys = BTreeSet::new();
        for n in 2..=9 {
            let p = chain_template(&spec, n, &vec![0.2; n - 1]);
            let key = uniqueness_key(&p, &spec).expect("templates are valid");
            assert!(keys.insert(key), "size {n} collides with a smaller chain");
        }
        assert_eq!(keys.len(), 8);
    }

    #[test]
    fn unsupported_size_ranges_are_rejected() {
        let spec = ToyChemSpec::default();
        let mut rng = RngStream::new(35);
        assert!(generate_dataset(&spec, 2, (1, 3), &mut rng).is_err());
        assert!(generate_dataset(&spec, 2, (5, 12), &mut rng).is_err());
        assert!(generate_dataset(&spec, 2, (6, 4), &mut rng).is_err());
    }

    #[test]
    fn dataset_covers_the_requested_size_range() {
        let spec = ToyChemSpec::default();
        let mut rng = RngStream::new(36);
        let data = generate_dataset(&spec, 300, (3, 6), &mut rng).unwrap();
        let sizes: BTreeSet<usize> = data.iter().map(|p| p.n_nodes()).collect();
        assert!(sizes.iter().all(|s| (3..=6).contains(s)));
        assert_eq!(sizes.len(), 4);
    }

    #[test]
    fn oversized_jitter_eventually_errors() {
        let mut spec = ToyChemSpec::default();
        spec.jitter_sigma = 1.5;
        let mut rng = RngStream::new(37);
        assert!(generate_dataset(&spec, 1, (6, 6), &mut rng).is_err());
    }
}
