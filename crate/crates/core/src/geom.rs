//! Chain graphs, the two geometric input signals, rigid superposition and
//! reconstruction metrics.
//!
//! The chain model has one vertex per residue, so residue separation and atom
//! index separation coincide.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::trajdata::ConformationFrame;

pub type Point3 = [f64; 3];

pub const DEFAULT_CONTACT_CUTOFF: f64 = 8.0;
pub const DEFAULT_MIN_SEP: usize = 4;
/// Bonds shorter than this are treated as corrupt data.
pub const MIN_BOND_LENGTH: f64 = 1e-8;

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm(a: &Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    norm(&sub(a, b))
}

/// Backbone graph of an `n`-vertex chain: edges `(i, i + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneGraph {
    pub vertex_count: usize,
    pub edges: Vec<(usize, usize)>,
}

impl BackboneGraph {
    pub fn new(vertex_count: usize) -> Self {
        let edges = (1..vertex_count).map(|j| (j - 1, j)).collect();
        Self {
            vertex_count,
            edges,
        }
    }
}

/// Thresholded distance graph excluding near-sequence pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactGraph {
    pub vertex_count: usize,
    /// Pairs `(i, j)` with `i < j`, sorted lexicographically.
    pub edges: Vec<(usize, usize)>,
    pub cutoff: f64,
    pub min_sep: usize,
}

/// All pairs with sequence separation `>= min_sep` and distance `<= cutoff`.
pub fn build_contact_graph(coords: &[Point3], cutoff: f64, min_sep: usize) -> ContactGraph {
    let n = coords.len();
    let min_sep = min_sep.max(1);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + min_sep..n {
            if dist(&coords[i], &coords[j]) <= cutoff {
                edges.push((i, j));
            }
        }
    }
    ContactGraph {
        vertex_count: n,
        edges,
        cutoff,
        min_sep,
    }
}

/// Length of every contact edge in `coords`.
pub fn intrinsic_signal(graph: &ContactGraph, coords: &[Point3]) -> Result<Vec<f64>> {
    if coords.len() != graph.vertex_count {
        return Err(Error::AtomCount {
            expected: graph.vertex_count,
            found: coords.len(),
        });
    }
    Ok(graph
        .edges
        .iter()
        .map(|&(i, j)| dist(&coords[i], &coords[j]))
        .collect())
}

/// Unit vector along every backbone bond, oriented from the lower to the
/// higher vertex index.
pub fn extrinsic_signal(graph: &BackboneGraph, coords: &[Point3]) -> Result<Vec<Point3>> {
    if coords.len() != graph.vertex_count {
        return Err(Error::AtomCount {
            expected: graph.vertex_count,
            found: coords.len(),
        });
    }
    graph
        .edges
        .iter()
        .map(|&(a, b)| {
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            let v = sub(&coords[j], &coords[i]);
            let len = norm(&v);
            if len < MIN_BOND_LENGTH {
                return Err(Error::DegenerateBond(i, j));
            }
            Ok([v[0] / len, v[1] / len, v[2] / len])
        })
        .collect()
}

/// Proper rotation followed by a translation: `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        let mut out = self.translation;
        for (row, o) in r.iter().zip(out.iter_mut()) {
            *o += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
        }
        out
    }

    pub fn apply_all(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    pub fn rotate(&self, p: &Point3) -> Point3 {
        Self {
            translation: [0.0; 3],
            ..*self
        }
        .apply(p)
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    c.map(|v| v / n)
}

pub fn center(points: &[Point3]) -> Vec<Point3> {
    let c = centroid(points);
    points.iter().map(|p| sub(p, &c)).collect()
}

/// Copy of `frame` translated so its centroid is the origin.
pub fn center_frame(frame: &ConformationFrame) -> ConformationFrame {
    ConformationFrame {
        coords: center(&frame.coords),
        ..frame.clone()
    }
}

/// Kabsch superposition of `p` onto `q`: the proper rigid motion minimizing
/// `Σ‖R·pᵢ + t − qᵢ‖²`, and the RMSD after applying it.
pub fn kabsch_rmsd(p: &[Point3], q: &[Point3]) -> Result<(RigidTransform, f64)> {
    if p.len() != q.len() {
        return Err(Error::AtomCount {
            expected: p.len(),
            found: q.len(),
        });
    }
    if p.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "superposition needs at least 3 points, got {}",
            p.len()
        )));
    }
    let cp = centroid(p);
    let cq = centroid(q);
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in p.iter().zip(q) {
        let x = Vector3::from(sub(a, &cp));
        let y = Vector3::from(sub(b, &cq));
        h += x * y.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::NonFinite("covariance SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();

    let rotation = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    let rcp = RigidTransform {
        rotation,
        translation: [0.0; 3],
    }
    .apply(&cp);
    let transform = RigidTransform {
        rotation,
        translation: sub(&cq, &rcp),
    };
    let sq: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let d = sub(&transform.apply(a), b);
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        })
        .sum();
    Ok((transform, (sq / p.len() as f64).sqrt()))
}

/// RMS of per-point distances with no alignment.
pub fn rms_unaligned(p: &[Point3], q: &[Point3]) -> f64 {
    let sq: f64 = p.iter().zip(q).map(|(a, b)| dist(a, b).powi(2)).sum();
    (sq / p.len().max(1) as f64).sqrt()
}

/// Euclidean error of each predicted point against the truth.
pub fn per_atom_l2(pred: &[Point3], truth: &[Point3]) -> Vec<f64> {
    pred.iter().zip(truth).map(|(a, b)| dist(a, b)).collect()
}

/// Jaccard index of the two contact sets (`min_sep = 4`); 1 when both are empty.
pub fn contact_jaccard(truth: &[Point3], pred: &[Point3], cutoff: f64) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::AtomCount {
            expected: truth.len(),
            found: pred.len(),
        });
    }
    let a = build_contact_graph(truth, cutoff, DEFAULT_MIN_SEP).edges;
    let b = build_contact_graph(pred, cutoff, DEFAULT_MIN_SEP).edges;
    // Both edge lists are sorted; merge-count the intersection.
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
