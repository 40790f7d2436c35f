//! Latent-space analysis: CCA, one-shot classification, linear probes with a
//! PCA baseline, and latent interpolation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{center, extrinsic_signal, kabsch_rmsd, BackboneGraph, Point3};
use crate::progae::ProGaeModel;
use crate::trajdata::ConformationFrame;

/// Ridge added to covariance and normal-equation diagonals.
pub const RIDGE: f64 = 1e-8;
pub const INTERP_STEPS: usize = 11;
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Row-per-frame embedding with aligned frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    values: Vec<f64>,
    pub frame_indices: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub properties: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f64>>, frame_indices: Vec<usize>) -> Result<Self> {
        if rows.len() != frame_indices.len() {
            return Err(Error::Analysis(format!(
                "{} rows but {} frame indices",
                rows.len(),
                frame_indices.len()
            )));
        }
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::Analysis("ragged embedding rows".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self {
            rows: frame_indices.len(),
            dims,
            values,
            frame_indices,
            labels: None,
            properties: BTreeMap::new(),
        })
    }

    /// Embedding with frame indices `0..rows`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let idx = (0..rows.len()).collect();
        Self::new(rows, idx)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::Analysis(format!("{} labels for {} rows", labels.len(), self.rows)));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_property(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.rows {
            return Err(Error::Analysis(format!("{} values of {name} for {} rows", values.len(), self.rows)));
        }
        self.properties.insert(name.to_string(), values);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    /// Subset of rows in the given order, carrying labels and properties.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            rows: rows.len(),
            dims: self.dims,
            values: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
            frame_indices: rows.iter().map(|&r| self.frame_indices[r]).collect(),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            properties: self
                .properties
                .iter()
                .map(|(k, v)| (k.clone(), rows.iter().map(|&r| v[r]).collect()))
                .collect(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dims, &self.values)
    }

    fn from_matrix(m: &DMatrix<f64>, frame_indices: Vec<usize>) -> Result<Self> {
        let rows = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Self::new(rows, frame_indices)
    }

    /// CSV with a `frame_index` column, a `label` column when labels are
    /// present, and one `{prefix}{k}` column per dimension.
    pub fn to_csv(&self, prefix: &str) -> String {
        let mut out = String::from("frame_index");
        if self.labels.is_some() {
            out.push_str(",label");
        }
        for k in 0..self.dims {
            let _ = write!(out, ",{prefix}{k}");
        }
        out.push('\n');
        for i in 0..self.rows {
            let _ = write!(out, "{}", self.frame_indices[i]);
            if let Some(l) = &self.labels {
                let _ = write!(out, ",{}", l[i]);
            }
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Intrinsic and extrinsic embeddings of `frames`, carrying labels and
/// properties.
pub fn embed_frames(model: &ProGaeModel, frames: &[&ConformationFrame]) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let coords: Vec<&[Point3]> = frames.iter().map(|f| f.coords.as_slice()).collect();
    let codes = model.encode_many(&coords)?;
    let idx: Vec<usize> = frames.iter().map(|f| f.frame_index).collect();
    let zi = EmbeddingMatrix::new(codes.iter().map(|c| c.intrinsic.clone()).collect(), idx.clone())?;
    let ze = EmbeddingMatrix::new(codes.iter().map(|c| c.extrinsic.clone()).collect(), idx)?;
    Ok((annotate(zi, frames)?, annotate(ze, frames)?))
}

/// Flattened unit bond vectors of each frame, one row per frame.
pub fn extrinsic_features(frames: &[&ConformationFrame]) -> Result<EmbeddingMatrix> {
    let n = frames.first().map_or(0, |f| f.atom_count());
    let graph = BackboneGraph::new(n);
    let rows = frames
        .iter()
        .map(|f| Ok(extrinsic_signal(&graph, &f.coords)?.into_iter().flatten().collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let m = EmbeddingMatrix::new(rows, frames.iter().map(|f| f.frame_index).collect())?;
    annotate(m, frames)
}

fn annotate(mut m: EmbeddingMatrix, frames: &[&ConformationFrame]) -> Result<EmbeddingMatrix> {
    m = m.with_labels(frames.iter().map(|f| f.label_id).collect())?;
    let names: BTreeSet<&String> = frames.iter().flat_map(|f| f.properties.keys()).collect();
    for name in names {
        if let Some(vals) = frames.iter().map(|f| f.properties.get(name).copied()).collect::<Option<Vec<f64>>>() {
            m = m.with_property(name, vals)?;
        }
    }
    Ok(m)
}

fn centered(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = m.row_mean().transpose();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    (c, mean)
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
fn sorted_eigen(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k]));
    let vecs = DMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect::<Vec<_>>());
    (vals, vecs)
}

/// Extends orthonormal columns to a full orthonormal basis of `R^dim`.
fn complete_basis(cols: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let mut basis: Vec<DVector<f64>> = cols.column_iter().map(|c| c.into_owned()).collect();
    for e in 0..dim {
        if basis.len() == dim {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let d = b.dot(&v);
                v -= b * d;
            }
        }
        let nv = v.norm();
        if nv > 1e-6 {
            basis.push(v / nv);
        }
    }
    DMatrix::from_columns(&basis)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcaResult {
    /// `m1 × m1`; column `k` projects `X` onto its `k`-th canonical variate.
    #[serde(skip)]
    pub a: DMatrix<f64>,
    #[serde(skip)]
    pub b: DMatrix<f64>,
    /// Sorted descending, `min(m1, m2)` entries.
    pub correlations: Vec<f64>,
}

impl CcaResult {
    pub fn leading(&self) -> f64 {
        self.correlations[0]
    }
}

fn inverse_sqrt(cov: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sorted_eigen(cov);
    let floor = 0.5 * RIDGE;
    if vals.iter().any(|v| !v.is_finite() || *v < floor) {
        return Err(Error::Analysis(format!("{what} covariance is rank-deficient")));
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    Ok(&vecs * d * vecs.transpose())
}

/// Canonical correlation analysis via whitening and an SVD of the whitened
/// cross-covariance.
pub fn run_cca(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<CcaResult> {
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::Analysis(format!("row counts differ: {n} vs {}", y.rows())));
    }
    let (m1, m2) = (x.dims(), y.dims());
    if m1 == 0 || m2 == 0 {
        return Err(Error::Analysis("empty embedding".into()));
    }
    if n < m1.max(m2) + 1 {
        return Err(Error::Analysis(format!("{n} rows is too few for dims {m1}/{m2}")));
    }
    let (xc, _) = centered(&x.to_matrix());
    let (yc, _) = centered(&y.to_matrix());
    let scale = 1.0 / (n - 1) as f64;
    let cxx = xc.transpose() * &xc * scale + DMatrix::identity(m1, m1) * RIDGE;
    let cyy = yc.transpose() * &yc * scale + DMatrix::identity(m2, m2) * RIDGE;
    let cxy = xc.transpose() * &yc * scale;
    let wx = inverse_sqrt(cxx, "X")?;
    let wy = inverse_sqrt(cyy, "Y")?;
    let k = &wx * cxy * &wy;
    let svd = k.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let r = m1.min(m2);
    let us = DMatrix::from_columns(&order.iter().map(|&j| u.column(j).into_owned()).collect::<Vec<_>>());
    let vs = DMatrix::from_columns(&order.iter().map(|&j| v_t.row(j).transpose()).collect::<Vec<_>>());
    let correlations: Vec<f64> = order.iter().take(r).map(|&j| svd.singular_values[j].clamp(0.0, 1.0)).collect();
    Ok(CcaResult {
        a: wx * complete_basis(&us, m1),
        b: wy * complete_basis(&vs, m2),
        correlations,
    })
}

/// Nearest-exemplar class of `point`; ties go to the lowest class id.
pub fn nearest_class(exemplars: &[(usize, Vec<f64>)], point: &[f64]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (class, e) in exemplars {
        let d: f64 = e.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 || (d == best.0 && *class < best.1) {
            best = (d, *class);
        }
    }
    best.1
}

fn labels_of(m: &EmbeddingMatrix, what: &str) -> Result<Vec<usize>> {
    m.labels
        .clone()
        .ok_or_else(|| Error::Analysis(format!("{what} embedding carries no labels")))
}

/// Accuracy of the nearest-exemplar rule with exactly one labeled exemplar
/// per class.
pub fn one_shot_classifier(train: &EmbeddingMatrix, test: &EmbeddingMatrix) -> Result<f64> {
    let train_labels = labels_of(train, "training")?;
    let test_labels = labels_of(test, "test")?;
    if train.dims() != test.dims() {
        return Err(Error::Analysis(format!("dims differ: {} vs {}", train.dims(), test.dims())));
    }
    let classes: BTreeSet<usize> = train_labels.iter().copied().collect();
    if classes.len() != train_labels.len() {
        return Err(Error::Analysis("one-shot training needs exactly one row per class".into()));
    }
    if classes.len() < 2 {
        return Err(Error::Analysis("one-shot training needs at least two classes".into()));
    }
    if let Some(c) = test_labels.iter().find(|c| !classes.contains(c)) {
        return Err(Error::Analysis(format!("class {c} is absent from training")));
    }
    if test.rows() == 0 {
        return Err(Error::Analysis("empty test embedding".into()));
    }
    let exemplars: Vec<(usize, Vec<f64>)> =
        (0..train.rows()).map(|i| (train_labels[i], train.row(i).to_vec())).collect();
    let correct = (0..test.rows())
        .filter(|&i| nearest_class(&exemplars, test.row(i)) == test_labels[i])
        .count();
    Ok(correct as f64 / test.rows() as f64)
}

/// First row of each class, in row order.
pub fn first_per_class(m: &EmbeddingMatrix) -> Result<Vec<usize>> {
    let labels = labels_of(m, "")?;
    let mut seen = BTreeSet::new();
    Ok((0..m.rows()).filter(|&i| seen.insert(labels[i])).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub task: String,
    /// Accuracy for classification, held-out RMSE over property σ for
    /// regression.
    pub value: f64,
    pub baseline: Option<f64>,
}

/// Ridge-stabilized least squares with intercept on an 80/20 row split
/// shuffled by `seed`; returns held-out RMSE divided by the property's
/// standard deviation.
pub fn regression_probe(x: &EmbeddingMatrix, property: &[f64], seed: u64) -> Result<f64> {
    let n = x.rows();
    if property.len() != n {
        return Err(Error::Analysis(format!("{} property values for {n} rows", property.len())));
    }
    if property.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("property".into()));
    }
    let mean = property.iter().sum::<f64>() / n.max(1) as f64;
    let var = property.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    if n < 2 || var.sqrt() <= 1e-12 * mean.abs() || var == 0.0 {
        return Err(Error::Analysis("property has zero variance".into()));
    }
    let sigma = var.sqrt();
    let test_n = ((n as f64 * HOLDOUT_FRACTION).round() as usize).max(1);
    let train_n = n - test_n;
    if train_n < x.dims() + 1 {
        return Err(Error::Analysis(format!(
            "{train_n} training rows is too few for {} dims",
            x.dims()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, te) = order.split_at(train_n);

    let xt = x.select(tr).to_matrix();
    let (xc, xmean) = centered(&xt);
    let ytr = DVector::from_iterator(train_n, tr.iter().map(|&i| property[i]));
    let ymean = ytr.mean();
    let yc = ytr.add_scalar(-ymean);
    let d = x.dims();
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * RIDGE;
    let rhs = xc.transpose() * yc;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Analysis("normal equations are singular".into()))?
        .solve(&rhs);
    let sse: f64 = te
        .iter()
        .map(|&i| {
            let row = DVector::from_column_slice(x.row(i)) - &xmean;
            let pred = ymean + row.dot(&w);
            (pred - property[i]).powi(2)
        })
        .sum();
    Ok((sse / te.len() as f64).sqrt() / sigma)
}

/// Principal component scores with the top eigenvalues of the covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    pub scores: EmbeddingMatrix,
    pub explained_variance: Vec<f64>,
    /// `features × components`, unit columns.
    pub components: DMatrix<f64>,
}

/// PCA by eigendecomposition of the sample covariance. Each axis is signed
/// so that its largest-magnitude entry is positive.
pub fn fit_pca(x: &EmbeddingMatrix, n_components: usize) -> Result<PcaFit> {
    if x.dims() < n_components {
        return Err(Error::Analysis(format!(
            "{} features is fewer than {n_components} components",
            x.dims()
        )));
    }
    if x.rows() < n_components || x.rows() < 2 {
        return Err(Error::Analysis(format!("{} rows is too few for {n_components} components", x.rows())));
    }
    let (xc, _) = centered(&x.to_matrix());
    let cov = xc.transpose() * &xc / (x.rows() - 1) as f64;
    let (vals, vecs) = sorted_eigen(cov);
    let mut comps = vecs.columns(0, n_components).into_owned();
    for mut c in comps.column_iter_mut() {
        let mut lead = 0;
        for k in 0..c.len() {
            if c[k].abs() > c[lead].abs() + 1e-12 {
                lead = k;
            }
        }
        if c[lead] < 0.0 {
            c.neg_mut();
        }
    }
    let scores = &xc * &comps;
    let mut out = EmbeddingMatrix::from_matrix(&scores, x.frame_indices.clone())?;
    out.labels = x.labels.clone();
    out.properties = x.properties.clone();
    Ok(PcaFit {
        scores: out,
        explained_variance: vals.iter().take(n_components).map(|v| v.max(0.0)).collect(),
        components: comps,
    })
}

/// Scores on the top `n_components` principal axes.
pub fn pca_baseline(x: &EmbeddingMatrix, n_components: usize) -> Result<EmbeddingMatrix> {
    Ok(fit_pca(x, n_components)?.scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpStep {
    pub alpha: f64,
    pub coords: Vec<Point3>,
    pub rmsd_to_a: f64,
    pub rmsd_to_b: f64,
}

/// Decodes `steps` evenly spaced points on the segment between the latent
/// codes of `a` and `b`.
pub fn interpolate_latent(model: &ProGaeModel, a: &[Point3], b: &[Point3], steps: usize) -> Result<Vec<InterpStep>> {
    if a.len() != b.len() {
        return Err(Error::AtomCount {
            expected: a.len(),
            found: b.len(),
        });
    }
    if steps < 2 {
        return Err(Error::Analysis("interpolation needs at least two steps".into()));
    }
    let za = model.encode(a)?;
    let zb = model.encode(b)?;
    let alphas: Vec<f64> = (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect();
    let codes: Vec<_> = alphas.iter().map(|&t| za.lerp(&zb, t)).collect();
    let decoded = model.decode_many(&codes)?;
    let (ta, tb) = (center(a), center(b));
    alphas
        .into_iter()
        .zip(decoded)
        .map(|(alpha, coords)| {
            Ok(InterpStep {
                alpha,
                rmsd_to_a: kabsch_rmsd(&coords, &ta)?.1,
                rmsd_to_b: kabsch_rmsd(&coords, &tb)?.1,
                coords,
            })
        })
        .collect()
}

pub fn interp_to_csv(path: &[InterpStep]) -> String {
    let mut out = String::from("alpha,rmsd_to_a,rmsd_to_b\n");
    for s in path {
        let _ = writeln!(out, "{},{},{}", s.alpha, s.rmsd_to_a, s.rmsd_to_b);
    }
    out
}

#[cfg(test)]
mod tests;
