//! Conformational ensembles: in-memory types, the on-disk dataset directory
//! format, a synthetic labeled ensemble generator, and deterministic splits.
//!
//! A dataset directory holds two files:
//!
//! - `meta.json`: atom/frame counts, per-atom residue and chain annotations,
//!   per-frame labels and named scalar properties.
//! - `coords.f32`: little-endian `f32` values, frame-major, then atom-major,
//!   then `(x, y, z)`. Its length is exactly `4 * frames * atoms * 3` bytes.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point3;

pub const META_FILE: &str = "meta.json";
pub const COORDS_FILE: &str = "coords.f32";
pub const UNITS: &str = "angstrom";
pub const MIN_ATOMS: usize = 5;

/// Consecutive-atom spacing of the synthetic base helix (Å).
pub const BASE_SPACING: f64 = 3.8;
const HELIX_RADIUS: f64 = 2.3;
const HELIX_TURN_DEG: f64 = 100.0;
/// Upper bound on the cosine similarity between any two class modes.
const MAX_MODE_COSINE: f64 = 0.9;

/// One chain conformation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformationFrame {
    pub coords: Vec<Point3>,
    pub frame_index: usize,
    pub label_id: usize,
    pub properties: BTreeMap<String, f64>,
}

impl ConformationFrame {
    pub fn new(coords: Vec<Point3>) -> Self {
        Self {
            coords,
            frame_index: 0,
            label_id: 0,
            properties: BTreeMap::new(),
        }
    }

    pub fn atom_count(&self) -> usize {
        self.coords.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub atom_count: usize,
    pub frame_count: usize,
    pub residue_index: Vec<i64>,
    pub chain_id: Vec<i64>,
    pub label_names: Vec<String>,
    pub property_names: Vec<String>,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

impl SplitAssignment {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    pub frames: Vec<ConformationFrame>,
    pub splits: SplitAssignment,
}

impl TrajectoryDataset {
    /// Builds a dataset from frames, deriving metadata with one residue per
    /// atom on a single chain, and splitting 70/10/20 with `split_seed`.
    pub fn from_frames(
        frames: Vec<ConformationFrame>,
        label_names: Vec<String>,
        split_seed: u64,
    ) -> Result<Self> {
        let atom_count = frames.first().map_or(0, |f| f.atom_count());
        let property_names = frames
            .first()
            .map(|f| f.properties.keys().cloned().collect())
            .unwrap_or_default();
        let meta = DatasetMeta {
            atom_count,
            frame_count: frames.len(),
            residue_index: (0..atom_count as i64).collect(),
            chain_id: vec![0; atom_count],
            label_names,
            property_names,
            units: UNITS.to_string(),
        };
        let splits = split_dataset(frames.len(), DEFAULT_FRACTIONS, split_seed)?;
        let ds = Self {
            meta,
            frames,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn split_frames(&self, split: Split) -> Vec<&ConformationFrame> {
        self.splits
            .indices(split)
            .iter()
            .map(|&i| &self.frames[i])
            .collect()
    }

    pub fn property_values(&self, name: &str) -> Option<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.properties.get(name).copied())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let bad = |msg: String| Err(Error::InvalidDataset(msg));
        if m.atom_count < MIN_ATOMS {
            return bad(format!("atom_count {} below minimum {MIN_ATOMS}", m.atom_count));
        }
        if m.frame_count != self.frames.len() {
            return bad(format!(
                "frame_count {} but {} frames",
                m.frame_count,
                self.frames.len()
            ));
        }
        if m.residue_index.len() != m.atom_count || m.chain_id.len() != m.atom_count {
            return bad("per-atom annotation length differs from atom_count".into());
        }
        if m.residue_index.windows(2).any(|w| w[1] < w[0]) {
            return bad("residue_index must be nondecreasing".into());
        }
        if m.units != UNITS {
            return bad(format!("unsupported units {:?}", m.units));
        }
        for f in &self.frames {
            if f.atom_count() != m.atom_count {
                return Err(Error::AtomCount {
                    expected: m.atom_count,
                    found: f.atom_count(),
                });
            }
            if f.coords.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("coordinates of frame {}", f.frame_index)));
            }
            if !m.label_names.is_empty() && f.label_id >= m.label_names.len() {
                return bad(format!("label {} has no name", f.label_id));
            }
        }
        let n = self.frames.len();
        let mut seen = vec![false; n];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if i >= n || seen[i] {
                return bad(format!("split index {i} out of range or repeated"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return bad("splits do not cover every frame".into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    atom_count: usize,
    frame_count: usize,
    residue_index: Vec<i64>,
    chain_id: Vec<i64>,
    labels: Vec<usize>,
    label_names: Vec<String>,
    #[serde(default)]
    property_names: Vec<String>,
    properties: BTreeMap<String, Vec<f64>>,
    units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitAssignment>,
}

/// Reads a dataset directory. Splits stored in `meta.json` are honored;
/// otherwise a 70/10/20 split with seed 0 is derived.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let coords_path = dir.join(COORDS_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    let payload = fs::read(&coords_path).map_err(|e| Error::io(&coords_path, e))?;

    let n_atoms = meta.atom_count;
    let n_frames = meta.frame_count;
    let expected = 4 * 3 * n_atoms * n_frames;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    if meta.labels.len() != n_frames {
        return Err(Error::InvalidDataset(format!(
            "{} labels for {n_frames} frames",
            meta.labels.len()
        )));
    }
    for (name, values) in &meta.properties {
        if values.len() != n_frames {
            return Err(Error::InvalidDataset(format!(
                "property {name:?} has {} values for {n_frames} frames",
                values.len()
            )));
        }
    }
    let property_names = if meta.property_names.is_empty() {
        meta.properties.keys().cloned().collect()
    } else {
        meta.property_names.clone()
    };

    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coords.f32 payload".into()));
    }
    let frames: Vec<ConformationFrame> = (0..n_frames)
        .map(|t| {
            let base = t * n_atoms * 3;
            let coords = (0..n_atoms)
                .map(|a| {
                    let o = base + a * 3;
                    [values[o], values[o + 1], values[o + 2]]
                })
                .collect();
            let properties = meta
                .properties
                .iter()
                .map(|(k, v)| (k.clone(), v[t]))
                .collect();
            ConformationFrame {
                coords,
                frame_index: t,
                label_id: meta.labels[t],
                properties,
            }
        })
        .collect();

    let splits = match meta.split {
        Some(s) => s,
        None => split_dataset(n_frames, DEFAULT_FRACTIONS, 0)?,
    };
    let ds = TrajectoryDataset {
        meta: DatasetMeta {
            atom_count: n_atoms,
            frame_count: n_frames,
            residue_index: meta.residue_index,
            chain_id: meta.chain_id,
            label_names: meta.label_names,
            property_names,
            units: meta.units,
        },
        frames,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `meta.json` and `coords.f32` into `dir`, creating it if needed.
pub fn write_dataset(dataset: &TrajectoryDataset, dir: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let m = &dataset.meta;
    let mut properties: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in &m.property_names {
        let values = dataset.property_values(name).ok_or_else(|| {
            Error::InvalidDataset(format!("property {name:?} missing on some frame"))
        })?;
        properties.insert(name.clone(), values);
    }
    let meta = MetaFile {
        atom_count: m.atom_count,
        frame_count: m.frame_count,
        residue_index: m.residue_index.clone(),
        chain_id: m.chain_id.clone(),
        labels: dataset.frames.iter().map(|f| f.label_id).collect(),
        label_names: m.label_names.clone(),
        property_names: m.property_names.clone(),
        properties,
        units: m.units.clone(),
        split: Some(dataset.splits.clone()),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    let mut payload = Vec::with_capacity(4 * 3 * m.atom_count * m.frame_count);
    for f in &dataset.frames {
        for p in &f.coords {
            for &v in p {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let coords_path = dir.join(COORDS_FILE);
    fs::write(&coords_path, payload).map_err(|e| Error::io(&coords_path, e))
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Deterministic shuffled split. Validation and test sizes are floor
/// allocations; the remainder goes to train. Each list is sorted.
pub fn split_dataset(
    frame_count: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    if frame_count < 3 {
        return Err(Error::InvalidDataset(format!(
            "need at least 3 frames to split, got {frame_count}"
        )));
    }
    let n = frame_count as f64;
    let n_val = (fv * n + 1e-9).floor() as usize;
    let n_test = (fs * n + 1e-9).floor() as usize;
    let n_train = frame_count - n_val - n_test;

    let mut order: Vec<usize> = (0..frame_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment {
        train,
        val,
        test,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub atom_count: usize,
    pub class_count: usize,
    pub frames_per_class: usize,
    pub spacing: f64,
    /// Displacement amplitude of the class modes (Å).
    pub mode_amplitude: f64,
    /// Isotropic per-coordinate Gaussian noise (Å).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            atom_count: 64,
            class_count: 3,
            frames_per_class: 200,
            spacing: BASE_SPACING,
            mode_amplitude: 6.0,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.atom_count < MIN_ATOMS {
            return bad("synthetic atom_count must be at least 5");
        }
        if self.class_count < 2 {
            return bad("synthetic class_count must be at least 2");
        }
        if self.frames_per_class == 0 {
            return bad("synthetic frames_per_class must be positive");
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("synthetic spacing must be positive");
        }
        if self.mode_amplitude < 0.0 || !self.mode_amplitude.is_finite() {
            return bad("synthetic mode_amplitude must be non-negative");
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return bad("synthetic noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Ideal helix centered at the origin, axis along z, with consecutive-atom
/// distance exactly `spacing`.
pub fn base_helix(atom_count: usize, spacing: f64) -> Vec<Point3> {
    let turn = HELIX_TURN_DEG.to_radians();
    // Shrink the radius when the chord alone would exceed the spacing.
    let radius = HELIX_RADIUS.min(0.45 * spacing / (turn / 2.0).sin());
    let chord = 2.0 * radius * (turn / 2.0).sin();
    let rise = (spacing * spacing - chord * chord).sqrt();
    let z0 = rise * (atom_count as f64 - 1.0) / 2.0;
    (0..atom_count)
        .map(|i| {
            let a = turn * i as f64;
            [radius * a.cos(), radius * a.sin(), rise * i as f64 - z0]
        })
        .collect()
}

/// Smooth transverse bending mode of one class: a half-wave profile along the
/// chain in a class-specific direction perpendicular to the helix axis,
/// scaled so the largest per-atom displacement is 1.
pub fn class_mode(atom_count: usize, class: usize, class_count: usize, profile_phase: f64) -> Vec<Point3> {
    let theta = 2.0 * PI * class as f64 / class_count as f64;
    let dir = [theta.cos(), theta.sin(), 0.0];
    let denom = (atom_count.max(2) - 1) as f64;
    let raw: Vec<f64> = (0..atom_count)
        .map(|i| (PI * i as f64 / denom + profile_phase).sin())
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    raw.iter()
        .map(|w| {
            let s = w / peak;
            [dir[0] * s, dir[1] * s, dir[2] * s]
        })
        .collect()
}

fn mode_cosine(a: &[Point3], b: &[Point3]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum();
    let na: f64 = a.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Scalar drug-like properties attached to every frame of class `k`.
pub fn class_properties(k: usize) -> BTreeMap<String, f64> {
    let k = k as f64;
    BTreeMap::from([
        ("hbd_count".to_string(), 1.0 + k),
        ("molecular_weight".to_string(), 250.0 + 60.0 * k),
        ("tpsa".to_string(), 40.0 + 17.5 * k),
    ])
}

/// Labeled synthetic ensemble: a base helix deformed per class along a fixed
/// mode, `base + a·sin(ω t + φ_k)·M_k + noise`.
///
/// The phase arc covers a quarter period starting at `φ_k ≈ π/4`, so the
/// mode coefficient stays in roughly `[0.7, 1]` and every frame carries its
/// class signature. Coordinates are rounded to `f32` so that the on-disk
/// format round-trips exactly.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<TrajectoryDataset> {
    config.validate()?;
    let n = config.atom_count;
    let k_count = config.class_count;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let base = base_helix(n, config.spacing);
    let mut modes = Vec::with_capacity(k_count);
    let mut phases = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let profile_phase = rng.random_range(0.0..FRAC_PI_2);
        modes.push(class_mode(n, k, k_count, profile_phase));
        phases.push(FRAC_PI_4 + rng.random_range(-0.1..0.1));
    }
    for j in 0..k_count {
        for k in j + 1..k_count {
            let c = mode_cosine(&modes[j], &modes[k]);
            if c >= MAX_MODE_COSINE {
                return Err(Error::InvalidConfig(format!(
                    "classes {j} and {k} have near-parallel modes (cosine {c:.3}); \
                     reduce class_count"
                )));
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    let omega = FRAC_PI_2 / config.frames_per_class as f64;
    let mut frames = Vec::with_capacity(k_count * config.frames_per_class);
    for k in 0..k_count {
        let props = class_properties(k);
        for t in 0..config.frames_per_class {
            let coef = config.mode_amplitude * (omega * t as f64 + phases[k]).sin();
            let coords = base
                .iter()
                .zip(&modes[k])
                .map(|(b, m)| {
                    let mut p = [0.0; 3];
                    for d in 0..3 {
                        let jitter = if config.noise_sigma > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        p[d] = (b[d] + coef * m[d] + jitter) as f32 as f64;
                    }
                    p
                })
                .collect();
            frames.push(ConformationFrame {
                coords,
                frame_index: frames.len(),
                label_id: k,
                properties: props.clone(),
            });
        }
    }
    let label_names = (0..k_count).map(|k| format!("drug_{k}")).collect();
    TrajectoryDataset::from_frames(frames, label_names, config.seed)
}
