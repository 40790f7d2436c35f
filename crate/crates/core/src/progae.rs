//! Two-branch geometric autoencoder: intrinsic and extrinsic graph encoders,
//! Tanh-bounded latents, and a hierarchical graph decoder.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adiff::{huber, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{
    self, build_contact_graph, center, extrinsic_signal, intrinsic_signal, kabsch_rmsd, per_atom_l2,
    BackboneGraph, Point3, DEFAULT_CONTACT_CUTOFF, DEFAULT_MIN_SEP,
};
use crate::nnops::{
    build_hierarchy, downsample_signal, edge_conv_layer, edge_conv_layer_with, edge_init_vertex_signal,
    edge_init_vertex_signal_with, gat_layer, global_avg_pool,
    seeded_rng, upsample_signal, BatchNormParams, DenseParams, EdgeConvParams, GatLayerParams, Graph,
    GraphHierarchy, Isolated, Pass, RunningStats, BN_MOMENTUM, DEFAULT_BASE_RADIUS,
};

pub const ENCODER_WIDTHS: [usize; 5] = [12, 24, 48, 96, 96];
pub const DECODER_WIDTHS: [usize; 6] = [128, 128, 64, 32, 16, 3];
pub const LATENT_INTRINSIC: usize = 16;
pub const LATENT_EXTRINSIC: usize = 32;
pub const HUBER_DELTA: f64 = 2.0;
pub const DEFAULT_LAMBDA_R: f64 = 0.5;
/// Added under the square root of predicted bond lengths.
pub const BOND_SQRT_EPS: f64 = 1e-12;
/// Frames per forward pass when evaluating.
pub const EVAL_CHUNK: usize = 64;
/// Shortest chain the default five-level hierarchy accepts.
pub const MIN_CHAIN: usize = 16;

/// Architecture and input-graph settings. Everything needed to rebuild the
/// parameter layout apart from the reference frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub atom_count: usize,
    pub use_intrinsic: bool,
    pub latent_intrinsic: usize,
    pub latent_extrinsic: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub base_radius: f64,
    pub contact_cutoff: f64,
    pub min_sep: usize,
    pub huber_delta: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(atom_count: usize, seed: u64) -> Self {
        Self {
            atom_count,
            use_intrinsic: true,
            latent_intrinsic: LATENT_INTRINSIC,
            latent_extrinsic: LATENT_EXTRINSIC,
            encoder_widths: ENCODER_WIDTHS.to_vec(),
            decoder_widths: DECODER_WIDTHS.to_vec(),
            base_radius: DEFAULT_BASE_RADIUS,
            contact_cutoff: DEFAULT_CONTACT_CUTOFF,
            min_sep: DEFAULT_MIN_SEP,
            huber_delta: HUBER_DELTA,
            seed,
        }
    }

    /// Extrinsic-only variant: no intrinsic branch and a zero-width
    /// intrinsic latent.
    pub fn extrinsic_only(mut self) -> Self {
        self.use_intrinsic = false;
        self.latent_intrinsic = 0;
        self
    }

    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_intrinsic + self.latent_extrinsic
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let l = self.levels();
        if l < 2 {
            return bad("need at least two encoder layers".into());
        }
        if self.decoder_widths.len() != l + 1 {
            return bad(format!(
                "decoder needs {} widths for {l} encoder layers, got {}",
                l + 1,
                self.decoder_widths.len()
            ));
        }
        if self.decoder_widths.last() != Some(&3) {
            return bad("decoder must end in width 3".into());
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.use_intrinsic == (self.latent_intrinsic == 0) {
            return bad("latent_intrinsic must be positive exactly when the intrinsic branch is used".into());
        }
        if self.latent_extrinsic == 0 {
            return bad("latent_extrinsic must be positive".into());
        }
        let need = (1usize << (l - 1)).max(MIN_CHAIN);
        if self.atom_count < need {
            return bad(format!("chain of {} atoms is shorter than {need}", self.atom_count));
        }
        if !(6.5..=12.0).contains(&self.contact_cutoff) {
            return bad(format!("contact cutoff {} outside [6.5, 12] Å", self.contact_cutoff));
        }
        if !(self.base_radius > 0.0 && self.huber_delta > 0.0) {
            return bad("radius and Huber delta must be positive".into());
        }
        Ok(())
    }
}

/// Concatenated latent code `[z_i, z_e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub intrinsic: Vec<f64>,
    pub extrinsic: Vec<f64>,
}

impl LatentCode {
    pub fn concat(&self) -> Vec<f64> {
        let mut z = self.intrinsic.clone();
        z.extend_from_slice(&self.extrinsic);
        z
    }

    pub fn lerp(&self, other: &LatentCode, alpha: f64) -> LatentCode {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
        };
        LatentCode {
            intrinsic: mix(&self.intrinsic, &other.intrinsic),
            extrinsic: mix(&self.extrinsic, &other.extrinsic),
        }
    }
}

/// Decoded coordinates of one frame with error metrics against the
/// centered truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub coords: Vec<Point3>,
    pub per_atom_l2: Vec<f64>,
    pub rmsd: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    conv: EdgeConvParams,
    gats: Vec<GatLayerParams>,
    latent: DenseParams,
}

/// Tape handles from one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    pub z_intrinsic: Option<Var>,
    pub z_extrinsic: Var,
    /// `(frames · atoms) × 3`, frame-major.
    pub coords: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProGaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub running: BTreeMap<String, RunningStats>,
    reference: Vec<Point3>,
    hierarchy: GraphHierarchy,
    backbone: Graph,
    /// Parent-relative template offsets per level, scaled by the level radius.
    offsets: Vec<Tensor>,
    output_scale: f64,
    enc_i: Option<Encoder>,
    enc_e: Encoder,
    dec_in: DenseParams,
    dec: Vec<GatLayerParams>,
}

/// Name of the dense map from the latent code to the decoder input; the only
/// layer whose shape depends on chain length.
pub const DECODER_INPUT: &str = "dec_in";

fn rms_radius(points: &[Point3]) -> f64 {
    let c = center(points);
    (c.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum::<f64>() / c.len().max(1) as f64).sqrt()
}

/// SHA-256 of the little-endian coordinate bytes.
pub fn frame_hash(coords: &[Point3]) -> String {
    let mut h = Sha256::new();
    for v in coords.iter().flatten() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn points_tensor(frames: &[Vec<Point3>]) -> Tensor {
    let rows: Vec<[f64; 3]> = frames.iter().flatten().copied().collect();
    let n = rows.len();
    Tensor::new(n, 3, rows.into_iter().flatten().collect()).expect("3 columns")
}

impl ProGaeModel {
    /// Fresh model with weights drawn from `config.seed` and the graph
    /// hierarchy built from `reference`.
    pub fn init(config: ModelConfig, reference: &[Point3]) -> Result<Self> {
        config.validate()?;
        if reference.len() != config.atom_count {
            return Err(Error::AtomCount {
                expected: config.atom_count,
                found: reference.len(),
            });
        }
        let centered = center(reference);
        let hierarchy = build_hierarchy(&centered, config.levels(), config.base_radius)?;
        let output_scale = rms_radius(&centered);
        if !(output_scale > 0.0) {
            return Err(Error::Hierarchy("reference frame collapses to a point".into()));
        }
        let offsets = hierarchy
            .levels
            .iter()
            .enumerate()
            .map(|(k, level)| {
                let rows: Vec<f64> = match hierarchy.levels.get(k + 1) {
                    Some(up) => level
                        .positions
                        .iter()
                        .zip(&level.parent)
                        .flat_map(|(p, &q)| {
                            let d = geom::sub(p, &up.positions[q]);
                            d.map(|v| v / level.radius)
                        })
                        .collect(),
                    None => vec![0.0; 3 * level.len()],
                };
                Tensor::new(level.len(), 3, rows).expect("3 columns")
            })
            .collect();
        let bb = BackboneGraph::new(config.atom_count);
        let backbone = Graph::from_pairs(config.atom_count, &bb.edges, false);

        let mut params = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let ew = &config.encoder_widths;
        let build_encoder = |params: &mut ParamStore,
                             rng: &mut rand_chacha::ChaCha8Rng,
                             prefix: &str,
                             signal_width: usize,
                             latent: usize|
         -> Result<Encoder> {
            let conv = EdgeConvParams::init(
                params,
                rng,
                &format!("{prefix}.conv"),
                signal_width,
                signal_width,
                ew[0],
                true,
            );
            let mut gats = Vec::with_capacity(ew.len() - 1);
            for l in 1..ew.len() {
                gats.push(GatLayerParams::hidden(
                    params,
                    rng,
                    &format!("{prefix}.gat{l}"),
                    ew[l - 1],
                    ew[l],
                )?);
            }
            let latent = DenseParams::init(params, rng, &format!("{prefix}.latent"), ew[ew.len() - 1], latent, true);
            Ok(Encoder { conv, gats, latent })
        };
        let enc_i = if config.use_intrinsic {
            Some(build_encoder(&mut params, &mut rng, "enc_i", 1, config.latent_intrinsic)?)
        } else {
            None
        };
        let enc_e = build_encoder(&mut params, &mut rng, "enc_e", 3, config.latent_extrinsic)?;

        let dw = &config.decoder_widths;
        let l = config.levels();
        let mut dec = Vec::with_capacity(l);
        dec.push(GatLayerParams::hidden(&mut params, &mut rng, "dec.gat0", dw[0], dw[1])?);
        for i in 1..l {
            let name = format!("dec.gat{i}");
            let input = dw[i] + 3;
            if i + 1 == l {
                dec.push(GatLayerParams::output(&mut params, &mut rng, &name, input, dw[i + 1]));
            } else {
                dec.push(GatLayerParams::hidden(&mut params, &mut rng, &name, input, dw[i + 1])?);
            }
        }
        let top = hierarchy.top().len();
        let dec_in = DenseParams::init(&mut params, &mut rng, DECODER_INPUT, config.latent_dim(), top * dw[0], false);

        let mut running = BTreeMap::new();
        let bns = enc_i
            .iter()
            .chain(std::iter::once(&enc_e))
            .flat_map(|e| e.conv.bn.iter().chain(e.gats.iter().filter_map(|g| g.bn.as_ref())))
            .chain(dec.iter().filter_map(|g| g.bn.as_ref()));
        for bn in bns {
            running.insert(bn.key.clone(), RunningStats::new(bn.width));
        }

        Ok(Self {
            config,
            params,
            running,
            reference: reference.to_vec(),
            hierarchy,
            backbone,
            offsets,
            output_scale,
            enc_i,
            enc_e,
            dec_in,
            dec,
        })
    }

    /// The frame the hierarchy was built from, as given to [`Self::init`].
    pub fn reference(&self) -> &[Point3] {
        &self.reference
    }

    pub fn reference_hash(&self) -> String {
        frame_hash(&self.reference)
    }

    pub fn hierarchy(&self) -> &GraphHierarchy {
        &self.hierarchy
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormParams> {
        self.enc_i
            .iter()
            .chain(std::iter::once(&self.enc_e))
            .flat_map(|e| e.conv.bn.iter().chain(e.gats.iter().filter_map(|g| g.bn.as_ref())))
            .chain(self.dec.iter().filter_map(|g| g.bn.as_ref()))
            .collect()
    }

    fn check_frame(&self, coords: &[Point3]) -> Result<()> {
        if coords.len() != self.config.atom_count {
            return Err(Error::AtomCount {
                expected: self.config.atom_count,
                found: coords.len(),
            });
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame coordinates".into()));
        }
        Ok(())
    }

    fn encode_intrinsic(&self, pass: &mut Pass<'_>, enc: &Encoder, frames: &[&[Point3]]) -> Result<Var> {
        let n = self.config.atom_count;
        let mut conv_graphs = Vec::with_capacity(frames.len());
        let mut gat_graphs = Vec::with_capacity(frames.len());
        let mut lengths = Vec::new();
        for f in frames {
            let cg = build_contact_graph(f, self.config.contact_cutoff, self.config.min_sep);
            for l in intrinsic_signal(&cg, f)? {
                lengths.push(l);
                lengths.push(l);
            }
            conv_graphs.push(Graph::from_pairs(n, &cg.edges, false));
            gat_graphs.push(Graph::from_pairs(n, &cg.edges, true));
        }
        let conv_graph = Graph::concat(&conv_graphs);
        let gat_graph = Graph::concat(&gat_graphs);
        let rows = lengths.len();
        let e = pass.tape.constant(Tensor::new(rows, 1, lengths)?);
        // A terminal residue can lose its only contact in a deformed frame.
        let f0 = edge_init_vertex_signal_with(pass, e, &conv_graph, Isolated::Zero)?;
        let mut h = edge_conv_layer_with(pass, f0, e, &conv_graph, &enc.conv, Isolated::Zero)?;
        for g in &enc.gats {
            h = gat_layer(pass, h, &gat_graph, g)?;
        }
        let pooled = global_avg_pool(pass, h, frames.len())?;
        let z = enc.latent.forward(pass, pooled)?;
        Ok(pass.tape.tanh(z))
    }

    fn encode_extrinsic(&self, pass: &mut Pass<'_>, frames: &[&[Point3]]) -> Result<Var> {
        let b = frames.len();
        let bb = BackboneGraph::new(self.config.atom_count);
        let mut sig = Vec::with_capacity(b * 2 * bb.edges.len() * 3);
        for f in frames {
            for v in extrinsic_signal(&bb, f)? {
                sig.extend_from_slice(&v);
                sig.extend_from_slice(&v);
            }
        }
        let graph = self.backbone.batched(b);
        let rows = sig.len() / 3;
        let e = pass.tape.constant(Tensor::new(rows, 3, sig)?);
        let f0 = edge_init_vertex_signal(pass, e, &graph)?;
        let enc = &self.enc_e;
        let mut h = edge_conv_layer(pass, f0, e, &graph, &enc.conv)?;
        for (l, g) in enc.gats.iter().enumerate() {
            h = downsample_signal(pass, h, &self.hierarchy, l, b)?;
            h = gat_layer(pass, h, &self.hierarchy.levels[l + 1].graph.batched(b), g)?;
        }
        let pooled = global_avg_pool(pass, h, b)?;
        let z = enc.latent.forward(pass, pooled)?;
        Ok(pass.tape.tanh(z))
    }

    /// Decodes a `frames × latent_dim` code block into stacked coordinates.
    pub fn decode_batch(&self, pass: &mut Pass<'_>, z: Var) -> Result<Var> {
        let [b, d] = pass.tape.value(z).shape();
        if d != self.config.latent_dim() {
            return Err(Error::shape("decode", format!("latent width {d}, expected {}", self.config.latent_dim())));
        }
        let l = self.config.levels();
        let top = self.hierarchy.top();
        let h = self.dec_in.forward(pass, z)?;
        let mut h = pass.tape.reshape(h, b * top.len(), self.config.decoder_widths[0])?;
        h = gat_layer(pass, h, &top.graph.batched(b), &self.dec[0])?;
        for (i, k) in (0..l - 1).rev().enumerate() {
            h = upsample_signal(pass, h, &self.hierarchy, k, b)?;
            let off = &self.offsets[k];
            let mut rep = Vec::with_capacity(b * off.numel());
            for _ in 0..b {
                rep.extend_from_slice(off.data());
            }
            let off = pass.tape.constant(Tensor::new(b * off.rows(), 3, rep)?);
            h = pass.tape.concat_cols(&[h, off])?;
            h = gat_layer(pass, h, &self.hierarchy.levels[k].graph.batched(b), &self.dec[i + 1])?;
        }
        Ok(pass.tape.scale(h, self.output_scale))
    }

    /// Encodes and decodes a batch of frames on `pass`.
    pub fn forward_batch(&self, pass: &mut Pass<'_>, frames: &[&[Point3]]) -> Result<BatchOutput> {
        if frames.is_empty() {
            return Err(Error::shape("forward", "empty batch"));
        }
        for f in frames {
            self.check_frame(f)?;
        }
        let z_i = match &self.enc_i {
            Some(enc) => Some(self.encode_intrinsic(pass, enc, frames)?),
            None => None,
        };
        let z_e = self.encode_extrinsic(pass, frames)?;
        let z = match z_i {
            Some(zi) => pass.tape.concat_cols(&[zi, z_e])?,
            None => z_e,
        };
        let coords = self.decode_batch(pass, z)?;
        Ok(BatchOutput {
            z_intrinsic: z_i,
            z_extrinsic: z_e,
            coords,
        })
    }

    /// Mean per-frame loss of a batch: summed Huber residual against the
    /// centered truth plus `lambda_r` times the mean squared bond-length
    /// deviation.
    pub fn batch_loss(&self, pass: &mut Pass<'_>, frames: &[&[Point3]], lambda_r: f64) -> Result<Var> {
        let out = self.forward_batch(pass, frames)?;
        let centered: Vec<Vec<Point3>> = frames.iter().map(|f| center(f)).collect();
        self.loss_on(pass, out.coords, &centered, lambda_r)
    }

    fn loss_on(&self, pass: &mut Pass<'_>, pred: Var, centered: &[Vec<Point3>], lambda_r: f64) -> Result<Var> {
        let b = centered.len();
        let n = self.config.atom_count;
        let target = points_tensor(centered);
        let sl1 = pass.tape.smooth_l1_sum(pred, target, self.config.huber_delta)?;
        let sl1 = pass.tape.scale(sl1, 1.0 / b as f64);
        if lambda_r == 0.0 {
            return Ok(sl1);
        }
        let mut lo = Vec::with_capacity(b * (n - 1));
        let mut hi = Vec::with_capacity(b * (n - 1));
        let mut true_len = Vec::with_capacity(b * (n - 1));
        for (k, f) in centered.iter().enumerate() {
            for i in 0..n - 1 {
                lo.push(k * n + i);
                hi.push(k * n + i + 1);
                true_len.push(geom::dist(&f[i], &f[i + 1]));
            }
        }
        let a = pass.tape.gather_rows(pred, Rc::from(lo))?;
        let c = pass.tape.gather_rows(pred, Rc::from(hi))?;
        let d = pass.tape.sub(c, a)?;
        let sq = pass.tape.mul(d, d)?;
        let sq = pass.tape.row_sum(sq);
        let len = pass.tape.sqrt_eps(sq, BOND_SQRT_EPS)?;
        let rows = true_len.len();
        let t = pass.tape.constant(Tensor::new(rows, 1, true_len)?);
        let dev = pass.tape.sub(len, t)?;
        let dev = pass.tape.mul(dev, dev)?;
        let r = pass.tape.mean(dev);
        let r = pass.tape.scale(r, lambda_r);
        pass.tape.add(sl1, r)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: Vec<(String, crate::adiff::BatchStats)>) {
        for (key, stats) in updates {
            if let Some(rs) = self.running.get_mut(&key) {
                rs.update(&stats, BN_MOMENTUM);
            }
        }
    }

    fn eval_pass(&self) -> Pass<'_> {
        Pass::new(&self.params, &self.running, false)
    }

    pub fn encode(&self, coords: &[Point3]) -> Result<LatentCode> {
        Ok(self.encode_many(&[coords])?.remove(0))
    }

    /// Eval-mode latent codes, in input order.
    pub fn encode_many(&self, frames: &[&[Point3]]) -> Result<Vec<LatentCode>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            for f in chunk {
                self.check_frame(f)?;
            }
            let mut pass = self.eval_pass();
            let zi = match &self.enc_i {
                Some(enc) => Some(self.encode_intrinsic(&mut pass, enc, chunk)?),
                None => None,
            };
            let ze = self.encode_extrinsic(&mut pass, chunk)?;
            for r in 0..chunk.len() {
                out.push(LatentCode {
                    intrinsic: zi.map_or_else(Vec::new, |v| pass.tape.value(v).row_slice(r).to_vec()),
                    extrinsic: pass.tape.value(ze).row_slice(r).to_vec(),
                });
            }
        }
        Ok(out)
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Vec<Point3>> {
        Ok(self.decode_many(std::slice::from_ref(code))?.remove(0))
    }

    pub fn decode_many(&self, codes: &[LatentCode]) -> Result<Vec<Vec<Point3>>> {
        let n = self.config.atom_count;
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(EVAL_CHUNK) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(LatentCode::concat).collect();
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("latent code".into()));
            }
            let mut pass = self.eval_pass();
            let z = pass.tape.constant(Tensor::from_rows(&rows)?);
            let y = self.decode_batch(&mut pass, z)?;
            let y = pass.tape.value(y);
            for k in 0..chunk.len() {
                out.push((0..n).map(|i| {
                    let r = y.row_slice(k * n + i);
                    [r[0], r[1], r[2]]
                }).collect());
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, coords: &[Point3], lambda_r: f64) -> Result<Reconstruction> {
        Ok(self.reconstruct_many(&[coords], lambda_r)?.remove(0))
    }

    /// Eval-mode reconstruction of each frame against its centered truth.
    pub fn reconstruct_many(&self, frames: &[&[Point3]], lambda_r: f64) -> Result<Vec<Reconstruction>> {
        let n = self.config.atom_count;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            let mut pass = self.eval_pass();
            let res = self.forward_batch(&mut pass, chunk)?;
            let y = pass.tape.value(res.coords);
            for (k, f) in chunk.iter().enumerate() {
                let truth = center(f);
                let pred: Vec<Point3> = (0..n)
                    .map(|i| {
                        let r = y.row_slice(k * n + i);
                        [r[0], r[1], r[2]]
                    })
                    .collect();
                if pred.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("decoded coordinates".into()));
                }
                let (_, rmsd) = kabsch_rmsd(&pred, &truth)?;
                out.push(Reconstruction {
                    per_atom_l2: per_atom_l2(&pred, &truth),
                    loss: frame_loss(&pred, &truth, lambda_r, self.config.huber_delta)?,
                    rmsd,
                    coords: pred,
                });
            }
        }
        Ok(out)
    }

    /// Copies parameters and running statistics from `source` for every
    /// parameter name accepted by `take` whose shape matches. Returns the
    /// number of parameters copied.
    pub fn adopt_parameters(&mut self, source: &ProGaeModel, take: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        let names: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            if !take(&name) {
                continue;
            }
            let Some(src) = source.params.by_name(&name) else {
                continue;
            };
            let id = self.params.id(&name).expect("listed name");
            let dst = self.params.get_mut(id);
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} in the source and {:?} here",
                    src.value.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
            copied += 1;
        }
        let keys: Vec<String> = self.running.keys().cloned().collect();
        for key in keys {
            if take(&format!("{key}.bn.gamma")) {
                if let Some(rs) = source.running.get(&key) {
                    self.running.insert(key, rs.clone());
                }
            }
        }
        Ok(copied)
    }
}

/// Loss of one frame with the same definition as the training objective.
pub fn frame_loss(pred: &[Point3], truth_centered: &[Point3], lambda_r: f64, delta: f64) -> Result<f64> {
    if pred.len() != truth_centered.len() {
        return Err(Error::AtomCount {
            expected: truth_centered.len(),
            found: pred.len(),
        });
    }
    let sl1: f64 = pred
        .iter()
        .flatten()
        .zip(truth_centered.iter().flatten())
        .map(|(p, t)| huber(p - t, delta))
        .sum();
    let n = pred.len();
    if n < 2 || lambda_r == 0.0 {
        return Ok(sl1);
    }
    let r = (0..n - 1)
        .map(|i| {
            let a = pred[i];
            let b = pred[i + 1];
            let sq = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2);
            let d = (sq + BOND_SQRT_EPS).sqrt() - geom::dist(&truth_centered[i], &truth_centered[i + 1]);
            d * d
        })
        .sum::<f64>()
        / (n - 1) as f64;
    Ok(sl1 + lambda_r * r)
}
