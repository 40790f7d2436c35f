//! ADAM training loop, evaluation reports, checkpoints and dense-layer
//! transfer.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geom::{center, contact_jaccard, kabsch_rmsd, per_atom_l2, Point3, DEFAULT_CONTACT_CUTOFF};
use crate::nnops::{Pass, RunningStats};
use crate::progae::{frame_loss, ModelConfig, ProGaeModel, Reconstruction, DECODER_INPUT};
use crate::trajdata::{Split, TrajectoryDataset};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const TRANSFER_EPOCHS: usize = 10;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.f64";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_r: f64,
    pub seed: u64,
    pub use_intrinsic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.995,
            weight_decay: 5e-5,
            epochs: 100,
            batch_size: 64,
            lambda_r: 0.5,
            seed: 0,
            use_intrinsic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr_decay > 0.0
            && self.weight_decay >= 0.0
            && self.lambda_r >= 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && [self.lr, self.lr_decay, self.weight_decay, self.lambda_r]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }

    /// Learning rate used during `epoch` (1-based): `lr · decay^(epoch − 1)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32 - 1)
    }

    /// Model configuration for a chain of `atom_count` atoms with this run's
    /// seed and branch selection.
    pub fn model_config(&self, atom_count: usize) -> ModelConfig {
        let c = ModelConfig::new(atom_count, self.seed);
        if self.use_intrinsic {
            c
        } else {
            c.extrinsic_only()
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected ADAM update of every trainable parameter, preceded by
/// decoupled weight decay `θ ← θ − lr·wd·θ`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adam",
            format!("{} moment buffers for {} parameters", state.m.len(), params.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::shape("adam", format!("moment shape mismatch for {}", p.name)));
        }
        let g = p.grad.data();
        let theta = p.value.data_mut();
        for (((x, &gi), mi), vi) in theta.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            *x -= lr * weight_decay * *x;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// `epoch,lr,train_loss,val_loss`, one row per epoch; a missing
    /// validation loss is an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss\n");
        for r in &self.records {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, val));
        }
        s
    }

    pub fn first_train_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

/// Trains `model` in place on the train split; validation loss is computed
/// in eval mode after every epoch.
pub fn train_model(model: &mut ProGaeModel, dataset: &TrajectoryDataset, config: &TrainConfig) -> Result<History> {
    train_with_callback(model, dataset, config, |_| {})
}

/// [`train_model`] with a hook called after each epoch.
pub fn train_with_callback(
    model: &mut ProGaeModel,
    dataset: &TrajectoryDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    let mut order: Vec<usize> = dataset.splits.train.clone();
    if order.is_empty() {
        return Err(Error::InvalidDataset("empty train split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&model.params);
    let mut history = History::default();
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let frames: Vec<&[Point3]> = batch.iter().map(|&i| dataset.frames[i].coords.as_slice()).collect();
            model.params.zero_grad();
            let updates = {
                let mut pass = Pass::new(&model.params, &model.running, true);
                let loss = model.batch_loss(&mut pass, &frames, config.lambda_r)?;
                let value = pass.tape.value(loss).item().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                }
                total += value * frames.len() as f64;
                let tape = std::mem::take(&mut pass.tape);
                let updates = std::mem::take(&mut pass.bn_updates);
                drop(pass);
                tape.backward(loss, &mut model.params)?;
                updates
            };
            adam_step(&mut model.params, &mut adam, lr, config.weight_decay)?;
            model.apply_bn_updates(updates);
        }
        let val_loss = if dataset.splits.val.is_empty() {
            None
        } else {
            Some(evaluate(model, dataset, Split::Val, config.lambda_r)?.loss)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / order.len() as f64,
            val_loss,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}

/// Split-averaged reconstruction metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub frames: usize,
    pub loss: f64,
    /// Mean per-atom L2 distance to the centered truth (Å).
    pub avg_l2: f64,
    /// Mean Jaccard index of contact sets at 8 Å.
    pub contact_recovery: f64,
    /// Mean Kabsch RMSD (Å).
    pub rmsd: f64,
}

/// Aggregates metrics of predictions against their frames. Predictions are
/// in centered coordinates.
pub fn report_from_predictions(
    split: &str,
    truths: &[&[Point3]],
    preds: &[Vec<Point3>],
    lambda_r: f64,
    delta: f64,
) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(Error::InvalidDataset(format!("empty {split} split")));
    }
    if truths.len() != preds.len() {
        return Err(Error::shape("evaluate", "prediction count"));
    }
    let recs = truths
        .iter()
        .zip(preds)
        .map(|(t, p)| {
            let truth = center(t);
            Ok(Reconstruction {
                per_atom_l2: per_atom_l2(p, &truth),
                rmsd: kabsch_rmsd(p, &truth)?.1,
                loss: frame_loss(p, &truth, lambda_r, delta)?,
                coords: p.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(split, truths, &recs)
}

fn aggregate(split: &str, truths: &[&[Point3]], recs: &[Reconstruction]) -> Result<EvalReport> {
    let n = recs.len() as f64;
    let mut jaccard = 0.0;
    for (t, r) in truths.iter().zip(recs) {
        jaccard += contact_jaccard(&center(t), &r.coords, DEFAULT_CONTACT_CUTOFF)?;
    }
    let report = EvalReport {
        split: split.to_string(),
        frames: recs.len(),
        loss: recs.iter().map(|r| r.loss).sum::<f64>() / n,
        avg_l2: recs
            .iter()
            .map(|r| r.per_atom_l2.iter().sum::<f64>() / r.per_atom_l2.len().max(1) as f64)
            .sum::<f64>()
            / n,
        contact_recovery: jaccard / n,
        rmsd: recs.iter().map(|r| r.rmsd).sum::<f64>() / n,
    };
    if ![report.loss, report.avg_l2, report.contact_recovery, report.rmsd]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite(format!("{split} metrics")));
    }
    Ok(report)
}

/// Reconstructs frames, fanning out over [`crate::eval_threads`] workers.
/// Results are in input order and independent of the worker count.
pub fn reconstruct_parallel(model: &ProGaeModel, frames: &[&[Point3]], lambda_r: f64) -> Result<Vec<Reconstruction>> {
    let workers = crate::eval_threads().min(frames.len().max(1));
    if workers <= 1 {
        return model.reconstruct_many(frames, lambda_r);
    }
    let per = frames.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Reconstruction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = frames
            .chunks(per)
            .map(|chunk| s.spawn(move || model.reconstruct_many(chunk, lambda_r)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Analysis("evaluation worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(frames.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Eval-mode metrics over one split.
pub fn evaluate(model: &ProGaeModel, dataset: &TrajectoryDataset, split: Split, lambda_r: f64) -> Result<EvalReport> {
    let frames: Vec<&[Point3]> = dataset
        .split_frames(split)
        .into_iter()
        .map(|f| f.coords.as_slice())
        .collect();
    if frames.is_empty() {
        return Err(Error::InvalidDataset(format!("empty {} split", split.name())));
    }
    let recs = reconstruct_parallel(model, &frames, lambda_r)?;
    aggregate(split.name(), &frames, &recs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    reference_hash: String,
    reference: Vec<Point3>,
    /// Total number of f64 values in the payload.
    payload_values: usize,
    params: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
}

/// Writes `manifest.json` and `params.f64` into `dir`.
pub fn save_checkpoint(model: &ProGaeModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload: Vec<f64> = Vec::with_capacity(model.params.scalar_count());
    let mut params = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        params.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
            offset: payload.len(),
        });
        payload.extend_from_slice(p.value.data());
    }
    let mut buffers = Vec::new();
    for (key, rs) in &model.running {
        for (suffix, values) in [("running_mean", &rs.mean), ("running_var", &rs.var)] {
            buffers.push(TensorEntry {
                name: format!("{key}.{suffix}"),
                shape: [1, values.len()],
                offset: payload.len(),
            });
            payload.extend_from_slice(values);
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        reference_hash: model.reference_hash(),
        reference: model.reference().to_vec(),
        payload_values: payload.len(),
        params,
        buffers,
    };
    let mp = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: mp.clone(),
        source: e,
    })?;
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
    let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    let pp = dir.join(PAYLOAD_FILE);
    fs::write(&pp, bytes).map_err(|e| Error::io(&pp, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ProGaeModel> {
    let dir = dir.as_ref();
    let mp = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: mp.clone(),
        source: e,
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let pp = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    if bytes.len() != 8 * manifest.payload_values {
        return Err(Error::PayloadLength {
            expected: 8 * manifest.payload_values,
            found: bytes.len(),
        });
    }
    let payload: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut model = ProGaeModel::init(manifest.model.clone(), &manifest.reference)?;
    if model.reference_hash() != manifest.reference_hash {
        return Err(Error::Checkpoint("reference frame hash mismatch".into()));
    }
    let slice = |e: &TensorEntry| -> Result<&[f64]> {
        let len = e.shape[0] * e.shape[1];
        payload
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("{} lies outside the payload", e.name)))
    };
    if manifest.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for e in &manifest.params {
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != e.shape {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", e.name)));
        }
        p.value.data_mut().copy_from_slice(slice(e)?);
    }
    for e in &manifest.buffers {
        let (key, which) = e
            .name
            .rsplit_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("bad buffer name {}", e.name)))?;
        let rs: &mut RunningStats = model
            .running
            .get_mut(key)
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {}", e.name)))?;
        let target = match which {
            "running_mean" => &mut rs.mean,
            "running_var" => &mut rs.var,
            _ => return Err(Error::Checkpoint(format!("bad buffer name {}", e.name))),
        };
        if target.len() != e.shape[0] * e.shape[1] {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", e.name)));
        }
        target.copy_from_slice(slice(e)?);
    }
    Ok(model)
}

/// Which pretrained encoder filters a transfer run copies. Decoder filters
/// are always copied; encoder filters that are not copied keep their random
/// initialization. Either way, only the decoder input layer trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterSubset {
    All,
    Intrinsic,
    Extrinsic,
}

impl FilterSubset {
    pub fn takes(self, name: &str) -> bool {
        if name.starts_with(DECODER_INPUT) {
            return false;
        }
        match self {
            FilterSubset::All => true,
            FilterSubset::Intrinsic => !name.starts_with("enc_e."),
            FilterSubset::Extrinsic => !name.starts_with("enc_i."),
        }
    }
}

impl std::str::FromStr for FilterSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "intrinsic" => Ok(Self::Intrinsic),
            "extrinsic" => Ok(Self::Extrinsic),
            other => Err(Error::InvalidConfig(format!("unknown filter subset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub model: ProGaeModel,
    pub history: History,
    pub report: EvalReport,
}

/// Fits a model for `dataset` (chain length may differ from the source) by
/// training only the latent-to-decoder dense layer for `config.epochs`
/// epochs. With `pretrained = None` this is the random-initialization
/// baseline; otherwise the filters selected by `subset` are copied first.
/// The returned report is on the test split.
pub fn transfer_fit(
    pretrained: Option<&ProGaeModel>,
    dataset: &TrajectoryDataset,
    config: &TrainConfig,
    subset: FilterSubset,
) -> Result<TransferOutcome> {
    let reference = dataset
        .splits
        .train
        .first()
        .map(|&i| dataset.frames[i].coords.clone())
        .ok_or_else(|| Error::InvalidDataset("empty train split".into()))?;
    let mut model_cfg = match pretrained {
        Some(src) => ModelConfig {
            atom_count: dataset.meta.atom_count,
            seed: config.seed,
            ..src.config.clone()
        },
        None => config.model_config(dataset.meta.atom_count),
    };
    model_cfg.seed = config.seed;
    let mut model = ProGaeModel::init(model_cfg, &reference)?;
    if let Some(src) = pretrained {
        if src.config.latent_dim() != model.config.latent_dim() {
            return Err(Error::Checkpoint("latent width differs from the pretrained model".into()));
        }
        model.adopt_parameters(src, |n| subset.takes(n))?;
    }
    model.params.set_trainable(|n| n.starts_with(DECODER_INPUT));
    let history = train_model(&mut model, dataset, config)?;
    let report = evaluate(&model, dataset, Split::Test, config.lambda_r)?;
    Ok(TransferOutcome { model, history, report })
}

/// Hex SHA-256 over parameter names and values, for freeze checks.
pub fn params_digest(store: &ParamStore, include: impl Fn(&str) -> bool) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in store.iter().filter(|p| include(&p.name)) {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajdata::{generate_synthetic, SyntheticConfig};

    fn tiny(n: usize, per_class: usize, seed: u64) -> TrajectoryDataset {
        generate_synthetic(&SyntheticConfig {
            atom_count: n,
            frames_per_class: per_class,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_closed_form() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 1e-3);
        assert!((c.lr_at(100) - 6.088e-4).abs() < 1e-6);
        let mut lr = 1e-3;
        for e in 1..=100 {
            assert!((c.lr_at(e) - lr).abs() < 1e-18);
            lr *= 0.995;
        }
    }

    fn single_param(value: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = value.len();
        let id = s.add("x", Tensor::row(value));
        s.get_mut(id).grad = Tensor::new(1, n, grad).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_no_decay_is_noop() {
        let mut s = single_param(vec![0.5, -2.0], vec![0.0, 0.0]);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3, 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = [0.3, -4.0, 1e-3];
        let mut s = single_param(vec![1.0, 1.0, 1.0], g.to_vec());
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3, 0.0).unwrap();
        for (x, gi) in s.by_name("x").unwrap().value.data().iter().zip(g) {
            let want = 1.0 - 1e-3 * gi / (gi.abs() + ADAM_EPS);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
    }

    #[test]
    fn adam_decoupled_decay_and_frozen() {
        let mut s = single_param(vec![2.0], vec![0.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, 0.5).unwrap();
        assert!((s.by_name("x").unwrap().value.data()[0] - 1.9).abs() < 1e-15);
        s.set_trainable(|_| false);
        s.get_mut(crate::adiff::ParamId(0)).grad = Tensor::row(vec![1.0]);
        let before = s.clone();
        adam_step(&mut s, &mut st, 0.1, 0.5).unwrap();
        assert_eq!(s.by_name("x").unwrap().value, before.by_name("x").unwrap().value);
    }

    #[test]
    fn adam_is_reproducible() {
        let run = || {
            let mut s = single_param(vec![0.1, 0.2], vec![0.5, -0.5]);
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &mut st, 1e-3, 5e-5).unwrap();
            adam_step(&mut s, &mut st, 1e-3, 5e-5).unwrap();
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = tiny(20, 8, 1);
        let cfg = quick_config(6);
        let run = || {
            let mut m = ProGaeModel::init(cfg.model_config(20), &ds.frames[ds.splits.train[0]].coords).unwrap();
            let h = train_model(&mut m, &ds, &cfg).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(m1.params, m2.params);
        assert_eq!(h1.records.len(), 6);
        assert!(h1.last_train_loss().unwrap() < h1.first_train_loss().unwrap());
        assert!(h1.records.iter().all(|r| r.val_loss.is_some()));
        assert!(h1.to_csv().starts_with("epoch,lr,train_loss,val_loss\n1,0.001,"));
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let mut ds = tiny(20, 4, 1);
        ds.splits.train.clear();
        let mut m = ProGaeModel::init(ModelConfig::new(20, 0), &ds.frames[0].coords).unwrap();
        assert!(train_model(&mut m, &ds, &quick_config(1)).is_err());
    }

    #[test]
    fn untrained_report_is_finite() {
        let ds = tiny(20, 4, 2);
        let m = ProGaeModel::init(ModelConfig::new(20, 0), &ds.frames[0].coords).unwrap();
        let r = evaluate(&m, &ds, Split::Test, 0.5).unwrap();
        assert!(r.loss.is_finite() && r.avg_l2.is_finite() && r.rmsd.is_finite());
        assert!((0.0..=1.0).contains(&r.contact_recovery));
        assert_eq!(r.frames, ds.splits.test.len());
    }

    #[test]
    fn identity_predictions_are_perfect() {
        let ds = tiny(20, 4, 2);
        let truths: Vec<&[Point3]> = ds.frames.iter().map(|f| f.coords.as_slice()).collect();
        let preds: Vec<Vec<Point3>> = truths.iter().map(|t| center(t)).collect();
        let r = report_from_predictions("all", &truths, &preds, 0.5, 2.0).unwrap();
        assert!(r.avg_l2 == 0.0 && r.contact_recovery == 1.0);
        assert!(r.rmsd < 1e-6 && r.loss < 1e-20);
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let ds = tiny(20, 4, 3);
        let mut m = ProGaeModel::init(ModelConfig::new(20, 9), &ds.frames[0].coords).unwrap();
        train_model(&mut m, &ds, &quick_config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params.len(), m.params.len());
        for (a, b) in back.params.iter().zip(m.params.iter()) {
            assert_eq!((&a.name, &a.value, a.trainable), (&b.name, &b.value, b.trainable));
        }
        assert_eq!(back.running, m.running);
        assert_eq!(back.config, m.config);
        let f = &ds.frames[5].coords;
        assert_eq!(m.reconstruct(f, 0.5).unwrap(), back.reconstruct(f, 0.5).unwrap());

        let pp = dir.path().join(PAYLOAD_FILE);
        let mut bytes = fs::read(&pp).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&pp, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::PayloadLength { .. })));
    }

    #[test]
    fn transfer_freezes_all_but_decoder_input() {
        let src_ds = tiny(20, 6, 4);
        let dst_ds = tiny(24, 6, 5);
        let cfg = quick_config(2);
        let mut src = ProGaeModel::init(cfg.model_config(20), &src_ds.frames[0].coords).unwrap();
        train_model(&mut src, &src_ds, &cfg).unwrap();
        let out = transfer_fit(Some(&src), &dst_ds, &cfg, FilterSubset::All).unwrap();
        let frozen = |n: &str| !n.starts_with(DECODER_INPUT);
        assert_eq!(params_digest(&out.model.params, frozen), params_digest(&src.params, frozen));
        assert_eq!(out.model.config.atom_count, 24);
        assert_eq!(out.history.records.len(), 2);

        let only_e = transfer_fit(Some(&src), &dst_ds, &cfg, FilterSubset::Extrinsic).unwrap();
        let enc_e = |n: &str| n.starts_with("enc_e.");
        assert_eq!(params_digest(&only_e.model.params, enc_e), params_digest(&src.params, enc_e));
        let enc_i = |n: &str| n.starts_with("enc_i.");
        assert_ne!(params_digest(&only_e.model.params, enc_i), params_digest(&src.params, enc_i));

        let base = transfer_fit(None, &dst_ds, &cfg, FilterSubset::All).unwrap();
        assert!(base.report.avg_l2.is_finite());
    }
}
