//! Stage-wise supervised training with checkpointing.
//!
//! One stage is trained at a time against the grid loss. Batches are
//! assembled by a single prefetch worker thread feeding a bounded channel,
//! with per-pair decoding parallelized inside each batch; batch order is a
//! pure function of `(seed, epoch)`, so runs are reproducible and a resumed
//! session is bitwise-identical to an uninterrupted one.
//!
//! Checkpoints are self-describing binary files: an 8-byte magic, a version
//! word, a JSON header declaring the stage configuration and every tensor's
//! name and shape, then the tensor payload as little-endian f64. Model
//! parameters, batch-norm running statistics and optimizer velocities all
//! round-trip bit-exactly.

use crate::error::{Error, Result};
use crate::io;
use crate::network::{raw_to_theta, GeometryModel, StageConfig, TransformKind};
use crate::par;
use crate::resampler;
use crate::synthgen::{derive_seed, Manifest, PairKind, TrainingPair};
use crate::tensor::{sgd_step, BatchNormMode, Scalar, Tape, Tensor};
use crate::transforms::{grid_loss, grid_loss_with_grad, AffineParams, TransformParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

pub fn transform_kind_of(kind: PairKind) -> TransformKind {
    match kind {
        PairKind::Affine => TransformKind::Affine,
        PairKind::Tps => TransformKind::Tps,
    }
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: Scalar,
    pub momentum: Scalar,
    pub weight_decay: Scalar,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early stopping: stop after this many epochs without a validation
    /// improvement. Training always also stops at `epochs`.
    pub patience: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 10,
            patience: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: Scalar,
    pub val_loss: Scalar,
    pub wall_seconds: Scalar,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: Scalar,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,wall_seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.wall_seconds
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

enum Storage {
    Disk {
        a: PathBuf,
        b: PathBuf,
    },
    /// Image A is warped by a fixed affine estimate at load time (TPS-stage
    /// training on affine-prealigned pairs).
    DiskPrewarped {
        a: PathBuf,
        b: PathBuf,
        prewarp: AffineParams,
        size: usize,
    },
    Memory {
        a: Tensor,
        b: Tensor,
    },
}

struct Item {
    id: String,
    theta: TransformParams,
    storage: Storage,
}

/// A supervised dataset: pair references plus their ground-truth transforms.
pub struct Dataset {
    pub kind: TransformKind,
    items: Vec<Item>,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest, split: &str) -> Result<Dataset> {
        let records = manifest.split(split);
        if records.is_empty() {
            return Err(Error::Manifest(format!("manifest has no '{split}' records")));
        }
        let kind = transform_kind_of(records[0].kind);
        let mut items = Vec::with_capacity(records.len());
        for rec in records {
            if transform_kind_of(rec.kind) != kind {
                return Err(Error::Manifest(format!(
                    "mixed pair kinds in split '{split}'"
                )));
            }
            items.push(Item {
                id: rec.pair_id.clone(),
                theta: rec.theta_gt()?,
                storage: Storage::Disk {
                    a: manifest.resolve(&rec.image_a_path),
                    b: manifest.resolve(&rec.image_b_path),
                },
            });
        }
        Ok(Dataset { kind, items })
    }

    pub fn from_pairs(kind: TransformKind, pairs: Vec<TrainingPair>) -> Dataset {
        let items = pairs
            .into_iter()
            .enumerate()
            .map(|(i, p)| Item {
                id: format!("mem_{i:06}"),
                theta: p.theta_gt,
                storage: Storage::Memory {
                    a: p.image_a,
                    b: p.image_b,
                },
            })
            .collect();
        Dataset { kind, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pair_id(&self, i: usize) -> &str {
        &self.items[i].id
    }

    pub fn theta(&self, i: usize) -> &TransformParams {
        &self.items[i].theta
    }

    pub fn load_pair(&self, i: usize) -> Result<(Tensor, Tensor)> {
        match &self.items[i].storage {
            Storage::Disk { a, b } => Ok((io::load_image(a)?, io::load_image(b)?)),
            Storage::DiskPrewarped { a, b, prewarp, size } => {
                let img_a = crate::network::prepare_image(&io::load_image(a)?, *size)?;
                let warped =
                    resampler::warp(&img_a, &TransformParams::Affine(*prewarp), (*size, *size))?;
                Ok((warped, io::load_image(b)?))
            }
            Storage::Memory { a, b } => Ok((a.clone(), b.clone())),
        }
    }

    /// Derive a TPS dataset whose image A is pre-aligned by a supplied
    /// affine stage: each pair's A is warped by that stage's estimate and
    /// the ground-truth TPS targets are mapped through the estimate's
    /// inverse, so the label stays exact for the warped pair.
    pub fn prewarp_with_affine(
        &self,
        affine: &GeometryModel,
        second: Option<&GeometryModel>,
    ) -> Result<Dataset> {
        if self.kind != TransformKind::Tps {
            return Err(Error::Training(
                "prewarping applies to TPS datasets only".into(),
            ));
        }
        let size = affine.config.input_size;
        let results: Vec<Result<Item>> = par::map_indexed(self.items.len(), |i| {
            let (a, b) = self.load_pair(i)?;
            let est = crate::network::estimate_affine(affine, second, &a, &b)?;
            let inv = est.inverse()?;
            let tps = match &self.items[i].theta {
                TransformParams::Tps(t) => t.clone(),
                other => {
                    return Err(Error::Training(format!(
                        "pair {} carries {} ground truth, expected TPS",
                        self.items[i].id,
                        other.kind_name()
                    )))
                }
            };
            let adjusted = TransformParams::Tps(tps.map_targets(&inv));
            let storage = match &self.items[i].storage {
                Storage::Disk { a: pa, b: pb } | Storage::DiskPrewarped { a: pa, b: pb, .. } => {
                    Storage::DiskPrewarped {
                        a: pa.clone(),
                        b: pb.clone(),
                        prewarp: est,
                        size,
                    }
                }
                Storage::Memory { a: ma, b: mb } => {
                    let warped = resampler::warp(
                        &crate::network::prepare_image(ma, size)?,
                        &TransformParams::Affine(est),
                        (size, size),
                    )?;
                    Storage::Memory {
                        a: warped,
                        b: mb.clone(),
                    }
                }
            };
            Ok(Item {
                id: self.items[i].id.clone(),
                theta: adjusted,
                storage,
            })
        });
        let mut items = Vec::with_capacity(results.len());
        for r in results {
            items.push(r?);
        }
        Ok(Dataset {
            kind: TransformKind::Tps,
            items,
        })
    }
}

type Batch = (Tensor, Tensor, Vec<TransformParams>);

fn assemble_batch(dataset: &Dataset, idxs: &[usize], input_size: usize) -> Result<Batch> {
    let loaded: Vec<Result<(Tensor, Tensor)>> = par::map_indexed(idxs.len(), |k| {
        let (a, b) = dataset.load_pair(idxs[k])?;
        Ok((
            crate::network::prepare_image(&a, input_size)?,
            crate::network::prepare_image(&b, input_size)?,
        ))
    });
    let mut imgs_a = Vec::with_capacity(idxs.len());
    let mut imgs_b = Vec::with_capacity(idxs.len());
    let mut thetas = Vec::with_capacity(idxs.len());
    for (k, r) in loaded.into_iter().enumerate() {
        let (a, b) = r?;
        imgs_a.push(a);
        imgs_b.push(b);
        thetas.push(dataset.theta(idxs[k]).clone());
    }
    Ok((Tensor::stack(&imgs_a)?, Tensor::stack(&imgs_b)?, thetas))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5A5A_0000 + epoch as u64));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Counters that make a resumed run indistinguishable from a continuous one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_done: usize,
    pub best_val: Scalar,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            epochs_done: 0,
            best_val: Scalar::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }
}

/// A training session: model, optimizer state and progress counters.
pub struct TrainSession {
    pub model: GeometryModel,
    pub hyper: Hyper,
    pub seed: u64,
    velocities: Vec<Tensor>,
    pub meta: TrainMeta,
}

impl TrainSession {
    pub fn new(model: GeometryModel, hyper: Hyper, seed: u64) -> TrainSession {
        let velocities = model
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        TrainSession {
            model,
            hyper,
            seed,
            velocities,
            meta: TrainMeta::default(),
        }
    }

    /// Continue a session from a checkpoint written by [`TrainSession::save`].
    pub fn resume(path: &Path, hyper: Hyper, seed: u64) -> Result<TrainSession> {
        let ckpt = load_checkpoint(path)?;
        let mut session = TrainSession::new(ckpt.model, hyper, seed);
        if let Some(v) = ckpt.velocities {
            if v.len() != session.velocities.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {} velocity tensors, model needs {}",
                    v.len(),
                    session.velocities.len()
                )));
            }
            session.velocities = v;
        }
        session.meta = ckpt.meta;
        Ok(session)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, Some(&self.velocities), &self.meta, path)
    }

    /// Run epochs `meta.epochs_done .. hyper.epochs` (early stopping aside),
    /// minimizing the mean grid loss over batches.
    ///
    /// With `checkpoint_stem` set, writes `<stem>.epochNNN.ckpt` after every
    /// epoch, `<stem>.best.ckpt` on validation improvements, and
    /// `<stem>.ckpt` for the latest state.
    pub fn train(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        checkpoint_stem: Option<&Path>,
    ) -> Result<TrainReport> {
        if train.kind != self.model.config.kind {
            return Err(Error::Training(format!(
                "dataset carries {:?} ground truth but the model regresses {:?}",
                train.kind, self.model.config.kind
            )));
        }
        if train.is_empty() {
            return Err(Error::Training("empty training dataset".into()));
        }
        let input_size = self.model.config.input_size;
        let batch = self.hyper.batch_size.max(1);
        let mut report = TrainReport {
            best_epoch: self.meta.best_epoch,
            best_val: self.meta.best_val,
            ..TrainReport::default()
        };

        for epoch in self.meta.epochs_done..self.hyper.epochs {
            if self.meta.epochs_since_best >= self.hyper.patience {
                report.stopped_early = true;
                break;
            }
            let start = std::time::Instant::now();
            let order = epoch_order(train.len(), self.seed, epoch);
            // Last partial batch is dropped to keep batch statistics stable.
            let batches: Vec<Vec<usize>> = order
                .chunks_exact(batch)
                .map(|c| c.to_vec())
                .collect();
            if batches.is_empty() {
                return Err(Error::Training(format!(
                    "training set of {} pairs cannot fill one batch of {batch}",
                    train.len()
                )));
            }

            let mut train_loss = 0.0;
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<(usize, Result<Batch>)>(2);
                let batches_ref = &batches;
                scope.spawn(move || {
                    for (bi, idxs) in batches_ref.iter().enumerate() {
                        let assembled = assemble_batch(train, idxs, input_size);
                        if tx.send((bi, assembled)).is_err() {
                            break;
                        }
                    }
                });
                for (bi, assembled) in rx {
                    let (imgs_a, imgs_b, thetas) = assembled?;
                    let loss = self.step(&imgs_a, &imgs_b, &thetas).map_err(|e| {
                        Error::Training(format!("epoch {epoch} batch {bi}: {e}"))
                    })?;
                    if !loss.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite loss at epoch {epoch} batch {bi} (first pair {})",
                            train.pair_id(batches[bi][0])
                        )));
                    }
                    train_loss += loss;
                }
                Ok(())
            })?;
            train_loss /= batches.len() as Scalar;

            let val_loss = evaluate_loss(&self.model, val, batch)?;
            self.meta.epochs_done = epoch + 1;
            if val_loss < self.meta.best_val {
                self.meta.best_val = val_loss;
                self.meta.best_epoch = epoch;
                self.meta.epochs_since_best = 0;
                if let Some(stem) = checkpoint_stem {
                    self.save(&stem_path(stem, ".best.ckpt"))?;
                }
            } else {
                self.meta.epochs_since_best += 1;
            }
            if let Some(stem) = checkpoint_stem {
                self.save(&stem_path(stem, &format!(".epoch{epoch:03}.ckpt")))?;
                self.save(&stem_path(stem, ".ckpt"))?;
            }

            let stats = EpochStats {
                epoch,
                train_loss,
                val_loss,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {}: train {:.6} val {:.6} ({:.1}s)",
                stats.epoch,
                stats.train_loss,
                stats.val_loss,
                stats.wall_seconds
            );
            report.epochs.push(stats);
            report.best_epoch = self.meta.best_epoch;
            report.best_val = self.meta.best_val;
        }
        Ok(report)
    }

    /// One SGD step on a batch; returns the batch's mean grid loss.
    fn step(
        &mut self,
        imgs_a: &Tensor,
        imgs_b: &Tensor,
        thetas: &[TransformParams],
    ) -> Result<Scalar> {
        let kind = self.model.config.kind;
        let p = kind.param_count();
        let n = thetas.len();
        let mut tape = Tape::new();
        let (raw, vars) =
            self.model
                .forward_batch(&mut tape, imgs_a, imgs_b, BatchNormMode::Train, true)?;

        let raw_val = tape.value(raw).clone();
        let mut seed = Tensor::zeros(&[n, p]);
        let mut loss = 0.0;
        for i in 0..n {
            let theta_hat = raw_to_theta(kind, &raw_val.data()[i * p..(i + 1) * p])?;
            let (li, gi) = grid_loss_with_grad(&theta_hat, &thetas[i])?;
            loss += li;
            for j in 0..p {
                seed.data_mut()[i * p + j] = gi[j] / n as Scalar;
            }
        }
        loss /= n as Scalar;
        tape.backward_with(raw, seed)?;

        let trainable: Vec<usize> = self
            .model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, pr)| pr.trainable)
            .map(|(i, _)| i)
            .collect();
        let mut grads = Vec::with_capacity(trainable.len());
        for &i in &trainable {
            let g = tape
                .grad(vars[i])
                .ok_or_else(|| Error::Training(format!("no gradient for parameter {i}")))?;
            let mut g = g.clone();
            if self.hyper.weight_decay > 0.0 {
                let wd = self.hyper.weight_decay;
                let pv = &self.model.params()[i].value;
                for (gv, pv) in g.data_mut().iter_mut().zip(pv.data().iter()) {
                    *gv += wd * pv;
                }
            }
            grads.push(g);
        }
        drop(tape);

        let mut refs: Vec<&mut Tensor> = Vec::with_capacity(trainable.len());
        {
            let mut k = 0;
            for (i, param) in self.model.params_mut().iter_mut().enumerate() {
                if k < trainable.len() && trainable[k] == i {
                    refs.push(&mut param.value);
                    k += 1;
                }
            }
        }
        sgd_step(
            &mut refs,
            &grads,
            &mut self.velocities,
            self.hyper.lr,
            self.hyper.momentum,
        )?;
        Ok(loss)
    }
}

fn stem_path(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Mean grid loss of a model over a dataset (eval mode, no updates).
pub fn evaluate_loss(model: &GeometryModel, dataset: &Dataset, batch: usize) -> Result<Scalar> {
    if dataset.is_empty() {
        return Err(Error::Training("empty evaluation dataset".into()));
    }
    let input_size = model.config.input_size;
    let p = model.config.kind.param_count();
    let idxs: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in idxs.chunks(batch.max(1)) {
        let (imgs_a, imgs_b, thetas) = assemble_batch(dataset, chunk, input_size)?;
        let mut tape = Tape::new();
        let raw = model.forward_eval(&mut tape, &imgs_a, &imgs_b)?;
        let raw_val = tape.value(raw);
        for (i, theta_gt) in thetas.iter().enumerate() {
            let theta_hat =
                raw_to_theta(model.config.kind, &raw_val.data()[i * p..(i + 1) * p])?;
            total += grid_loss(&theta_hat, theta_gt)?;
        }
    }
    Ok(total / dataset.len() as Scalar)
}

// --- Checkpoint format -----------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"GMCKPT\0\0";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: StageConfig,
    tensors: Vec<TensorDecl>,
    meta: TrainMeta,
    has_optimizer: bool,
}

pub struct Checkpoint {
    pub model: GeometryModel,
    pub velocities: Option<Vec<Tensor>>,
    pub meta: TrainMeta,
}

/// Write a self-describing binary checkpoint.
pub fn save_checkpoint(
    model: &GeometryModel,
    velocities: Option<&[Tensor]>,
    meta: &TrainMeta,
    path: &Path,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for p in model.params() {
        tensors.push((format!("param:{}", p.name), &p.value));
    }
    let bn_tensors: Vec<(String, Tensor)> = model
        .bn_layers()
        .iter()
        .flat_map(|l| {
            [
                (
                    format!("bn:{}:mean", l.name),
                    Tensor::from_vec(&[l.stats.mean.len()], l.stats.mean.clone()).expect("bn"),
                ),
                (
                    format!("bn:{}:var", l.name),
                    Tensor::from_vec(&[l.stats.var.len()], l.stats.var.clone()).expect("bn"),
                ),
            ]
        })
        .collect();
    for (n, t) in &bn_tensors {
        tensors.push((n.clone(), t));
    }
    if let Some(vel) = velocities {
        let names: Vec<&str> = model
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect();
        if names.len() != vel.len() {
            return Err(Error::Checkpoint(format!(
                "{} velocities for {} trainable params",
                vel.len(),
                names.len()
            )));
        }
        for (name, v) in names.iter().zip(vel.iter()) {
            tensors.push((format!("vel:{name}"), v));
        }
    }

    let header = CkptHeader {
        config: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorDecl {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: *meta,
        has_optimizer: velocities.is_some(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, t) in &tensors {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint, validating magic, version, and every tensor shape
/// against the declared configuration.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file truncated before magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)
        .map_err(|_| Error::Checkpoint("file truncated before version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)
        .map_err(|_| Error::Checkpoint("file truncated before header".into()))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    if header_len > 16 << 20 {
        return Err(Error::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("file truncated inside header".into()))?;
    let header: CkptHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

    let mut model = GeometryModel::new(header.config.clone(), 0)?;
    let mut velocities: Vec<Tensor> = Vec::new();
    for decl in &header.tensors {
        let count: usize = decl.shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        file.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!("file truncated inside tensor '{}'", decl.name))
        })?;
        let data: Vec<Scalar> = buf
            .chunks_exact(8)
            .map(|c| Scalar::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::from_vec(&decl.shape, data)?;
        if let Some(name) = decl.name.strip_prefix("param:") {
            let param = model
                .params_mut()
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("unknown parameter '{name}' in checkpoint"))
                })?;
            if param.value.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    param.value.shape()
                )));
            }
            param.value = tensor;
        } else if let Some(rest) = decl.name.strip_prefix("bn:") {
            let (name, field) = rest
                .rsplit_once(':')
                .ok_or_else(|| Error::Checkpoint(format!("bad bn tensor '{}'", decl.name)))?;
            let layer = model
                .bn_layers_mut()
                .iter_mut()
                .find(|l| l.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown bn layer '{name}'")))?;
            match field {
                "mean" => layer.stats.mean = tensor.into_data(),
                "var" => layer.stats.var = tensor.into_data(),
                other => {
                    return Err(Error::Checkpoint(format!("unknown bn field '{other}'")))
                }
            }
        } else if decl.name.starts_with("vel:") {
            velocities.push(tensor);
        } else {
            return Err(Error::Checkpoint(format!(
                "unknown tensor class '{}'",
                decl.name
            )));
        }
    }
    // Trailing garbage means the file does not match its header.
    let mut extra = [0u8; 1];
    if file.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        model,
        velocities: header.has_optimizer.then_some(velocities),
        meta: header.meta,
    })
}
