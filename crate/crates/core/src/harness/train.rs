//! Training and evaluation loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::{cosine_lr, Optimizer};
use crate::data::{read_dataset, scale_jitter, Dataset, Split, TileRecord, DEFAULT_JITTER_RANGE, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::head::{predict, seg_loss};
use crate::metrics::{semantic_metrics, ConfusionMatrix, SemanticMetrics};
use crate::model::SegModel;
use crate::par::{self, Execution};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `epochs × ceil(n_samples / (per_device_batch × devices))`.
pub fn iterations_for(n_samples: usize, epochs: usize, per_device_batch: usize, devices: usize) -> Result<usize> {
    if n_samples == 0 || epochs == 0 || per_device_batch == 0 || devices == 0 {
        return Err(Error::config("iterations_for needs positive arguments"));
    }
    Ok(epochs * n_samples.div_ceil(per_device_batch * devices))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: SemanticMetrics,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub metrics: SemanticMetrics,
    pub loss: f64,
}

pub const LOG_HEADER: &str = "epoch,split,pixel_accuracy,precision,recall,f1,miou,loss";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.split, m.pixel_accuracy, m.precision, m.recall, m.f1, m.miou, self.loss
        )
    }
}

pub struct TrainOutcome {
    pub model: SegModel,
    /// Parameters from the epoch with the best validation F1.
    pub store: ParamStore,
    /// The run configuration with `img_size` resolved.
    pub config: RunConfig,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: Evaluation,
    /// Mean training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Build the model described by `config` with freshly initialized weights.
pub fn build_model(config: &RunConfig, img_size: usize) -> Result<(SegModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut r = rng::labeled_stream(config.seed, "init");
    let model = SegModel::new(config.model_config(img_size)?, &mut store, &mut r)?;
    Ok((model, store))
}

fn check_dataset(config: &RunConfig, data: &Dataset) -> Result<usize> {
    let first = data.tiles.first().ok_or_else(|| Error::Empty("dataset has no tiles".into()))?;
    let size = first.height;
    if data.tiles.iter().any(|t| t.height != size || t.width != size) {
        return Err(Error::config("tiles must all be square and the same size"));
    }
    if config.img_size != 0 && config.img_size != size {
        return Err(Error::config(format!("img_size {} but tiles are {size}", config.img_size)));
    }
    let classes = data.n_classes();
    if classes > config.n_classes {
        return Err(Error::ClassMismatch {
            model: config.n_classes,
            data: classes,
        });
    }
    Ok(size)
}

/// Loss and parameter gradients for one tile; `None` when every pixel is
/// unlabeled.
fn sample_gradient(model: &SegModel, store: &ParamStore, tile: &TileRecord) -> Result<Option<(f64, Vec<(ParamId, Tensor)>)>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, &tile.image(), tile.coord)?;
    let loss = match seg_loss(&mut tape, out.logits, &tile.mask, IGNORE_INDEX) {
        Ok(l) => l,
        Err(Error::Empty(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok(Some((value, tape.param_grads())))
}

pub fn train(config: &RunConfig, data: &Dataset, exec: Execution) -> Result<TrainOutcome> {
    config.validate()?;
    let img_size = check_dataset(config, data)?;
    let mut config = config.clone();
    config.img_size = img_size;
    let train_tiles = data.split(Split::Train);
    let val_tiles = data.split(Split::Val);
    if train_tiles.is_empty() || val_tiles.is_empty() {
        return Err(Error::Empty("training needs train and val tiles".into()));
    }

    let (model, mut store) = build_model(&config, img_size)?;
    let mut opt = Optimizer::new(&store, config.weight_decay);
    let batch = config.per_device_batch * config.devices;
    let total = iterations_for(train_tiles.len(), config.epochs, config.per_device_batch, config.devices)?;
    info!(
        "training {} ({} parameters) for {total} steps on {} tiles",
        config.fusion.as_ref().map_or("baseline".to_string(), |f| f.label()),
        store.num_elements(),
        train_tiles.len()
    );

    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(usize, Evaluation, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_tiles.len()).collect();
        rng::shuffle(&mut order, &mut rng::labeled_stream(rng::derive(config.seed, epoch as u64), "order"));
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(batch) {
            let lr = cosine_lr(config.lr, step, total);
            let tiles: Vec<TileRecord> = chunk
                .iter()
                .map(|&i| {
                    if config.jitter {
                        let seed = rng::derive(rng::derive(config.seed, epoch as u64), i as u64);
                        scale_jitter(train_tiles[i], DEFAULT_JITTER_RANGE, seed)
                    } else {
                        Ok(train_tiles[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let nan = || Error::NanLoss {
                epoch,
                step,
                lr,
                batch: chunk.to_vec(),
            };
            let results = par::map(exec, &tiles, |t| sample_gradient(&model, &store, t));
            let mut sum: Vec<Option<Vec<f64>>> = vec![None; store.len()];
            let mut loss = 0.0;
            let mut used = 0usize;
            for r in results {
                let r = match r {
                    Err(Error::NonFinite { .. }) => return Err(nan()),
                    other => other?,
                };
                let Some((l, grads)) = r else { continue };
                if !l.is_finite() {
                    return Err(nan());
                }
                loss += l;
                used += 1;
                for (id, g) in grads {
                    let acc = sum[id.index()].get_or_insert_with(|| vec![0.0; g.numel()]);
                    for (a, b) in acc.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            step += 1;
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            let mut grads: Vec<(ParamId, Tensor)> = Vec::new();
            for id in store.ids() {
                if let Some(g) = sum[id.index()].take() {
                    let shape = store.get(id).shape().to_vec();
                    grads.push((id, Tensor::new(shape, g.into_iter().map(|x| x * scale).collect())?));
                }
            }
            opt.step(&mut store, &grads, lr)?;
            let mean = loss / used as f64;
            debug!("epoch {epoch} step {step} lr {lr:.3e} loss {mean:.5}");
            step_losses.push(mean);
            epoch_loss += mean;
            epoch_batches += 1;
        }
        if epoch_batches > 0 {
            let train_loss = epoch_loss / epoch_batches as f64;
            debug!("epoch {epoch} train loss {train_loss:.5}");
        }
        let val = evaluate(&model, &store, &val_tiles, exec)?;
        info!("epoch {epoch}: val f1 {:.4} miou {:.4} loss {:.4}", val.metrics.f1, val.metrics.miou, val.loss);
        log.push(EpochLog {
            epoch,
            split: Split::Val,
            metrics: val.metrics,
            loss: val.loss,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val.metrics.f1 > b.metrics.f1) {
            best = Some((epoch, val, store.clone()));
        }
    }
    let (best_epoch, best_val, best_store) = best.expect("at least one epoch");
    let outcome = TrainOutcome {
        model,
        store: best_store,
        config,
        log,
        best_epoch,
        best_val,
        step_losses,
    };
    if let Some(out) = &outcome.config.out {
        write_outputs(&outcome, out)?;
    }
    Ok(outcome)
}

fn write_outputs(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Checkpoint::from_store(&outcome.config, &outcome.store).save(&dir.join("best.gvck"))?;
    let mut csv = String::from(LOG_HEADER);
    csv.push('\n');
    for row in &outcome.log {
        let _ = writeln!(csv, "{}", row.csv_row());
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Train on the dataset named by `config.manifest`.
pub fn train_from_manifest(config: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
    let manifest = config
        .manifest
        .as_ref()
        .ok_or_else(|| Error::config("no manifest given"))?;
    let data = read_dataset(manifest)?;
    train(config, &data, exec)
}

/// Metrics and mean loss over `tiles`; parameters are left untouched.
pub fn evaluate(model: &SegModel, store: &ParamStore, tiles: &[&TileRecord], exec: Execution) -> Result<Evaluation> {
    if tiles.is_empty() {
        return Err(Error::Empty("split has no tiles".into()));
    }
    let n = model.n_classes();
    let per_tile = par::map(exec, tiles, |t| -> Result<(ConfusionMatrix, Option<f64>)> {
        if let Some(c) = t.max_class() {
            if usize::from(c) >= n {
                return Err(Error::ClassMismatch {
                    model: n,
                    data: usize::from(c) + 1,
                });
            }
        }
        let logits = model.infer(store, &t.image(), t.coord)?;
        let (pred, _) = predict(&logits)?;
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(&pred, &t.mask, IGNORE_INDEX)?;
        let mut tape = Tape::inference();
        let l = tape.constant(logits);
        let loss = match tape.cross_entropy(l, &t.mask, IGNORE_INDEX) {
            Ok(v) => Some(tape.value(v).item()),
            Err(Error::Empty(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((cm, loss))
    });
    let mut confusion = ConfusionMatrix::new(n);
    let (mut loss, mut counted) = (0.0, 0usize);
    for r in per_tile {
        let (cm, l) = r?;
        confusion.merge(&cm)?;
        if let Some(l) = l {
            loss += l;
            counted += 1;
        }
    }
    let metrics = semantic_metrics(&confusion)?;
    Ok(Evaluation {
        metrics,
        loss: if counted > 0 { loss / counted as f64 } else { 0.0 },
        confusion,
    })
}

/// Rebuild the model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(SegModel, ParamStore, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    if ck.config.img_size == 0 {
        return Err(Error::config("checkpoint config has no img_size"));
    }
    let (model, mut store) = build_model(&ck.config, ck.config.img_size)?;
    ck.restore(&mut store)?;
    Ok((model, store, ck.config))
}
