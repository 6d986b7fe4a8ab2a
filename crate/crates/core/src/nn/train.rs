use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{l1_loss_masked, l1_value_masked};
use super::model::DenoiserModel;
use super::tensor::Tensor5;
use super::tensor_from_volume;
use crate::error::{Error, Result};
use crate::pipeline::TrainingPair;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), epochs: 40, batch_size: 1, val_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation loss.
    pub model: DenoiserModel,
    pub history: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch - 1].val_loss
    }
}

struct Prepared {
    input: Tensor5<f32>,
    target: Tensor5<f32>,
    mask: Vec<bool>,
}

fn stack(items: &[&Prepared]) -> Result<Prepared> {
    if items.len() == 1 {
        let p = items[0];
        return Ok(Prepared { input: p.input.clone(), target: p.target.clone(), mask: p.mask.clone() });
    }
    let [_, c, nz, ny, nx] = items[0].input.shape();
    let mut input = Vec::new();
    let mut target = Vec::new();
    let mut mask = Vec::new();
    for p in items {
        if p.input.shape() != items[0].input.shape() {
            return Err(Error::Shape("blocks in one batch must share a shape".into()));
        }
        input.extend_from_slice(p.input.data());
        target.extend_from_slice(p.target.data());
        mask.extend_from_slice(&p.mask);
    }
    let shape = [items.len(), c, nz, ny, nx];
    Ok(Prepared { input: Tensor5::from_vec(shape, input)?, target: Tensor5::from_vec(shape, target)?, mask })
}

/// Split of `n` blocks into (train, validation) index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Adam on the masked L1 loss. Each epoch is a shuffled pass over the
/// training blocks followed by an inference-mode validation pass; the
/// returned model is the snapshot with the lowest validation loss. With
/// `initial` given, training starts from those weights instead of `model`.
pub fn train(
    model: &DenoiserModel,
    blocks: &[TrainingPair],
    cfg: &TrainConfig,
    initial: Option<&DenoiserModel>,
) -> Result<TrainOutcome> {
    if blocks.len() < 2 {
        return Err(Error::InvalidInput(format!("training needs at least 2 blocks, got {}", blocks.len())));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config(format!(
            "invalid training config: val_fraction {}, batch_size {}, epochs {}",
            cfg.val_fraction, cfg.batch_size, cfg.epochs
        )));
    }
    let mut net = match initial {
        Some(init) if !init.same_architecture(model) => {
            return Err(Error::Shape(format!(
                "initial weights are c={} k={} d={}, model is c={} k={} d={}",
                init.channels(),
                init.width(),
                init.kernel(),
                model.channels(),
                model.width(),
                model.kernel()
            )))
        }
        Some(init) => init.clone(),
        None => model.clone(),
    };
    for b in blocks {
        if b.channels() != net.channels() {
            return Err(Error::Shape(format!("block has {} channels, model {}", b.channels(), net.channels())));
        }
    }
    let prepared: Vec<Prepared> = blocks
        .iter()
        .map(|b| Prepared { input: tensor_from_volume(&b.input), target: tensor_from_volume(&b.target), mask: b.mask.clone() })
        .collect();
    let (train_idx, val_idx) = split_indices(blocks.len(), cfg.val_fraction, cfg.seed);

    let mut states: Vec<AdamState<f32>> = net.params().iter().map(|p| AdamState::new(p.len())).collect();
    let mut step = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, DenoiserModel)> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
        let mut total = 0.0;
        let mut counted = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let batch = stack(&items)?;
            let (pred, cache) = net.forward_train(&batch.input)?;
            let Some((loss, grad)) = l1_loss_masked(&pred, &batch.target, &batch.mask)? else {
                log::warn!("epoch {epoch}: block {} has an empty mask, skipped", chunk[0]);
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, block: chunk[0], loss: loss as f64 });
            }
            let grads = net.backward(&cache, &grad)?;
            step += 1;
            for ((p, g), s) in net.params_mut().into_iter().zip(&grads.params).zip(&mut states) {
                adam_step(p, g, s, step, &cfg.adam);
            }
            total += loss as f64;
            counted += 1;
        }
        let train_loss = if counted > 0 { total / counted as f64 } else { f64::NAN };

        let mut vtotal = 0.0;
        let mut vcount = 0usize;
        for &i in &val_idx {
            let p = &prepared[i];
            let pred = net.forward(&p.input)?;
            if let Some(l) = l1_value_masked(&pred, &p.target, &p.mask)? {
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, block: i, loss: l as f64 });
                }
                vtotal += l as f64;
                vcount += 1;
            }
        }
        if vcount == 0 {
            return Err(Error::InvalidInput("every validation block has an empty mask".into()));
        }
        let val_loss = vtotal / vcount as f64;
        let rec = EpochRecord { epoch, train_loss, val_loss, wall_seconds: start.elapsed().as_secs_f64() };
        log::info!("epoch {epoch:>3}: train {train_loss:.6} val {val_loss:.6} ({:.1}s)", rec.wall_seconds);
        history.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, history, best_epoch, train_indices: train_idx, val_indices: val_idx })
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,train_loss,val_loss,wall_seconds\n");
    for r in history {
        text.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.wall_seconds));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
