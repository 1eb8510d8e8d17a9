use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::SaaFormer;
use crate::dataflow::{HsiCube, LabelMap, SplitSpec};
use crate::error::{invalid, Error, Result};
use crate::layers::{collect_grads, AdamState, Graph, Mode};
use crate::numerics::Tape;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch: 64,
            lr: 5e-4,
            seed,
        }
    }

    /// Learning rate during 0-based `epoch`: the initial rate times 0.9 for
    /// every completed tenth of the run.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let period = self.epochs.div_ceil(10).max(1);
        self.lr * 0.9f64.powi((epoch / period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean cross-entropy over the epoch.
    pub loss: f64,
}

/// Minibatch Adam over the split's training centers. Batch order comes from
/// the `Shuffle` stream and dropout masks from the `Dropout` stream of
/// `cfg.seed`.
pub fn train(
    model: &mut SaaFormer,
    cube: &HsiCube,
    labels: &LabelMap,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    split.validate_against(labels)?;
    let k = model.config.classes;
    if split.patch != model.config.patch {
        return Err(Error::Config(format!(
            "split patch {} differs from model patch {}",
            split.patch, model.config.patch
        )));
    }
    if (labels.height(), labels.width()) != (cube.height(), cube.width()) {
        return Err(invalid("label map and cube extents differ"));
    }
    let targets: Vec<usize> = split.train.iter().map(|&(r, c)| labels.get(r, c) as usize).collect();
    if let Some(&bad) = targets.iter().find(|&&t| t > k) {
        return Err(Error::Config(format!("label {bad} exceeds the model's {k} classes")));
    }
    let mut present = vec![false; k + 1];
    targets.iter().for_each(|&t| present[t] = true);
    if let Some(missing) = (1..=k).find(|&c| !present[c]) {
        return Err(Error::ClassMissingFromTrain { class: missing as u16 });
    }

    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut dropout = Some(stream(cfg.seed, Stream::Dropout));
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let centers: Vec<_> = batch.iter().map(|&i| split.train[i]).collect();
            let y: Vec<usize> = batch.iter().map(|&i| targets[i] - 1).collect();
            let x = cube.patches(&centers, model.config.patch)?;

            let mut tape = Tape::new();
            let mode = Mode::Train {
                dropout: dropout.take().expect("dropout stream returned after each batch"),
            };
            let mut g = Graph::new(&mut tape, &model.store, mode);
            let input = g.input(x);
            let logits = model.forward(&mut g, input)?;
            let loss = g.tape.cross_entropy(logits, &y)?;
            if let Mode::Train { dropout: rng } = std::mem::replace(g.mode_mut(), Mode::Eval) {
                dropout = Some(rng);
            }
            let (bindings, bn_updates) = g.finish();
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(invalid(format!("non-finite loss in epoch {}", epoch + 1)));
            }
            total += value * batch.len() as f64;
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &bindings);
            adam.step(&mut model.store, &grads)?;
            bn_updates.iter().for_each(|u| u.apply(&mut model.store));
        }
        trace.push(EpochLoss {
            epoch: epoch + 1,
            lr: adam.lr,
            loss: total / split.train.len() as f64,
        });
    }
    Ok(trace)
}
