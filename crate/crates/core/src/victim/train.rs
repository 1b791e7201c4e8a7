use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{VictimConfig, VictimModel};
use crate::corpus::{random_slice, CorpusIndex, Split, Waveform};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Module, Tape, Tensor};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimTrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// epochs without a new best test accuracy before stopping
    pub patience: usize,
    /// random slices drawn from each training utterance per epoch
    pub slices_per_utterance: usize,
    pub adam: AdamConfig,
}

impl Default for VictimTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 60,
            patience: 5,
            slices_per_utterance: 4,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct VictimTraining {
    /// best-accuracy snapshot
    pub model: VictimModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

/// Train on the corpus train split, selecting epochs by test accuracy.
pub fn train_victim(
    corpus: &CorpusIndex,
    config: VictimConfig,
    train: &VictimTrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<VictimTraining> {
    if config.num_speakers != corpus.num_speakers() {
        return Err(Error::config(format!(
            "victim configured for {} speakers, corpus has {}",
            config.num_speakers,
            corpus.num_speakers()
        )));
    }
    let train_set = corpus.load_split(Split::Train)?;
    let test_set = corpus.load_split(Split::Test)?;
    train_victim_on(&train_set, &test_set, config, train, seed, checkpoint)
}

/// Sentence accuracy of `model` on `set`.
pub fn accuracy(model: &VictimModel, set: &[Waveform]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<&[f64]> = set.iter().map(|w| w.samples.as_slice()).collect();
    let preds = model.predict_many(&inputs)?;
    let hits = preds.iter().zip(set).filter(|(p, w)| **p == w.speaker).count();
    Ok(hits as f64 / set.len() as f64)
}

/// In-memory variant of [`train_victim`].
pub fn train_victim_on(
    train_set: &[Waveform],
    test_set: &[Waveform],
    config: VictimConfig,
    train: &VictimTrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<VictimTraining> {
    let k = config.num_speakers;
    for w in train_set.iter().chain(test_set) {
        if w.speaker >= k {
            return Err(Error::LabelOutOfRange {
                label: w.speaker,
                classes: k,
            });
        }
    }
    for s in 0..k {
        if !train_set.iter().any(|w| w.speaker == s) {
            return Err(Error::config(format!("speaker {s} has no training utterances")));
        }
    }
    if train.batch_size == 0 || train.slices_per_utterance == 0 {
        return Err(Error::config("batch_size and slices_per_utterance must be positive"));
    }

    let mut model = VictimModel::new(config, seed)?;
    let mut adam = Adam::new(train.adam, &model.params());
    let mut order_rng = substream(seed, "victim/order");
    let mut slice_rng = substream(seed, "victim/slices");
    let fl = model.frame_len();

    let mut log = Vec::new();
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    let mut stale = 0;
    let save_best = |m: &VictimModel, epoch: usize, acc: f64| -> Result<()> {
        match checkpoint {
            Some(p) => m.save(p, seed, serde_json::json!({"epoch": epoch, "test_accuracy": acc})),
            None => Ok(()),
        }
    };

    for epoch in 1..=train.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len())
            .flat_map(|i| std::iter::repeat_n(i, train.slices_per_utterance))
            .collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(train.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * fl);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend(random_slice(&train_set[i].samples, fl, &mut slice_rng));
                labels.push(train_set[i].speaker);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![chunk.len(), 1, fl], data)?);
            let logits = model.forward(&mut tape, x, false)?;
            let lp = tape.log_softmax(logits)?;
            let picked = tape.pick(lp, &labels)?;
            let mean = tape.mean(picked)?;
            let loss = tape.scale(mean, -1.0)?;
            let value = tape.value(loss)?.item()?;
            if !value.is_finite() {
                save_best(&best.0, best.1, best.2)?;
                return Err(Error::Divergence {
                    context: format!("victim epoch {epoch} batch {batches}"),
                    detail: format!("loss is {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = model.params().iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;
            drop(tape);
            if let Err(e) = adam.step(&mut model.params_mut(), &g) {
                save_best(&best.0, best.1, best.2)?;
                return Err(Error::Divergence {
                    context: format!("victim epoch {epoch} batch {batches}"),
                    detail: e.to_string(),
                });
            }
            loss_sum += value;
            batches += 1;
        }
        let acc = accuracy(&model, test_set)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_accuracy: acc,
        });
        if acc > best.2 {
            best = (model.clone(), epoch, acc);
            save_best(&model, epoch, acc)?;
            stale = 0;
        } else {
            stale += 1;
            if stale >= train.patience {
                break;
            }
        }
    }
    Ok(VictimTraining {
        model: best.0,
        log,
        best_epoch: best.1,
        best_accuracy: best.2,
    })
}
