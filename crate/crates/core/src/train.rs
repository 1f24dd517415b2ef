//! Minibatch training of the concept head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{Bag, HeadConfig, HeadError, HeadGrads, HeadParams};
use crate::optim::{adamw_step, lr_at, AdamWState, TrainConfig};
use crate::store::ConceptSet;
use crate::{par, Label};

/// Bags per gradient work unit. Fixed so the reduction order never depends
/// on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training and validation sets must each hold at least one bag")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (lr {lr:e})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        lr: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: HeadParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Per-bag prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub predicted: Label,
    /// Positive-class probability.
    pub score: f64,
    pub ce: f64,
}

pub fn predict(params: &HeadParams, bags: &[Bag], concepts: &ConceptSet) -> Result<Vec<Prediction>, HeadError> {
    par::map(bags, |bag| {
        let tr = params.forward(bag, concepts)?;
        Ok(Prediction {
            label: bag.label,
            predicted: tr.predicted(),
            score: tr.score(),
            ce: -tr.probs[bag.label.index()].ln(),
        })
    })
    .into_iter()
    .collect()
}

/// Mean loss (cross-entropy plus orthogonality penalty) and accuracy.
pub fn evaluate(params: &HeadParams, bags: &[Bag], concepts: &ConceptSet) -> Result<(f64, f64), HeadError> {
    let preds = predict(params, bags, concepts)?;
    let n = preds.len() as f64;
    let ce: f64 = preds.iter().map(|p| p.ce).sum::<f64>() / n;
    let acc = preds.iter().filter(|p| p.label == p.predicted).count() as f64 / n;
    let orth = crate::head::orth_loss(&params.data_concepts, params.config.dim)?;
    Ok((ce + params.config.orth_weight * orth, acc))
}

fn drop_instances(bag: &Bag, p: f64, rng: &mut ChaCha8Rng) -> Bag {
    let keep: Vec<usize> = (0..bag.len()).filter(|_| rng.random::<f64>() >= p).collect();
    if keep.is_empty() {
        bag.subset(&[rng.random_range(0..bag.len())])
    } else {
        bag.subset(&keep)
    }
}

/// Mean-over-batch loss and gradient, reduced in fixed chunk order.
pub fn batch_loss_and_grad(
    params: &HeadParams,
    batch: &[&Bag],
    concepts: &ConceptSet,
) -> Result<(f64, HeadGrads), HeadError> {
    let w = 1.0 / batch.len() as f64;
    let chunks: Vec<&[&Bag]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = par::map(&chunks, |chunk| -> Result<(f64, HeadGrads), HeadError> {
        let mut g = params.zeros_like();
        let mut ce = 0.0;
        for bag in chunk.iter() {
            ce += params.accumulate_ce_grad(bag, concepts, w, &mut g)?.0;
        }
        Ok((ce, g))
    });
    let mut total = params.zeros_like();
    let mut ce = 0.0;
    for part in partials {
        let (c, g) = part?;
        ce += c;
        total.add(&g);
    }
    let orth = params.accumulate_orth_grad(1.0, &mut total)?;
    Ok((ce * w + params.config.orth_weight * orth, total))
}

/// Trains from a fresh initialization.
pub fn train(
    train_bags: &[Bag],
    val_bags: &[Bag],
    concepts: &ConceptSet,
    head: &HeadConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let params = HeadParams::init(head, concepts.num_instance_concepts())?;
    train_from(params, train_bags, val_bags, concepts, cfg)
}

/// Trains starting from `params`. Minibatches are reshuffled every epoch
/// from a generator seeded by `cfg.seed`.
pub fn train_from(
    mut params: HeadParams,
    train_bags: &[Bag],
    val_bags: &[Bag],
    concepts: &ConceptSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let steps_per_epoch = train_bags.len().div_ceil(cfg.batch_size);
    let mut state = AdamWState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut history = Vec::with_capacity(cfg.total_epochs);
    let mut best: Option<(f64, usize, HeadParams)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.total_epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(step, steps_per_epoch, cfg);
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let dropped: Vec<Bag>;
            let batch: Vec<&Bag> = if cfg.instance_dropout > 0.0 {
                dropped = batch_idx
                    .iter()
                    .map(|&i| drop_instances(&train_bags[i], cfg.instance_dropout, &mut rng))
                    .collect();
                dropped.iter().collect()
            } else {
                batch_idx.iter().map(|&i| &train_bags[i]).collect()
            };
            let lr = lr_at(step, steps_per_epoch, cfg);
            let (loss, grads) = batch_loss_and_grad(&params, &batch, concepts)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    loss,
                    lr,
                });
            }
            loss_sum += loss * batch.len() as f64;
            adamw_step(&mut params, &grads, &mut state, lr, cfg)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            step += 1;
        }
        let (val_loss, val_acc) = evaluate(&params, val_bags, concepts)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                step,
                loss: val_loss,
                lr: epoch_lr,
            });
        }
        history.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / train_bags.len() as f64,
            val_loss,
            val_acc,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        history,
    })
}

/// Renders the history as CSV (`epoch,lr,train_loss,val_loss,val_acc`).
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss,val_acc\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{:.9},{:.9},{:.6}\n",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc
        ));
    }
    out
}
