//! Slide-grouped k-fold cross-validation of the concept head.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{confusion, kfold_split, metrics, roc_auc, ConfusionMatrix, EvalError, FoldPlan, Metric, MetricsReport};
use crate::head::{Bag, HeadConfig, HeadError};
use crate::optim::TrainConfig;
use crate::store::{ConceptSet, EmbeddingBag};
use crate::train::{predict, train, EpochRecord, TrainError};
use crate::{seed_for, Label};

#[derive(Debug, Error)]
pub enum CvError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("fold {fold} has no {part} bags")]
    EmptyPart { fold: usize, part: &'static str },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileScore {
    pub fold: usize,
    pub id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_slides: Vec<String>,
    pub val_slides: Vec<String>,
    pub test_slides: Vec<String>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub report: MetricsReport,
}

/// Mean and sample standard deviation of one metric over the folds where
/// it is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub plan: FoldPlan,
    pub folds: Vec<FoldReport>,
    /// Metrics of the summed confusion matrix, AUC over all test scores.
    pub pooled: MetricsReport,
    /// Fold-averaged metrics keyed by metric name.
    pub fold_mean: BTreeMap<String, Option<MeanSd>>,
    pub scores: Vec<TileScore>,
}

fn mean_sd(values: &[Metric]) -> Option<MeanSd> {
    let vals: Vec<f64> = values.iter().flatten().copied().collect();
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanSd {
        mean,
        sd,
        n: vals.len(),
    })
}

/// Named metric columns of a report, in table order.
pub fn metric_fields(r: &MetricsReport) -> [(&'static str, Metric); 7] {
    [
        ("accuracy", r.accuracy),
        ("precision", r.precision),
        ("recall", r.recall),
        ("specificity", r.specificity),
        ("f1_micro", r.f1_micro),
        ("f1_macro", r.f1_macro),
        ("auc", r.auc),
    ]
}

/// Metrics plus AUC, with AUC left undefined for single-class input.
pub fn score_report(labels: &[Label], predicted: &[Label], scores: &[f64]) -> Result<MetricsReport, EvalError> {
    let cm = confusion(predicted, labels)?;
    let mut report = metrics(&cm);
    report.auc = match roc_auc(scores, labels) {
        Ok(a) => Some(a),
        Err(EvalError::OneClassOnly) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

fn select<'a>(bags: &'a [(String, Bag)], slides: &[String]) -> Vec<&'a (String, Bag)> {
    let set: BTreeSet<&str> = slides.iter().map(String::as_str).collect();
    bags.iter().filter(|(id, _)| set.contains(slide_of(id))).collect()
}

fn slide_of(id: &str) -> &str {
    id.split_once('/').map_or(id, |(s, _)| s)
}

/// Runs the full protocol: split slides, train per fold with the fold's
/// validation slides for model selection, score the test slides.
pub fn cross_validate(
    bags: &[EmbeddingBag],
    concepts: &ConceptSet,
    head: &HeadConfig,
    cfg: &TrainConfig,
    k: usize,
    fold_seed: u64,
) -> Result<CvReport, CvError> {
    let slides: Vec<String> = bags
        .iter()
        .map(|b| b.slide_id().to_owned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let plan = kfold_split(&slides, k, fold_seed)?;
    let converted: Vec<(String, Bag)> = bags
        .iter()
        .map(|b| Ok((b.id.clone(), Bag::from_embedding(b)?)))
        .collect::<Result<_, HeadError>>()?;

    let mut folds = Vec::with_capacity(k);
    let mut scores = Vec::new();
    let mut pooled_cm = ConfusionMatrix::default();
    for (i, fold) in plan.folds.iter().enumerate() {
        let part = |slides: &[String], name: &'static str| -> Result<Vec<&(String, Bag)>, CvError> {
            let v = select(&converted, slides);
            if v.is_empty() {
                Err(CvError::EmptyPart { fold: i, part: name })
            } else {
                Ok(v)
            }
        };
        let owned = |v: Vec<&(String, Bag)>| -> Vec<Bag> { v.into_iter().map(|(_, b)| b.clone()).collect() };
        let train_set = owned(part(&fold.train, "train")?);
        let val_set = owned(part(&fold.val, "validation")?);
        let test_pairs = part(&fold.test, "test")?;
        let test_ids: Vec<&String> = test_pairs.iter().map(|(id, _)| id).collect();
        let test_set = owned(test_pairs);

        let fold_cfg = TrainConfig {
            seed: seed_for(cfg.seed, &format!("fold/{i}")),
            ..cfg.clone()
        };
        let outcome = train(&train_set, &val_set, concepts, head, &fold_cfg)?;
        let preds = predict(&outcome.params, &test_set, concepts)?;
        let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
        let predicted: Vec<Label> = preds.iter().map(|p| p.predicted).collect();
        let s: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let report = score_report(&labels, &predicted, &s)?;
        pooled_cm = pooled_cm + report.matrix;
        scores.extend(test_ids.iter().zip(&preds).map(|(id, p)| TileScore {
            fold: i,
            id: (*id).clone(),
            label: p.label,
            score: p.score,
        }));
        folds.push(FoldReport {
            fold: i,
            train_slides: fold.train.clone(),
            val_slides: fold.val.clone(),
            test_slides: fold.test.clone(),
            best_epoch: outcome.best_epoch,
            history: outcome.history,
            report,
        });
    }

    let mut pooled = metrics(&pooled_cm);
    let labels: Vec<Label> = scores.iter().map(|s| s.label).collect();
    let s: Vec<f64> = scores.iter().map(|s| s.score).collect();
    pooled.auc = roc_auc(&s, &labels).ok();
    let mut fold_mean = BTreeMap::new();
    for (j, (name, _)) in metric_fields(&pooled).iter().enumerate() {
        let vals: Vec<Metric> = folds.iter().map(|f| metric_fields(&f.report)[j].1).collect();
        fold_mean.insert((*name).to_owned(), mean_sd(&vals));
    }
    Ok(CvReport {
        plan,
        folds,
        pooled,
        fold_mean,
        scores,
    })
}

/// Per-tile score CSV (`fold,id,label,score`) for external ROC plotting.
pub fn scores_csv(scores: &[TileScore]) -> String {
    let mut out = String::from("fold,id,label,score\n");
    for s in scores {
        out.push_str(&format!("{},{},{},{:.9}\n", s.fold, s.id, s.label, s.score));
    }
    out
}
