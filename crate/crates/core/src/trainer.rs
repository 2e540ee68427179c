//! Mini-batch Adam training and evaluation for any [`CtrModel`].

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cagam::pctr;
use crate::error::{Error, Result};
use crate::metrics::{auc, gauc, mean_std};
use crate::model::{bce_from_logit, CtrModel};
use crate::numeric::{AdamConfig, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Requests per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 16,
            epochs: 5,
            seed: 1,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("lr must be finite and non-negative, clip_norm positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub auc: f64,
    pub gauc: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: EvalMetrics,
}

/// Final metrics, the loss curve and per-epoch wall time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub gauc: f64,
    pub loss_curve: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub report: MetricsReport,
}

/// Per-sample pCTRs with their labels and users, in request order.
pub fn predict_all<M: CtrModel>(model: &M, params: &ParamSet, data: &[M::Prepared]) -> Result<(Vec<f64>, Vec<u8>, Vec<u32>)> {
    let (mut p, mut y, mut u) = (Vec::new(), Vec::new(), Vec::new());
    for r in data {
        let logits = model.logits(params, r)?;
        let labels = model.labels(r);
        let user = model.user_id(r);
        p.extend(logits.into_iter().map(pctr));
        y.extend_from_slice(labels);
        u.extend(std::iter::repeat_n(user, labels.len()));
    }
    Ok((p, y, u))
}

pub fn evaluate<M: CtrModel>(model: &M, params: &ParamSet, data: &[M::Prepared]) -> Result<EvalMetrics> {
    let (p, y, u) = predict_all(model, params, data)?;
    if p.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let loss = crate::metrics::bce_loss(&p, &y)?;
    Ok(EvalMetrics {
        loss,
        auc: auc(&p, &y)?,
        gauc: gauc(&u, &p, &y)?,
        samples: p.len(),
    })
}

/// Trains from `params` on `train`, evaluating on `eval` after every epoch.
///
/// Request order is reshuffled each epoch from `cfg.seed`; gradients are
/// summed in request order and averaged over the batch's samples. A non-finite
/// loss or gradient aborts the run; if `last_good` is given, the parameters
/// from the end of the last complete epoch are written there first.
pub fn train<M: CtrModel>(
    model: &M,
    mut params: ParamSet,
    train: &[M::Prepared],
    eval: &[M::Prepared],
    cfg: &TrainConfig,
    last_good: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut good = params.clone();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut seconds = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_sum) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zeroed_grads();
            let (mut loss, mut n) = (0.0, 0usize);
            for &i in batch {
                loss += model.loss_and_grad(&params, &train[i], &mut grads)?;
                n += model.labels(&train[i]).len();
            }
            grads.scale(1.0 / n as f64);
            params.zero_grads();
            params.add_grads(&grads);
            let norm = params.clip_grad_norm(cfg.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                if let Some(path) = last_good {
                    good.save(path)?;
                }
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            params.adam_step(&adam);
            loss_sum += loss;
            n_sum += n;
        }
        let metrics = evaluate(model, &params, eval)?;
        seconds.push(start.elapsed().as_secs_f64());
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_sum as f64,
            eval: metrics,
        });
        good = params.clone();
    }
    let last = &epochs.last().expect("at least one epoch").eval;
    let report = MetricsReport {
        auc: last.auc,
        gauc: last.gauc,
        loss_curve: epochs.iter().map(|e| e.train_loss).collect(),
        epoch_seconds: seconds,
        epochs,
    };
    Ok(TrainOutcome { params, report })
}

/// Mean training loss of `params` without updating them.
pub fn mean_loss<M: CtrModel>(model: &M, params: &ParamSet, data: &[M::Prepared]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for r in data {
        for (l, &y) in model.logits(params, r)?.into_iter().zip(model.labels(r)) {
            total += bce_from_logit(l, y as f64);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Per-epoch CSV without timings, so equal runs give equal bytes.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from("epoch,train_loss,eval_loss,auc,gauc\n");
    for e in &report.epochs {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, e.eval.loss, e.eval.auc, e.eval.gauc);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub auc: Vec<f64>,
    pub gauc: Vec<f64>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub gauc_mean: f64,
    pub gauc_std: f64,
}

impl SeedSummary {
    pub fn new(label: impl Into<String>, seeds: Vec<u64>, auc: Vec<f64>, gauc: Vec<f64>) -> Self {
        let (auc_mean, auc_std) = mean_std(&auc);
        let (gauc_mean, gauc_std) = mean_std(&gauc);
        Self {
            label: label.into(),
            seeds,
            auc,
            gauc,
            auc_mean,
            auc_std,
            gauc_mean,
            gauc_std,
        }
    }
}

/// `label,auc_mean,auc_std,gauc_mean,gauc_std,seeds` rows.
pub fn summary_csv(rows: &[SeedSummary]) -> String {
    let mut s = String::from("label,auc_mean,auc_std,gauc_mean,gauc_std,seeds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.label,
            r.auc_mean,
            r.auc_std,
            r.gauc_mean,
            r.gauc_std,
            r.seeds.len()
        );
    }
    s
}
