//! Optimisation, the training loop and evaluation.

mod adam;
pub mod metrics;

pub use adam::{clip_global_norm, mask_untrainable, Adam, AdamConfig};
pub use metrics::{accuracy, f1_binary, map_mrr, recall_at_k, MapMrr, RecallAtK, ScoredGroup};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchConfig, TaskKind, TokenizedPair};
use crate::error::{Error, Result};
use crate::model::{predict_classes, ranking_scores, CsranModel};
use crate::scalar::Scalar;

/// Metric used to select the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevMetric {
    Accuracy,
    F1,
    Map,
    Mrr,
}

impl DevMetric {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => DevMetric::Accuracy,
            TaskKind::Ranking => DevMetric::Map,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            DevMetric::Accuracy => "accuracy",
            DevMetric::F1 => "f1",
            DevMetric::Map => "map",
            DevMetric::Mrr => "mrr",
        }
    }
}

impl FromStr for DevMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(DevMetric::Accuracy),
            "f1" => Ok(DevMetric::F1),
            "map" => Ok(DevMetric::Map),
            "mrr" => Ok(DevMetric::Mrr),
            other => Err(Error::config("dev_metric", format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for DevMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: BatchConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Epochs without dev improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
    /// Seeds batch shuffling and dropout.
    pub shuffle_seed: u64,
    /// Defaults to accuracy for classification and MAP for ranking.
    pub dev_metric: Option<DevMetric>,
    /// Record wall-clock seconds per epoch; when off the history holds 0.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: BatchConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            patience: Some(5),
            shuffle_seed: 1,
            dev_metric: None,
            timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.batch.max_len == 0 || self.batch.max_word_len == 0 {
            return Err(Error::config("max_len", "length caps must be at least 1"));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::config("lr", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("beta", "betas must lie in [0, 1)"));
        }
        if !(a.eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds on return; `None` after zero epochs.
    pub best_epoch: Option<usize>,
    pub best_dev: Option<f64>,
    pub stopped_early: bool,
    pub truncated: usize,
}

/// Trains `model` in place with Adam and leaves it holding the parameters
/// of the best dev epoch.
///
/// Every epoch reshuffles the training pairs, runs one Adam step per batch
/// with dropout active, then evaluates on `dev`. `on_epoch` sees each
/// record as it is produced.
pub fn train<T: Scalar>(
    model: &mut CsranModel<T>,
    train: &[TokenizedPair],
    dev: &[TokenizedPair],
    task: TaskKind,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("empty dev set".into()));
    }
    let metric = cfg.dev_metric.unwrap_or(DevMetric::default_for(task));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut adam = Adam::new(cfg.adam);
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: None,
        best_dev: None,
        stopped_early: false,
        truncated: 0,
    };
    let mut best_params = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = make_batches(train, &cfg.batch, Some(rng.gen()))?;
        outcome.truncated = batches.truncated;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, batch) in batches.batches.iter().enumerate() {
            let (loss, mut grads) = model.loss_and_grads(batch, Some(&mut rng))?;
            mask_untrainable(&model.params, &mut grads);
            let norm = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.global_norm().as_f64(),
            };
            let loss = loss.as_f64();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    loss,
                    grad_norm: norm,
                });
            }
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let report = evaluate(model, dev, task, &cfg.batch)?;
        let dev_metric = report
            .get(metric.key())
            .ok_or_else(|| Error::config("dev_metric", format!("{metric} is not reported for {task} tasks")))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            dev_metric,
            seconds: if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&record);
        outcome.history.push(record);

        if outcome.best_dev.map_or(true, |b| dev_metric > b) {
            outcome.best_dev = Some(dev_metric);
            outcome.best_epoch = Some(epoch);
            best_params = Some(model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    Ok(outcome)
}

/// Model outputs over a whole pair set, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub groups: Vec<Option<usize>>,
}

pub fn predict<T: Scalar>(model: &CsranModel<T>, pairs: &[TokenizedPair], batch: &BatchConfig) -> Result<Predictions> {
    let batches = make_batches(pairs, batch, None)?;
    let mut out = Predictions {
        classes: Vec::with_capacity(pairs.len()),
        scores: Vec::with_capacity(pairs.len()),
        labels: Vec::with_capacity(pairs.len()),
        groups: Vec::with_capacity(pairs.len()),
    };
    for b in &batches.batches {
        let logits = model.logits(b)?;
        out.classes.extend(predict_classes(&logits));
        if logits.cols() >= 2 {
            out.scores.extend(ranking_scores(&logits));
        }
        out.labels.extend(&b.labels);
        out.groups.extend(&b.groups);
    }
    Ok(out)
}

/// Named metric values for one evaluation, printed as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: TaskKind,
    pub examples: usize,
    pub values: Vec<(String, f64)>,
    /// Ranking groups without a relevant candidate.
    pub excluded_groups: usize,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task={}", self.task)?;
        writeln!(f, "examples={}", self.examples)?;
        if self.task == TaskKind::Ranking {
            writeln!(f, "excluded_groups={}", self.excluded_groups)?;
        }
        for (k, v) in &self.values {
            writeln!(f, "{k}={v:.6}")?;
        }
        Ok(())
    }
}

/// Classification reports accuracy (plus F1 of class 1 for two classes);
/// ranking reports MAP, MRR, R@{1,2,5} and pointwise accuracy.
pub fn evaluate<T: Scalar>(
    model: &CsranModel<T>,
    pairs: &[TokenizedPair],
    task: TaskKind,
    batch: &BatchConfig,
) -> Result<MetricReport> {
    let p = predict(model, pairs, batch)?;
    metric_report(&p, task, model.config.num_classes)
}

pub fn metric_report(p: &Predictions, task: TaskKind, num_classes: usize) -> Result<MetricReport> {
    let mut values = vec![("accuracy".to_string(), accuracy(&p.classes, &p.labels)?)];
    let mut excluded_groups = 0;
    match task {
        TaskKind::Classification => {
            if num_classes == 2 {
                values.push(("f1".into(), f1_binary(&p.classes, &p.labels, 1)));
            }
        }
        TaskKind::Ranking => {
            let groups = scored_groups(p)?;
            let mm = map_mrr(&groups)?;
            let recall = recall_at_k(&groups, &[1, 2, 5])?;
            excluded_groups = mm.excluded;
            values.push(("map".into(), mm.map));
            values.push(("mrr".into(), mm.mrr));
            for (k, r) in recall.values {
                values.push((format!("recall@{k}"), r));
            }
        }
    }
    Ok(MetricReport {
        task,
        examples: p.labels.len(),
        values,
        excluded_groups,
    })
}

/// Candidates grouped by query id, each group in input order.
pub fn scored_groups(p: &Predictions) -> Result<Vec<ScoredGroup>> {
    let mut by_id: BTreeMap<usize, ScoredGroup> = BTreeMap::new();
    for (i, g) in p.groups.iter().enumerate() {
        let id = g.ok_or_else(|| Error::Data(format!("ranking example {i} has no group")))?;
        let entry = by_id.entry(id).or_insert_with(|| ScoredGroup {
            scores: Vec::new(),
            relevant: Vec::new(),
        });
        entry.scores.push(p.scores[i]);
        entry.relevant.push(p.labels[i] == 1);
    }
    Ok(by_id.into_values().collect())
}

/// Writes `epoch  train_loss  dev_metric  seconds`, one tab-separated line per epoch.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let text: String = history
        .iter()
        .map(|r| format!("{}\t{:.6}\t{:.6}\t{:.3}\n", r.epoch, r.train_loss, r.dev_metric, r.seconds))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
