//! Adam, the six-metric evaluation suite, per-fold training with
//! best-validation-accuracy checkpointing, and the k-fold driver.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{FoldPlan, Sample};
use crate::error::{RaaError, Result};
use crate::losses::{softmax_rows, total_loss, LossConfig};
use crate::model::{model_backward, model_forward, predict, ModelConfig, ModelGrads, ModelParams};
use crate::par;
use crate::raa::Mode;
use crate::tensor::{save_set, Tensor};

/// Rows per eval-mode forward call; eval is per-sample independent.
const EVAL_CHUNK: usize = 32;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 42,
            folds: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(RaaError::Config("train.lr must be finite and >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(RaaError::Config("train.batch_size must be >= 2".into()));
        }
        if self.folds < 2 {
            return Err(RaaError::Config("train.folds must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(RaaError::Config("need 0 <= beta < 1 and adam_eps > 0".into()));
        }
        self.loss.validate()
    }
}

/// First and second moments per tensor plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = tensors
            .into_iter()
            .map(|t| (vec![0.0; t.len()], vec![0.0; t.len()]))
            .unzip();
        AdamState { m, v, t: 0 }
    }

    /// One bias-corrected update of every tensor.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: Vec<&Tensor>, config: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(RaaError::dim("adam_step", format!("{} params, {} grads, {} states", params.len(), grads.len(), self.m.len())));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.m) {
            if p.shape() != g.shape() || p.len() != m.len() {
                return Err(RaaError::shapes("adam_step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pk, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                let m_hat = *mk / c1;
                let v_hat = *vk / c2;
                *pk -= config.lr * m_hat / (v_hat.sqrt() + config.adam_eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelGrads, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    let g: Vec<&Tensor> = grads.learnable().into_iter().map(|(_, t)| t).collect();
    let p: Vec<&mut Tensor> = params.learnable_mut().into_iter().map(|(_, t)| t).collect();
    state.step(p, g, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the ground truth has a single class.
    pub kappa: Option<f64>,
    pub auc: Option<f64>,
}

/// Midrank AUC: `(R₊ − n₊(n₊+1)/2) / (n₊·n₋)` with tied scores sharing
/// their average rank.
fn auc_midrank(labels: &[usize], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Metrics for the malignant class. Precision is 0 when nothing is
/// predicted positive; recall is 0 when no positives exist. Kappa is the
/// unweighted Cohen's kappa, which equals the quadratic-weighted one for two
/// classes.
pub fn compute_metrics(labels: &[usize], predicted: &[usize], scores: &[f64]) -> Result<EvalReport> {
    if labels.len() != predicted.len() || labels.len() != scores.len() {
        return Err(RaaError::dim("compute_metrics", "labels, predictions and scores differ in length"));
    }
    if labels.is_empty() {
        return Err(RaaError::Eval("no samples to score".into()));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(RaaError::Eval("scores must lie in [0, 1]".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&y, &p) in labels.iter().zip(predicted) {
        match (y, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fn_ += 1,
            _ => return Err(RaaError::Eval(format!("labels must be 0 or 1, got ({y}, {p})"))),
        }
    }
    let n = labels.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let accuracy = (tp + tn) as f64 / n;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let true_pos = (tp + fn_) as f64 / n;
    let pred_pos = (tp + fp) as f64 / n;
    let chance = true_pos * pred_pos + (1.0 - true_pos) * (1.0 - pred_pos);
    let kappa = if tp + fn_ == 0 || tn + fp == 0 {
        None
    } else {
        Some((accuracy - chance) / (1.0 - chance))
    };
    Ok(EvalReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy,
        precision,
        recall,
        f1,
        kappa,
        auc: auc_midrank(labels, scores),
    })
}

/// Zero-mean, unit-variance per image (all pixels and channels pooled),
/// stacked into `[n, H, W, C]`.
pub fn prepare_batch(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| RaaError::Eval("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(RaaError::shapes("prepare_batch", s.image.shape(), &shape));
        }
        let x = s.image.data();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / var.sqrt().max(STD_FLOOR);
        data.extend(x.iter().map(|v| (v - mean) * inv));
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Mean L2 distance over unordered same-class pairs of feature rows.
pub fn mean_intra_class_distance(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let [n, f] = *features.shape() else {
        return Err(RaaError::dim("intra_class_distance", format!("{:?}", features.shape())));
    };
    if labels.len() != n {
        return Err(RaaError::dim("intra_class_distance", "label count"));
    }
    let x = features.data();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                continue;
            }
            let d2: f64 = x[i * f..(i + 1) * f].iter().zip(&x[j * f..(j + 1) * f]).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += d2.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(RaaError::Eval("no same-class pairs".into()));
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss_ce: f64,
    pub loss_cl: f64,
    pub loss_total: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    /// 0 when no epochs ran.
    pub best_epoch: usize,
    pub best: EpochRecord,
    pub params: ModelParams,
    pub trace: Vec<EpochRecord>,
    /// `(epoch, samples seen, attention FLOPs)` of each training epoch.
    pub throughput: Vec<(usize, usize, u64)>,
    /// Validation-set mean intra-class distance of `vec(F^e)` under the best parameters.
    pub intra_class_distance: f64,
}

impl FoldResult {
    pub fn losses(&self, split: Split) -> Vec<f64> {
        self.trace.iter().filter(|r| r.split == split).map(|r| r.loss_total).collect()
    }
}

/// Eval-mode losses, metrics and features over `samples`.
pub fn evaluate(
    params: &ModelParams,
    model: &ModelConfig,
    loss: &LossConfig,
    samples: &[&Sample],
) -> Result<(EpochRecord, Tensor)> {
    let chunks: Vec<&[&Sample]> = samples.chunks(EVAL_CHUNK).collect();
    let mut logits = Vec::new();
    let mut features = Vec::new();
    for chunk in chunks {
        let x = prepare_batch(chunk)?;
        let (out, _) = model_forward(&x, params, model, Mode::Eval)?;
        logits.extend_from_slice(out.logits.data());
        features.extend_from_slice(out.features.data());
    }
    let n = samples.len();
    let logits = Tensor::new(vec![n, model.n_classes], logits)?;
    let features = Tensor::new(vec![n, model.feature_len()], features)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let tl = total_loss(&logits, &features, &labels, loss)?;
    let report = score(&logits, &labels)?;
    Ok((
        EpochRecord {
            epoch: 0,
            split: Split::Val,
            loss_ce: tl.ce,
            loss_cl: tl.cl,
            loss_total: tl.total,
            report,
        },
        features,
    ))
}

fn score(logits: &Tensor, labels: &[usize]) -> Result<EvalReport> {
    let c = logits.shape()[1];
    let probs = softmax_rows(logits);
    let predicted = logits.data().chunks_exact(c).map(predict).collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = probs.data().chunks_exact(c).map(|p| p[1].clamp(0.0, 1.0)).collect();
    compute_metrics(labels, &predicted, &scores)
}

/// Train on `train`, evaluating `val` in eval mode after every epoch and
/// keeping the parameters with the highest validation accuracy (earliest
/// epoch on ties). Initialization draws from `seed + 1`, shuffling from
/// `seed + 2`.
pub fn train_fold(
    fold: usize,
    train: &[&Sample],
    val: &[&Sample],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<FoldResult> {
    config.validate()?;
    model.validate()?;
    if config.batch_size > train.len() {
        return Err(RaaError::Config(format!(
            "batch size {} exceeds the {} training samples",
            config.batch_size,
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(RaaError::Config("empty validation split".into()));
    }
    let mut params = ModelParams::init(model, &mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)))?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut adam = AdamState::new(params.learnable().into_iter().map(|(_, t)| t));
    let val_labels: Vec<usize> = val.iter().map(|s| s.label).collect();

    if config.epochs == 0 {
        let d = model.raa.d_proj;
        params
            .raa
            .set_running_stats(Tensor::zeros(&[d]), Tensor::full(&[d], 1.0))?;
        let (best, feats) = evaluate(&params, model, &config.loss, val)?;
        return Ok(FoldResult {
            fold,
            best_epoch: 0,
            trace: vec![best.clone()],
            best,
            intra_class_distance: mean_intra_class_distance(&feats, &val_labels)?,
            params,
            throughput: Vec::new(),
        });
    }

    let mut trace = Vec::new();
    let mut throughput = Vec::new();
    let mut best: Option<(EpochRecord, ModelParams, f64)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let (mut ce, mut cl, mut total, mut seen, mut flops) = (0.0, 0.0, 0.0, 0usize, 0u64);
        let mut labels = Vec::new();
        let mut logits = Vec::new();
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let samples: Vec<&Sample> = batch.iter().map(|&i| train[i]).collect();
            let y: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let x = prepare_batch(&samples)?;
            let (out, cache) = model_forward(&x, &params, model, Mode::Train)?;
            let tl = total_loss(&out.logits, &out.features, &y, &config.loss)?;
            let (grads, _) = model_backward(&tl.grad_logits, Some(&tl.grad_features), &cache, &params, model)?;
            adam_step(&mut params, &grads, &mut adam, config)?;
            params.raa.update_running_stats(&cache.raa)?;
            let b = batch.len() as f64;
            ce += tl.ce * b;
            cl += tl.cl * b;
            total += tl.total * b;
            seen += batch.len();
            flops += cache.raa.flops();
            labels.extend(y);
            logits.extend_from_slice(out.logits.data());
        }
        let logits = Tensor::new(vec![seen, model.n_classes], logits)?;
        trace.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss_ce: ce / seen as f64,
            loss_cl: cl / seen as f64,
            loss_total: total / seen as f64,
            report: score(&logits, &labels)?,
        });
        throughput.push((epoch, seen, flops));

        let (mut rec, feats) = evaluate(&params, model, &config.loss, val)?;
        rec.epoch = epoch;
        trace.push(rec.clone());
        if best.as_ref().is_none_or(|(b, _, _)| rec.report.accuracy > b.report.accuracy) {
            let dist = mean_intra_class_distance(&feats, &val_labels)?;
            best = Some((rec, params.clone(), dist));
        }
    }
    let (best, params, intra_class_distance) = best.expect("at least one epoch");
    Ok(FoldResult {
        fold,
        best_epoch: best.epoch,
        best,
        params,
        trace,
        throughput,
        intra_class_distance,
    })
}

/// Mean and sample standard deviation over folds; `None` if any fold is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: &'static str,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub const METRIC_NAMES: [&str; 9] = [
    "loss_ce", "loss_cl", "loss_total", "accuracy", "precision", "recall", "f1", "kappa", "auc",
];

fn metric_values(r: &EpochRecord) -> [Option<f64>; 9] {
    let e = &r.report;
    [
        Some(r.loss_ce),
        Some(r.loss_cl),
        Some(r.loss_total),
        Some(e.accuracy),
        Some(e.precision),
        Some(e.recall),
        Some(e.f1),
        e.kappa,
        e.auc,
    ]
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<MetricSummary>,
}

impl CvResult {
    pub fn summary_of(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.name == name)
    }

    pub fn mean_intra_class_distance(&self) -> f64 {
        mean_std(&self.folds.iter().map(|f| f.intra_class_distance).collect::<Vec<_>>()).0
    }
}

fn summarize(folds: &[FoldResult]) -> Vec<MetricSummary> {
    let rows: Vec<[Option<f64>; 9]> = folds.iter().map(|f| metric_values(&f.best)).collect();
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let vals: Option<Vec<f64>> = rows.iter().map(|r| r[k]).collect();
            let (mean, std) = match vals {
                Some(v) if !v.is_empty() => {
                    let (m, s) = mean_std(&v);
                    (Some(m), Some(s))
                }
                _ => (None, None),
            };
            MetricSummary { name, mean, std }
        })
        .collect()
}

/// One training run per `(train, val)` split of sample positions.
pub fn run_splits(
    samples: &[Sample],
    splits: &[(Vec<usize>, Vec<usize>)],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<CvResult> {
    let folds = par::try_map_indexed(splits.len(), |f| {
        let (tr, va) = &splits[f];
        let pick = |ix: &[usize]| ix.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
        train_fold(f, &pick(tr), &pick(va), model, config)
    })?;
    let summary = summarize(&folds);
    Ok(CvResult { folds, summary })
}

pub fn run_cv(samples: &[Sample], plan: &FoldPlan, model: &ModelConfig, config: &TrainConfig) -> Result<CvResult> {
    if plan.assignments.len() != samples.len() {
        return Err(RaaError::Config("fold plan does not cover the dataset".into()));
    }
    let splits: Vec<_> = (0..plan.k).map(|f| plan.split(f)).collect();
    run_splits(samples, &splits, model, config)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

pub const METRICS_HEADER: &str = "fold,epoch,split,loss_ce,loss_cl,loss_total,accuracy,precision,recall,f1,kappa,auc";

/// Per-epoch rows for every fold, then `summary` rows of mean and std over
/// the folds' best validation epochs.
pub fn metrics_csv(result: &CvResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{METRICS_HEADER}");
    for f in &result.folds {
        for r in &f.trace {
            let vals: Vec<String> = metric_values(r).iter().map(|v| fmt_opt(*v)).collect();
            let _ = writeln!(s, "{},{},{},{}", f.fold, r.epoch, r.split.as_str(), vals.join(","));
        }
    }
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let vals: Vec<String> = result
            .summary
            .iter()
            .map(|m| fmt_opt(if pick == 0 { m.mean } else { m.std }))
            .collect();
        let _ = writeln!(s, "summary,,{label},{}", vals.join(","));
    }
    s
}

pub const THROUGHPUT_HEADER: &str = "fold,epoch,samples,raa_flops,samples_per_gflop";

/// Training samples per 1e9 instrumented attention operations, per epoch.
pub fn throughput_csv(result: &CvResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{THROUGHPUT_HEADER}");
    for f in &result.folds {
        for &(epoch, samples, flops) in &f.throughput {
            let rate = samples as f64 / (flops as f64 / 1e9);
            let _ = writeln!(s, "{},{epoch},{samples},{flops},{rate}", f.fold);
        }
    }
    s
}

/// `metrics.csv`, `throughput.csv` and `fold<i>.rts1` under `dir`.
pub fn write_outputs(result: &CvResult, model: &ModelConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(result))?;
    std::fs::write(dir.join("throughput.csv"), throughput_csv(result))?;
    for f in &result.folds {
        save_set(&f.params.to_named_set(model), dir.join(format!("fold{}.rts1", f.fold)))?;
    }
    Ok(())
}
