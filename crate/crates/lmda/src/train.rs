//! Training and evaluation: decoupled-weight-decay Adam, cross-entropy,
//! accuracy/kappa/AUC metrics and the deterministic epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::TrialSet;
use crate::model::{LmdaModel, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::util::fmt_sig6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("incompatible train/test sets: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which per-epoch test metric drives the best/last-10 summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimaryMetric {
    Accuracy,
    Auc,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub primary: PrimaryMetric,
    /// Optional per-class loss weights (e.g. for imbalanced binary sets).
    pub class_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            seed,
            shuffle: true,
            primary: PrimaryMetric::Accuracy,
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr {} must be > 0", self.lr)));
        }
        Ok(())
    }
}

/// First/second moment buffers and step counter for one parameter set.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One decoupled-weight-decay Adam step over every parameter, reading
/// gradients accumulated on the tensors and clearing them afterwards.
pub fn adamw_step(params: &[(String, Tensor)], state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter().enumerate() {
        let g = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update_data(|j, w| {
            *w -= cfg.lr * cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        });
        p.zero_grad();
    }
}

/// Mean (optionally class-weighted) negative log softmax probability of
/// the true class, recorded on the tape as one fused operation.
pub fn cross_entropy(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Tensor, TrainError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TrainError::Config(format!(
            "logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TrainError::LabelRange { label: bad, classes: k });
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(TrainError::Config(format!("{} class weights for {} classes", w.len(), k)));
        }
    }
    let ld = logits.to_vec();
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    let mut wsum = 0.0;
    let mut weights = vec![0.0; b];
    for r in 0..b {
        let row = &ld[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &l) in row.iter().enumerate() {
            let e = (l - max).exp();
            probs[r * k + j] = e;
            z += e;
        }
        for p in &mut probs[r * k..(r + 1) * k] {
            *p /= z;
        }
        let w = class_weights.map_or(1.0, |cw| cw[labels[r]]);
        weights[r] = w;
        wsum += w;
        loss -= w * probs[r * k + labels[r]].ln();
    }
    loss /= wsum;
    let out = Tensor::scalar(loss);
    let labels = labels.to_vec();
    let (l2, o2) = (logits.clone(), out.clone());
    tape.record_if(&[logits], &out, move || {
        let Some(g) = crate::tensor::out_grad(&o2) else { return };
        let g = g[0];
        let mut dl = vec![0.0; b * k];
        for r in 0..b {
            let scale = g * weights[r] / wsum;
            for j in 0..k {
                let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                dl[r * k + j] = scale * (probs[r * k + j] - onehot);
            }
        }
        crate::tensor::accumulate(&l2, &dl);
    });
    Ok(out)
}

/// Balanced-chance Cohen's kappa: (acc - 1/K)/(1 - 1/K).
pub fn kappa(accuracy: f64, n_classes: usize) -> f64 {
    let chance = 1.0 / n_classes as f64;
    (accuracy - chance) / (1.0 - chance)
}

/// Mann-Whitney AUC: probability a random positive outranks a random
/// negative, ties counted one half.
pub fn auc(scores: &[f64], labels: &[u16]) -> Result<f64, TrainError> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (sp, lp) in scores.iter().zip(labels) {
        if *lp != 1 {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln != 0 {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(TrainError::SingleClass);
    }
    Ok(wins / pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub test_kappa: f64,
    pub test_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub rows: Vec<EpochRow>,
    pub primary: PrimaryMetric,
    pub best_metric: f64,
    pub last10_mean: f64,
}

impl TrainRecord {
    pub fn from_rows(rows: Vec<EpochRow>, primary: PrimaryMetric) -> Self {
        let metric = |r: &EpochRow| match primary {
            PrimaryMetric::Accuracy => r.test_acc,
            PrimaryMetric::Auc => r.test_auc.unwrap_or(f64::NAN),
        };
        let best_metric = rows.iter().map(&metric).fold(f64::NEG_INFINITY, f64::max);
        let tail = rows.len().saturating_sub(10);
        let last = &rows[tail..];
        let last10_mean = last.iter().map(&metric).sum::<f64>() / last.len() as f64;
        TrainRecord { rows, primary, best_metric, last10_mean }
    }

    /// CSV log: `epoch,train_loss,test_acc,test_kappa,test_auc`, six
    /// significant digits, empty AUC column when inapplicable.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,test_acc,test_kappa,test_auc\n");
        for r in &self.rows {
            let aucs = r.test_auc.map(fmt_sig6).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                fmt_sig6(r.train_loss),
                fmt_sig6(r.test_acc),
                fmt_sig6(r.test_kappa),
                aucs
            ));
        }
        s
    }
}

fn batch_tensor(set: &TrialSet, indices: &[usize]) -> Tensor {
    let (c, t) = (set.n_channels(), set.n_samples());
    let mut data = Vec::with_capacity(indices.len() * c * t);
    for &i in indices {
        data.extend_from_slice(set.trial(i));
    }
    Tensor::new(&[indices.len(), 1, c, t], data).expect("trial slices are dense")
}

/// Full-set inference: per-trial class probabilities.
pub fn predict_probs(model: &mut LmdaModel, set: &TrialSet, batch: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(set.n_trials());
    let k = model.config.n_classes;
    let indices: Vec<usize> = (0..set.n_trials()).collect();
    for chunk in indices.chunks(batch) {
        let tape = Tape::new();
        let x = batch_tensor(set, chunk);
        let logits = model.forward(&tape, &x, false)?;
        let ld = logits.to_vec();
        for r in 0..chunk.len() {
            let row = &ld[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.push(exps.into_iter().map(|e| e / z).collect());
        }
    }
    Ok(out)
}

pub struct Evaluation {
    pub accuracy: f64,
    pub kappa: f64,
    /// Positive-class AUC; present only for binary sets.
    pub auc: Option<f64>,
    pub probs: Vec<Vec<f64>>,
}

pub fn evaluate(model: &mut LmdaModel, set: &TrialSet, batch: usize) -> Result<Evaluation, TrainError> {
    let probs = predict_probs(model, set, batch)?;
    let k = model.config.n_classes;
    let mut correct = 0usize;
    for (p, &l) in probs.iter().zip(set.labels()) {
        let pred = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == l as usize {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / set.n_trials() as f64;
    let auc_val = if k == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        auc(&scores, set.labels()).ok()
    } else {
        None
    };
    Ok(Evaluation { accuracy, kappa: kappa(accuracy, k), auc: auc_val, probs })
}

fn check_compatible(model: &LmdaModel, train: &TrialSet, test: &TrialSet) -> Result<(), TrainError> {
    let cfg = &model.config;
    for (name, set) in [("train", train), ("test", test)] {
        if set.n_channels() != cfg.n_channels || set.n_samples() != cfg.n_samples {
            return Err(TrainError::Incompatible(format!(
                "{} set is {}x{} channels x samples, model expects {}x{}",
                name,
                set.n_channels(),
                set.n_samples(),
                cfg.n_channels,
                cfg.n_samples
            )));
        }
        if set.n_classes() != cfg.n_classes {
            return Err(TrainError::Incompatible(format!(
                "{} set has {} classes, model expects {}",
                name,
                set.n_classes(),
                cfg.n_classes
            )));
        }
    }
    if train.fs_hz != test.fs_hz {
        return Err(TrainError::Incompatible(format!(
            "sampling rates differ: train {} Hz, test {} Hz",
            train.fs_hz, test.fs_hz
        )));
    }
    Ok(())
}

/// The epoch loop: seeded shuffle, mini-batches (final partial batch
/// kept), cross-entropy, backward, one optimizer step per batch, then a
/// full inference pass over the test set. Deterministic in the config and
/// model seeds.
pub fn train_loop(
    model: &mut LmdaModel,
    train: &TrialSet,
    test: &TrialSet,
    cfg: &TrainConfig,
) -> Result<TrainRecord, TrainError> {
    cfg.validate()?;
    check_compatible(model, train, test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.params());
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.n_trials()).collect();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let x = batch_tensor(train, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i] as usize).collect();
            let logits = model.forward(&tape, &x, true)?;
            let loss = cross_entropy(&tape, &logits, &labels, cfg.class_weights.as_deref())?;
            loss_sum += loss.item();
            n_batches += 1;
            tape.backward(&loss)?;
            adamw_step(model.params(), &mut state, cfg);
        }
        let eval = evaluate(model, test, cfg.batch_size)?;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            test_acc: eval.accuracy,
            test_kappa: eval.kappa,
            test_auc: eval.auc,
        });
    }
    Ok(TrainRecord::from_rows(rows, cfg.primary))
}
