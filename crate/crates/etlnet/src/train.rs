//! Binary cross-entropy loss, the Adam optimizer, the epoch loop, and the
//! evaluation metric suite (confusion matrix, accuracy, precision, recall,
//! F1).

use std::io::Write as _;

use crate::dataio::WindowSet;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::numcore::{Rng, Tensor};

/// Probabilities are clamped into this interval before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of predictions `p` (shape `[B, 1]` or `[B]`)
/// against 0/1 targets `y` (shape `[B]`), plus the analytic gradient of the
/// loss with respect to `p`.
pub fn bce_loss(p: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let n = y.len();
    if p.len() != n {
        return Err(Error::Dim(format!(
            "bce: {} predictions vs {} targets",
            p.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Arg("bce: empty batch".into()));
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(n);
    for (&pi, &yi) in p.data().iter().zip(y.data()) {
        let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        grad.push((-yi / pc + (1.0 - yi) / (1.0 - pc)) / n as f64);
    }
    loss /= n as f64;
    Ok((loss, Tensor::from_data(p.shape(), grad, p.precision())?))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many epochs without a validation-F1 improvement.
    pub early_stop_patience: Option<usize>,
    /// Decision threshold used for validation metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            shuffle: true,
            early_stop_patience: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Arg(format!(
                "adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Arg("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Arg("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    /// Sets one field by key name; used by the config file / flag machinery.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "learning_rate" => self.learning_rate = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_epsilon" => self.adam_epsilon = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "shuffle" => self.shuffle = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "early_stop_patience" => {
                self.early_stop_patience = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                };
            }
            other => return Err(Error::Format(format!("unknown train key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "learning_rate={}\nbeta1={}\nbeta2={}\nadam_epsilon={}\nbatch_size={}\nepochs={}\nseed={}\nshuffle={}\nearly_stop_patience={}\nthreshold={}\n",
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_epsilon,
            self.batch_size,
            self.epochs,
            self.seed,
            self.shuffle,
            self.early_stop_patience
                .map(|p| p.to_string())
                .unwrap_or_else(|| "none".to_string()),
            self.threshold
        )
    }
}

/// Per-parameter first/second moment estimates and the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> AdamState {
        AdamState {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.shape(), p.precision()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.shape(), p.precision()))
                .collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction:
/// `m_hat = m / (1 - beta1^t)`, `v_hat = v / (1 - beta2^t)`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dim(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::Dim(format!(
                "adam: param shape {:?} vs grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let mut new_m = Vec::with_capacity(g.len());
        let mut new_v = Vec::with_capacity(g.len());
        let mut new_p = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            new_m.push(mi);
            new_v.push(vi);
            new_p.push(p.data()[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon));
        }
        *m = Tensor::from_data(m.shape(), new_m, m.precision())?;
        *v = Tensor::from_data(v.shape(), new_v, v.precision())?;
        **p = Tensor::from_data(p.shape(), new_p, p.precision())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Metric values with their confusion matrix. Metrics whose denominator was
/// zero are reported as 0 and flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
    pub threshold: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

impl MetricsReport {
    /// Computes all metrics from a confusion matrix, applying the
    /// zero-denominator convention (undefined metrics become 0, flagged).
    pub fn from_confusion(confusion: ConfusionMatrix, threshold: f64) -> MetricsReport {
        let n = confusion.total();
        let accuracy = if n > 0 {
            (confusion.tp + confusion.tn) as f64 / n as f64
        } else {
            0.0
        };
        let precision_defined = confusion.tp + confusion.fp > 0;
        let precision = if precision_defined {
            confusion.tp as f64 / (confusion.tp + confusion.fp) as f64
        } else {
            0.0
        };
        let recall_defined = confusion.tp + confusion.fn_ > 0;
        let recall = if recall_defined {
            confusion.tp as f64 / (confusion.tp + confusion.fn_) as f64
        } else {
            0.0
        };
        let f1_defined = precision_defined && recall_defined && precision + recall > 0.0;
        let f1 = if f1_defined {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        MetricsReport {
            accuracy,
            precision,
            recall,
            f1,
            confusion,
            threshold,
            precision_defined,
            recall_defined,
            f1_defined,
        }
    }

    /// Builds the confusion matrix from probabilities and 0/1 labels;
    /// prediction is positive when `p >= threshold`.
    pub fn from_predictions(probs: &[f64], labels: &[f64], threshold: f64) -> Result<MetricsReport> {
        if probs.len() != labels.len() {
            return Err(Error::Dim(format!(
                "metrics: {} predictions vs {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if probs.is_empty() {
            return Err(Error::Arg("metrics: empty input".into()));
        }
        let mut c = ConfusionMatrix {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (&p, &y) in probs.iter().zip(labels) {
            let pred = p >= threshold;
            let actual = y == 1.0;
            match (pred, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(MetricsReport::from_confusion(c, threshold))
    }
}

/// Runs the model in eval mode over a window set and scores it.
pub fn evaluate(model: &Model, ws: &WindowSet, threshold: f64) -> Result<MetricsReport> {
    if ws.is_empty() {
        return Err(Error::Arg("evaluate: empty window set".into()));
    }
    let (n, w, c) = ws.x.dim3()?;
    // Evaluate in slices to bound the cache-free forward's working set.
    let chunk = 256usize;
    let mut probs = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows = end - start;
        let x = Tensor::from_data(
            &[rows, w, c],
            ws.x.data()[start * w * c..end * w * c].to_vec(),
            ws.x.precision(),
        )?;
        let p = model.predict(&x)?;
        probs.extend_from_slice(p.data());
        start = end;
    }
    MetricsReport::from_predictions(&probs, ws.y.data(), threshold)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    /// CSV rendering: epoch, train_loss, val_accuracy, val_precision,
    /// val_recall, val_f1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy,val_precision,val_recall,val_f1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val.accuracy, e.val.precision, e.val.recall, e.val.f1
            ));
        }
        out
    }

    pub fn best_f1(&self) -> f64 {
        self.epochs.iter().map(|e| e.val.f1).fold(0.0, f64::max)
    }
}

/// Trains in place: seeded epoch shuffling, train-mode forward (dropout and
/// batch statistics active), Adam updates, eval-mode validation metrics per
/// epoch. Deterministic for a given seed. Batches of a single window are
/// skipped (batch statistics need at least two samples).
pub fn train(
    model: &mut Model,
    train_ws: &WindowSet,
    val_ws: &WindowSet,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_ws.is_empty() {
        return Err(Error::Arg("train: empty training window set".into()));
    }
    let (n, w, c) = train_ws.x.dim3()?;
    if w != model.config().window || c != model.config().in_features {
        return Err(Error::Dim(format!(
            "train: windows are [{w} x {c}] but the model expects [{} x {}]",
            model.config().window,
            model.config().in_features
        )));
    }
    let (pos, neg) = train_ws.class_counts();
    if pos != neg {
        eprintln!(
            "warning: training set is unbalanced ({pos} positive / {neg} negative windows)"
        );
        let _ = std::io::stderr().flush();
    }

    let params: Vec<&Tensor> = model.trainable().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::for_params(&params);
    drop(params);

    let mut history = History::default();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..cfg.epochs {
        // Per-epoch child generator so epoch order does not depend on how
        // many draws previous epochs consumed.
        let mut epoch_rng = Rng::new(Rng::child_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            epoch_rng.shuffle(&mut order);
        }

        let mut loss_sum = 0.0f64;
        let mut loss_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut x = Vec::with_capacity(batch.len() * w * c);
            let mut y = Vec::with_capacity(batch.len());
            for &i in batch {
                x.extend_from_slice(&train_ws.x.data()[i * w * c..(i + 1) * w * c]);
                y.push(train_ws.y.data()[i]);
            }
            let x = Tensor::from_data(&[batch.len(), w, c], x, train_ws.x.precision())?;
            let y = Tensor::from_data(&[batch.len()], y, train_ws.y.precision())?;

            let (p, cache) = model.forward(&x, Mode::Train, &mut epoch_rng)?;
            let (loss, d_p) = bce_loss(&p, &y)?;
            loss_sum += loss;
            loss_batches += 1;
            if cfg.learning_rate > 0.0 {
                let grads = model.backward(&d_p, &cache)?;
                let mut slots = model.trainable_mut();
                adam_step(&mut slots, &grads, &mut adam, cfg)?;
            }
        }
        let train_loss = if loss_batches > 0 {
            loss_sum / loss_batches as f64
        } else {
            0.0
        };
        let val = evaluate(model, val_ws, cfg.threshold)?;
        let f1 = val.f1;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val,
        });

        if let Some(patience) = cfg.early_stop_patience {
            if f1 > best_f1 {
                best_f1 = f1;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok(history)
}
