//! Cross-entropy training with Adam, and binary segmentation metrics.
//!
//! Class 1 (navigable ground) is the positive class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Network;
use crate::dataio::{Mask, Sample};
use crate::error::{check_dim, Error, Result};
use crate::ops::Mode;
use crate::optim::{AdamConfig, AdamState, Parameterized};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Batch accuracy is recorded every `log_every` steps and at the last step.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 500,
            batch_size: 4,
            learning_rate: adam.alpha,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let problem = if self.batch_size == 0 {
            Some("batch_size must be positive")
        } else if self.log_every == 0 {
            Some("log_every must be positive")
        } else if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            Some("learning_rate must be positive")
        } else if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            Some("beta1 and beta2 must lie in [0, 1)")
        } else if self.eps.is_nan() || self.eps < 0.0 {
            Some("eps must be non-negative")
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Config(p.to_string())),
            None => Ok(()),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            alpha: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[&Mask]) -> Result<()> {
    let s = logits.shape();
    check_dim("cross_entropy", "label count", labels.len(), s.n)?;
    if s.c < 2 {
        return Err(Error::invalid(format!("cross entropy needs at least 2 classes, got {}", s.c)));
    }
    for (n, m) in labels.iter().enumerate() {
        if (m.h, m.w) != (s.h, s.w) {
            return Err(Error::invalid(format!(
                "label {n} is {}x{} but logits are {}x{}",
                m.h, m.w, s.h, s.w
            )));
        }
        if let Some(i) = m.data.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!("label {n} has value {} at pixel {i}; expected 0 or 1", m.data[i])));
        }
    }
    Ok(())
}

/// Mean over pixels of `logsumexp(z) − z[label]` and its gradient
/// `(softmax − onehot) / pixel count` with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Tensor<T>, labels: &[&Mask]) -> Result<(f64, Tensor<T>)> {
    check_labels(logits, labels)?;
    let s = logits.shape();
    let count = (s.n * s.plane()) as f64;
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0;
    let mut z = vec![0.0f64; s.c];
    for (n, m) in labels.iter().enumerate() {
        for (i, &label) in m.data.iter().enumerate() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = logits.plane(n, c)[i].as_f64();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - z[label as usize];
            for (c, &zc) in z.iter().enumerate() {
                let p = (zc - lse).exp();
                let target = if c == label as usize { 1.0 } else { 0.0 };
                let at = logits.index(n, c, i / s.w, i % s.w);
                grad.data_mut()[at] = T::of((p - target) / count);
            }
        }
    }
    Ok((total / count, grad))
}

pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[&Mask]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

/// Per-pixel argmax over channels for item `n`; ties go to the lower class.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>, n: usize) -> Mask {
    let s = logits.shape();
    let mut data = vec![0u8; s.plane()];
    for (i, d) in data.iter_mut().enumerate() {
        let mut best = logits.plane(n, 0)[i];
        for c in 1..s.c {
            let v = logits.plane(n, c)[i];
            if v > best {
                best = v;
                *d = c as u8;
            }
        }
    }
    Mask { h: s.h, w: s.w, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Metrics {
            recall: ratio(self.tp, self.tp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
            accuracy: ratio(self.tp + self.tn, self.total()),
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Recall and precision are 1.0 when their denominator is zero, as is
/// accuracy over zero pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
}

pub fn confusion_counts(pred: &Mask, label: &Mask) -> Result<ConfusionCounts> {
    if (pred.h, pred.w) != (label.h, label.w) {
        return Err(Error::invalid(format!(
            "prediction is {}x{} but label is {}x{}",
            pred.h, pred.w, label.h, label.w
        )));
    }
    if !pred.is_binary() || !label.is_binary() {
        return Err(Error::invalid("confusion counts need binary masks"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in pred.data.iter().zip(&label.data) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Inference-mode confusion counts summed over `data`.
pub fn evaluate_counts(net: &Network<f32>, data: &[Sample]) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for s in data {
        let logits = net.infer(&s.image)?;
        total += confusion_counts(&predict_mask(&logits, 0), &s.label)?;
    }
    Ok(total)
}

pub fn evaluate(net: &Network<f32>, data: &[Sample]) -> Result<Metrics> {
    Ok(evaluate_counts(net, data)?.metrics())
}

/// Inference-mode mean cross entropy over `data`.
pub fn evaluate_loss(net: &Network<f32>, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate loss on an empty dataset"));
    }
    let mut sum = 0.0;
    for s in data {
        sum += cross_entropy_loss(&net.infer(&s.image)?, &[&s.label])?;
    }
    Ok(sum / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based.
    pub step: usize,
    pub loss: f64,
    /// Pixel accuracy on the step's batch, recorded every `log_every` steps.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,accuracy\n");
        for r in &self.rows {
            match r.accuracy {
                Some(a) => s += &format!("{},{},{}\n", r.step, r.loss, a),
                None => s += &format!("{},{},\n", r.step, r.loss),
            }
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Runs `cfg.steps` Adam steps on seeded, reshuffled-per-epoch batches.
/// Stops with [`Error::NonFiniteLoss`] at the first non-finite loss.
pub fn train(net: &mut Network<f32>, data: &[Sample], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    for s in data {
        net.check_input(s.image.shape())?;
    }
    let mut history = History::default();
    if cfg.steps == 0 {
        return Ok(history);
    }
    let mut adam = AdamState::new(net.trainable_len(), cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
        let labels: Vec<&Mask> = batch.iter().map(|s| &s.label).collect();
        let x = Tensor::stack(&images)?;

        net.zero_grad();
        let logits = net.forward(&x, Mode::Train)?;
        let (loss, grad) = cross_entropy_with_grad(&logits, &labels)?;
        if !loss.is_finite() {
            net.clear_cache();
            return Err(Error::NonFiniteLoss { step });
        }
        net.backward(&grad)?;
        adam.step_model(net).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step },
            other => other,
        })?;

        let accuracy = (step % cfg.log_every == 0 || step == cfg.steps).then(|| {
            let mut c = ConfusionCounts::default();
            for (n, m) in labels.iter().enumerate() {
                c += confusion_counts(&predict_mask(&logits, n), m).expect("shapes checked");
            }
            c.metrics().accuracy
        });
        history.rows.push(HistoryRow { step, loss, accuracy });
    }
    net.visit_params(&mut |p| p.clear_grad());
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let m = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let zero = Tensor::<f32>::zeros((1, 2, 2, 2));
        assert!((cross_entropy_loss(&zero, &[&m]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let confident = Tensor::<f32>::from_fn((1, 2, 2, 2), |_, c, _, _| if c == 0 { 20.0 } else { -20.0 });
        assert!(cross_entropy_loss(&confident, &[&Mask::zeros(2, 2)]).unwrap() < 1e-15);
        assert!(cross_entropy_loss(&zero, &[&Mask::new(2, 2, vec![0, 2, 0, 0]).unwrap()]).is_err());
    }

    #[test]
    fn metric_fixtures() {
        let c = ConfusionCounts { tp: 3, fp: 1, tn: 5, fn_: 1 };
        let m = c.metrics();
        assert_eq!((m.precision, m.recall, m.accuracy), (0.75, 0.75, 0.8));
        let neg = ConfusionCounts { tp: 0, fp: 0, tn: 9, fn_: 0 }.metrics();
        assert_eq!((neg.recall, neg.precision, neg.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn argmax_tie_goes_to_class_zero() {
        let t = Tensor::<f32>::from_vec((1, 2, 1, 3), vec![0.0, 1.0, 2.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(predict_mask(&t, 0).data, vec![0, 1, 0]);
    }

    #[test]
    fn csv_layout() {
        let h = History {
            rows: vec![
                HistoryRow { step: 1, loss: 0.5, accuracy: None },
                HistoryRow { step: 2, loss: 0.25, accuracy: Some(0.75) },
            ],
        };
        assert_eq!(h.to_csv(), "step,loss,accuracy\n1,0.5,\n2,0.25,0.75\n");
    }
}
