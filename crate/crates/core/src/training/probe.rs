//! Linear evaluation: multinomial logistic regression on frozen embeddings.

use crate::data::Dataset;
use crate::encoder::{embed, EncoderParams};
use crate::error::{MixcoError, Result};
use crate::numerics::{matmul_at, matmul_bt, soft_cross_entropy, SeededRng, Tensor};

use super::config::{LrSchedule, RunConfig};

const STREAM_PROBE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Learning rate at epoch 0; decays with a per-epoch cosine schedule.
    pub lr0: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl ProbeConfig {
    /// Probe settings of a run: base rate `probe_lr · probe_batch / 256`.
    pub fn from_run(cfg: &RunConfig) -> Self {
        ProbeConfig {
            epochs: cfg.probe_epochs,
            lr0: cfg.probe_lr * cfg.probe_batch as f64 / 256.0,
            batch_size: cfg.probe_batch,
            momentum: 0.9,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `classes × C`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearProbe {
            weight: Tensor::zeros(&[classes, dim]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut out = matmul_bt(embeddings, &self.weight)?;
        let classes = self.bias.len();
        for row in out.data_mut().chunks_exact_mut(classes) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, embeddings: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(embeddings)?;
        Ok(logits
            .row_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(embeddings)?;
        if labels.is_empty() {
            return Ok(0.0);
        }
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub probe: LinearProbe,
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.set(i, l, 1.0);
    }
    t
}

/// Fits a softmax classifier with minibatch SGD (momentum, cosine decay).
pub fn train_linear_probe(
    embeddings: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let (n, dim) = embeddings.expect_matrix("train_linear_probe")?;
    if labels.len() != n {
        return Err(MixcoError::Dimension {
            op: "train_linear_probe",
            left: embeddings.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut seen = vec![false; classes];
    for &l in labels {
        if l >= classes {
            return Err(MixcoError::config(format!("label {l} out of range for {classes} classes")));
        }
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(MixcoError::config(format!(
            "class {missing} has no training samples"
        )));
    }
    if cfg.batch_size == 0 {
        return Err(MixcoError::config("probe batch size must be positive"));
    }

    let mut probe = LinearProbe::zeros(classes, dim);
    let mut vel_w = Tensor::zeros(&[classes, dim]);
    let mut vel_b = Tensor::zeros(&[classes]);
    let mut rng = SeededRng::with_stream(cfg.seed, STREAM_PROBE);
    for epoch in 0..cfg.epochs {
        let lr = LrSchedule::Cosine.lr_at(cfg.lr0, epoch, cfg.epochs);
        let order = rng.permutation(n);
        for idx in order.chunks(cfg.batch_size) {
            let x = embeddings.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = probe.logits(&x)?;
            let g = soft_cross_entropy(&logits, &one_hot(&y, classes))?.grad;
            let gw = matmul_at(&g, &x)?;
            let mut gb = vec![0.0; classes];
            for row in g.row_iter() {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            for ((p, v), gv) in probe.weight.data_mut().iter_mut().zip(vel_w.data_mut()).zip(gw.data()) {
                *v = cfg.momentum * *v + gv;
                *p -= lr * *v;
            }
            for ((p, v), gv) in probe.bias.data_mut().iter_mut().zip(vel_b.data_mut()).zip(&gb) {
                *v = cfg.momentum * *v + gv;
                *p -= lr * *v;
            }
        }
        if !probe.weight.is_finite() || !probe.bias.is_finite() {
            return Err(MixcoError::Diverged(format!("linear probe, epoch {}", epoch + 1)));
        }
    }
    Ok(probe)
}

/// Embeds both splits with the frozen encoder, fits a probe on the training
/// split and reports top-1 accuracy on the test split.
pub fn linear_eval(
    encoder: &EncoderParams,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train.class_count() != test.class_count() {
        return Err(MixcoError::config("train and test splits disagree on the class count"));
    }
    let train_emb = embed(encoder, train.features())?;
    let test_emb = embed(encoder, test.features())?;
    let probe = train_linear_probe(&train_emb, train.labels(), train.class_count(), cfg)?;
    Ok(ProbeReport {
        test_accuracy: probe.accuracy(&test_emb, test.labels())?,
        train_accuracy: probe.accuracy(&train_emb, train.labels())?,
        probe,
    })
}
