use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAX_EPOCHS: usize = 2000;
const TOLERANCE: f64 = 1e-6;

/// Softmax-regression probe over standardized features. There is no hidden
/// layer: logits are `((x - mean) / scale) W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[d x classes]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub probe: LinearProbe,
    pub accuracy: f64,
    pub epochs: usize,
    pub final_loss: f64,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut out = self.bias.clone();
        for (j, xv) in x.iter().enumerate() {
            let z = (xv - self.mean[j]) / self.scale[j];
            if z == 0.0 {
                continue;
            }
            for (k, o) in out.iter_mut().enumerate() {
                *o += z * self.weight[j * c + k];
            }
        }
        out
    }

    /// Arg-max class; ties go to the lower class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for k in 1..l.len() {
            if l[k] > l[best] {
                best = k;
            }
        }
        best
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Largest eigenvalue of `Z^T Z / n` (with a bias column) by power iteration.
fn lipschitz(z: &[Vec<f64>], d: usize) -> f64 {
    let n = z.len() as f64;
    let mut v = vec![1.0; d + 1];
    let mut lambda = 1.0;
    for _ in 0..50 {
        let mut w = vec![0.0; d + 1];
        for row in z {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
            for (wi, ri) in w.iter_mut().zip(row) {
                *wi += dot * ri / n;
            }
            w[d] += dot / n;
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda.max(1e-12)
}

/// Trains a probe by full-batch gradient descent on the `train` rows and
/// reports accuracy on the `test` rows. Stops when the loss changes by less
/// than 1e-6 between epochs, or after 2000 epochs.
pub fn train_probe(embeddings: &Tensor, labels: &[usize], train: &[usize], test: &[usize], _seed: u64) -> Result<ProbeFit> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid("probe needs non-empty train and test splits".into()));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut present = vec![false; classes];
    train.iter().for_each(|&i| present[labels[i]] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Invalid("probe training split contains a single class".into()));
    }

    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, x) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut scale = vec![0.0; d];
    for &i in train {
        for ((s, x), m) in scale.iter_mut().zip(embeddings.row(i)).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    for s in &mut scale {
        let sd = (*s / train.len() as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { f64::INFINITY };
    }
    let z: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| embeddings.row(i).iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) / s).collect())
        .collect();

    let lr = 1.0 / lipschitz(&z, d);
    let mut weight = vec![0.0; d * classes];
    let mut bias = vec![0.0; classes];
    let nt = train.len() as f64;
    let mut prev = f64::INFINITY;
    let mut loss = prev;
    let mut epochs = 0;
    for epoch in 0..MAX_EPOCHS {
        epochs = epoch + 1;
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        loss = 0.0;
        for (row, &i) in z.iter().zip(train) {
            let mut p = bias.clone();
            for (j, zv) in row.iter().enumerate() {
                for (k, pk) in p.iter_mut().enumerate() {
                    *pk += zv * weight[j * classes + k];
                }
            }
            softmax_in_place(&mut p);
            let y = labels[i];
            loss -= p[y].max(1e-300).ln();
            p[y] -= 1.0;
            for (j, zv) in row.iter().enumerate() {
                for (k, pk) in p.iter().enumerate() {
                    gw[j * classes + k] += zv * pk;
                }
            }
            gb.iter_mut().zip(&p).for_each(|(g, pk)| *g += pk);
        }
        loss /= nt;
        for (w, g) in weight.iter_mut().zip(&gw) {
            *w -= lr * g / nt;
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= lr * g / nt;
        }
        if (prev - loss).abs() < TOLERANCE {
            break;
        }
        prev = loss;
    }
    let probe = LinearProbe { mean, scale, weight, bias, classes };
    let correct = test.iter().filter(|&&i| probe.predict(embeddings.row(i)) == labels[i]).count();
    Ok(ProbeFit { probe, accuracy: correct as f64 / test.len() as f64, epochs, final_loss: loss })
}
