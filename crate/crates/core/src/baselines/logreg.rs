use serde::{Deserialize, Serialize};

use crate::model::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegParams {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LogRegParams {
    fn default() -> Self {
        LogRegParams {
            l2: 1e-3,
            learning_rate: 1.0,
            epochs: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Mean negative log-likelihood plus `l2 / 2 * |w|^2` (bias unpenalized),
/// with its gradient in `w` and in the bias.
pub fn loss_and_gradient(weights: &[f64], bias: f64, x: &[Vec<f64>], y: &[Label], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (row, label) in x.iter().zip(y) {
        let z = dot(weights, row) + bias;
        let t = if label.is_positive() { 1.0 } else { 0.0 };
        // -[t ln s(z) + (1-t) ln(1-s(z))] = softplus(z) - t z
        loss += softplus(z) - t * z;
        let r = sigmoid(z) - t;
        for (g, xi) in grad.iter_mut().zip(row) {
            *g += r * xi;
        }
        grad_b += r;
    }
    loss /= n;
    grad_b /= n;
    for (g, w) in grad.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, grad, grad_b)
}

impl LogisticModel {
    /// Full-batch gradient descent from zero weights. The step is capped at
    /// `1 / L`, where `L` bounds the loss curvature, so large penalties stay
    /// stable.
    pub fn fit(x: &[Vec<f64>], y: &[Label], params: &LogRegParams) -> LogisticModel {
        let d = x.first().map_or(0, Vec::len);
        let max_sq = x.iter().map(|r| dot(r, r)).fold(0.0, f64::max);
        let smoothness = 0.25 * (max_sq + 1.0) + params.l2;
        let step = params.learning_rate.min(1.0 / smoothness);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..params.epochs {
            let (_, g, gb) = loss_and_gradient(&w, b, x, y, params.l2);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= step * gi;
            }
            b -= step * gb;
        }
        LogisticModel { weights: w, bias: b }
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, row) + self.bias)
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}
