//! Fused voxel-wise losses with analytic gradients.

use std::sync::Arc;

use crate::{Graph, Tensor, Var};

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary focal loss term and its derivative for one logit.
fn focal_term(x: f64, y: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let q = 1.0 - p;
    // y = 1 branch
    let l1 = -q.powf(gamma) * log_p;
    let d1 = gamma * p * q.powf(gamma) * log_p - q.powf(gamma + 1.0);
    // y = 0 branch
    let l0 = -p.powf(gamma) * log_q;
    let d0 = -gamma * q * p.powf(gamma) * log_q + p.powf(gamma + 1.0);
    (y * l1 + (1.0 - y) * l0, y * d1 + (1.0 - y) * d0)
}

impl Graph {
    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: Arc<Tensor>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), target.shape(), "bce target shape");
        let n = x.len() as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| {
                let (x, y) = (x as f64, y as f64);
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let mean = total / n;
        self.push(
            Tensor::scalar(mean as f32),
            Some(mean),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] as f64 / n;
                let d = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| ((sigmoid(x as f64) - y as f64) * g) as f32)
                    .collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape(), d))]
            }),
        )
    }

    /// Mean binary focal loss with focusing parameter `gamma`.
    pub fn focal_with_logits_mean(&mut self, logits: Var, target: Arc<Tensor>, gamma: f32) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), target.shape(), "focal target shape");
        let n = x.len() as f64;
        let gamma = gamma as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| focal_term(x as f64, y as f64, gamma).0)
            .sum();
        let mean = total / n;
        self.push(
            Tensor::scalar(mean as f32),
            Some(mean),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] as f64 / n;
                let d = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| (focal_term(x as f64, y as f64, gamma).1 * g) as f32)
                    .collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape(), d))]
            }),
        )
    }

    /// `mean_r [1 - (2 Σ p y + s) / (Σ p + Σ y + s)]` over rows of length `row_len`.
    pub fn soft_dice_loss(&mut self, probs: Var, target: Arc<Tensor>, row_len: usize, smooth: f32) -> Var {
        let p = self.value(probs);
        assert_eq!(p.len(), target.len(), "dice target size");
        assert_eq!(p.len() % row_len, 0);
        let rows = p.len() / row_len;
        let s = smooth as f64;
        let stats: Vec<(f64, f64)> = (0..rows)
            .map(|r| {
                let rg = r * row_len..(r + 1) * row_len;
                let (mut inter, mut union) = (0f64, 0f64);
                for (&pv, &yv) in p.data()[rg.clone()].iter().zip(&target.data()[rg]) {
                    inter += pv as f64 * yv as f64;
                    union += pv as f64 + yv as f64;
                }
                (inter, union)
            })
            .collect();
        let loss = stats
            .iter()
            .map(|&(i, u)| 1.0 - (2.0 * i + s) / (u + s))
            .sum::<f64>()
            / rows as f64;
        self.push(
            Tensor::scalar(loss as f32),
            Some(loss),
            &[probs],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] as f64 / rows as f64;
                let mut d = vec![0f32; row_len * rows];
                for (r, &(i, u)) in stats.iter().enumerate() {
                    let den = u + s;
                    for j in r * row_len..(r + 1) * row_len {
                        let y = target.data()[j] as f64;
                        d[j] = (-g * (2.0 * y * den - (2.0 * i + s)) / (den * den)) as f32;
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), d))]
            }),
        )
    }
}
