//! Separable 1D filtering along one spatial axis of a `[..., D, H, W]` array.

use crate::{par, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// No padding; the axis shrinks by `kernel.len() - 1`.
    Valid,
    /// Same size; centered kernel, out-of-range indices clamp to the edge.
    Replicate,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(shape.len() >= 3, "filter expects [..., D, H, W]");
    assert!(axis < 3);
    let dim = shape.len() - 3 + axis;
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

fn out_len(len: usize, k: usize, border: Border) -> usize {
    match border {
        Border::Valid => {
            assert!(len >= k, "valid filter of length {k} on axis of length {len}");
            len - k + 1
        }
        Border::Replicate => len,
    }
}

#[inline]
fn src_index(i: usize, k: usize, center: usize, len: usize, border: Border) -> usize {
    match border {
        Border::Valid => i + k,
        Border::Replicate => (i as isize + k as isize - center as isize).clamp(0, len as isize - 1) as usize,
    }
}

/// Filters `data` (with the given shape) along spatial `axis`.
pub fn filter_axis(data: &[f32], shape: &[usize], axis: usize, kernel: &[f32], border: Border) -> (Vec<f32>, Vec<usize>) {
    let (outer, len, inner) = layout(shape, axis);
    let olen = out_len(len, kernel.len(), border);
    let center = kernel.len() / 2;
    let mut out = vec![0f32; outer * olen * inner];
    par::for_each_chunk(&mut out, olen * inner, |o, chunk| {
        let src = &data[o * len * inner..(o + 1) * len * inner];
        for i in 0..olen {
            let dst = &mut chunk[i * inner..(i + 1) * inner];
            for (k, &w) in kernel.iter().enumerate() {
                let s = src_index(i, k, center, len, border);
                for (d, &v) in dst.iter_mut().zip(&src[s * inner..(s + 1) * inner]) {
                    *d += w * v;
                }
            }
        }
    });
    let mut oshape = shape.to_vec();
    oshape[shape.len() - 3 + axis] = olen;
    (out, oshape)
}

fn filter_axis_adjoint(grad: &[f32], in_shape: &[usize], axis: usize, kernel: &[f32], border: Border) -> Vec<f32> {
    let (outer, len, inner) = layout(in_shape, axis);
    let olen = out_len(len, kernel.len(), border);
    let center = kernel.len() / 2;
    let mut dx = vec![0f32; outer * len * inner];
    par::for_each_chunk(&mut dx, len * inner, |o, chunk| {
        let g = &grad[o * olen * inner..(o + 1) * olen * inner];
        for i in 0..olen {
            let gi = &g[i * inner..(i + 1) * inner];
            for (k, &w) in kernel.iter().enumerate() {
                let s = src_index(i, k, center, len, border);
                for (d, &v) in chunk[s * inner..(s + 1) * inner].iter_mut().zip(gi) {
                    *d += w * v;
                }
            }
        }
    });
    dx
}

/// Normalized 1D Gaussian with radius `ceil(3 sigma)` (at least 1).
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    assert!(sigma > 0.0);
    let r = ((3.0 * sigma).ceil() as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * (sigma as f64).powi(2))).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

impl Graph {
    pub fn filter_axis(&mut self, a: Var, axis: usize, kernel: &[f32], border: Border) -> Var {
        let x = self.value(a);
        let (out, shape) = filter_axis(x.data(), x.shape(), axis, kernel, border);
        let kernel = kernel.to_vec();
        self.push(
            Tensor::new(&shape, out),
            None,
            &[a],
            Box::new(move |ctx| {
                let s = ctx.inputs[0].shape();
                vec![Some(Tensor::new(s, filter_axis_adjoint(ctx.grad.data(), s, axis, &kernel, border)))]
            }),
        )
    }

    /// Same kernel applied along all three spatial axes.
    pub fn filter3(&mut self, a: Var, kernel: &[f32], border: Border) -> Var {
        let x = self.filter_axis(a, 0, kernel, border);
        let x = self.filter_axis(x, 1, kernel, border);
        self.filter_axis(x, 2, kernel, border)
    }
}
