use crate::{par, Graph, Tensor, Var};

impl Graph {
    /// Standardizes consecutive rows of length `row_len` to zero mean and unit
    /// (population) variance. Group norm over `[N, C, S]` is this with
    /// `row_len = (C / G) * S`; layer norm over `[T, C]` uses `row_len = C`.
    pub fn normalize_rows(&mut self, a: Var, row_len: usize, eps: f32) -> Var {
        let x = self.value(a);
        assert_eq!(x.len() % row_len, 0, "normalize_rows layout");
        let rows = x.len() / row_len;
        let data = x.data();
        let mut out = vec![0f32; x.len()];
        let mut inv_std = vec![0f32; rows];
        {
            let stats = par::map_range(rows, |r| {
                let row = &data[r * row_len..(r + 1) * row_len];
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row_len as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / row_len as f64;
                (mean as f32, (1.0 / (var + eps as f64).sqrt()) as f32)
            });
            par::for_each_chunk(&mut out, row_len, |r, chunk| {
                let (mean, is) = stats[r];
                for (o, &v) in chunk.iter_mut().zip(&data[r * row_len..(r + 1) * row_len]) {
                    *o = (v - mean) * is;
                }
            });
            for (d, s) in inv_std.iter_mut().zip(&stats) {
                *d = s.1;
            }
        }
        self.push(
            Tensor::new(x.shape(), out),
            None,
            &[a],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![0f32; y.len()];
                par::for_each_chunk(&mut dx, row_len, |r, chunk| {
                    let yr = &y[r * row_len..(r + 1) * row_len];
                    let gr = &g[r * row_len..(r + 1) * row_len];
                    let mg = gr.iter().map(|&v| v as f64).sum::<f64>() / row_len as f64;
                    let mgy = gr.iter().zip(yr).map(|(&g, &y)| g as f64 * y as f64).sum::<f64>() / row_len as f64;
                    let is = inv_std[r];
                    for ((d, &g), &y) in chunk.iter_mut().zip(gr).zip(yr) {
                        *d = is * (g - mg as f32 - y * mgy as f32);
                    }
                });
                vec![Some(Tensor::new(ctx.inputs[0].shape(), dx))]
            }),
        )
    }

    /// Scales each row to unit L2 norm: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, row_len: usize, eps: f32) -> Var {
        let x = self.value(a);
        assert_eq!(x.len() % row_len, 0);
        let rows = x.len() / row_len;
        let data = x.data();
        let norms: Vec<f32> = (0..rows)
            .map(|r| {
                let s: f64 = data[r * row_len..(r + 1) * row_len]
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum();
                (s + eps as f64).sqrt() as f32
            })
            .collect();
        let out: Vec<f32> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / row_len])
            .collect();
        self.push(
            Tensor::new(x.shape(), out),
            None,
            &[a],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![0f32; y.len()];
                for r in 0..rows {
                    let rg = r * row_len..(r + 1) * row_len;
                    let dot: f64 = y[rg.clone()]
                        .iter()
                        .zip(&g[rg.clone()])
                        .map(|(&y, &g)| y as f64 * g as f64)
                        .sum();
                    for i in rg {
                        dx[i] = (g[i] - y[i] * dot as f32) / norms[r];
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), dx))]
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var, row_len: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len() % row_len, 0);
        let data = x.data();
        let mut out = vec![0f32; x.len()];
        par::for_each_chunk(&mut out, row_len, |r, chunk| {
            let row = &data[r * row_len..(r + 1) * row_len];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0f64;
            for (o, &v) in chunk.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o as f64;
            }
            let inv = (1.0 / s) as f32;
            chunk.iter_mut().for_each(|o| *o *= inv);
        });
        self.push(
            Tensor::new(x.shape(), out),
            None,
            &[a],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![0f32; y.len()];
                par::for_each_chunk(&mut dx, row_len, |r, chunk| {
                    let yr = &y[r * row_len..(r + 1) * row_len];
                    let gr = &g[r * row_len..(r + 1) * row_len];
                    let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y as f64 * g as f64).sum();
                    for ((d, &y), &g) in chunk.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot as f32);
                    }
                });
                vec![Some(Tensor::new(ctx.inputs[0].shape(), dx))]
            }),
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var, row_len: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len() % row_len, 0);
        let data = x.data();
        let mut out = vec![0f32; x.len()];
        par::for_each_chunk(&mut out, row_len, |r, chunk| {
            let row = &data[r * row_len..(r + 1) * row_len];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            for (o, &v) in chunk.iter_mut().zip(row) {
                *o = (v as f64 - lse) as f32;
            }
        });
        self.push(
            Tensor::new(x.shape(), out),
            None,
            &[a],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![0f32; y.len()];
                par::for_each_chunk(&mut dx, row_len, |r, chunk| {
                    let yr = &y[r * row_len..(r + 1) * row_len];
                    let gr = &g[r * row_len..(r + 1) * row_len];
                    let gs: f64 = gr.iter().map(|&g| g as f64).sum();
                    for ((d, &y), &g) in chunk.iter_mut().zip(yr).zip(gr) {
                        *d = g - y.exp() * gs as f32;
                    }
                });
                vec![Some(Tensor::new(ctx.inputs[0].shape(), dx))]
            }),
        )
    }
}
