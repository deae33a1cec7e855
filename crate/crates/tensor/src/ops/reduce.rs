use crate::{par, Graph, Tensor, Var};

impl Graph {
    /// Sum of all elements as a one-element node (accumulated in `f64`).
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            Tensor::scalar(s as f32),
            Some(s),
            &[a],
            Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.value(a).sum() / n;
        self.push(
            Tensor::scalar(s as f32),
            Some(s),
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] / n as f32;
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    /// Sums consecutive rows of length `row_len`: `[R * row_len] -> [R]`.
    pub fn sum_rows(&mut self, a: Var, row_len: usize) -> Var {
        self.reduce_rows(a, row_len, 1.0)
    }

    pub fn mean_rows(&mut self, a: Var, row_len: usize) -> Var {
        self.reduce_rows(a, row_len, 1.0 / row_len as f32)
    }

    fn reduce_rows(&mut self, a: Var, row_len: usize, factor: f32) -> Var {
        let x = self.value(a);
        assert_eq!(x.len() % row_len, 0, "reduce_rows layout");
        let rows = x.len() / row_len;
        let data = x.data();
        let out = par::map_range(rows, |r| {
            let s: f64 = data[r * row_len..(r + 1) * row_len]
                .iter()
                .map(|&v| v as f64)
                .sum();
            (s * factor as f64) as f32
        });
        self.push(
            Tensor::new(&[rows], out),
            None,
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![0f32; ctx.inputs[0].len()];
                par::for_each_chunk(&mut dx, row_len, |r, chunk| {
                    chunk.fill(g[r] * factor);
                });
                vec![Some(Tensor::new(ctx.inputs[0].shape(), dx))]
            }),
        )
    }

    /// `Σ w_i · s_i` over scalar nodes, evaluated in `f64`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(total as f32),
            Some(total),
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] as f64;
                weights
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&w, &need)| need.then(|| Tensor::scalar((g * w) as f32)))
                    .collect()
            }),
        )
    }

    /// Quotient of two scalar nodes.
    pub fn div_scalars(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.scalar(a), self.scalar(b));
        let q = x / y;
        self.push(
            Tensor::scalar(q as f32),
            Some(q),
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] as f64;
                vec![
                    ctx.needs[0].then(|| Tensor::scalar((g / y) as f32)),
                    ctx.needs[1].then(|| Tensor::scalar((-g * x / (y * y)) as f32)),
                ]
            }),
        )
    }
}
