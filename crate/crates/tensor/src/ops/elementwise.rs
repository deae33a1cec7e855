use std::sync::Arc;

use crate::{par, Graph, Tensor, Var};

const CHUNK: usize = 1 << 14;

pub(crate) fn par_map(input: &[f32], f: impl Fn(f32) -> f32 + Sync + Send) -> Vec<f32> {
    let mut out = vec![0.0f32; input.len()];
    par::for_each_chunk(&mut out, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        let n = chunk.len();
        for (o, &x) in chunk.iter_mut().zip(&input[base..base + n]) {
            *o = f(x);
        }
    });
    out
}

pub(crate) fn par_zip(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32 + Sync + Send) -> Vec<f32> {
    assert_eq!(a.len(), b.len());
    let mut out = vec![0.0f32; a.len()];
    par::for_each_chunk(&mut out, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        let n = chunk.len();
        for ((o, &x), &y) in chunk.iter_mut().zip(&a[base..base + n]).zip(&b[base..base + n]) {
            *o = f(x, y);
        }
    });
    out
}

fn par_zip3(
    a: &[f32],
    b: &[f32],
    c: &[f32],
    f: impl Fn(f32, f32, f32) -> f32 + Sync + Send,
) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    par::for_each_chunk(&mut out, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            let i = base + j;
            *o = f(a[i], b[i], c[i]);
        }
    });
    out
}

/// Elementwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Exp,
    Abs,
    Square,
    Neg,
    /// `sqrt(x + eps)`
    SqrtEps(f32),
    /// Clamp with zero gradient outside `[lo, hi]`.
    Clamp(f32, f32),
    LeakyRelu(f32),
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

impl Unary {
    fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Neg => -x,
            Unary::SqrtEps(eps) => (x + eps).sqrt(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
            Unary::SqrtEps(_) => 0.5 / y,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

impl Graph {
    pub fn unary(&mut self, a: Var, op: Unary) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), par_map(x.data(), |v| op.apply(v)));
        self.push(
            out,
            None,
            &[a],
            Box::new(move |ctx| {
                let x = ctx.inputs[0];
                let g = par_zip3(x.data(), ctx.output.data(), ctx.grad.data(), |x, y, g| {
                    g * op.deriv(x, y)
                });
                vec![Some(Tensor::new(x.shape(), g))]
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let out = Tensor::new(x.shape(), par_zip(x.data(), y.data(), |p, q| p + q));
        self.push(
            out,
            None,
            &[a, b],
            Box::new(|ctx| {
                let g = ctx.grad;
                vec![
                    ctx.needs[0].then(|| g.clone()),
                    ctx.needs[1].then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let out = Tensor::new(x.shape(), par_zip(x.data(), y.data(), |p, q| p - q));
        self.push(
            out,
            None,
            &[a, b],
            Box::new(|ctx| {
                let g = ctx.grad;
                vec![
                    ctx.needs[0].then(|| g.clone()),
                    ctx.needs[1].then(|| g.map(|v| -v)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let out = Tensor::new(x.shape(), par_zip(x.data(), y.data(), |p, q| p * q));
        self.push(
            out,
            None,
            &[a, b],
            Box::new(|ctx| {
                let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                vec![
                    ctx.needs[0].then(|| Tensor::new(x.shape(), par_zip(g.data(), y.data(), |g, y| g * y))),
                    ctx.needs[1].then(|| Tensor::new(x.shape(), par_zip(g.data(), x.data(), |g, x| g * x))),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "div shape mismatch");
        let out = Tensor::new(x.shape(), par_zip(x.data(), y.data(), |p, q| p / q));
        self.push(
            out,
            None,
            &[a, b],
            Box::new(|ctx| {
                let (y, out, g) = (ctx.inputs[1], ctx.output, ctx.grad);
                vec![
                    ctx.needs[0].then(|| Tensor::new(y.shape(), par_zip(g.data(), y.data(), |g, y| g / y))),
                    ctx.needs[1].then(|| {
                        Tensor::new(
                            y.shape(),
                            par_zip3(g.data(), out.data(), y.data(), |g, o, y| -g * o / y),
                        )
                    }),
                ]
            }),
        )
    }

    /// `a * s` for a compile-time scalar `s`.
    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let x = self.value(a);
        let exact = self.exact(a).map(|e| e * s as f64);
        let out = Tensor::new(x.shape(), par_map(x.data(), |v| v * s));
        self.push(
            out,
            exact,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let x = self.value(a);
        let exact = self.exact(a).map(|e| e + s as f64);
        let out = Tensor::new(x.shape(), par_map(x.data(), |v| v + s));
        self.push(out, exact, &[a], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar_var expects a scalar");
        let k = self.value(s).data()[0];
        let x = self.value(a);
        let out = Tensor::new(x.shape(), par_map(x.data(), |v| v * k));
        self.push(
            out,
            None,
            &[a, s],
            Box::new(|ctx| {
                let (x, s, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let k = s.data()[0];
                vec![
                    ctx.needs[0].then(|| g.map(|v| v * k)),
                    ctx.needs[1].then(|| {
                        let d: f64 = x
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &g)| x as f64 * g as f64)
                            .sum();
                        Tensor::new(s.shape(), vec![d as f32])
                    }),
                ]
            }),
        )
    }

    /// `1 / s` for a scalar node.
    pub fn recip(&mut self, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let v = self.scalar(s);
        let out = Tensor::new(self.shape(s), vec![(1.0 / v) as f32]);
        self.push(
            out,
            Some(1.0 / v),
            &[s],
            Box::new(|ctx| {
                let y = ctx.output.data()[0];
                vec![Some(Tensor::new(ctx.output.shape(), vec![-ctx.grad.data()[0] * y * y]))]
            }),
        )
    }

    /// `y[i] = x[i] * gamma[c] + beta[c]` with `c = (i / inner) % channels`.
    ///
    /// With `inner = 1` this is a per-feature affine over the last axis; with
    /// `inner` equal to the spatial size it is a per-channel affine of an
    /// `[N, C, spatial]` volume.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        channels: usize,
        inner: usize,
    ) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len() % (channels * inner), 0, "channel_affine layout");
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        if let Some(g) = &gv {
            assert_eq!(g.len(), channels);
        }
        if let Some(b) = &bv {
            assert_eq!(b.len(), channels);
        }
        let block = channels * inner;
        let mut out = xv.data().to_vec();
        par::for_each_chunk(&mut out, block, |_, chunk| {
            for c in 0..channels {
                let s = gv.as_ref().map_or(1.0, |g| g[c]);
                let t = bv.as_ref().map_or(0.0, |b| b[c]);
                for v in &mut chunk[c * inner..(c + 1) * inner] {
                    *v = *v * s + t;
                }
            }
        });
        let out = Tensor::new(xv.shape(), out);
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        let has_gamma = gamma.is_some();
        let has_beta = beta.is_some();
        self.push(
            out,
            None,
            &parents,
            Box::new(move |ctx| {
                let x = ctx.inputs[0];
                let g = ctx.grad;
                let gamma = has_gamma.then(|| ctx.inputs[1].data());
                let mut res = Vec::with_capacity(3);
                res.push(ctx.needs[0].then(|| match gamma {
                    None => g.clone(),
                    Some(gm) => {
                        let mut dx = g.data().to_vec();
                        par::for_each_chunk(&mut dx, block, |_, chunk| {
                            for c in 0..channels {
                                for v in &mut chunk[c * inner..(c + 1) * inner] {
                                    *v *= gm[c];
                                }
                            }
                        });
                        Tensor::new(x.shape(), dx)
                    }
                }));
                let reduce = |weighted: bool| {
                    let mut acc = vec![0f64; channels];
                    for (xs, gs) in x.data().chunks(block).zip(g.data().chunks(block)) {
                        for c in 0..channels {
                            let r = c * inner..(c + 1) * inner;
                            acc[c] += if weighted {
                                xs[r.clone()]
                                    .iter()
                                    .zip(&gs[r])
                                    .map(|(&x, &g)| x as f64 * g as f64)
                                    .sum::<f64>()
                            } else {
                                gs[r].iter().map(|&g| g as f64).sum::<f64>()
                            };
                        }
                    }
                    Tensor::new(&[channels], acc.into_iter().map(|v| v as f32).collect())
                };
                let mut k = 1;
                if has_gamma {
                    res.push(ctx.needs[k].then(|| reduce(true)));
                    k += 1;
                }
                if has_beta {
                    res.push(ctx.needs[k].then(|| reduce(false)));
                }
                res
            }),
        )
    }
}

/// Shared constant tensor used by ops that take fixed (non-differentiable) data.
pub type ConstTensor = Arc<Tensor>;
