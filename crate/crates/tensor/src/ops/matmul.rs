use crate::{par, Graph, Tensor, Var};

/// `c[m, n] = a[m, k] · b[k, n]` for contiguous row-major operands.
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0f32; m * n];
    if n == 0 {
        return c;
    }
    let rows_per_chunk = (4096 / n.max(1)).max(1);
    par::for_each_chunk(&mut c, rows_per_chunk * n, |ci, chunk| {
        let r0 = ci * rows_per_chunk;
        for (ri, crow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

/// Transpose of a contiguous `[rows, cols]` matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn batched(
    a: &[f32],
    b: &[f32],
    batch: usize,
    (m, k, n): (usize, usize, usize),
    ta: bool,
    tb: bool,
) -> Vec<f32> {
    let outs = par::map_range(batch, |bi| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let a_owned;
        let a_nn = if ta {
            a_owned = transpose(ab, k, m);
            &a_owned[..]
        } else {
            ab
        };
        let b_owned;
        let b_nn = if tb {
            b_owned = transpose(bb, n, k);
            &b_owned[..]
        } else {
            bb
        };
        // Batches already run in parallel; the inner product stays serial.
        matmul_serial(a_nn, b_nn, m, k, n)
    });
    outs.concat()
}

fn matmul_serial(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

impl Graph {
    /// Batched product `op(a) · op(b)` where `op` optionally transposes the
    /// last two axes. Operands are `[B, r, c]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} {sb:?}");
        let out = batched(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            (m, k, n),
            ta,
            tb,
        );
        self.push(
            Tensor::new(&[batch, m, n], out),
            None,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                // d op(a) = g · op(b)^T ; d op(b) = op(a)^T · g
                let da = ctx.needs[0].then(|| {
                    let d = if ta {
                        // a stored [k, m]: da = op(b) · g^T
                        batched(bv, g, batch, (k, n, m), tb, true)
                    } else {
                        batched(g, bv, batch, (m, n, k), false, !tb)
                    };
                    Tensor::new(ctx.inputs[0].shape(), d)
                });
                let db = ctx.needs[1].then(|| {
                    let d = if tb {
                        // b stored [n, k]: db = g^T · op(a)
                        batched(g, av, batch, (n, m, k), true, ta)
                    } else {
                        batched(av, g, batch, (k, m, n), !ta, false)
                    };
                    Tensor::new(ctx.inputs[1].shape(), d)
                });
                vec![da, db]
            }),
        )
    }

    /// Affine map of rows: `x[R, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sw.len(), 2, "linear weight must be [in, out]");
        let (fan_in, fan_out) = (sw[0], sw[1]);
        assert_eq!(sx[sx.len() - 1], fan_in, "linear input width {sx:?} vs {sw:?}");
        let rows = self.value(x).len() / fan_in;
        let mut out = matmul_nn(self.value(x).data(), self.value(w).data(), rows, fan_in, fan_out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), fan_out);
            for row in out.chunks_mut(fan_out) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = fan_out;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::new(&shape, out),
            None,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
                let dx = ctx.needs[0].then(|| {
                    let wt = transpose(wv.data(), fan_in, fan_out);
                    Tensor::new(xv.shape(), matmul_nn(g, &wt, rows, fan_out, fan_in))
                });
                let dw = ctx.needs[1].then(|| {
                    let xt = transpose(xv.data(), rows, fan_in);
                    Tensor::new(wv.shape(), matmul_nn(&xt, g, fan_in, rows, fan_out))
                });
                let mut res = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut acc = vec![0f64; fan_out];
                        for row in g.chunks(fan_out) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v as f64;
                            }
                        }
                        Tensor::new(&[fan_out], acc.into_iter().map(|v| v as f32).collect())
                    }));
                }
                res
            }),
        )
    }
}
