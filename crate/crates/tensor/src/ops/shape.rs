use std::sync::Arc;

use crate::{numel, par, Graph, Tensor, Var};

impl Graph {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let exact = self.exact(a);
        self.push(
            out,
            exact,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }

    /// `out[i] = x[index[i]]` over flat storage. Indices may repeat; the
    /// backward pass accumulates.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Var {
        assert_eq!(numel(out_shape), index.len(), "gather output shape");
        let x = self.value(a).data();
        let mut out = vec![0f32; index.len()];
        {
            let index = &index;
            par::for_each_chunk(&mut out, 1 << 14, |ci, chunk| {
                let base = ci << 14;
                for (j, o) in chunk.iter_mut().enumerate() {
                    *o = x[index[base + j] as usize];
                }
            });
        }
        self.push(
            Tensor::new(out_shape, out),
            None,
            &[a],
            Box::new(move |ctx| {
                let mut dx = vec![0f32; ctx.inputs[0].len()];
                for (&i, &g) in index.iter().zip(ctx.grad.data()) {
                    dx[i as usize] += g;
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), dx))]
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), first.len(), "concat rank");
                assert_eq!(&s[..axis], &first[..axis], "concat outer dims");
                assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat inner dims");
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        self.push(
            Tensor::new(&shape, out),
            None,
            parts,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut res: Vec<Vec<f32>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (r, &l) in res.iter_mut().zip(&lens) {
                        r.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                res.into_iter()
                    .zip(&ctx.inputs)
                    .zip(&ctx.needs)
                    .map(|((d, x), &need)| need.then(|| Tensor::new(x.shape(), d)))
                    .collect()
            }),
        )
    }

    /// Selects rows of a `[R, row_len]` node.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize], row_len: usize) -> Var {
        let index: Vec<u32> = rows
            .iter()
            .flat_map(|&r| (r * row_len..(r + 1) * row_len).map(|i| i as u32))
            .collect();
        self.gather(a, Arc::new(index), &[rows.len(), row_len])
    }

    /// Transposes the last two axes of `[B, M, N]`.
    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (b, m, n) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => panic!("transpose_last2 expects rank 2 or 3"),
        };
        let mut index = Vec::with_capacity(b * m * n);
        for bi in 0..b {
            for j in 0..n {
                for i in 0..m {
                    index.push((bi * m * n + i * n + j) as u32);
                }
            }
        }
        let shape = if s.len() == 2 { vec![n, m] } else { vec![b, n, m] };
        self.gather(a, Arc::new(index), &shape)
    }
}

/// Index map converting channel-first volumes `[N, C, D, H, W]` into token
/// rows `[N * D * H * W, C]` (row-major over `(n, z, y, x)`).
pub fn volume_to_tokens_index(n: usize, c: usize, spatial: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(n * c * spatial);
    for b in 0..n {
        for s in 0..spatial {
            for ch in 0..c {
                idx.push((b * c * spatial + ch * spatial + s) as u32);
            }
        }
    }
    idx
}

/// Inverse of [`volume_to_tokens_index`].
pub fn tokens_to_volume_index(n: usize, c: usize, spatial: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(n * c * spatial);
    for b in 0..n {
        for ch in 0..c {
            for s in 0..spatial {
                idx.push(((b * spatial + s) * c + ch) as u32);
            }
        }
    }
    idx
}
