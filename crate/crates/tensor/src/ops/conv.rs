//! Dense 3D convolutions on `[N, C, D, H, W]` volumes with cubic kernels.

use crate::{par, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.inp[0] * self.inp[1] * self.inp[2]
    }

    fn out_vol(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    /// Output positions `o` along one axis for which `o*s + kk - p` is a valid input index.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kk = kk as isize;
        let len_in = self.inp[axis] as isize;
        let len_out = self.out[axis] as isize;
        // o*s + kk - p >= 0  =>  o >= ceil((p - kk) / s)
        let lo = if p - kk > 0 { (p - kk + s - 1) / s } else { 0 };
        // o*s + kk - p <= len_in - 1  =>  o <= floor((len_in - 1 + p - kk) / s)
        let hi_num = len_in - 1 + p - kk;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = (hi + 1).min(len_out);
        (lo.min(len_out) as usize, hi.max(lo.min(len_out)) as usize)
    }
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel larger than padded input");
    (len + 2 * pad - k) / stride + 1
}

/// Correlation-form 3D convolution (what deep-learning libraries call conv).
fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: ConvGeom) -> Vec<f32> {
    let ov = g.out_vol();
    let iv = g.in_vol();
    let k3 = g.k * g.k * g.k;
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut out = vec![0f32; g.n * g.co * ov];
    par::for_each_chunk(&mut out, ov, |plane, o| {
        let (n, co) = (plane / g.co, plane % g.co);
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..g.ci {
            let xin = &x[(n * g.ci + ci) * iv..(n * g.ci + ci + 1) * iv];
            let wk = &w[(co * g.ci + ci) * k3..(co * g.ci + ci + 1) * k3];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wk[(kz * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in z0..z1 {
                            let iz = oz * g.stride + kz - g.pad;
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let orow = &mut o[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let irow = &xin[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                if g.stride == 1 {
                                    let ix0 = x0 + kx - g.pad;
                                    for (ov, &iv) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input(grad: &[f32], w: &[f32], g: ConvGeom) -> Vec<f32> {
    let ov = g.out_vol();
    let iv = g.in_vol();
    let k3 = g.k * g.k * g.k;
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let mut dx = vec![0f32; g.n * g.ci * iv];
    par::for_each_chunk(&mut dx, iv, |plane, d| {
        let (n, ci) = (plane / g.ci, plane % g.ci);
        for co in 0..g.co {
            let gout = &grad[(n * g.co + co) * ov..(n * g.co + co + 1) * ov];
            let wk = &w[(co * g.ci + ci) * k3..(co * g.ci + ci + 1) * k3];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wk[(kz * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in z0..z1 {
                            let iz = oz * g.stride + kz - g.pad;
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &gout[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let drow = &mut d[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                if g.stride == 1 {
                                    let ix0 = x0 + kx - g.pad;
                                    for (dv, &gv) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                                        *dv += wv * gv;
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn conv_backward_weight(grad: &[f32], x: &[f32], g: ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let ov = g.out_vol();
    let iv = g.in_vol();
    let k3 = g.k * g.k * g.k;
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let per_co = g.ci * k3;
    let mut dw = vec![0f32; g.co * per_co];
    par::for_each_chunk(&mut dw, per_co, |co, d| {
        for ci in 0..g.ci {
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        let mut acc = 0f64;
                        if x0 < x1 {
                            for n in 0..g.n {
                                let gout = &grad[(n * g.co + co) * ov..(n * g.co + co + 1) * ov];
                                let xin = &x[(n * g.ci + ci) * iv..(n * g.ci + ci + 1) * iv];
                                for oz in z0..z1 {
                                    let iz = oz * g.stride + kz - g.pad;
                                    for oy in y0..y1 {
                                        let iy = oy * g.stride + ky - g.pad;
                                        let grow = &gout[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                        let irow = &xin[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                        let mut s = 0f32;
                                        if g.stride == 1 {
                                            let ix0 = x0 + kx - g.pad;
                                            for (&gv, &iv) in grow[x0..x1].iter().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                                s += gv * iv;
                                            }
                                        } else {
                                            for ox in x0..x1 {
                                                s += grow[ox] * irow[ox * g.stride + kx - g.pad];
                                            }
                                        }
                                        acc += s as f64;
                                    }
                                }
                            }
                        }
                        d[ci * k3 + (kz * g.k + ky) * g.k + kx] = acc as f32;
                    }
                }
            }
        }
    });
    let db = (0..g.co)
        .map(|co| {
            let mut acc = 0f64;
            for n in 0..g.n {
                acc += grad[(n * g.co + co) * ov..(n * g.co + co + 1) * ov]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            acc as f32
        })
        .collect();
    (dw, db)
}

fn tconv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, n: usize, ci: usize, co: usize, d: [usize; 3]) -> Vec<f32> {
    let iv = d[0] * d[1] * d[2];
    let (oh, ow) = (2 * d[1], 2 * d[2]);
    let ov = 8 * iv;
    let mut out = vec![0f32; n * co * ov];
    par::for_each_chunk(&mut out, ov, |plane, o| {
        let (b, c_out) = (plane / co, plane % co);
        if let Some(bias) = bias {
            o.fill(bias[c_out]);
        }
        for c_in in 0..ci {
            let xin = &x[(b * ci + c_in) * iv..(b * ci + c_in + 1) * iv];
            let wk = &w[(c_in * co + c_out) * 8..(c_in * co + c_out + 1) * 8];
            for a in 0..2 {
                for bb in 0..2 {
                    for c in 0..2 {
                        let wv = wk[(a * 2 + bb) * 2 + c];
                        for z in 0..d[0] {
                            for y in 0..d[1] {
                                let irow = &xin[(z * d[1] + y) * d[2]..(z * d[1] + y + 1) * d[2]];
                                let base = ((2 * z + a) * oh + 2 * y + bb) * ow + c;
                                for (xx, &iv) in irow.iter().enumerate() {
                                    o[base + 2 * xx] += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn tconv_backward_input(grad: &[f32], w: &[f32], n: usize, ci: usize, co: usize, d: [usize; 3]) -> Vec<f32> {
    let iv = d[0] * d[1] * d[2];
    let (oh, ow) = (2 * d[1], 2 * d[2]);
    let ov = 8 * iv;
    let mut dx = vec![0f32; n * ci * iv];
    par::for_each_chunk(&mut dx, iv, |plane, dxp| {
        let (b, c_in) = (plane / ci, plane % ci);
        for c_out in 0..co {
            let g = &grad[(b * co + c_out) * ov..(b * co + c_out + 1) * ov];
            let wk = &w[(c_in * co + c_out) * 8..(c_in * co + c_out + 1) * 8];
            for a in 0..2 {
                for bb in 0..2 {
                    for c in 0..2 {
                        let wv = wk[(a * 2 + bb) * 2 + c];
                        for z in 0..d[0] {
                            for y in 0..d[1] {
                                let drow = &mut dxp[(z * d[1] + y) * d[2]..(z * d[1] + y + 1) * d[2]];
                                let base = ((2 * z + a) * oh + 2 * y + bb) * ow + c;
                                for (xx, dv) in drow.iter_mut().enumerate() {
                                    *dv += wv * g[base + 2 * xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn tconv_backward_weight(grad: &[f32], x: &[f32], n: usize, ci: usize, co: usize, d: [usize; 3]) -> (Vec<f32>, Vec<f32>) {
    let iv = d[0] * d[1] * d[2];
    let (oh, ow) = (2 * d[1], 2 * d[2]);
    let ov = 8 * iv;
    let mut dw = vec![0f32; ci * co * 8];
    par::for_each_chunk(&mut dw, co * 8, |c_in, dwp| {
        for c_out in 0..co {
            for a in 0..2 {
                for bb in 0..2 {
                    for c in 0..2 {
                        let mut acc = 0f64;
                        for b in 0..n {
                            let xin = &x[(b * ci + c_in) * iv..(b * ci + c_in + 1) * iv];
                            let g = &grad[(b * co + c_out) * ov..(b * co + c_out + 1) * ov];
                            for z in 0..d[0] {
                                for y in 0..d[1] {
                                    let irow = &xin[(z * d[1] + y) * d[2]..(z * d[1] + y + 1) * d[2]];
                                    let base = ((2 * z + a) * oh + 2 * y + bb) * ow + c;
                                    let mut s = 0f32;
                                    for (xx, &iv) in irow.iter().enumerate() {
                                        s += iv * g[base + 2 * xx];
                                    }
                                    acc += s as f64;
                                }
                            }
                        }
                        dwp[c_out * 8 + (a * 2 + bb) * 2 + c] = acc as f32;
                    }
                }
            }
        }
    });
    let db = (0..co)
        .map(|c_out| {
            let mut acc = 0f64;
            for b in 0..n {
                acc += grad[(b * co + c_out) * ov..(b * co + c_out + 1) * ov]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            acc as f32
        })
        .collect();
    (dw, db)
}

impl Graph {
    /// 3D convolution. `x: [N, Ci, D, H, W]`, `w: [Co, Ci, k, k, k]`, `b: [Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 5, "conv3d input must be [N, C, D, H, W], got {sx:?}");
        assert_eq!(sw.len(), 5, "conv3d weight must be [Co, Ci, k, k, k]");
        assert_eq!(sx[1], sw[1], "conv3d channel mismatch {sx:?} vs {sw:?}");
        assert!(sw[2] == sw[3] && sw[3] == sw[4], "cubic kernels only");
        let k = sw[2];
        let inp = [sx[2], sx[3], sx[4]];
        let out = inp.map(|l| conv_out_len(l, k, stride, pad));
        let geom = ConvGeom {
            n: sx[0],
            ci: sx[1],
            co: sw[0],
            k,
            stride,
            pad,
            inp,
            out,
        };
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = conv_forward(self.value(x).data(), self.value(w).data(), bias.as_deref(), geom);
        let shape = [geom.n, geom.co, out[0], out[1], out[2]];
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::new(&shape, y),
            None,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
                let dx = ctx.needs[0].then(|| Tensor::new(xv.shape(), conv_backward_input(g, wv.data(), geom)));
                let want_w = ctx.needs[1] || ctx.needs.get(2).copied().unwrap_or(false);
                let (dw, db) = if want_w {
                    let (dw, db) = conv_backward_weight(g, xv.data(), geom);
                    (Some(Tensor::new(wv.shape(), dw)), Some(Tensor::new(&[geom.co], db)))
                } else {
                    (None, None)
                };
                let mut res = vec![dx, dw.filter(|_| ctx.needs[1])];
                if ctx.inputs.len() == 3 {
                    res.push(db.filter(|_| ctx.needs[2]));
                }
                res
            }),
        )
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
    /// `x: [N, Ci, D, H, W]`, `w: [Ci, Co, 2, 2, 2]`, `b: [Co]`.
    pub fn conv_transpose3d_k2s2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 5);
        assert_eq!(sw, vec![sx[1], sw[1], 2, 2, 2], "transposed conv weight shape");
        let (n, ci, co) = (sx[0], sx[1], sw[1]);
        let d = [sx[2], sx[3], sx[4]];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = tconv_forward(self.value(x).data(), self.value(w).data(), bias.as_deref(), n, ci, co, d);
        let shape = [n, co, 2 * d[0], 2 * d[1], 2 * d[2]];
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::new(&shape, y),
            None,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
                let dx = ctx.needs[0].then(|| Tensor::new(xv.shape(), tconv_backward_input(g, wv.data(), n, ci, co, d)));
                let want_w = ctx.needs[1] || ctx.needs.get(2).copied().unwrap_or(false);
                let (dw, db) = if want_w {
                    let (dw, db) = tconv_backward_weight(g, xv.data(), n, ci, co, d);
                    (Some(Tensor::new(wv.shape(), dw)), Some(Tensor::new(&[co], db)))
                } else {
                    (None, None)
                };
                let mut res = vec![dx, dw.filter(|_| ctx.needs[1])];
                if ctx.inputs.len() == 3 {
                    res.push(db.filter(|_| ctx.needs[2]));
                }
                res
            }),
        )
    }
}

/// Plain (non-recorded) convolution used by benches and oracles.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.conv3d(xv, wv, bv, stride, pad);
    g.value(y).clone()
}
