use std::sync::Arc;

use lsmfm_tensor::gradcheck::probe_input;
use lsmfm_tensor::{Border, Graph, Tensor, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks d/dx of `sum(f(x) * r)` for a random probe tensor `r`.
fn check_unary_input(shape: &[usize], seed: u64, lo: f32, hi: f32, f: impl Fn(&mut Graph, Var) -> Var) {
    let mut r = rng(seed);
    let mut x = Tensor::new(shape, (0..shape.iter().product()).map(|_| r.gen_range(lo..hi)).collect());
    let weights = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = f(&mut g, xv);
        Tensor::uniform(g.shape(y), 1.0, &mut r)
    };
    let loss = |g: &mut Graph, xv: Var| {
        let y = f(g, xv);
        let w = g.constant(weights.clone());
        let p = g.mul(y, w);
        g.sum(p)
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let l = loss(&mut g, xv);
    g.backward(l);
    let analytic = g.grad(xv).expect("gradient reached input").clone();
    let coords: Vec<usize> = (0..12).map(|_| r.gen_range(0..x.len())).collect();
    let probes = probe_input(&mut x, &coords, &analytic, 1e-2, |x| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = loss(&mut g, xv);
        g.scalar(l)
    });
    for p in probes {
        assert!(
            p.rel_err() < 2e-3 || p.abs_err() < 1e-4,
            "{}: analytic {} numeric {}",
            p.label,
            p.analytic,
            p.numeric
        );
    }
}

#[test]
fn unary_ops() {
    for (i, op) in [Unary::Silu, Unary::Gelu, Unary::Sigmoid, Unary::Exp, Unary::Square, Unary::Neg]
        .into_iter()
        .enumerate()
    {
        check_unary_input(&[3, 7], i as u64, -2.0, 2.0, |g, x| g.unary(x, op));
    }
    check_unary_input(&[20], 40, 0.1, 2.0, |g, x| g.unary(x, Unary::SqrtEps(1e-6)));
    check_unary_input(&[20], 41, 0.1, 2.0, |g, x| g.abs(x));
}

#[test]
fn binary_and_scalar_ops() {
    let other = Tensor::uniform(&[4, 5], 1.0, &mut rng(9)).map(|v| v + 2.0);
    for k in 0..4 {
        let o = other.clone();
        check_unary_input(&[4, 5], 10 + k, -1.0, 1.0, move |g, x| {
            let b = g.constant(o.clone());
            match k {
                0 => g.add(x, b),
                1 => g.sub(b, x),
                2 => g.mul(x, b),
                _ => g.div(b, x),
            }
        });
    }
    check_unary_input(&[4, 5], 20, 0.5, 1.5, |g, x| {
        let y = g.div(x, x);
        g.add(y, x)
    });
    check_unary_input(&[6], 21, -1.0, 1.0, |g, x| {
        let s = g.sum(x);
        let s2 = g.scale(s, 0.5);
        let s3 = g_add_one(g, s2);
        let r = g.recip(s3);
        g.mul_scalar_var(x, r)
    });
    check_unary_input(&[6], 22, 0.5, 1.0, |g, x| {
        let a = g.mean(x);
        let b = g.sum(x);
        let q = g.div_scalars(a, b);
        let w = g.weighted_sum(&[(q, 2.0), (a, -0.5)]);
        g.reshape(w, &[1])
    });
}

fn g_add_one(g: &mut Graph, v: Var) -> Var {
    g.add_scalar(v, 3.0)
}

#[test]
fn affine_and_reductions() {
    let gamma = Tensor::new(&[3], vec![0.5, -1.0, 2.0]);
    let beta = Tensor::new(&[3], vec![0.1, 0.2, 0.3]);
    check_unary_input(&[2, 3, 4], 30, -1.0, 1.0, |g, x| {
        let gm = g.constant(gamma.clone());
        let bt = g.constant(beta.clone());
        g.channel_affine(x, Some(gm), Some(bt), 3, 4)
    });
    // gradient with respect to gamma and beta
    let xs = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng(31));
    check_unary_input(&[3], 32, -1.0, 1.0, |g, gm| {
        let x = g.constant(xs.clone());
        g.channel_affine(x, Some(gm), None, 3, 4)
    });
    check_unary_input(&[3], 33, -1.0, 1.0, |g, bt| {
        let x = g.constant(xs.clone());
        g.channel_affine(x, None, Some(bt), 3, 1)
    });
    check_unary_input(&[5, 6], 34, -1.0, 1.0, |g, x| g.mean_rows(x, 6));
    check_unary_input(&[5, 6], 35, -1.0, 1.0, |g, x| g.sum_rows(x, 3));
}

#[test]
fn shape_ops() {
    let idx = Arc::new(vec![3u32, 0, 0, 5, 7, 2]);
    check_unary_input(&[8], 40, -1.0, 1.0, move |g, x| g.gather(x, idx.clone(), &[2, 3]));
    let other = Tensor::uniform(&[2, 2, 3], 1.0, &mut rng(41));
    check_unary_input(&[2, 1, 3], 42, -1.0, 1.0, |g, x| {
        let o = g.constant(other.clone());
        g.concat(&[o, x, o], 1)
    });
    check_unary_input(&[2, 3, 4], 43, -1.0, 1.0, |g, x| g.transpose_last2(x));
}

#[test]
fn bmm_all_transpose_modes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let bshape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let b = Tensor::uniform(&bshape, 1.0, &mut rng(50));
        let ashape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        check_unary_input(&ashape, 51, -1.0, 1.0, |g, x| {
            let bv = g.constant(b.clone());
            g.bmm(x, bv, ta, tb)
        });
        let a = Tensor::uniform(&ashape, 1.0, &mut rng(52));
        check_unary_input(&bshape, 53, -1.0, 1.0, |g, x| {
            let av = g.constant(a.clone());
            g.bmm(av, x, ta, tb)
        });
    }
}

#[test]
fn linear_layer() {
    let w = Tensor::uniform(&[4, 3], 1.0, &mut rng(60));
    let b = Tensor::uniform(&[3], 1.0, &mut rng(61));
    let x = Tensor::uniform(&[5, 4], 1.0, &mut rng(62));
    check_unary_input(&[5, 4], 63, -1.0, 1.0, |g, x| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        g.linear(x, wv, Some(bv))
    });
    check_unary_input(&[4, 3], 64, -1.0, 1.0, |g, wv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        g.linear(xv, wv, Some(bv))
    });
    check_unary_input(&[3], 65, -1.0, 1.0, |g, bv| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        g.linear(xv, wv, Some(bv))
    });
}

#[test]
fn conv3d_input_weight_bias() {
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let w = Tensor::uniform(&[3, 2, k, k, k], 0.5, &mut rng(70));
        let b = Tensor::uniform(&[3], 0.5, &mut rng(71));
        let x = Tensor::uniform(&[2, 2, 6, 5, 4], 1.0, &mut rng(72));
        check_unary_input(&[2, 2, 6, 5, 4], 73, -1.0, 1.0, |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv3d(xv, wv, Some(bv), stride, pad)
        });
        check_unary_input(&[3, 2, k, k, k], 74, -1.0, 1.0, |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv3d(xv, wv, Some(bv), stride, pad)
        });
        check_unary_input(&[3], 75, -1.0, 1.0, |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv3d(xv, wv, Some(bv), stride, pad)
        });
    }
}

#[test]
fn transposed_conv() {
    let w = Tensor::uniform(&[2, 3, 2, 2, 2], 0.5, &mut rng(80));
    let b = Tensor::uniform(&[3], 0.5, &mut rng(81));
    let x = Tensor::uniform(&[2, 2, 3, 2, 4], 1.0, &mut rng(82));
    check_unary_input(&[2, 2, 3, 2, 4], 83, -1.0, 1.0, |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        g.conv_transpose3d_k2s2(xv, wv, Some(bv))
    });
    check_unary_input(&[2, 3, 2, 2, 2], 84, -1.0, 1.0, |g, wv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        g.conv_transpose3d_k2s2(xv, wv, Some(bv))
    });
    check_unary_input(&[3], 85, -1.0, 1.0, |g, bv| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        g.conv_transpose3d_k2s2(xv, wv, Some(bv))
    });
}

#[test]
fn row_normalizers() {
    check_unary_input(&[4, 9], 90, -1.0, 1.0, |g, x| g.normalize_rows(x, 9, 1e-5));
    check_unary_input(&[4, 9], 91, -1.0, 1.0, |g, x| g.l2_normalize_rows(x, 9, 1e-12));
    check_unary_input(&[4, 9], 92, -2.0, 2.0, |g, x| g.softmax_rows(x, 9));
    check_unary_input(&[4, 9], 93, -2.0, 2.0, |g, x| g.log_softmax_rows(x, 9));
}

#[test]
fn axis_filters() {
    let k = vec![0.2, -0.5, 1.0, 0.3];
    for axis in 0..3 {
        check_unary_input(&[2, 5, 6, 7], 100 + axis as u64, -1.0, 1.0, |g, x| g.filter_axis(x, axis, &k, Border::Valid));
        check_unary_input(&[2, 5, 6, 7], 110 + axis as u64, -1.0, 1.0, |g, x| {
            g.filter_axis(x, axis, &k, Border::Replicate)
        });
    }
}

#[test]
fn fused_losses() {
    let target = Arc::new(Tensor::new(&[2, 6], vec![1., 0., 1., 1., 0., 0., 0., 0., 1., 0., 1., 1.]));
    let t = target.clone();
    check_unary_input(&[2, 6], 120, -3.0, 3.0, move |g, x| {
        let l = g.bce_with_logits_mean(x, t.clone());
        g.reshape(l, &[1])
    });
    let t = target.clone();
    check_unary_input(&[2, 6], 121, -3.0, 3.0, move |g, x| {
        let l = g.focal_with_logits_mean(x, t.clone(), 2.0);
        g.reshape(l, &[1])
    });
    let t = target.clone();
    check_unary_input(&[2, 6], 122, 0.05, 0.95, move |g, x| {
        let l = g.soft_dice_loss(x, t.clone(), 6, 1e-5);
        g.reshape(l, &[1])
    });
}

#[test]
fn focal_with_zero_gamma_is_bce() {
    let target = Arc::new(Tensor::new(&[4], vec![1., 0., 1., 0.]));
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[4], vec![-1.5, 0.3, 2.0, -0.2]));
    let a = g.focal_with_logits_mean(x, target.clone(), 0.0);
    let b = g.bce_with_logits_mean(x, target);
    assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-12);
}

/// Direct definition of a padded, strided correlation.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (sx, sw) = (x.shape(), w.shape());
    let (n, ci, d, h, wd) = (sx[0], sx[1], sx[2], sx[3], sx[4]);
    let (co, k) = (sw[0], sw[2]);
    let o = |l: usize| (l + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut out = vec![0f32; n * co * od * oh * ow];
    for b in 0..n {
        for c in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0f64;
                        for c_in in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((b * ci + c_in) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((c * ci + c_in) * k + kz) * k + ky) * k + kx;
                                        acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                    }
                                }
                            }
                        }
                        out[(((b * co + c) * od + z) * oh + y) * ow + xx] = acc as f32;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, od, oh, ow], out)
}

#[test]
fn conv3d_matches_direct_definition() {
    let mut r = rng(130);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (5, 1, 2), (2, 2, 0), (3, 1, 0)] {
        let x = Tensor::uniform(&[2, 3, 7, 6, 9], 1.0, &mut r);
        let w = Tensor::uniform(&[4, 3, k, k, k], 1.0, &mut r);
        let fast = lsmfm_tensor::ops::conv::conv3d_forward(&x, &w, None, stride, pad);
        let slow = naive_conv(&x, &w, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-4, "k={k} s={stride} p={pad}");
    }
}

#[test]
fn transposed_conv_inverts_block_layout() {
    // With identity-like weights every input voxel lands in its 2x2x2 block.
    let x = Tensor::new(&[1, 1, 1, 1, 2], vec![3.0, -1.0]);
    let w = Tensor::ones(&[1, 1, 2, 2, 2]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let y = g.conv_transpose3d_k2s2(xv, wv, None);
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 2, 2, 4]);
    for row in v.data().chunks(4) {
        assert_eq!(row, &[3.0, 3.0, -1.0, -1.0]);
    }
}

#[test]
fn frozen_and_constant_inputs_receive_no_gradient() {
    let mut store = lsmfm_tensor::ParamStore::new();
    let a = store.add("a", Tensor::ones(&[3]));
    let b = store.add("b", Tensor::ones(&[3]));
    store.set_frozen(b, true);
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let bv = g.param(&store, b);
    let p = g.mul(av, bv);
    let l = g.sum(p);
    g.backward(l);
    let grads = g.param_grads(&store);
    assert!(grads[a.0].is_some());
    assert!(grads[b.0].is_none());
}
