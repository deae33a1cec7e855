//! The rayon and sequential paths must agree bit for bit.

use lsmfm_tensor::{par, Border, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(x: &Tensor, w: &Tensor, stride: usize) -> (Tensor, Tensor, Tensor) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let wv = g.leaf(w.clone(), true);
    let y = g.conv3d(xv, wv, None, stride, 1);
    let y = g.silu(y);
    let f = g.filter_axis(y, 1, &[0.25, 0.5, 0.25], Border::Replicate);
    let n = g.normalize_rows(f, 16, 1e-5);
    let l = g.mean(n);
    g.backward(l);
    (
        g.value(n).clone(),
        g.grad(xv).unwrap().clone(),
        g.grad(wv).unwrap().clone(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn conv_stack_is_deterministic_across_modes(seed in 0u64..1000, stride in 1usize..3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[2, 3, 8, 8, 8], 1.0, &mut r);
        let w = Tensor::uniform(&[4, 3, 3, 3, 3], 0.3, &mut r);
        par::set_parallel(true);
        let a = run(&x, &w, stride);
        par::set_parallel(false);
        let b = run(&x, &w, stride);
        par::set_parallel(true);
        prop_assert!(a.0.bit_eq(&b.0));
        prop_assert!(a.1.bit_eq(&b.1));
        prop_assert!(a.2.bit_eq(&b.2));
    }
}
