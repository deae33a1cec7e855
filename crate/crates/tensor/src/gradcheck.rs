//! Central finite differences, used as an independent check of `backward`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{ParamId, ParamStore, Tensor};

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Both derivatives below this magnitude count as agreeing zeros.
pub const ZERO_FLOOR: f64 = 1e-7;

impl Probe {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < ZERO_FLOOR {
            0.0
        } else {
            self.abs_err() / scale
        }
    }
}

fn central<F: FnMut(f32) -> f64>(x0: f32, eps: f32, mut f: F) -> f64 {
    let (xp, xm) = (x0 + eps, x0 - eps);
    let (fp, fm) = (f(xp), f(xm));
    (fp - fm) / (xp as f64 - xm as f64)
}

/// Probes parameter coordinates of `store`; `loss` is evaluated with the
/// store perturbed in place and must not mutate it otherwise.
pub fn probe_params<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    analytic: &[Option<Tensor>],
    eps: f32,
    mut loss: F,
) -> Vec<Probe>
where
    F: FnMut(&ParamStore) -> f64,
{
    coords
        .iter()
        .map(|&(id, i)| {
            let x0 = store.get(id).data()[i];
            let numeric = central(x0, eps, |x| {
                store.get_mut(id).data_mut()[i] = x;
                loss(store)
            });
            store.get_mut(id).data_mut()[i] = x0;
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[i] as f64);
            Probe {
                label: format!("{}[{}]", store.name(id), i),
                analytic: a,
                numeric,
            }
        })
        .collect()
}

/// Probes coordinates of a free input tensor.
pub fn probe_input<F>(x: &mut Tensor, coords: &[usize], analytic: &Tensor, eps: f32, mut loss: F) -> Vec<Probe>
where
    F: FnMut(&Tensor) -> f64,
{
    coords
        .iter()
        .map(|&i| {
            let x0 = x.data()[i];
            let numeric = central(x0, eps, |v| {
                x.data_mut()[i] = v;
                loss(x)
            });
            x.data_mut()[i] = x0;
            Probe {
                label: format!("x[{i}]"),
                analytic: analytic.data()[i] as f64,
                numeric,
            }
        })
        .collect()
}

/// Random coordinates among parameters that received a gradient, spread
/// across tensors before repeating any tensor.
pub fn sample_param_coords<R: Rng>(
    store: &ParamStore,
    grads: &[Option<Tensor>],
    n: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let mut ids: Vec<ParamId> = store.ids().filter(|id| grads[id.0].is_some()).collect();
    assert!(!ids.is_empty(), "no parameter received a gradient");
    ids.shuffle(rng);
    (0..n)
        .map(|k| {
            let id = ids[k % ids.len()];
            (id, rng.gen_range(0..store.get(id).len()))
        })
        .collect()
}
