//! AdamW with decoupled weight decay and independent parameter groups.

use std::collections::HashMap;

use crate::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Group {
    name: String,
    tag: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

/// Holds moment estimates for every registered store. Stores that were never
/// registered (for example an EMA teacher) are rejected by [`AdamW::step`].
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    groups: Vec<Group>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            groups: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    pub fn add_group(&mut self, name: &str, store: &ParamStore) {
        assert!(self.groups.iter().all(|g| g.name != name), "duplicate group {name}");
        self.groups.push(Group {
            name: name.to_string(),
            tag: store.tag(),
            names: store.names().to_vec(),
            m: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            v: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            steps: vec![0; store.len()],
        });
    }

    /// Re-associates a group with a (possibly re-created) store of the same layout.
    pub fn rebind(&mut self, name: &str, store: &ParamStore) {
        let g = self.group_mut(name);
        assert_eq!(g.names, store.names(), "rebind layout mismatch for {name}");
        g.tag = store.tag();
    }

    pub fn manages(&self, store: &ParamStore) -> bool {
        self.groups.iter().any(|g| g.tag == store.tag())
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    fn group_mut(&mut self, name: &str) -> &mut Group {
        self.groups
            .iter_mut()
            .find(|g| g.name == name)
            .unwrap_or_else(|| panic!("unknown optimizer group {name}"))
    }

    /// One update of `store` (registered as `group`) at learning rate `lr`.
    /// Parameters that are frozen or have no gradient are left bitwise untouched.
    pub fn step(&mut self, group: &str, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f32) {
        let cfg = self.cfg;
        let g = self.group_mut(group);
        assert_eq!(g.tag, store.tag(), "optimizer group {group} bound to another store");
        assert_eq!(grads.len(), store.len());
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = &grads[id.0] else { continue };
            if store.is_frozen(id) {
                continue;
            }
            let i = id.0;
            g.steps[i] += 1;
            let t = g.steps[i] as i32;
            let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
            let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
            let decay = if store.get(id).shape().len() >= 2 {
                cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut g.m[i], &mut g.v[i]);
            let p = store.get_mut(id);
            for (((p, m), v), &gr) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
                let mh = *m as f64 / bc1;
                let vh = *v as f64 / bc2;
                let upd = mh / (vh.sqrt() + cfg.eps as f64) + decay as f64 * *p as f64;
                *p -= (lr as f64 * upd) as f32;
            }
        }
    }

    /// Flat, named view of the optimizer state for serialization.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for g in &self.groups {
            for (i, name) in g.names.iter().enumerate() {
                out.push((format!("{}/{}/m", g.name, name), g.m[i].clone()));
                out.push((format!("{}/{}/v", g.name, name), g.v[i].clone()));
                out.push((format!("{}/{}/t", g.name, name), Tensor::scalar(g.steps[i] as f32)));
            }
        }
        out
    }

    /// Restores state produced by [`AdamW::state`]; entries for unknown
    /// groups or parameters are ignored.
    pub fn load_state(&mut self, entries: &HashMap<String, Tensor>) {
        for g in &mut self.groups {
            for (i, name) in g.names.iter().enumerate() {
                let key = |s: &str| format!("{}/{}/{}", g.name, name, s);
                if let Some(m) = entries.get(&key("m")) {
                    if m.shape() == g.m[i].shape() {
                        g.m[i] = m.clone();
                    }
                }
                if let Some(v) = entries.get(&key("v")) {
                    if v.shape() == g.v[i].shape() {
                        g.v[i] = v.clone();
                    }
                }
                if let Some(t) = entries.get(&key("t")) {
                    g.steps[i] = t.data()[0] as u64;
                }
            }
        }
    }
}
