use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Bindings, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Loss above which training is considered divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters missing from `grads` are left unchanged.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let mut scale = 1.0f64;
        if let Some(clip) = c.clip_norm {
            let mut sq = 0.0f64;
            for g in grads.values() {
                for &x in g.data() {
                    sq += (x as f64) * (x as f64);
                }
            }
            let norm = sq.sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name:?}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gr as f64 * scale;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gr;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gr * gr;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                *w = (*w as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Runs `steps` optimizer steps. `loss_fn` builds the loss for one step on a
/// fresh graph; it receives a step-seeded RNG for batch sampling so the run
/// depends only on `seed`.
pub fn train<L>(
    store: &mut ParamStore,
    config: AdamConfig,
    steps: usize,
    seed: u64,
    mut loss_fn: L,
) -> Result<TrainReport>
where
    L: FnMut(&mut Graph<f32>, &Bindings, &mut ChaCha8Rng) -> Result<Var>,
{
    let mut opt = Adam::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::<f32>::new();
        let bindings = g.bind(&store.tensors());
        let loss = loss_fn(&mut g, &bindings, &mut rng)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() || value > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        let grads = g.backward(loss)?.named(&g, &bindings);
        opt.update(store, &grads)?;
        if step % 100 == 0 {
            log::debug!("step {step}: loss {value:.6}");
        }
    }
    Ok(TrainReport { losses })
}
