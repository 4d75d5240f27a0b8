//! Named trainable weights and their placement on a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Name-ordered tensor collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names with all-zero tensors.
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self { tensors }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.tensors.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(name.clone()),
            None => Ok(()),
        }
    }
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Places every parameter on `tape`; tracked iff `trainable`.
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|(k, t)| {
                let var = if trainable {
                    tape.leaf(t.clone().with_grad())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    /// Binds names to vars already on a tape.
    pub fn from_vars<I: IntoIterator<Item = (String, Var)>>(pairs: I) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Running per-channel statistics of the encoder batch norms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl RunningStats {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layers = cfg.enc_widths.iter().map(|&c| (vec![0.0; c], vec![1.0; c])).collect();
        Self { layers }
    }

    pub fn round_to_f32(&mut self) {
        for (m, v) in &mut self.layers {
            for x in m.iter_mut().chain(v.iter_mut()) {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Weights plus non-trainable state of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub running: RunningStats,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

fn dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Bias that makes `softplus(bias)` equal `step`.
pub fn inverse_softplus(step: f64) -> f64 {
    step.exp_m1().ln()
}

impl Model {
    /// Fresh weights drawn deterministically from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();

        let mut c_in = c.d_x;
        for (i, &w) in c.enc_widths.iter().enumerate() {
            let fan_in = c_in * c.enc_kernel;
            let bound = (6.0 / (fan_in + w * c.enc_kernel) as f64).sqrt();
            p.insert(format!("enc.conv{i}.w"), uniform(&mut rng, &[w, c_in, c.enc_kernel], bound));
            p.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[w]));
            if c.batch_norm {
                p.insert(format!("enc.bn{i}.gamma"), Tensor::filled(&[w], 1.0));
                p.insert(format!("enc.bn{i}.beta"), Tensor::zeros(&[w]));
            }
            c_in = w;
        }
        dense(&mut p, &mut rng, "enc.fc", c_in, c.enc_hidden);
        dense(&mut p, &mut rng, "enc.mu", c.enc_hidden, c.d_z);
        dense(&mut p, &mut rng, "enc.logvar", c.enc_hidden, c.d_z);

        p.insert("dec.embed", uniform(&mut rng, &[c.vocab, c.d_p], 1.0));
        p.insert("dec.spk", uniform(&mut rng, &[c.n_speakers, c.d_spk], 0.5));
        dense(&mut p, &mut rng, "dec.fu", c.d_spk, c.d_p);
        dense(&mut p, &mut rng, "dec.fo", c.d_spk, c.d_buf);
        dense(&mut p, &mut rng, "dec.att1", c.buffer_len(), c.att_hidden);
        dense(&mut p, &mut rng, "dec.att2", c.att_hidden, 3 * c.att_components);
        {
            // head layout: [mixture logits | log widths | raw increments]
            let kk = c.att_components;
            let b = p.get_mut("dec.att2.b")?;
            for i in 0..kk {
                b.data_mut()[2 * kk + i] = inverse_softplus(c.att_init_step);
            }
        }
        dense(&mut p, &mut rng, "dec.nu1", c.update_input_len(), c.hidden);
        dense(&mut p, &mut rng, "dec.nu2", c.hidden, c.d_buf);
        dense(&mut p, &mut rng, "dec.no1", c.buffer_len(), c.hidden);
        dense(&mut p, &mut rng, "dec.no2", c.hidden, c.d_x);
        p.round_to_f32();

        Ok(Self {
            config: config.clone(),
            params: p,
            running: RunningStats::new(config),
        })
    }

    /// Whether parameter `name` is updated in the current mode.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.config.mode.uses_latent() || !name.starts_with("enc.")
    }
}
