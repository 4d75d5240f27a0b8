//! Approximate posterior over the global latent code.
//!
//! A stack of stride-2 convolutions (each followed by batch norm, ReLU and
//! dropout) runs over time; a global max-pool removes the time axis and
//! fully connected layers emit the Gaussian mean and log-variance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ENC_STRIDE, LOG_VAR_CLAMP};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, Model, RunningStats};

/// Diagonal Gaussian `q(z|x)` for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl PosteriorParams {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.data().iter().map(|l| (0.5 * l).exp()).collect()
    }
}

/// A draw of the latent code, shape `[d_z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
}

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Ok(Self {
            z: Tensor::new(&[n], values)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.z.numel()
    }
}

/// Training mode draws dropout masks from the caller's generator and
/// normalizes with batch statistics; eval mode is deterministic.
pub enum Phase<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// Tape outputs of a batched encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B×d_z]`
    pub mu: Var,
    /// `[B×d_z]`, clamped.
    pub log_var: Var,
    /// Training-mode batch-norm nodes, one per conv layer.
    pub norm_nodes: Vec<Var>,
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, m)
}

/// Encodes a batch of `[T×d_x]` sequences.
pub fn encode_batch(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    running: &RunningStats,
    frames: &[&Tensor],
    phase: &mut Phase<'_>,
) -> Result<EncoderOutput> {
    if frames.is_empty() {
        return Err(Error::EmptySequence("encoder batch"));
    }
    let min = cfg.min_frames();
    let mut hs = Vec::with_capacity(frames.len());
    for f in frames {
        if f.rank() != 2 || f.cols() != cfg.d_x {
            return Err(Error::shape("encode", f.shape(), &[0, cfg.d_x]));
        }
        if f.rows() < min {
            return Err(Error::InputTooShort {
                what: "encoder",
                len: f.rows(),
                min,
            });
        }
        let v = tape.constant((*f).clone());
        hs.push(tape.transpose(v)?);
    }

    let pad = (cfg.enc_kernel - 1) / 2;
    let mut norm_nodes = Vec::new();
    for layer in 0..cfg.enc_widths.len() {
        let w = bound.var(&format!("enc.conv{layer}.w"))?;
        let b = bound.var(&format!("enc.conv{layer}.b"))?;
        let mut outs = Vec::with_capacity(hs.len());
        for h in &hs {
            outs.push(tape.conv1d(*h, w, b, ENC_STRIDE, pad)?);
        }
        if cfg.batch_norm {
            let lens: Vec<usize> = outs.iter().map(|o| tape.value(*o).cols()).collect();
            let joined = tape.concat_cols(&outs)?;
            let gamma = bound.var(&format!("enc.bn{layer}.gamma"))?;
            let beta = bound.var(&format!("enc.bn{layer}.beta"))?;
            let normed = match phase {
                Phase::Train(_) => {
                    let n = tape.batch_norm(joined, gamma, beta)?;
                    norm_nodes.push(n);
                    n
                }
                Phase::Eval => {
                    let (m, v) = &running.layers[layer];
                    tape.batch_norm_eval(joined, gamma, beta, m, v)?
                }
            };
            let mut act = tape.relu(normed);
            if let Phase::Train(rng) = phase {
                act = dropout(tape, act, cfg.dropout, rng)?;
            }
            let mut start = 0;
            outs.clear();
            for len in lens {
                outs.push(tape.slice_cols(act, start, start + len)?);
                start += len;
            }
        } else {
            for o in outs.iter_mut() {
                *o = tape.relu(*o);
                if let Phase::Train(rng) = phase {
                    *o = dropout(tape, *o, cfg.dropout, rng)?;
                }
            }
        }
        hs = outs;
    }

    let mut pooled = Vec::with_capacity(hs.len());
    for h in &hs {
        let p = tape.max_pool_time(*h)?;
        pooled.push(p);
    }
    let feats = tape.concat_rows(&pooled)?;
    let hidden = tape.linear(feats, bound.var("enc.fc.w")?, bound.var("enc.fc.b")?)?;
    let hidden = tape.relu(hidden);
    let mu = tape.linear(hidden, bound.var("enc.mu.w")?, bound.var("enc.mu.b")?)?;
    let lv = tape.linear(hidden, bound.var("enc.logvar.w")?, bound.var("enc.logvar.b")?)?;
    let log_var = tape.clamp(lv, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
    Ok(EncoderOutput {
        mu,
        log_var,
        norm_nodes,
    })
}

/// Inference-mode posterior for a single sequence.
pub fn encode(model: &Model, frames: &Tensor) -> Result<PosteriorParams> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, false);
    let out = encode_batch(&mut tape, &bound, &model.config, &model.running, &[frames], &mut Phase::Eval)?;
    let d = model.config.d_z;
    Ok(PosteriorParams {
        mu: tape.value(out.mu).reshaped(&[d])?,
        log_var: tape.value(out.log_var).reshaped(&[d])?,
    })
}

/// `z = mu + exp(log_var / 2) ⊙ eps`.
pub fn reparameterize(post: &PosteriorParams, eps: &Tensor) -> Result<LatentCode> {
    if eps.numel() != post.mu.numel() {
        return Err(Error::shape("reparameterize", post.mu.shape(), eps.shape()));
    }
    let z = post
        .mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(eps.data())
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect();
    LatentCode::new(z)
}

/// Differentiable reparameterization on the tape; `eps` matches `mu`'s shape.
pub fn sample_latent(tape: &mut Tape, mu: Var, log_var: Var, eps: Tensor) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let sigma = tape.exp(half);
    let e = tape.constant(eps.reshaped(tape.shape(mu))?);
    let noise = tape.mul(sigma, e)?;
    tape.add(mu, noise)
}
