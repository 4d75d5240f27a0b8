//! Monotonic Gaussian-mixture attention over encoded phonemes.
//!
//! Each of K components carries a location `kappa` in phoneme-index
//! units. Every decoder step a small network reads the flattened buffer
//! and emits, per component, a mixture logit, a log-width and a raw
//! increment; locations advance by `softplus(increment) ≥ 0`, so the
//! alignment can only move forward.

use std::io::Write;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Bound;

/// Bounds on component widths, in phoneme units.
pub const WIDTH_RANGE: (f64, f64) = (1e-3, 1e3);

/// Padded phoneme encodings for a batch: `[B×L×d_p]` plus true lengths.
#[derive(Clone, Debug)]
pub struct EncodedPhonemes {
    pub emb: Var,
    pub lengths: Vec<usize>,
}

impl EncodedPhonemes {
    /// Embeds each sequence, padding to the longest with id 0.
    pub fn embed(tape: &mut Tape, bound: &Bound, seqs: &[&[u16]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence("phoneme batch"));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptySequence("phoneme sequence"));
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            ids.extend(s.iter().map(|&p| p as usize));
            ids.extend(std::iter::repeat_n(0, max_len - s.len()));
        }
        let table = bound.var("dec.embed")?;
        let d_p = tape.value(table).cols();
        let flat = tape.gather_rows(table, &ids)?;
        let emb = tape.reshape(flat, &[seqs.len(), max_len, d_p])?;
        Ok(Self {
            emb,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    /// First `n` sequences of the batch.
    pub fn prefix(&self, tape: &mut Tape, n: usize) -> Result<Self> {
        if n == self.lengths.len() {
            return Ok(self.clone());
        }
        Ok(Self {
            emb: tape.slice_rows(self.emb, 0, n)?,
            lengths: self.lengths[..n].to_vec(),
        })
    }
}

/// Per-sequence component locations `[B×K]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub kappa: Var,
}

impl AttentionState {
    pub fn initial(tape: &mut Tape, batch: usize, components: usize) -> Self {
        Self {
            kappa: tape.constant(Tensor::zeros(&[batch, components])),
        }
    }

    pub fn prefix(&self, tape: &mut Tape, n: usize) -> Result<Self> {
        if tape.value(self.kappa).rows() == n {
            return Ok(*self);
        }
        Ok(Self {
            kappa: tape.slice_rows(self.kappa, 0, n)?,
        })
    }
}

/// Mixture parameters for one step, each `[B×K]`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureParams {
    pub weights: Var,
    pub widths: Var,
    pub increments: Var,
}

/// Runs the query network on the flattened previous buffer.
pub fn query(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, buffer: Var) -> Result<MixtureParams> {
    let h = tape.linear(buffer, bound.var("dec.att1.w")?, bound.var("dec.att1.b")?)?;
    let h = tape.tanh(h);
    let head = tape.linear(h, bound.var("dec.att2.w")?, bound.var("dec.att2.b")?)?;
    let kk = cfg.att_components;
    let logits = tape.slice_cols(head, 0, kk)?;
    let log_w = tape.slice_cols(head, kk, 2 * kk)?;
    let raw_inc = tape.slice_cols(head, 2 * kk, 3 * kk)?;
    let weights = tape.softmax(logits);
    let log_w = tape.clamp(log_w, WIDTH_RANGE.0.ln(), WIDTH_RANGE.1.ln());
    let widths = tape.exp(log_w);
    let increments = tape.softplus(raw_inc);
    Ok(MixtureParams {
        weights,
        widths,
        increments,
    })
}

/// Advances the component locations and reads the context `[B×d_p]`.
pub fn attend(
    tape: &mut Tape,
    state: &AttentionState,
    encoded: &EncodedPhonemes,
    mix: &MixtureParams,
) -> Result<(Var, AttentionState)> {
    let kappa = tape.add(state.kappa, mix.increments)?;
    let context = tape.mixture_read(mix.weights, kappa, mix.widths, encoded.emb, &encoded.lengths)?;
    Ok((context, AttentionState { kappa }))
}

/// True once the mean component location has passed the last phoneme by `margin`.
pub fn has_terminated(kappa: &[f64], num_phonemes: usize, margin: f64) -> bool {
    if kappa.is_empty() {
        return false;
    }
    let mean = kappa.iter().sum::<f64>() / kappa.len() as f64;
    mean >= num_phonemes as f64 - 1.0 + margin
}

/// Writes per-step phoneme weights as `step,phoneme_index,weight` rows.
pub fn write_alignment_csv<W: Write>(out: &mut W, steps: &[Vec<f64>]) -> Result<()> {
    writeln!(out, "step,phoneme_index,weight")?;
    for (t, weights) in steps.iter().enumerate() {
        for (j, w) in weights.iter().enumerate() {
            writeln!(out, "{t},{j},{w}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape, data).unwrap())
    }

    fn mix(tape: &mut Tape, w: Vec<f64>, s: Vec<f64>, inc: Vec<f64>) -> MixtureParams {
        let k = w.len();
        MixtureParams {
            weights: leaf(tape, &[1, k], w),
            widths: leaf(tape, &[1, k], s),
            increments: leaf(tape, &[1, k], inc),
        }
    }

    #[test]
    fn single_phoneme_normalized_weights_returns_embedding() {
        let mut tape = Tape::new();
        let emb = leaf(&mut tape, &[1, 1, 3], vec![0.5, -1.0, 2.0]);
        let enc = EncodedPhonemes { emb, lengths: vec![1] };
        let state = AttentionState::initial(&mut tape, 1, 2);
        // kappa lands exactly on phoneme 0, so every kernel evaluates to 1
        let m = mix(&mut tape, vec![0.3, 0.7], vec![1.0, 2.0], vec![0.0, 0.0]);
        let (ctx, _) = attend(&mut tape, &state, &enc, &m).unwrap();
        let got = tape.value(ctx).data();
        for (g, e) in got.iter().zip([0.5, -1.0, 2.0]) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_increments_are_stationary() {
        let mut tape = Tape::new();
        let emb = leaf(&mut tape, &[1, 4, 2], (0..8).map(|v| v as f64).collect());
        let enc = EncodedPhonemes { emb, lengths: vec![4] };
        let mut state = AttentionState {
            kappa: leaf(&mut tape, &[1, 2], vec![1.2, 2.5]),
        };
        let m = mix(&mut tape, vec![0.5, 0.5], vec![0.8, 0.8], vec![0.0, 0.0]);
        let (c1, s1) = attend(&mut tape, &state, &enc, &m).unwrap();
        state = s1;
        let (c2, s2) = attend(&mut tape, &state, &enc, &m).unwrap();
        assert_eq!(tape.value(c1), tape.value(c2));
        assert_eq!(tape.value(s1.kappa), tape.value(s2.kappa));
        assert_eq!(tape.value(s2.kappa).data(), &[1.2, 2.5]);
    }

    #[test]
    fn matches_direct_mixture_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, l, d) = (3, 6, 4);
        let w: Vec<f64> = {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..2.0)).collect();
        let kap0: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
        let inc: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.5)).collect();
        let e: Vec<f64> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let emb = leaf(&mut tape, &[1, l, d], e.clone());
        let enc = EncodedPhonemes { emb, lengths: vec![l] };
        let state = AttentionState {
            kappa: leaf(&mut tape, &[1, k], kap0.clone()),
        };
        let m = mix(&mut tape, w.clone(), s.clone(), inc.clone());
        let (ctx, next) = attend(&mut tape, &state, &enc, &m).unwrap();

        let mut expect = vec![0.0; d];
        for j in 0..l {
            let mut phi = 0.0;
            for c in 0..k {
                let loc = kap0[c] + inc[c];
                phi += w[c] * (-(loc - j as f64).powi(2) / (2.0 * s[c] * s[c])).exp();
            }
            for q in 0..d {
                expect[q] += phi * e[j * d + q];
            }
        }
        for (g, x) in tape.value(ctx).data().iter().zip(&expect) {
            assert!((g - x).abs() < 1e-12);
        }
        for (c, v) in tape.value(next.kappa).data().iter().enumerate() {
            assert!(*v >= kap0[c]);
        }
        let weights = tape.mixture_weights(ctx).unwrap();
        assert!(weights.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut tape = Tape::new();
        let cfg = ModelConfig::default();
        let model = crate::params::Model::init(&cfg, 0).unwrap();
        let bound = Bound::new(&mut tape, &model.params, false);
        assert!(EncodedPhonemes::embed(&mut tape, &bound, &[&[]]).is_err());
    }

    #[test]
    fn termination_rule() {
        assert!(!has_terminated(&[0.0, 0.0], 5, 0.5));
        assert!(has_terminated(&[5.1, 5.2], 5, 0.0));
        assert!(has_terminated(&[3.5, 4.5], 5, 0.0));
        assert!(!has_terminated(&[3.5, 4.4], 5, 0.1));
    }

    #[test]
    fn query_increments_are_positive_and_monotone() {
        let cfg = ModelConfig::default();
        let model = crate::params::Model::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &model.params, false);
        let mut state = AttentionState::initial(&mut tape, 2, cfg.att_components);
        let ids: [&[u16]; 2] = [&[1, 2, 3], &[4, 5]];
        let enc = EncodedPhonemes::embed(&mut tape, &bound, &ids).unwrap();
        for _ in 0..10 {
            let buf: Vec<f64> = (0..2 * cfg.buffer_len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b = leaf(&mut tape, &[2, cfg.buffer_len()], buf);
            let m = query(&mut tape, &bound, &cfg, b).unwrap();
            let (_, next) = attend(&mut tape, &state, &enc, &m).unwrap();
            let before = tape.value(state.kappa).clone();
            for (a, b) in tape.value(next.kappa).data().iter().zip(before.data()) {
                assert!(a >= b);
            }
            state = next;
        }
    }

    #[test]
    fn alignment_csv_layout() {
        let mut buf = Vec::new();
        write_alignment_csv(&mut buf, &[vec![0.25, 0.75]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,phoneme_index,weight\n0,0,0.25\n0,1,0.75\n");
    }
}
