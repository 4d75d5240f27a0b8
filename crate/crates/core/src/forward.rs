//! Teacher-forced loss of a batch of utterances on one tape.
//!
//! Examples are processed longest first so that at every step the still
//! running sequences form a prefix of the batch; finished rows are simply
//! sliced away.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::EncodedPhonemes;
use crate::config::Mode;
use crate::decoder::{decode_step, DecoderState, SpeakerTerms};
use crate::encoder::{encode_batch, sample_latent, Phase};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::objective::{total_loss, LossBreakdown};
use crate::params::{Bound, Model};

/// One training pair.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub phonemes: &'a [u16],
    /// `[T×d_x]`
    pub frames: &'a Tensor,
    /// Row of the speaker table; ignored unless the model is labeled.
    pub speaker: usize,
}

/// How noise enters a forward pass.
pub struct ForwardSpec<'r> {
    pub lambda: f64,
    pub stf_noise_scale: f64,
    /// Draw `z` from the posterior; otherwise use its mean.
    pub sample_z: bool,
    /// Dropout and batch statistics in the encoder.
    pub train: bool,
    pub rng: &'r mut ChaCha8Rng,
}

pub struct ForwardOutput {
    /// Batch mean of `rec + λ·kl`, per-sequence normalized.
    pub loss: Var,
    /// Per-example breakdown in input order.
    pub rows: Vec<LossBreakdown>,
    /// Training-mode batch-norm nodes of the encoder.
    pub norm_nodes: Vec<Var>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data)
}

/// `(x + x̂)/2 + η` on the tape; gradient flows through `x̂`.
pub fn semi_teacher_force_var(tape: &mut Tape, x_true: Var, x_pred: Var, eta: Option<Var>) -> Result<Var> {
    let sum = tape.add(x_true, x_pred)?;
    let mid = tape.scale(sum, 0.5);
    match eta {
        Some(e) => tape.add(mid, e),
        None => Ok(mid),
    }
}

fn frame_rows(frames: &[&Tensor], t: usize, d_x: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * d_x);
    for f in frames {
        data.extend_from_slice(f.row_slice(t));
    }
    Tensor::matrix(frames.len(), d_x, data)
}

/// Builds the loss of `examples` on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    examples: &[Example<'_>],
    spec: &mut ForwardSpec<'_>,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if examples.is_empty() {
        return Err(Error::EmptySequence("batch"));
    }
    for ex in examples {
        if ex.frames.rank() != 2 || ex.frames.cols() != cfg.d_x {
            return Err(Error::shape("batch_loss", ex.frames.shape(), &[0, cfg.d_x]));
        }
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(examples[i].frames.rows()));
    let sorted: Vec<Example<'_>> = order.iter().map(|&i| examples[i]).collect();
    let b = sorted.len();
    let lens: Vec<usize> = sorted.iter().map(|e| e.frames.rows()).collect();
    let frames: Vec<&Tensor> = sorted.iter().map(|e| e.frames).collect();
    let phon: Vec<&[u16]> = sorted.iter().map(|e| e.phonemes).collect();

    let encoded = EncodedPhonemes::embed(tape, bound, &phon)?;
    let speakers: Vec<usize> = if cfg.mode == Mode::BaselineLabeled {
        sorted.iter().map(|e| e.speaker).collect()
    } else {
        vec![0]
    };
    let speaker = SpeakerTerms::new(tape, bound, cfg, &speakers)?;

    let mut norm_nodes = Vec::new();
    let (z, kl) = if cfg.mode.uses_latent() {
        let out = {
            let mut phase = if spec.train {
                Phase::Train(&mut *spec.rng)
            } else {
                Phase::Eval
            };
            encode_batch(tape, bound, cfg, &model.running, &frames, &mut phase)?
        };
        norm_nodes = out.norm_nodes;
        let z = if spec.sample_z {
            let eps = normal_tensor(spec.rng, &[b, cfg.d_z], 1.0)?;
            sample_latent(tape, out.mu, out.log_var, eps)?
        } else {
            out.mu
        };
        (z, Some(tape.kl_diag_normal(out.mu, out.log_var)?))
    } else {
        (tape.constant(Tensor::zeros(&[b, cfg.d_z])), None)
    };

    let inv: Vec<f64> = lens.iter().map(|&t| 1.0 / (t as f64 * b as f64)).collect();
    let mut state = DecoderState::initial(tape, cfg, b);
    let mut x_prev = tape.constant(Tensor::zeros(&[b, cfg.d_x]));
    let mut sq = vec![0.0; b];
    let mut terms = Vec::with_capacity(lens[0] + 1);
    let (mut enc_t, mut spk_t, mut z_t) = (encoded.clone(), speaker, z);
    for t in 0..lens[0] {
        let n = lens.iter().take_while(|&&l| l > t).count();
        if n < tape.value(state.buffer.s).rows() {
            state = state.prefix(tape, n)?;
            enc_t = enc_t.prefix(tape, n)?;
            spk_t = spk_t.prefix(tape, n)?;
            z_t = tape.slice_rows(z_t, 0, n)?;
            x_prev = tape.slice_rows(x_prev, 0, n)?;
        }
        let out = decode_step(tape, bound, cfg, &state, &enc_t, x_prev, z_t, &spk_t)?;
        state = out.state;
        let target = frame_rows(&frames[..n], t, cfg.d_x)?;
        for (r, acc) in sq.iter_mut().take(n).enumerate() {
            let pred = tape.value(out.x_hat).row_slice(r);
            *acc += pred.iter().zip(target.row_slice(r)).map(|(p, x)| (p - x) * (p - x)).sum::<f64>();
        }
        let target = tape.constant(target);
        terms.push(tape.weighted_sq_err(out.x_hat, target, &inv[..n])?);

        if t + 1 < lens[0] {
            let x_true = tape.slice_rows(target, 0, n)?;
            let eta = if spec.stf_noise_scale > 0.0 {
                let e = normal_tensor(spec.rng, &[n, cfg.d_x], spec.stf_noise_scale)?;
                Some(tape.constant(e))
            } else {
                None
            };
            x_prev = semi_teacher_force_var(tape, x_true, out.x_hat, eta)?;
        }
    }

    if let Some(kl) = kl {
        let w: Vec<f64> = inv.iter().map(|v| v * spec.lambda).collect();
        terms.push(tape.weighted_sum(kl, &w)?);
    }
    let mut loss = terms[0];
    for &term in &terms[1..] {
        loss = tape.add(loss, term)?;
    }

    let kl_vals: Option<Vec<f64>> = kl.map(|k| tape.value(k).data().to_vec());
    let mut rows = vec![total_loss(0.0, None, spec.lambda); b];
    for (pos, &orig) in order.iter().enumerate() {
        let t = lens[pos] as f64;
        let klv = kl_vals.as_ref().map(|v| v[pos] / t);
        rows[orig] = total_loss(sq[pos] / t, klv, spec.lambda);
    }
    Ok(ForwardOutput {
        loss,
        rows,
        norm_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;

    fn tiny(mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            d_x: 3,
            d_p: 4,
            d_buf: 4,
            k: 2,
            d_z: 2,
            d_spk: 3,
            hidden: 6,
            att_components: 2,
            att_hidden: 4,
            vocab: 6,
            enc_widths: vec![4],
            enc_kernel: 3,
            enc_hidden: 5,
            dropout: 0.0,
            n_speakers: 2,
            ..ModelConfig::default()
        }
    }

    fn seqs(rng: &mut ChaCha8Rng, lens: &[usize]) -> Vec<(Vec<u16>, Tensor)> {
        lens.iter()
            .map(|&t| {
                let ph = (0..3).map(|_| rng.random_range(0..6u16)).collect();
                (ph, normal_tensor(rng, &[t, 3], 1.0).unwrap())
            })
            .collect()
    }

    fn run(model: &Model, data: &[(Vec<u16>, Tensor)], seed: u64, noise: f64) -> (f64, Vec<LossBreakdown>) {
        let exs: Vec<Example> = data
            .iter()
            .enumerate()
            .map(|(i, (p, f))| Example {
                phonemes: p,
                frames: f,
                speaker: i % 2,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &model.params, false);
        let mut spec = ForwardSpec {
            lambda: 0.7,
            stf_noise_scale: noise,
            sample_z: false,
            train: false,
            rng: &mut rng,
        };
        let out = batch_loss(&mut tape, &bound, model, &exs, &mut spec).unwrap();
        (tape.value(out.loss).item().unwrap(), out.rows)
    }

    #[test]
    fn batch_loss_is_mean_of_singletons() {
        for mode in [Mode::VaeLoop, Mode::BaselineNoZ, Mode::BaselineLabeled] {
            let model = Model::init(&tiny(mode), 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let data = seqs(&mut rng, &[5, 9, 4, 9]);
            let (total, rows) = run(&model, &data, 0, 0.0);
            let mut mean = 0.0;
            for (i, d) in data.iter().enumerate() {
                let mut one = run(&model, std::slice::from_ref(d), 0, 0.0).1;
                if mode == Mode::BaselineLabeled {
                    // single-example runs see speaker 0
                    if i % 2 == 1 {
                        continue;
                    }
                }
                let r = one.pop().unwrap();
                assert!((r.total - rows[i].total).abs() < 1e-12, "{mode}: {r:?} vs {:?}", rows[i]);
                mean += r.total;
            }
            if mode != Mode::BaselineLabeled {
                assert!((mean / 4.0 - total).abs() < 1e-12);
            }
            assert_eq!(rows[0].kl_term.is_some(), mode.uses_latent());
        }
    }

    #[test]
    fn rows_match_direct_reconstruction() {
        let model = Model::init(&tiny(Mode::VaeLoop), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = seqs(&mut rng, &[6, 4]);
        let (total, rows) = run(&model, &data, 0, 0.0);
        let recomputed: f64 = rows.iter().map(|r| r.rec_error + 0.7 * r.kl_term.unwrap()).sum::<f64>() / 2.0;
        assert!((recomputed - total).abs() < 1e-12);
    }

    #[test]
    fn noise_depends_on_seed_only() {
        let model = Model::init(&tiny(Mode::VaeLoop), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = seqs(&mut rng, &[7, 5]);
        assert_eq!(run(&model, &data, 11, 0.5).0, run(&model, &data, 11, 0.5).0);
        assert_ne!(run(&model, &data, 11, 0.5).0, run(&model, &data, 12, 0.5).0);
    }

    #[test]
    fn stf_cases() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(&[1.0, -2.0]));
        let same = semi_teacher_force_var(&mut tape, v, v, None).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, -2.0]);
        let two_a = tape.constant(Tensor::row(&[2.0, 4.0]));
        let zero = tape.constant(Tensor::row(&[0.0, 0.0]));
        let mid = semi_teacher_force_var(&mut tape, two_a, zero, None).unwrap();
        assert_eq!(tape.value(mid).data(), &[1.0, 2.0]);
    }
}
