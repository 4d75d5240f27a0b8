//! Free-running generation from phonemes and a latent code.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{has_terminated, EncodedPhonemes};
use crate::binio::{self, ByteReader};
use crate::decoder::{decode_step, DecoderState, SpeakerTerms};
use crate::encoder::LatentCode;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::params::{Bound, Model};

const SEQUENCE_MAGIC: &[u8; 4] = b"VLSQ";

/// Most frames any phoneme of the synthetic corpus spans, doubled.
pub const FRAMES_PER_PHONEME_LIMIT: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    /// Prior scale for sampled codes.
    pub sigma: f64,
    pub max_frames: usize,
    pub seed: u64,
    /// How far past the last phoneme the mean attention location must move.
    pub margin: f64,
    /// Speaker row for labeled models.
    pub speaker: usize,
}

impl SynthesisConfig {
    pub fn for_phonemes(n: usize) -> Self {
        Self {
            sigma: 0.0,
            max_frames: FRAMES_PER_PHONEME_LIMIT * n.max(1),
            seed: 0,
            margin: 0.5,
            speaker: 0,
        }
    }
}

/// `z = sigma · ε` with `ε ~ N(0, I)`.
pub fn sample_prior(d_z: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<LatentCode> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let z = (0..d_z).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    LatentCode::new(z)
}

/// `(1 − α)·z1 + α·z2`.
pub fn interpolate_z(z1: &LatentCode, z2: &LatentCode, alpha: f64) -> Result<LatentCode> {
    if z1.dim() != z2.dim() {
        return Err(Error::shape("interpolate_z", z1.z.shape(), z2.z.shape()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let z = z1
        .z
        .data()
        .iter()
        .zip(z2.z.data())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    LatentCode::new(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// `[T×d_x]`
    pub frames: Tensor,
    /// Per-step phoneme weights.
    pub alignment: Vec<Vec<f64>>,
    /// Stopped by the attention criterion rather than the frame limit.
    pub terminated: bool,
}

/// Emits the predicted mean frame by frame, feeding each back as input.
pub fn synthesize(model: &Model, phonemes: &[u16], z: &LatentCode, cfg: &SynthesisConfig) -> Result<Synthesis> {
    let mc = &model.config;
    if phonemes.is_empty() {
        return Err(Error::EmptySequence("phonemes"));
    }
    if let Some(&p) = phonemes.iter().find(|&&p| p as usize >= mc.vocab) {
        return Err(Error::invalid(format!("phoneme id {p} outside vocabulary of {}", mc.vocab)));
    }
    if z.dim() != mc.d_z {
        return Err(Error::shape("synthesize", z.z.shape(), &[mc.d_z]));
    }
    if cfg.max_frames == 0 {
        return Err(Error::invalid("max_frames must be at least 1"));
    }
    if cfg.speaker >= mc.n_speakers {
        return Err(Error::invalid(format!("speaker {} outside 0..{}", cfg.speaker, mc.n_speakers)));
    }

    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, false);
    let encoded = EncodedPhonemes::embed(&mut tape, &bound, &[phonemes])?;
    let speaker = SpeakerTerms::new(&mut tape, &bound, mc, &[cfg.speaker])?;
    let z_var = tape.constant(z.z.reshaped(&[1, mc.d_z])?);
    let mut state = DecoderState::initial(&mut tape, mc, 1);
    let mut x_prev = tape.constant(Tensor::zeros(&[1, mc.d_x]));
    let mut data = Vec::new();
    let mut alignment = Vec::new();
    let mut terminated = false;
    for _ in 0..cfg.max_frames {
        let out = decode_step(&mut tape, &bound, mc, &state, &encoded, x_prev, z_var, &speaker)?;
        data.extend_from_slice(tape.value(out.x_hat).data());
        if let Some(w) = tape.mixture_weights(out.context) {
            alignment.push(w.to_vec());
        }
        state = out.state;
        x_prev = out.x_hat;
        if has_terminated(tape.value(state.attention.kappa).data(), phonemes.len(), cfg.margin) {
            terminated = true;
            break;
        }
    }
    let t = data.len() / mc.d_x;
    Ok(Synthesis {
        frames: Tensor::new(&[t, mc.d_x], data)?,
        alignment,
        terminated,
    })
}

/// `(t, value)` rows of one channel.
pub fn trajectory_export(seq: &Tensor, channel: usize) -> Result<Vec<(usize, f64)>> {
    if seq.rank() != 2 {
        return Err(Error::Rank {
            op: "trajectory_export",
            shape: seq.shape().to_vec(),
        });
    }
    if channel >= seq.cols() {
        return Err(Error::invalid(format!("channel {channel} outside 0..{}", seq.cols())));
    }
    Ok((0..seq.rows()).map(|t| (t, seq.at(t, channel))).collect())
}

/// Writes `t,value` rows; values print in shortest round-trip form.
pub fn write_trajectory_csv<W: Write>(out: &mut W, rows: &[(usize, f64)]) -> Result<()> {
    writeln!(out, "t,value")?;
    for (t, v) in rows {
        writeln!(out, "{t},{v}")?;
    }
    Ok(())
}

pub fn encode_sequence(seq: &Tensor) -> Result<Vec<u8>> {
    if seq.rank() != 2 {
        return Err(Error::Rank {
            op: "encode_sequence",
            shape: seq.shape().to_vec(),
        });
    }
    let mut b = Vec::with_capacity(12 + 4 * seq.numel());
    b.extend_from_slice(SEQUENCE_MAGIC);
    binio::put_u32(&mut b, binio::len_u32(seq.rows(), "frame count")?);
    binio::put_u32(&mut b, binio::len_u32(seq.cols(), "d_x")?);
    binio::put_f32s(&mut b, seq.data());
    Ok(b)
}

pub fn decode_sequence(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    r.magic(SEQUENCE_MAGIC)?;
    let at = r.offset();
    let t = r.u32("frame count")? as usize;
    let d = r.u32("d_x")? as usize;
    if t == 0 || d == 0 {
        return Err(Error::format(at, "empty sequence"));
    }
    let data = r.f32s(t * d, "frames")?;
    r.finish()?;
    Tensor::new(&[t, d], data)
}

pub fn save_sequence(path: &Path, seq: &Tensor) -> Result<()> {
    binio::write_atomic(path, &encode_sequence(seq)?)
}

pub fn load_sequence(path: &Path) -> Result<Tensor> {
    decode_sequence(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;

    fn model() -> Model {
        let cfg = ModelConfig {
            d_z: 3,
            hidden: 8,
            d_buf: 4,
            k: 2,
            enc_widths: vec![4],
            ..ModelConfig::default()
        };
        Model::init(&cfg, 2).unwrap()
    }

    #[test]
    fn prior_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_prior(5, 0.0, &mut rng).unwrap();
        assert_eq!(z.dim(), 5);
        assert!(z.z.data().iter().all(|&v| v == 0.0));
        assert!(sample_prior(5, -0.1, &mut rng).is_err());
    }

    #[test]
    fn interpolation_cases() {
        let a = LatentCode::new(vec![1.0, -2.0]).unwrap();
        let b = LatentCode::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(interpolate_z(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_z(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate_z(&a, &b, 0.5).unwrap().z.data(), &[2.0, 1.0]);
        assert!(interpolate_z(&a, &b, 1.5).is_err());
        assert!(interpolate_z(&a, &LatentCode::new(vec![1.0]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let m = model();
        let z = LatentCode::new(vec![0.2, -0.1, 0.4]).unwrap();
        let cfg = SynthesisConfig::for_phonemes(3);
        let a = synthesize(&m, &[1, 2, 3], &z, &cfg).unwrap();
        assert_eq!(a, synthesize(&m, &[1, 2, 3], &z, &cfg).unwrap());
        assert!(a.frames.rows() <= 72);
        assert_eq!(a.alignment.len(), a.frames.rows());
        assert!(a.alignment.iter().all(|w| w.len() == 3));
        let short = SynthesisConfig { max_frames: 5, ..cfg.clone() };
        assert_eq!(synthesize(&m, &[1, 2, 3], &z, &short).unwrap().frames.rows(), 5);
        assert!(synthesize(&m, &[], &z, &cfg).is_err());
        assert!(synthesize(&m, &[99], &z, &cfg).is_err());
    }

    #[test]
    fn untrained_attention_terminates_from_initial_step() {
        let m = model();
        let z = LatentCode::new(vec![0.0; 3]).unwrap();
        let out = synthesize(&m, &[4, 5], &z, &SynthesisConfig::for_phonemes(2)).unwrap();
        assert!(out.terminated);
        assert!(out.frames.rows() > 1);
    }

    #[test]
    fn trajectory_cases() {
        let seq = Tensor::new(&[3, 2], vec![1.0, 0.1, 1.0, 0.2, 1.0, 0.3]).unwrap();
        let rows = trajectory_export(&seq, 0).unwrap();
        assert_eq!(rows, vec![(0, 1.0), (1, 1.0), (2, 1.0)]);
        assert_eq!(trajectory_export(&seq, 1).unwrap()[2], (2, 0.3));
        assert!(trajectory_export(&seq, 2).is_err());
        let mut out = Vec::new();
        write_trajectory_csv(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,value\n0,1\n1,1\n2,1\n");
    }

    #[test]
    fn sequence_file_roundtrip() {
        let seq = Tensor::new(&[2, 2], vec![0.5, -1.25, 3.0, 0.0]).unwrap();
        let bytes = encode_sequence(&seq).unwrap();
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(decode_sequence(&bytes).unwrap(), seq);
        assert!(decode_sequence(&bytes[..20]).is_err());
    }
}
