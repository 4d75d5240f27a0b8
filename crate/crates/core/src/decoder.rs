//! Latent-conditioned shifting-buffer decoder.
//!
//! The buffer is a `d_buf × k` matrix kept flattened per sequence as its
//! `k` columns laid end to end, newest first: `[S[1] | S[2] | … | S[k]]`.
//! Every step pushes a fresh column `u` at the front and drops `S[k]`.

use crate::attention::{self, AttentionState, EncodedPhonemes};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Bound;

/// Flattened buffer `[B × d_buf·k]`.
#[derive(Clone, Copy, Debug)]
pub struct BufferState {
    pub s: Var,
    pub d_buf: usize,
    pub k: usize,
}

impl BufferState {
    pub fn zeros(tape: &mut Tape, batch: usize, d_buf: usize, k: usize) -> Self {
        Self {
            s: tape.constant(Tensor::zeros(&[batch, d_buf * k])),
            d_buf,
            k,
        }
    }

    /// Column `i` (0-based, newest first) of sequence `row`.
    pub fn column<'t>(&self, tape: &'t Tape, row: usize, i: usize) -> &'t [f64] {
        let r = tape.value(self.s).row_slice(row);
        &r[i * self.d_buf..(i + 1) * self.d_buf]
    }
}

/// Pushes `u` `[B × d_buf]` as the newest column and drops the oldest.
pub fn shift_buffer(tape: &mut Tape, prev: &BufferState, u: Var) -> Result<BufferState> {
    let (rows, width) = (tape.value(u).rows(), tape.value(u).cols());
    if width != prev.d_buf || rows != tape.value(prev.s).rows() {
        return Err(Error::shape("shift_buffer", tape.shape(prev.s), tape.shape(u)));
    }
    let s = if prev.k == 1 {
        tape.concat_cols(&[u])?
    } else {
        let kept = tape.slice_cols(prev.s, 0, prev.d_buf * (prev.k - 1))?;
        tape.concat_cols(&[u, kept])?
    };
    Ok(BufferState { s, ..*prev })
}

/// Speaker-dependent terms that stay fixed over a sequence.
#[derive(Clone, Copy, Debug)]
pub struct SpeakerTerms {
    /// `tanh(F_u(s))`, `[1 or B × d_p]`.
    pub context_shift: Var,
    /// `F_o(s)` repeated over the `k` columns, `[1 or B × d_buf·k]`.
    pub output_shift: Var,
}

impl SpeakerTerms {
    /// `speakers` selects rows of the embedding table; a single shared
    /// speaker yields one row that broadcasts over the batch.
    pub fn new(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, speakers: &[usize]) -> Result<Self> {
        let s = tape.gather_rows(bound.var("dec.spk")?, speakers)?;
        let fu = tape.linear(s, bound.var("dec.fu.w")?, bound.var("dec.fu.b")?)?;
        let context_shift = tape.tanh(fu);
        let fo = tape.linear(s, bound.var("dec.fo.w")?, bound.var("dec.fo.b")?)?;
        let output_shift = tape.tile_cols(fo, cfg.k)?;
        Ok(Self {
            context_shift,
            output_shift,
        })
    }

    pub fn prefix(&self, tape: &mut Tape, n: usize) -> Result<Self> {
        if tape.value(self.context_shift).rows() <= n {
            return Ok(*self);
        }
        Ok(Self {
            context_shift: tape.slice_rows(self.context_shift, 0, n)?,
            output_shift: tape.slice_rows(self.output_shift, 0, n)?,
        })
    }
}

/// `a + b` where `b` has either `a`'s shape or a single broadcast row.
fn add_broadcast(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) == tape.shape(b) {
        tape.add(a, b)
    } else if tape.value(b).rows() == 1 {
        tape.add_row(a, b)
    } else {
        Err(Error::shape("broadcast add", tape.shape(a), tape.shape(b)))
    }
}

/// `C_t = [c_t + tanh(F_u(s)), x_{t−1}]`.
pub fn compose_context_input(tape: &mut Tape, context: Var, context_shift: Var, x_prev: Var) -> Result<Var> {
    let shifted = add_broadcast(tape, context, context_shift)?;
    tape.concat_cols(&[shifted, x_prev])
}

/// `u = N_u([S_{t−1}, C_t, z])`.
pub fn compute_update(tape: &mut Tape, bound: &Bound, prev: &BufferState, ctx_input: Var, z: Var) -> Result<Var> {
    let joined = tape.concat_cols(&[prev.s, ctx_input, z])?;
    let w1 = bound.var("dec.nu1.w")?;
    if tape.value(joined).cols() != tape.value(w1).rows() {
        return Err(Error::shape("compute_update", tape.shape(joined), tape.shape(w1)));
    }
    let h = tape.linear(joined, w1, bound.var("dec.nu1.b")?)?;
    let h = tape.relu(h);
    tape.linear(h, bound.var("dec.nu2.w")?, bound.var("dec.nu2.b")?)
}

/// `x̂_t = N_o(S_t + F_o(s))` with `F_o(s)` added to every column.
pub fn predict_frame(tape: &mut Tape, bound: &Bound, buffer: &BufferState, output_shift: Var) -> Result<Var> {
    let shifted = add_broadcast(tape, buffer.s, output_shift)?;
    let h = tape.linear(shifted, bound.var("dec.no1.w")?, bound.var("dec.no1.b")?)?;
    let h = tape.relu(h);
    tape.linear(h, bound.var("dec.no2.w")?, bound.var("dec.no2.b")?)
}

/// Recurrent state threaded between steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub buffer: BufferState,
    pub attention: AttentionState,
}

impl DecoderState {
    pub fn initial(tape: &mut Tape, cfg: &ModelConfig, batch: usize) -> Self {
        Self {
            buffer: BufferState::zeros(tape, batch, cfg.d_buf, cfg.k),
            attention: AttentionState::initial(tape, batch, cfg.att_components),
        }
    }

    pub fn prefix(&self, tape: &mut Tape, n: usize) -> Result<Self> {
        let buffer = if tape.value(self.buffer.s).rows() == n {
            self.buffer
        } else {
            BufferState {
                s: tape.slice_rows(self.buffer.s, 0, n)?,
                ..self.buffer
            }
        };
        Ok(Self {
            buffer,
            attention: self.attention.prefix(tape, n)?,
        })
    }
}

/// Output of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub x_hat: Var,
    pub state: DecoderState,
    /// Mixture read node; holds the phoneme weights of this step.
    pub context: Var,
}

/// attend → compose → update → shift → predict.
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    state: &DecoderState,
    encoded: &EncodedPhonemes,
    x_prev: Var,
    z: Var,
    speaker: &SpeakerTerms,
) -> Result<StepOutput> {
    let mix = attention::query(tape, bound, cfg, state.buffer.s)?;
    let (context, attention) = attention::attend(tape, &state.attention, encoded, &mix)?;
    let ctx_input = compose_context_input(tape, context, speaker.context_shift, x_prev)?;
    let u = compute_update(tape, bound, &state.buffer, ctx_input, z)?;
    let buffer = shift_buffer(tape, &state.buffer, u)?;
    let x_hat = predict_frame(tape, bound, &buffer, speaker.output_shift)?;
    Ok(StepOutput {
        x_hat,
        state: DecoderState { buffer, attention },
        context,
    })
}
