#![allow(dead_code, clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaeloop::config::{Mode, ModelConfig};
use vaeloop::corpus::{self, CorpusConfig, Utterance};
use vaeloop::decoder::{shift_buffer, BufferState};
use vaeloop::numerics::{Tape, Tensor};
use vaeloop::training::TrainConfig;

pub fn small_corpus(count: usize, seed: u64) -> Vec<Utterance> {
    corpus::generate_corpus(&CorpusConfig {
        count,
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
}

/// Model small enough for a few epochs in seconds.
pub fn small_model(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        n_speakers: if mode == Mode::BaselineLabeled { 4 } else { 1 },
        d_p: 8,
        d_buf: 8,
        k: 3,
        d_z: 4,
        d_spk: 4,
        hidden: 16,
        att_components: 2,
        att_hidden: 8,
        enc_widths: vec![8, 8],
        enc_hidden: 16,
        ..ModelConfig::default()
    }
}

pub fn small_train(mode: Mode, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: small_model(mode),
        learning_rate: 1e-3,
        total_epochs: epochs,
        batch_size: 8,
        seed,
        stf_noise_scale: 0.1,
        ..TrainConfig::default()
    }
}

/// One buffer-shift case: batch rows, d_buf, k, previous contents, update.
#[derive(Clone, Debug)]
pub struct ShiftCase {
    pub rows: usize,
    pub d_buf: usize,
    pub k: usize,
    pub s: Vec<f64>,
    pub u: Vec<f64>,
}

pub fn shift_case() -> impl Strategy<Value = ShiftCase> {
    (1usize..4, 1usize..6, prop::sample::select(vec![1usize, 2, 8])).prop_flat_map(|(rows, d_buf, k)| {
        let s = prop::collection::vec(-1e3f64..1e3, rows * d_buf * k);
        let u = prop::collection::vec(-1e3f64..1e3, rows * d_buf);
        (s, u).prop_map(move |(s, u)| ShiftCase { rows, d_buf, k, s, u })
    })
}

/// The new first column is `u` and column `i` is the old column `i − 1`;
/// the old last column is gone.
pub fn check_shift(c: &ShiftCase) -> Result<(), String> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(&[c.rows, c.d_buf * c.k], c.s.clone()).unwrap());
    let u = tape.constant(Tensor::new(&[c.rows, c.d_buf], c.u.clone()).unwrap());
    let prev = BufferState {
        s,
        d_buf: c.d_buf,
        k: c.k,
    };
    let next = shift_buffer(&mut tape, &prev, u).map_err(|e| e.to_string())?;
    if tape.shape(next.s) != [c.rows, c.d_buf * c.k] {
        return Err(format!("shape {:?}", tape.shape(next.s)));
    }
    let old = |r: usize, col: usize, j: usize| c.s[r * c.d_buf * c.k + col * c.d_buf + j];
    for r in 0..c.rows {
        for col in 0..c.k {
            let got = next.column(&tape, r, col);
            for j in 0..c.d_buf {
                let want = if col == 0 { c.u[r * c.d_buf + j] } else { old(r, col - 1, j) };
                if got[j].to_bits() != want.to_bits() {
                    return Err(format!("row {r} column {col} entry {j}: {} != {want}", got[j]));
                }
            }
        }
    }
    Ok(())
}

/// Solves the normal equations for least squares with an intercept;
/// returns the coefficients (intercept last).
pub fn least_squares(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let p = xs[0].len() + 1;
    let mut a = vec![vec![0.0; p + 1]; p];
    for (x, &y) in xs.iter().zip(ys) {
        let row: Vec<f64> = x.iter().copied().chain([1.0]).collect();
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * y;
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

pub fn r_squared(coef: &[f64], xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (x, &y) in xs.iter().zip(ys) {
        let pred = x.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>() + coef[coef.len() - 1];
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean) * (y - mean);
    }
    1.0 - ss_res / ss_tot
}

/// Probe fitted on one corpus and scored on a fresh one.
pub fn probe_r_squared(fit: &[Utterance], fresh: &[Utterance]) -> f64 {
    let feats = |c: &[Utterance]| c.iter().map(Utterance::mean_frame).collect::<Vec<_>>();
    let gs = |c: &[Utterance]| c.iter().map(|u| u.g).collect::<Vec<_>>();
    let coef = least_squares(&feats(fit), &gs(fit));
    r_squared(&coef, &feats(fresh), &gs(fresh))
}

/// Monte-Carlo estimate of KL(N(mu, diag exp(log_var)) || N(0, I)) as the
/// mean log density ratio at posterior samples.
pub fn kl_monte_carlo(mu: &[f64], log_var: &[f64], n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n {
        let mut lr = 0.0;
        for (&m, &lv) in mu.iter().zip(log_var) {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let z = m + (0.5 * lv).exp() * e;
            // log q − log p; the 2π terms cancel
            lr += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        acc += lr;
    }
    acc / n as f64
}

/// Gradient check of the full training loss on a tiny model; returns the
/// report and the parameter names in input order.
pub fn tiny_gradient_check() -> (vaeloop::numerics::gradcheck::GradCheckReport, Vec<String>) {
    use rand_distr::Distribution;
    use vaeloop::forward::{batch_loss, Example, ForwardSpec};
    use vaeloop::params::{Bound, Model};

    let cfg = ModelConfig {
        mode: Mode::VaeLoop,
        d_x: 3,
        d_p: 4,
        d_buf: 4,
        k: 2,
        d_z: 2,
        d_spk: 3,
        hidden: 6,
        att_components: 2,
        att_hidden: 4,
        vocab: 5,
        enc_widths: vec![3, 4],
        enc_kernel: 3,
        enc_hidden: 5,
        dropout: 0.2,
        ..ModelConfig::default()
    };
    let model = Model::init(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let frames: Vec<Tensor> = (0..2)
        .map(|_| {
            let data = (0..12).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
            Tensor::new(&[4, 3], data).unwrap()
        })
        .collect();
    let phon: [&[u16]; 2] = [&[1, 3], &[4, 0, 2]];
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();

    let report = vaeloop::numerics::gradcheck::check(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let exs: Vec<Example> = (0..2)
                .map(|i| Example { phonemes: phon[i], frames: &frames[i], speaker: 0 })
                .collect();
            // reseeded so every evaluation sees the same dropout masks and noise
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut spec = ForwardSpec { lambda: 0.6, stf_noise_scale: 0.1, sample_z: true, train: true, rng: &mut rng };
            Ok(batch_loss(tape, &bound, &model, &exs, &mut spec)?.loss)
        },
        &inputs,
        1e-5,
        1e-4,
        1e-6,
    )
    .unwrap();
    (report, names)
}
