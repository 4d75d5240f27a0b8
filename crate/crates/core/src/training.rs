//! Semi-teacher-forced training with Adam and KL annealing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, ModelConfig};
use crate::corpus::{style_label, Utterance};
use crate::error::{Error, Result};
use crate::forward::{batch_loss, Example, ForwardSpec};
use crate::kv::KvMap;
use crate::numerics::{Tape, Tensor};
use crate::objective::{AnnealSchedule, LossBreakdown, Split};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::params::{Bound, Model};

/// `(x + x̂)/2 + η`.
pub fn semi_teacher_force(x_true: &Tensor, x_pred: &Tensor, eta: &Tensor) -> Result<Tensor> {
    if x_true.shape() != x_pred.shape() || x_true.shape() != eta.shape() {
        return Err(Error::shape("semi_teacher_force", x_true.shape(), x_pred.shape()));
    }
    let data = x_true
        .data()
        .iter()
        .zip(x_pred.data())
        .zip(eta.data())
        .map(|((a, b), e)| 0.5 * (a + b) + e)
        .collect();
    Tensor::new(x_true.shape(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub total_epochs: usize,
    pub anneal_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub stf_noise_scale: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-4,
            total_epochs: 150,
            anneal_fraction: 0.1,
            batch_size: 16,
            seed: 0,
            stf_noise_scale: 1.0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "epochs",
        "anneal_fraction",
        "batch_size",
        "seed",
        "stf_noise_scale",
        "clip_norm",
    ];

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.learning_rate)));
        }
        if self.total_epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.stf_noise_scale >= 0.0 && self.stf_noise_scale.is_finite()) {
            return Err(Error::invalid("stf_noise_scale must be finite and non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<AnnealSchedule> {
        AnnealSchedule::from_fraction(self.anneal_fraction, self.total_epochs)
    }

    pub fn to_kv(&self, out: &mut KvMap, prefix: &str) {
        let p = |k: &str| format!("{prefix}{k}");
        out.set(&p("lr"), self.learning_rate);
        out.set(&p("epochs"), self.total_epochs);
        out.set(&p("anneal_fraction"), self.anneal_fraction);
        out.set(&p("batch_size"), self.batch_size);
        out.set(&p("seed"), self.seed);
        out.set(&p("stf_noise_scale"), self.stf_noise_scale);
        out.set(&p("clip_norm"), self.clip_norm);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("lr", &mut self.learning_rate)?;
        kv.read_into("epochs", &mut self.total_epochs)?;
        kv.read_into("anneal_fraction", &mut self.anneal_fraction)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("stf_noise_scale", &mut self.stf_noise_scale)?;
        kv.read_into("clip_norm", &mut self.clip_norm)?;
        Ok(())
    }
}

/// Speaker row for `u` under `cfg`: the bucketed style factor when labeled.
pub fn speaker_of(cfg: &ModelConfig, u: &Utterance) -> usize {
    match cfg.mode {
        Mode::BaselineLabeled => style_label(u.g, cfg.n_speakers),
        _ => 0,
    }
}

fn examples<'a>(cfg: &ModelConfig, data: &'a [Utterance], ids: &[usize]) -> Vec<Example<'a>> {
    ids.iter()
        .map(|&i| Example {
            phonemes: &data[i].phonemes,
            frames: &data[i].frames,
            speaker: speaker_of(cfg, &data[i]),
        })
        .collect()
}

/// Per-utterance losses over `data` without building gradients.
fn score(model: &Model, data: &[Utterance], batch_size: usize, mut spec: ForwardSpec<'_>) -> Result<LossBreakdown> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &model.params, false);
        let exs = examples(&model.config, data, chunk);
        rows.extend(batch_loss(&mut tape, &bound, model, &exs, &mut spec)?.rows);
    }
    LossBreakdown::mean(&rows)
}

/// Held-out loss with λ = 1, `z` at the posterior mean and no input noise.
pub fn validate(model: &Model, data: &[Utterance], batch_size: usize) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = ForwardSpec {
        lambda: 1.0,
        stf_noise_scale: 0.0,
        sample_z: false,
        train: false,
        rng: &mut rng,
    };
    score(model, data, batch_size, spec)
}

/// Held-out loss under the training protocol: sampled `z`, seeded input
/// noise, λ = 1.
pub fn evaluate(model: &Model, data: &[Utterance], stf_noise_scale: f64, batch_size: usize, seed: u64) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ForwardSpec {
        lambda: 1.0,
        stf_noise_scale,
        sample_z: true,
        train: false,
        rng: &mut rng,
    };
    score(model, data, batch_size, spec)
}

/// Everything needed to continue training from an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub best_validation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        self.loss.write_csv_row(out, self.epoch, self.split)
    }
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
    /// Validation total improved on every earlier epoch.
    pub improved: bool,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(&config.model, config.seed)?;
        let adam = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            rng,
            best_validation: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.total_epochs
    }

    /// One pass over `train`, then validation. On error the state is left
    /// as it was after the last completed batch; callers keep their own
    /// copy of the last good epoch.
    pub fn run_epoch(&mut self, train: &[Utterance], validation: &[Utterance]) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(Error::EmptySequence("training split"));
        }
        if self.finished() {
            return Err(Error::invalid(format!("all {} epochs already run", self.config.total_epochs)));
        }
        let cfg = self.config.clone();
        let sched = cfg.schedule()?;
        let epoch = self.epoch;
        let diverged = |reason: String| Error::Diverged { epoch, reason };

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut rows = Vec::with_capacity(train.len());
        for (bi, ids) in batches.iter().enumerate() {
            let lambda = sched.lambda_at(epoch as f64 + bi as f64 / batches.len() as f64);
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &self.model.params, true);
            let exs = examples(&cfg.model, train, ids);
            let mut spec = ForwardSpec {
                lambda,
                stf_noise_scale: cfg.stf_noise_scale,
                sample_z: true,
                train: true,
                rng: &mut self.rng,
            };
            let out = batch_loss(&mut tape, &bound, &self.model, &exs, &mut spec)?;
            let loss = tape.value(out.loss).item()?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss} in batch {bi}")));
            }
            let grads = tape.backward(out.loss)?;
            let mut g: BTreeMap<String, Tensor> = bound
                .iter()
                .filter(|(name, _)| self.model.is_trainable(name))
                .map(|(name, var)| (name.to_string(), grads.wrt(var)))
                .collect();
            clip_global_norm(&mut g, cfg.clip_norm);
            adam_step(&mut self.model.params, &g, &mut self.adam, cfg.learning_rate).map_err(|e| diverged(e.to_string()))?;
            if let Err(name) = self.model.params.all_finite() {
                return Err(diverged(format!("parameter {name} became non-finite")));
            }

            let m = cfg.model.bn_momentum;
            for (layer, node) in out.norm_nodes.iter().enumerate() {
                if let Some(stats) = tape.batch_stats(*node) {
                    let (rm, rv) = &mut self.model.running.layers[layer];
                    for (r, b) in rm.iter_mut().zip(&stats.mean) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                    for (r, b) in rv.iter_mut().zip(&stats.var) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                }
            }
            rows.extend(out.rows);
        }

        self.model.params.round_to_f32();
        self.model.running.round_to_f32();
        self.adam.round_to_f32();
        self.epoch += 1;

        let train_loss = mean_of_fields(&rows)?;
        let (val, improved) = if validation.is_empty() {
            (None, false)
        } else {
            let v = validate(&self.model, validation, cfg.batch_size)?;
            let improved = self.best_validation.is_none_or(|b| v.total < b);
            if improved {
                self.best_validation = Some(v.total);
            }
            (Some(v), improved)
        };
        Ok(EpochReport {
            train: train_loss,
            validation: val,
            improved,
        })
    }
}

/// Fieldwise mean; λ varies across batches within an epoch.
fn mean_of_fields(rows: &[LossBreakdown]) -> Result<LossBreakdown> {
    let mut m = LossBreakdown::mean(rows)?;
    let n = rows.len() as f64;
    m.lambda = rows.iter().map(|r| r.lambda).sum::<f64>() / n;
    m.total = rows.iter().map(|r| r.total).sum::<f64>() / n;
    Ok(m)
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: TrainState,
    pub best: Model,
    pub log: Vec<LogRow>,
}

/// Trains until `state` has run all configured epochs. `on_epoch` sees the
/// state after each epoch, e.g. to write checkpoints.
pub fn train_from<F>(mut state: TrainState, train: &[Utterance], validation: &[Utterance], mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainState, &EpochReport) -> Result<()>,
{
    let mut log = Vec::new();
    let mut best = state.model.clone();
    while !state.finished() {
        let report = state.run_epoch(train, validation)?;
        let epoch = state.epoch - 1;
        log.push(LogRow {
            epoch,
            split: Split::Train,
            loss: report.train,
        });
        if let Some(v) = report.validation {
            log.push(LogRow {
                epoch,
                split: Split::Validation,
                loss: v,
            });
        }
        if report.improved || validation.is_empty() {
            best = state.model.clone();
        }
        on_epoch(&state, &report)?;
    }
    Ok(TrainOutcome { last: state, best, log })
}

pub fn train(config: TrainConfig, train: &[Utterance], validation: &[Utterance]) -> Result<TrainOutcome> {
    train_from(TrainState::new(config)?, train, validation, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn stf_cases() {
        let v = Tensor::row(&[0.5, -1.0]);
        let zero = Tensor::row(&[0.0, 0.0]);
        assert_eq!(semi_teacher_force(&v, &v, &zero).unwrap(), v);
        let two_a = Tensor::row(&[1.0, -2.0]);
        assert_eq!(semi_teacher_force(&two_a, &zero, &zero).unwrap(), v);
        assert!(semi_teacher_force(&v, &Tensor::row(&[1.0]), &zero).is_err());
    }

    #[test]
    fn stf_noise_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let (x, xh) = (Tensor::row(&[0.3, -0.7, 1.1]), Tensor::row(&[0.1, 0.2, -0.4]));
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let eta: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let out = semi_teacher_force(&x, &xh, &Tensor::row(&eta)).unwrap();
            for (j, s) in sums.iter_mut().enumerate() {
                *s += out.data()[j] - 0.5 * (x.data()[j] + xh.data()[j]);
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { total_epochs: 0, ..ok.clone() },
            TrainConfig { anneal_fraction: 1.5, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        let mut kv = KvMap::new();
        ok.to_kv(&mut kv, "");
        let mut back = TrainConfig { seed: 99, ..TrainConfig::default() };
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, ok);
    }
}
