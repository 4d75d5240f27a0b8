//! Annealed negative evidence lower bound.

use std::fmt;
use std::io::Write;

use crate::encoder::PosteriorParams;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `Σ 0.5·(μ² + σ² − 1 − log σ²)`: KL from `q(z|x)` to `N(0, I)`.
pub fn kl_gaussian_prior(post: &PosteriorParams) -> f64 {
    post.mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Squared error summed over features, averaged over frames.
pub fn reconstruction_error(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(Error::shape("reconstruction_error", x_hat.shape(), x.shape()));
    }
    let t = x.rows() as f64;
    let sq: f64 = x_hat.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / t)
}

/// Linear ramp of the KL weight over the first `anneal_epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub anneal_epochs: usize,
    pub total_epochs: usize,
}

impl AnnealSchedule {
    pub fn new(anneal_epochs: usize, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 || anneal_epochs > total_epochs {
            return Err(Error::invalid(format!(
                "anneal schedule needs 0 <= anneal_epochs ({anneal_epochs}) <= total_epochs ({total_epochs}) and total_epochs >= 1"
            )));
        }
        Ok(Self {
            anneal_epochs,
            total_epochs,
        })
    }

    /// `anneal_epochs = round(fraction · total_epochs)`.
    pub fn from_fraction(fraction: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(format!("anneal fraction {fraction} outside [0, 1]")));
        }
        Self::new((fraction * total_epochs as f64).round() as usize, total_epochs)
    }

    /// λ at a fractional epoch position, e.g. `epoch + batch / batches`.
    pub fn lambda_at(&self, progress: f64) -> f64 {
        if self.anneal_epochs == 0 {
            return 1.0;
        }
        (progress / self.anneal_epochs as f64).clamp(0.0, 1.0)
    }
}

/// λ at the start of `epoch`.
pub fn anneal_lambda(epoch: usize, sched: &AnnealSchedule) -> Result<f64> {
    if epoch >= sched.total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            sched.total_epochs
        )));
    }
    Ok(sched.lambda_at(epoch as f64))
}

/// One row of the loss table. `kl_term` is `None` for models without a latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub rec_error: f64,
    pub kl_term: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(rec: f64, kl: Option<f64>, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        rec_error: rec,
        kl_term: kl,
        lambda,
        total: rec + lambda * kl.unwrap_or(0.0),
    }
}

pub const LOG_HEADER: &str = "epoch,lambda,rec_error,kl_term,total,split";

/// Which data a log row was computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl LossBreakdown {
    /// Mean of several breakdowns; `kl_term` is kept only if all rows have one.
    pub fn mean(rows: &[LossBreakdown]) -> Result<LossBreakdown> {
        if rows.is_empty() {
            return Err(Error::EmptySequence("loss rows"));
        }
        let n = rows.len() as f64;
        let rec = rows.iter().map(|r| r.rec_error).sum::<f64>() / n;
        let kl = rows
            .iter()
            .map(|r| r.kl_term)
            .sum::<Option<f64>>()
            .map(|s| s / n);
        Ok(total_loss(rec, kl, rows[0].lambda))
    }

    pub fn write_csv_row<W: Write>(&self, out: &mut W, epoch: usize, split: Split) -> Result<()> {
        let kl = match self.kl_term {
            Some(v) => v.to_string(),
            None => "NA".to_string(),
        };
        writeln!(out, "{epoch},{},{},{kl},{},{split}", self.lambda, self.rec_error, self.total)?;
        Ok(())
    }
}
