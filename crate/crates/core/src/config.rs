//! Model hyperparameters and training modes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};

/// Which variant is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Decoder conditioned on a latent code from the encoder.
    VaeLoop,
    /// Plain decoder: z pinned to zero and the encoder unused.
    BaselineNoZ,
    /// Plain decoder with per-utterance speaker embeddings from labels.
    BaselineLabeled,
}

impl Mode {
    pub fn uses_latent(self) -> bool {
        matches!(self, Mode::VaeLoop)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::VaeLoop => "vae-loop",
            Mode::BaselineNoZ => "baseline-no-z",
            Mode::BaselineLabeled => "baseline-labeled",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae-loop" => Ok(Mode::VaeLoop),
            "baseline-no-z" => Ok(Mode::BaselineNoZ),
            "baseline-labeled" => Ok(Mode::BaselineLabeled),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// Architecture of encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Acoustic feature dimension.
    pub d_x: usize,
    /// Phoneme vocabulary size.
    pub vocab: usize,
    /// Phoneme embedding width.
    pub d_p: usize,
    /// Rows of the shifting buffer.
    pub d_buf: usize,
    /// Columns of the shifting buffer.
    pub k: usize,
    pub d_z: usize,
    /// Speaker embedding width.
    pub d_spk: usize,
    /// Distinct speaker embeddings; 1 unless labeled.
    pub n_speakers: usize,
    /// Hidden width of the update and output networks.
    pub hidden: usize,
    pub att_components: usize,
    pub att_hidden: usize,
    /// Initial per-frame advance of every attention component.
    pub att_init_step: f64,
    pub enc_widths: Vec<usize>,
    pub enc_kernel: usize,
    pub enc_hidden: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::VaeLoop,
            d_x: 8,
            vocab: 20,
            d_p: 24,
            d_buf: 32,
            k: 6,
            d_z: 64,
            d_spk: 16,
            n_speakers: 1,
            hidden: 128,
            att_components: 5,
            att_hidden: 32,
            att_init_step: 0.125,
            enc_widths: vec![32, 32, 64, 64, 128],
            enc_kernel: 5,
            enc_hidden: 128,
            dropout: 0.2,
            batch_norm: true,
            bn_momentum: 0.9,
        }
    }
}

pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);
pub const ENC_STRIDE: usize = 2;

impl ModelConfig {
    /// Shortest sequence the encoder accepts: one frame survives every stride-2 layer.
    pub fn min_frames(&self) -> usize {
        ENC_STRIDE.pow(self.enc_widths.len() as u32)
    }

    pub fn buffer_len(&self) -> usize {
        self.d_buf * self.k
    }

    pub fn update_input_len(&self) -> usize {
        self.buffer_len() + self.d_p + self.d_x + self.d_z
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_x", self.d_x),
            ("vocab", self.vocab),
            ("d_p", self.d_p),
            ("d_buf", self.d_buf),
            ("k", self.k),
            ("d_z", self.d_z),
            ("d_spk", self.d_spk),
            ("n_speakers", self.n_speakers),
            ("hidden", self.hidden),
            ("att_components", self.att_components),
            ("att_hidden", self.att_hidden),
            ("enc_kernel", self.enc_kernel),
            ("enc_hidden", self.enc_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.enc_widths.is_empty() || self.enc_widths.contains(&0) {
            return Err(Error::invalid("enc_widths must be a nonempty list of positive widths"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if !(self.att_init_step > 0.0) {
            return Err(Error::invalid("att_init_step must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_momentum must be in [0, 1)"));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "d_x",
        "vocab",
        "d_p",
        "d_buf",
        "k",
        "d_z",
        "d_spk",
        "n_speakers",
        "hidden",
        "att_components",
        "att_hidden",
        "att_init_step",
        "enc_widths",
        "enc_kernel",
        "enc_hidden",
        "dropout",
        "batch_norm",
        "bn_momentum",
    ];

    pub fn to_kv(&self, out: &mut KvMap, prefix: &str) {
        let p = |k: &str| format!("{prefix}{k}");
        out.set(&p("mode"), self.mode);
        out.set(&p("d_x"), self.d_x);
        out.set(&p("vocab"), self.vocab);
        out.set(&p("d_p"), self.d_p);
        out.set(&p("d_buf"), self.d_buf);
        out.set(&p("k"), self.k);
        out.set(&p("d_z"), self.d_z);
        out.set(&p("d_spk"), self.d_spk);
        out.set(&p("n_speakers"), self.n_speakers);
        out.set(&p("hidden"), self.hidden);
        out.set(&p("att_components"), self.att_components);
        out.set(&p("att_hidden"), self.att_hidden);
        out.set(&p("att_init_step"), self.att_init_step);
        out.set(&p("enc_widths"), kv::render_list(&self.enc_widths));
        out.set(&p("enc_kernel"), self.enc_kernel);
        out.set(&p("enc_hidden"), self.enc_hidden);
        out.set(&p("dropout"), self.dropout);
        out.set(&p("batch_norm"), self.batch_norm);
        out.set(&p("bn_momentum"), self.bn_momentum);
    }

    /// Applies every recognised key present in `kv` on top of `self`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("mode", &mut self.mode)?;
        kv.read_into("d_x", &mut self.d_x)?;
        kv.read_into("vocab", &mut self.vocab)?;
        kv.read_into("d_p", &mut self.d_p)?;
        kv.read_into("d_buf", &mut self.d_buf)?;
        kv.read_into("k", &mut self.k)?;
        kv.read_into("d_z", &mut self.d_z)?;
        kv.read_into("d_spk", &mut self.d_spk)?;
        kv.read_into("n_speakers", &mut self.n_speakers)?;
        kv.read_into("hidden", &mut self.hidden)?;
        kv.read_into("att_components", &mut self.att_components)?;
        kv.read_into("att_hidden", &mut self.att_hidden)?;
        kv.read_into("att_init_step", &mut self.att_init_step)?;
        if let Some(w) = kv.get_str("enc_widths") {
            self.enc_widths = kv::parse_list(w)?;
        }
        kv.read_into("enc_kernel", &mut self.enc_kernel)?;
        kv.read_into("enc_hidden", &mut self.enc_hidden)?;
        kv.read_into("dropout", &mut self.dropout)?;
        kv.read_into("batch_norm", &mut self.batch_norm)?;
        kv.read_into("bn_momentum", &mut self.bn_momentum)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut cfg = ModelConfig {
            mode: Mode::BaselineLabeled,
            enc_widths: vec![4, 8],
            dropout: 0.0,
            ..ModelConfig::default()
        };
        cfg.n_speakers = 3;
        let mut kv = KvMap::new();
        cfg.to_kv(&mut kv, "model.");
        let mut back = ModelConfig::default();
        back.apply_kv(&kv.strip_prefix("model.")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn min_frames_follows_depth() {
        assert_eq!(ModelConfig::default().min_frames(), 32);
        let shallow = ModelConfig {
            enc_widths: vec![3, 3],
            ..ModelConfig::default()
        };
        assert_eq!(shallow.min_frames(), 4);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            k: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
