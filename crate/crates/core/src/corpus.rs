//! Synthetic speech-like corpus with one hidden global style factor `g`.
//!
//! Channel 0 plays the role of pitch: a per-phoneme base level shifted by
//! `0.5·g`, with a slow sinusoid of amplitude `0.2·|g|` riding on top. The
//! remaining channels carry a fixed code per phoneme. Every channel gets
//! small Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PITCH_CHANNEL: usize = 0;
pub const MIN_FRAMES: usize = 32;
pub const MAX_FRAMES: usize = 250;
pub const TEST_SIZE: usize = 50;
pub const LEVEL_GAIN: f64 = 0.5;
pub const WIGGLE_GAIN: f64 = 0.2;
/// Frames per sinusoid period.
pub const WIGGLE_PERIOD: f64 = 10.0;

const DATASET_MAGIC: &[u8; 4] = b"VLD1";
const DATASET_VERSION: u32 = 1;
const TABLE_SEED: u64 = 0x5eed_cafe;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub phonemes: Vec<u16>,
    /// `[T×d_x]`
    pub frames: Tensor,
    /// Hidden style factor; never shown to the model.
    pub g: f64,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean of each channel over time.
    pub fn mean_frame(&self) -> Vec<f64> {
        let (t, d) = (self.frames.rows(), self.frames.cols());
        let mut m = vec![0.0; d];
        for r in 0..t {
            for (acc, v) in m.iter_mut().zip(self.frames.row_slice(r)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= t as f64);
        m
    }
}

/// Label used by the labeled baseline: `g` bucketed into `n` equal bins.
pub fn style_label(g: f64, n: usize) -> usize {
    let b = ((g + 1.0) / 2.0 * n as f64).floor();
    (b.max(0.0) as usize).min(n.saturating_sub(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub count: usize,
    pub vocab: usize,
    pub d_x: usize,
    /// Inclusive range of phonemes per utterance.
    pub phonemes: (usize, usize),
    /// Inclusive range of frames per phoneme.
    pub frames_per_phoneme: (usize, usize),
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 1050,
            vocab: 20,
            d_x: 8,
            phonemes: (5, 12),
            frames_per_phoneme: (4, 12),
            noise: 0.05,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.count == 0 || self.vocab == 0 || self.vocab > u16::MAX as usize + 1 || self.d_x < 2 {
            return bad("corpus needs count >= 1, 1 <= vocab <= 65536 and d_x >= 2");
        }
        let (lo, hi) = self.phonemes;
        let (flo, fhi) = self.frames_per_phoneme;
        if lo == 0 || lo > hi || flo == 0 || flo > fhi {
            return bad("phoneme and duration ranges must be nonempty and positive");
        }
        if hi * fhi < MIN_FRAMES || lo * flo > MAX_FRAMES {
            return bad("ranges cannot produce utterances of 32..=250 frames");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        Ok(())
    }
}

/// Fixed per-phoneme pitch bases and identity codes.
#[derive(Clone, Debug)]
pub struct PhonemeTable {
    pub base: Vec<f64>,
    /// `vocab × (d_x − 1)`
    pub code: Vec<Vec<f64>>,
}

impl PhonemeTable {
    pub fn new(vocab: usize, d_x: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TABLE_SEED);
        let base = (0..vocab).map(|_| rng.random_range(-0.3..0.3)).collect();
        let code = (0..vocab)
            .map(|_| (1..d_x).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Self { base, code }
    }
}

/// Frames for given phonemes and durations; `noise_seed` drives the noise.
pub fn render_frames(
    table: &PhonemeTable,
    phonemes: &[u16],
    durations: &[usize],
    g: f64,
    noise: f64,
    noise_seed: u64,
) -> Result<Tensor> {
    let d_x = table.code.first().map_or(0, |c| c.len() + 1);
    let t_total: usize = durations.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(t_total * d_x);
    let mut t = 0usize;
    for (&p, &dur) in phonemes.iter().zip(durations) {
        let p = p as usize;
        for _ in 0..dur {
            let wiggle = WIGGLE_GAIN * g.abs() * (2.0 * PI * t as f64 / WIGGLE_PERIOD).sin();
            let mut frame = Vec::with_capacity(d_x);
            frame.push(table.base[p] + LEVEL_GAIN * g + wiggle);
            frame.extend_from_slice(&table.code[p]);
            for v in frame {
                let n = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data.push((v + n) as f32 as f64);
            }
            t += 1;
        }
    }
    Tensor::new(&[t_total, d_x], data)
}

/// Draws `cfg.count` utterances.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let table = PhonemeTable::new(cfg.vocab, cfg.d_x);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    while out.len() < cfg.count {
        let g: f64 = rng.random_range(-1.0..=1.0);
        let n = rng.random_range(cfg.phonemes.0..=cfg.phonemes.1);
        let phonemes: Vec<u16> = (0..n).map(|_| rng.random_range(0..cfg.vocab) as u16).collect();
        let durations: Vec<usize> = (0..n)
            .map(|_| rng.random_range(cfg.frames_per_phoneme.0..=cfg.frames_per_phoneme.1))
            .collect();
        let noise_seed: u64 = rng.random();
        let t: usize = durations.iter().sum();
        if !(MIN_FRAMES..=MAX_FRAMES).contains(&t) {
            continue;
        }
        let frames = render_frames(&table, &phonemes, &durations, g, cfg.noise, noise_seed)?;
        out.push(Utterance { phonemes, frames, g });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// 50 test utterances first, then 90% / 10% of the rest.
pub fn split(corpus: &[Utterance], seed: u64) -> Result<CorpusSplit> {
    if corpus.len() <= TEST_SIZE {
        return Err(Error::invalid(format!(
            "corpus of {} utterances is too small to split; need more than {TEST_SIZE}",
            corpus.len()
        )));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, rest) = idx.split_at(TEST_SIZE);
    let n_train = (rest.len() as f64 * 0.9).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: pick(&rest[..n_train]),
        validation: pick(&rest[n_train..]),
        test: pick(test),
    })
}

/// Serializes to the `VLD1` layout.
pub fn encode_dataset(corpus: &[Utterance]) -> Result<Vec<u8>> {
    let d_x = corpus.first().map_or(0, |u| u.frames.cols());
    let mut b = Vec::new();
    b.extend_from_slice(DATASET_MAGIC);
    binio::put_u32(&mut b, DATASET_VERSION);
    binio::put_u32(&mut b, binio::len_u32(corpus.len(), "utterance count")?);
    binio::put_u32(&mut b, binio::len_u32(d_x, "d_x")?);
    for u in corpus {
        if u.frames.cols() != d_x {
            return Err(Error::shape("encode_dataset", u.frames.shape(), &[0, d_x]));
        }
        binio::put_f64(&mut b, u.g);
        binio::put_u32(&mut b, binio::len_u32(u.phonemes.len(), "phoneme count")?);
        for &p in &u.phonemes {
            binio::put_u16(&mut b, p);
        }
        binio::put_u32(&mut b, binio::len_u32(u.len(), "frame count")?);
        binio::put_f32s(&mut b, u.frames.data());
    }
    Ok(b)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Utterance>> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported dataset version {version}")));
    }
    let count = r.u32("utterance count")? as usize;
    let d_x = r.u32("d_x")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let g = r.f64("hidden factor")?;
        if !g.is_finite() {
            return Err(Error::format(at, "non-finite hidden factor"));
        }
        let n = r.u32("phoneme count")? as usize;
        let mut phonemes = Vec::with_capacity(n.min(r.remaining() / 2));
        for _ in 0..n {
            phonemes.push(r.u16("phoneme id")?);
        }
        let at = r.offset();
        let t = r.u32("frame count")? as usize;
        if t == 0 || d_x == 0 {
            return Err(Error::format(at, "empty frame block"));
        }
        let data = r.f32s(t * d_x, "frames")?;
        let frames = Tensor::new(&[t, d_x], data).map_err(|e| Error::format(at, e.to_string()))?;
        out.push(Utterance { phonemes, frames, g });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_dataset(path: &Path, corpus: &[Utterance]) -> Result<()> {
    binio::write_atomic(path, &encode_dataset(corpus)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Utterance>> {
    decode_dataset(&std::fs::read(path)?)
}
