//! `VLCK` checkpoint files.
//!
//! Layout: magic, format version (u32), a length-prefixed `key=value`
//! header holding both configs and the loop counters, then a record count
//! and records of (name, rank, extents, f32 values). All integers are
//! little-endian u32.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, ByteReader};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::numerics::Tensor;
use crate::optim::AdamState;
use crate::params::{Model, ParamStore, RunningStats};
use crate::training::{TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"VLCK";
pub const FORMAT_VERSION: u32 = 1;

const STATE_KEYS: &[&str] = &["state.epoch", "state.adam_step", "state.rng_word_pos", "state.best_validation"];

fn header(state: &TrainState) -> KvMap {
    let mut kv = KvMap::new();
    state.config.model.to_kv(&mut kv, "model.");
    state.config.to_kv(&mut kv, "train.");
    kv.set("state.epoch", state.epoch);
    kv.set("state.adam_step", state.adam.step);
    kv.set("state.rng_word_pos", state.rng.get_word_pos());
    match state.best_validation {
        Some(v) => kv.set("state.best_validation", v),
        None => kv.set("state.best_validation", "none"),
    }
    kv
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    binio::put_u32(out, binio::len_u32(name.len(), "record name")?);
    out.extend_from_slice(name.as_bytes());
    binio::put_u32(out, binio::len_u32(t.rank(), "rank")?);
    for &e in t.shape() {
        binio::put_u32(out, binio::len_u32(e, "extent")?);
    }
    binio::put_f32s(out, t.data());
    Ok(())
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("finite running statistics")
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut records: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in state.model.params.iter() {
        records.push((format!("param/{name}"), t));
    }
    for (name, t) in state.adam.m.iter() {
        records.push((format!("adam.m/{name}"), t));
    }
    for (name, t) in state.adam.v.iter() {
        records.push((format!("adam.v/{name}"), t));
    }
    let stats: Vec<(String, Tensor)> = state
        .model
        .running
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, (m, v))| [(format!("bn.mean/{i}"), vector(m)), (format!("bn.var/{i}"), vector(v))])
        .collect();
    for (name, t) in &stats {
        records.push((name.clone(), t));
    }

    let text = header(state).render();
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    binio::put_u32(&mut b, FORMAT_VERSION);
    binio::put_u32(&mut b, binio::len_u32(text.len(), "header")?);
    b.extend_from_slice(text.as_bytes());
    binio::put_u32(&mut b, binio::len_u32(records.len(), "record count")?);
    for (name, t) in records {
        put_record(&mut b, &name, t)?;
    }
    Ok(b)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("header length")? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.bytes(len, "header")?).map_err(|e| Error::format(at, e.to_string()))?;
    let kv = KvMap::parse(text).map_err(|e| Error::format(at, e.to_string()))?;
    let hdr = |e: Error| Error::format(at, e.to_string());

    let mut allowed: Vec<String> = ModelConfig::KEYS.iter().map(|k| format!("model.{k}")).collect();
    allowed.extend(TrainConfig::KEYS.iter().map(|k| format!("train.{k}")));
    allowed.extend(STATE_KEYS.iter().map(|k| k.to_string()));
    let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
    kv.reject_unknown(&allowed).map_err(hdr)?;
    for k in &allowed {
        if !kv.contains(k) {
            return Err(Error::format(at, format!("header lacks {k}")));
        }
    }
    let mut config = TrainConfig::default();
    config.model.apply_kv(&kv.strip_prefix("model.")).map_err(hdr)?;
    config.apply_kv(&kv.strip_prefix("train.")).map_err(hdr)?;
    config.validate().map_err(hdr)?;
    let epoch: usize = kv.require("state.epoch").map_err(hdr)?;
    let step: u64 = kv.require("state.adam_step").map_err(hdr)?;
    let word_pos: u128 = kv.require("state.rng_word_pos").map_err(hdr)?;
    let best_validation = match kv.get_str("state.best_validation") {
        Some("none") => None,
        _ => Some(kv.require::<f64>("state.best_validation").map_err(hdr)?),
    };

    let template = Model::init(&config.model, 0).map_err(hdr)?;
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    let mut running = RunningStats::new(&config.model);
    let count = r.u32("record count")? as usize;
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let at = r.offset();
        let n = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.bytes(n, "record name")?)
            .map_err(|e| Error::format(at, e.to_string()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(at, format!("record {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.filter(|&n| n > 0).ok_or_else(|| Error::format(at, format!("record {name} has bad extents")))?;
        let data = r.f32s(numel, &name)?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::format(at, format!("duplicate record {name}")));
        }
        let (kind, key) = name
            .split_once('/')
            .ok_or_else(|| Error::format(at, format!("unrecognized record {name}")))?;
        let expect = |store_shape: Option<&[usize]>| -> Result<()> {
            match store_shape {
                Some(s) if s == t.shape() => Ok(()),
                Some(s) => Err(Error::format(at, format!("record {name} has shape {:?}, expected {s:?}", t.shape()))),
                None => Err(Error::format(at, format!("unexpected record {name}"))),
            }
        };
        match kind {
            "param" | "adam.m" | "adam.v" => {
                expect(template.params.get(key).ok().map(Tensor::shape))?;
                let target = match kind {
                    "param" => &mut params,
                    "adam.m" => &mut m,
                    _ => &mut v,
                };
                target.insert(key, t);
            }
            "bn.mean" | "bn.var" => {
                let layer: usize = key.parse().map_err(|_| Error::format(at, format!("bad layer in {name}")))?;
                let slot = running
                    .layers
                    .get_mut(layer)
                    .ok_or_else(|| Error::format(at, format!("unexpected record {name}")))?;
                let dst = if kind == "bn.mean" { &mut slot.0 } else { &mut slot.1 };
                expect(Some(&[dst.len()]))?;
                dst.copy_from_slice(t.data());
            }
            _ => return Err(Error::format(at, format!("unrecognized record {name}"))),
        }
    }
    r.finish()?;
    let expected = 3 * template.params.len() + 2 * running.layers.len();
    if seen.len() != expected {
        return Err(Error::format(
            r.offset(),
            format!("checkpoint holds {} records, expected {expected}", seen.len()),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        model: Model {
            config: config.model.clone(),
            params,
            running,
        },
        adam: AdamState { step, m, v },
        config,
        epoch,
        rng,
        best_validation,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    binio::write_atomic(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}
