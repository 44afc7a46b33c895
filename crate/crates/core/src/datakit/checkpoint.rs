//! Training checkpoints.
//!
//! Layout: magic `OODC`, version `u32 = 1`, a metadata table of
//! `(name, u64)` pairs, a tensor index of `(name, byte_len)` pairs, then the
//! indexed tensors as concatenated tensor-file records. Names are `u32`
//! length-prefixed UTF-8.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor_file::{encode_tensor, read_tensor, Reader};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Model, ModelSpec};
use crate::tensor::Tensor;
use crate::train::{NetworkSpecs, Networks, TrainMode, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OODC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named integers and tensors, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointFile {
    pub meta: Vec<(String, u64)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn read_name(r: &mut Reader<'_>) -> Result<String> {
    let len = r.u32("name length")? as usize;
    let at = r.offset();
    let raw = r.take(len, "name")?;
    String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
        offset: at,
        msg: "name is not UTF-8".into(),
    })
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Checkpoint(format!("duplicate {what} name `{n}`")));
        }
    }
    Ok(())
}

impl CheckpointFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        check_unique(self.meta.iter().map(|(n, _)| n.as_str()), "metadata")?;
        check_unique(self.tensors.iter().map(|(n, _)| n.as_str()), "tensor")?;
        let records: Vec<Vec<u8>> = self.tensors.iter().map(|(_, t)| encode_tensor(t)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (name, v) in &self.meta {
            put_name(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for ((name, _), rec) in self.tensors.iter().zip(&records) {
            put_name(&mut out, name);
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        }
        for rec in records {
            out.extend_from_slice(&rec);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, 0);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let n_meta = r.u32("metadata count")?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            let name = read_name(&mut r)?;
            meta.push((name, r.u64("metadata value")?));
        }
        let n_tensors = r.u32("tensor count")?;
        let mut index = Vec::new();
        for _ in 0..n_tensors {
            let name = read_name(&mut r)?;
            index.push((name, r.u64("tensor length")?));
        }
        check_unique(meta.iter().map(|(n, _)| n.as_str()), "metadata")?;
        check_unique(index.iter().map(|(n, _)| n.as_str()), "tensor")?;
        let mut tensors = Vec::with_capacity(index.len());
        for (name, len) in index {
            let at = r.offset();
            let len = usize::try_from(len).unwrap_or(usize::MAX);
            let rec = r.take(len, &format!("tensor `{name}`"))?;
            let mut sub = Reader::new(rec, at);
            let t = read_tensor(&mut sub)?;
            if sub.remaining() != 0 {
                return sub.fail(format!("tensor `{name}` shorter than its indexed length"));
            }
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return r.fail(format!("{} trailing bytes", r.remaining()));
        }
        debug_assert_eq!(r.pos(), bytes.len());
        Ok(Self { meta, tensors })
    }
}

fn model_tensors(prefix: &str, model: &Model, out: &mut Vec<(String, Tensor)>) {
    for (slot, p) in model.param_slots().iter().zip(model.params()) {
        out.push((format!("{prefix}.{}.{}", slot.layer, slot.name), p.clone()));
    }
    for (slot, b) in model.buffer_slots().iter().zip(model.buffers()) {
        out.push((format!("{prefix}.{}.{}", slot.layer, slot.name), b.clone()));
    }
}

fn adam_tensors(prefix: &str, model: &Model, adam: &AdamState, out: &mut Vec<(String, Tensor)>) {
    for (i, slot) in model.param_slots().iter().enumerate() {
        out.push((format!("adam.{prefix}.m.{}.{}", slot.layer, slot.name), adam.m[i].clone()));
        out.push((format!("adam.{prefix}.v.{}.{}", slot.layer, slot.name), adam.v[i].clone()));
    }
}

/// Serializes the full training state.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let word_pos = state.rng.get_word_pos();
    let adam = state.adam_cls.config;
    let mut meta = vec![
        ("mode".to_string(), matches!(state.mode, TrainMode::Joint) as u64),
        ("seed".to_string(), state.seed),
        ("iteration".to_string(), state.iteration),
        ("rng_stream".to_string(), state.rng.get_stream()),
        ("rng_word_pos_lo".to_string(), word_pos as u64),
        ("rng_word_pos_hi".to_string(), (word_pos >> 64) as u64),
        ("adam.beta1".to_string(), adam.beta1.to_bits()),
        ("adam.beta2".to_string(), adam.beta2.to_bits()),
        ("adam.eps".to_string(), adam.eps.to_bits()),
        ("adam.cls.t".to_string(), state.adam_cls.t),
    ];
    let mut tensors = Vec::new();
    model_tensors("cls", &state.nets.cls, &mut tensors);
    adam_tensors("cls", &state.nets.cls, &state.adam_cls, &mut tensors);
    let pairs = [
        ("gen", &state.nets.gen, &state.adam_gen),
        ("dis", &state.nets.dis, &state.adam_dis),
    ];
    for (prefix, model, adam) in pairs {
        match (model, adam) {
            (Some(m), Some(a)) => {
                meta.push((format!("adam.{prefix}.t"), a.t));
                model_tensors(prefix, m, &mut tensors);
                adam_tensors(prefix, m, a, &mut tensors);
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint(format!("{prefix} network and optimizer state disagree"))),
        }
    }
    CheckpointFile { meta, tensors }.encode()
}

struct Pool {
    tensors: BTreeMap<String, Tensor>,
}

impl Pool {
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    fn restore_model(&mut self, prefix: &str, spec: &ModelSpec) -> Result<Model> {
        // Values are overwritten below, so the initializer's generator is irrelevant.
        let mut model = Model::build(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let slots = model.param_slots();
        for (slot, p) in slots.iter().zip(model.params_mut()) {
            *p = self.take(&format!("{prefix}.{}.{}", slot.layer, slot.name), p.shape())?;
        }
        let slots = model.buffer_slots();
        for (slot, b) in slots.iter().zip(model.buffers_mut()) {
            *b = self.take(&format!("{prefix}.{}.{}", slot.layer, slot.name), b.shape())?;
        }
        Ok(model)
    }

    fn restore_adam(&mut self, prefix: &str, model: &Model, config: AdamConfig, t: u64) -> Result<AdamState> {
        let mut adam = AdamState::for_model(model, config);
        adam.t = t;
        for (i, slot) in model.param_slots().iter().enumerate() {
            let shape = model.params()[i].shape().to_vec();
            adam.m[i] = self.take(&format!("adam.{prefix}.m.{}.{}", slot.layer, slot.name), &shape)?;
            adam.v[i] = self.take(&format!("adam.{prefix}.v.{}.{}", slot.layer, slot.name), &shape)?;
        }
        Ok(adam)
    }
}

/// Rebuilds a training state against `specs`; any missing, extra or
/// mis-shaped tensor is an error naming it.
pub fn decode_checkpoint(bytes: &[u8], specs: &NetworkSpecs) -> Result<TrainState> {
    let file = CheckpointFile::decode(bytes)?;
    let meta: BTreeMap<&str, u64> = file.meta.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let get = |k: &str| {
        meta.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")))
    };
    let mode = match get("mode")? {
        0 => TrainMode::Ce,
        1 => TrainMode::Joint,
        m => return Err(Error::Checkpoint(format!("unknown mode {m}"))),
    };
    let config = AdamConfig {
        beta1: f64::from_bits(get("adam.beta1")?),
        beta2: f64::from_bits(get("adam.beta2")?),
        eps: f64::from_bits(get("adam.eps")?),
    };
    let seed = get("seed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(get("rng_stream")?);
    rng.set_word_pos(((get("rng_word_pos_hi")? as u128) << 64) | get("rng_word_pos_lo")? as u128);

    let mut pool = Pool {
        tensors: file.tensors.into_iter().collect(),
    };
    let cls = pool.restore_model("cls", &specs.cls)?;
    let adam_cls = pool.restore_adam("cls", &cls, config, get("adam.cls.t")?)?;
    let (gen, dis, adam_gen, adam_dis) = match mode {
        TrainMode::Joint => {
            let gen = pool.restore_model("gen", &specs.gen)?;
            let dis = pool.restore_model("dis", &specs.dis)?;
            let ag = pool.restore_adam("gen", &gen, config, get("adam.gen.t")?)?;
            let ad = pool.restore_adam("dis", &dis, config, get("adam.dis.t")?)?;
            (Some(gen), Some(dis), Some(ag), Some(ad))
        }
        TrainMode::Ce => (None, None, None, None),
    };
    if let Some(extra) = pool.tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(TrainState {
        mode,
        seed,
        iteration: get("iteration")?,
        nets: Networks { cls, gen, dis },
        adam_cls,
        adam_gen,
        adam_dis,
        rng,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>, specs: &NetworkSpecs) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, specs)
}
