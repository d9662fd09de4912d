//! Binary checkpoints of a model and its training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PIGNET01"
//! u64 metadata length, then the metadata block:
//!     u32 kind length, kind (utf-8)
//!     [u8; 32] configuration hash
//!     u64 epoch, u64 optimizer step
//!     [u8; 32] rng seed, u64 rng stream, u128 rng word position
//!     u32 config length, configuration (TOML, utf-8)
//! u64 tensor count, then per tensor:
//!     u32 name length, name (utf-8), u32 rank, rank × u64 extents, f64 values
//! ```
//!
//! Tensors are the parameter store in declaration order followed by the
//! optimizer moments as `adam.m.<name>` / `adam.v.<name>`. Loading validates
//! the whole file before anything is applied.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{build_model, Segmenter};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"PIGNET01";

/// Decoded metadata block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub adam_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub config_toml: String,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_str(out, name)?;
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes `model` and `state` to bytes.
pub fn encode<M: Segmenter + ?Sized>(model: &M, state: &TrainState) -> Result<Vec<u8>> {
    let mut meta = Vec::new();
    put_str(&mut meta, model.kind())?;
    meta.extend_from_slice(&model.config_hash());
    meta.extend_from_slice(&state.epoch.to_le_bytes());
    meta.extend_from_slice(&state.adam.step.to_le_bytes());
    meta.extend_from_slice(&state.rng.get_seed());
    meta.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    meta.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    put_str(&mut meta, &model.config_toml()?)?;

    let store = model.store();
    let mut out = Vec::with_capacity(64 + meta.len() + store.entries().iter().map(|e| e.value.numel() * 8 + 64).sum::<usize>() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    let count = store.len() + 2 * state.adam.ids.len();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for e in store.entries() {
        put_tensor(&mut out, &e.name, &e.value)?;
    }
    for (slot, &id) in state.adam.ids.iter().enumerate() {
        put_tensor(&mut out, &format!("adam.m.{}", store.name(id)), &state.adam.m[slot])?;
        put_tensor(&mut out, &format!("adam.v.{}", store.name(id)), &state.adam.v[slot])?;
    }
    Ok(out)
}

/// Writes a checkpoint atomically: to a sibling temporary file, then renamed.
pub fn save_checkpoint<M: Segmenter + ?Sized>(path: &Path, model: &M, state: &TrainState) -> Result<()> {
    let bytes = encode(model, state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn array32(&mut self, what: &str) -> Result<[u8; 32]> {
        Ok(self.take(32, what)?.try_into().unwrap())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not valid utf-8")))
    }
}

fn read_meta(r: &mut Reader) -> Result<CheckpointMeta> {
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let len = r.u64("metadata length")? as usize;
    let block = r.take(len, "metadata")?;
    let mut m = Reader { bytes: block, pos: 0 };
    let meta = CheckpointMeta {
        kind: m.string("model kind")?,
        config_hash: m.array32("configuration hash")?,
        epoch: m.u64("epoch")?,
        adam_step: m.u64("optimizer step")?,
        rng_seed: m.array32("rng seed")?,
        rng_stream: m.u64("rng stream")?,
        rng_word_pos: m.u128("rng position")?,
        config_toml: m.string("configuration")?,
    };
    if m.pos != block.len() {
        return Err(Error::Format(format!(
            "metadata block has {} unread bytes",
            block.len() - m.pos
        )));
    }
    Ok(meta)
}

/// A fully decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

/// Decodes and structurally validates checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let meta = read_meta(&mut r)?;
    let count = r.u64("tensor count")? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("tensor extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name} has an impossible shape {shape:?}")))?;
        let raw = r.take(numel, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint into `model`, returning the saved training state.
/// Nothing is modified unless the file is complete, the configuration hash
/// matches and every tensor has the expected name and shape.
pub fn load_checkpoint<M: Segmenter + ?Sized>(path: &Path, model: &mut M) -> Result<TrainState> {
    let ckpt = read_checkpoint(path)?;
    apply(&ckpt, model)
}

/// Applies a decoded checkpoint to `model` (see [`load_checkpoint`]).
pub fn apply<M: Segmenter + ?Sized>(ckpt: &Checkpoint, model: &mut M) -> Result<TrainState> {
    let meta = &ckpt.meta;
    if meta.kind != model.kind() || meta.config_hash != model.config_hash() {
        return Err(Error::Compatibility(format!(
            "checkpoint was written for a different architecture ({} {}), model is {} {}",
            meta.kind,
            hex8(&meta.config_hash),
            model.kind(),
            hex8(&model.config_hash())
        )));
    }
    let store = model.store();
    let adam_ids = store.trainable_ids();
    let expected = store.len() + 2 * adam_ids.len();
    if ckpt.tensors.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model expects {expected}",
            ckpt.tensors.len()
        )));
    }
    let mut expected: Vec<(String, &[usize])> = store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.shape()))
        .collect();
    for &id in &adam_ids {
        expected.push((format!("adam.m.{}", store.name(id)), store.get(id).shape()));
        expected.push((format!("adam.v.{}", store.name(id)), store.get(id).shape()));
    }
    for ((name, t), (want, shape)) in ckpt.tensors.iter().zip(&expected) {
        if name != want || t.shape() != *shape {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} {:?} does not match expected {want} {shape:?}",
                t.shape()
            )));
        }
    }

    let n = store.len();
    let mut m = Vec::with_capacity(adam_ids.len());
    let mut v = Vec::with_capacity(adam_ids.len());
    for k in 0..adam_ids.len() {
        m.push(ckpt.tensors[n + 2 * k].1.clone());
        v.push(ckpt.tensors[n + 2 * k + 1].1.clone());
    }
    let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(meta.rng_word_pos);

    let ids: Vec<_> = model.store().ids().collect();
    let store = model.store_mut();
    for (id, (_, t)) in ids.into_iter().zip(&ckpt.tensors[..n]) {
        store.set(id, t.clone())?;
    }
    Ok(TrainState {
        epoch: meta.epoch,
        adam: AdamState {
            step: meta.adam_step,
            ids: adam_ids,
            m,
            v,
        },
        rng,
    })
}

/// Rebuilds the model recorded in a checkpoint and loads its parameters.
pub fn load_model(path: &Path) -> Result<(Box<dyn Segmenter>, TrainState)> {
    let ckpt = read_checkpoint(path)?;
    let mut model = build_model(&ckpt.meta.kind, &ckpt.meta.config_toml, 0)?;
    let state = apply(&ckpt, model.as_mut())?;
    Ok((model, state))
}

fn hex8(h: &[u8; 32]) -> String {
    h[..4].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::TNetWidths;
    use crate::model::{logits, ModelConfig, PigNet};

    fn tiny(plan: Vec<usize>) -> ModelConfig {
        let w = TNetWidths {
            conv: vec![4, 8],
            fc: vec![8],
        };
        ModelConfig {
            inception_plan: plan,
            head_widths: vec![8],
            num_parts: 3,
            input_tnet: w.clone(),
            feature_tnet: w,
            feature_reduce: Some(4),
            ..ModelConfig::default()
        }
    }

    fn cloud() -> Tensor {
        Tensor::new(vec![6, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = PigNet::new(tiny(vec![4, 8]), 1).unwrap();
        let mut state = TrainState::new(&model.store, 5);
        state.epoch = 3;
        state.adam.step = 7;
        state.adam.m[0].data_mut()[0] = 0.25;
        let _ = rand::RngCore::next_u64(&mut state.rng);
        save_checkpoint(&path, &model, &state).unwrap();

        let mut other = PigNet::new(tiny(vec![4, 8]), 2).unwrap();
        let restored = load_checkpoint(&path, &mut other).unwrap();
        assert_eq!(logits(&model, &cloud()).unwrap(), logits(&other, &cloud()).unwrap());
        assert_eq!(restored.epoch, 3);
        assert_eq!(restored.adam, state.adam);
        assert_eq!(restored.rng, state.rng);
        assert_eq!(model.store.digest(), other.store.digest());

        let (boxed, _) = load_model(&path).unwrap();
        assert_eq!(logits(boxed.as_ref(), &cloud()).unwrap(), logits(&model, &cloud()).unwrap());
    }

    #[test]
    fn truncated_file_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = PigNet::new(tiny(vec![4, 8]), 1).unwrap();
        save_checkpoint(&path, &model, &TrainState::new(&model.store, 0)).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut target = PigNet::new(tiny(vec![4, 8]), 9).unwrap();
        let before = target.store.digest();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path, &mut target), Err(Error::Format(_))), "cut {cut}");
            assert_eq!(target.store.digest(), before);
        }
        let mut extra = bytes.clone();
        extra.push(0);
        fs::write(&path, &extra).unwrap();
        assert!(matches!(load_checkpoint(&path, &mut target), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path, &mut target), Err(Error::Format(_))));
        assert_eq!(target.store.digest(), before);
    }

    #[test]
    fn other_plan_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = PigNet::new(tiny(vec![8, 16]), 1).unwrap();
        save_checkpoint(&path, &model, &TrainState::new(&model.store, 0)).unwrap();
        let mut other = PigNet::new(tiny(vec![8, 32]), 1).unwrap();
        assert!(matches!(load_checkpoint(&path, &mut other), Err(Error::Compatibility(_))));
    }

    #[test]
    fn no_temporary_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = PigNet::new(tiny(vec![4]), 1).unwrap();
        save_checkpoint(&path, &model, &TrainState::new(&model.store, 0)).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("m.ckpt")]);
    }
}
