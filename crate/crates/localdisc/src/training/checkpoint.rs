//! Single-file binary checkpoints: parameter and buffer tensors keyed by
//! module path, optimizer state, and a manifest (stage, epoch, config hash,
//! random-stream cursor, scheduler state). Values are stored as little-endian
//! f64 bits, which widens f32 exactly and therefore round-trips both element
//! types bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::optimizer::{Adam, AdamSlot};
use super::TrainRng;
use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::networks::ParamStore;

const MAGIC: &[u8; 4] = b"LDCP";
const FORMAT_VERSION: u32 = 1;

/// Exact position of a seeded random stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    word_lo: u64,
    word_hi: u64,
}

impl RngCursor {
    pub fn new(seed: u64, word_pos: u128) -> Self {
        RngCursor {
            seed,
            word_lo: word_pos as u64,
            word_hi: (word_pos >> 64) as u64,
        }
    }

    pub fn word_pos(&self) -> u128 {
        ((self.word_hi as u128) << 64) | self.word_lo as u128
    }
}

/// Plateau scheduler state carried across a resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedSnapshot {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: String,
    epoch: usize,
    config_hash: String,
    rng: RngCursor,
    sched: Option<SchedSnapshot>,
}

/// A complete training snapshot. `epoch` counts completed epochs.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub stage: Stage,
    pub epoch: usize,
    pub config_hash: String,
    pub rng: RngCursor,
    pub sched: Option<SchedSnapshot>,
    pub params: IndexMap<String, ArrayD<F>>,
    pub buffers: IndexMap<String, ArrayD<F>>,
    pub opt: IndexMap<String, AdamSlot<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    /// Snapshot the given stores and optimizers. Store and optimizer entries
    /// are merged by name; names must not collide across stores.
    pub fn capture(
        stage: Stage,
        epoch: usize,
        config_hash: &str,
        stores: &[&ParamStore<F>],
        adams: &[&Adam<F>],
        rng: &TrainRng,
        sched: Option<SchedSnapshot>,
    ) -> Self {
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for store in stores {
            for (name, v) in store.iter_params() {
                let prev = params.insert(name.to_string(), v.clone());
                debug_assert!(prev.is_none(), "parameter name collision: {name}");
            }
            for (name, v) in store.iter_buffers() {
                buffers.insert(name.to_string(), v.clone());
            }
        }
        let mut opt = IndexMap::new();
        for adam in adams {
            for (name, slot) in adam.slots() {
                opt.insert(name.to_string(), slot.clone());
            }
        }
        Checkpoint {
            stage,
            epoch,
            config_hash: config_hash.to_string(),
            rng: rng.cursor(),
            sched,
            params,
            buffers,
            opt,
        }
    }

    /// Copy every parameter and buffer the store knows about from this
    /// checkpoint, shape-checked. Returns how many parameters were set;
    /// names the checkpoint lacks are left at their current values.
    pub fn apply_to(&self, store: &mut ParamStore<F>) -> Result<usize> {
        let names: Vec<String> = store.param_names().map(str::to_string).collect();
        let mut applied = 0;
        for name in names {
            if let Some(v) = self.params.get(&name) {
                store.set_param(&name, v.clone())?;
                applied += 1;
            }
        }
        let buffer_names: Vec<String> = store.buffer_names().map(str::to_string).collect();
        for name in buffer_names {
            if let Some(v) = self.buffers.get(&name) {
                store.set_buffer(&name, v.clone())?;
            }
        }
        Ok(applied)
    }

    /// As [`apply_to`](Self::apply_to) but requiring full parameter coverage.
    pub fn apply_all(&self, store: &mut ParamStore<F>) -> Result<()> {
        let expected = store.param_names().count();
        let applied = self.apply_to(store)?;
        if applied != expected {
            return Err(Error::Config(format!(
                "checkpoint covers {applied} of {expected} parameters; architectures differ"
            )));
        }
        Ok(())
    }

    /// Rebuild an optimizer from the slots whose names pass `keep`.
    pub fn restore_adam(&self, keep: impl Fn(&str) -> bool) -> Adam<F> {
        let mut adam = Adam::new();
        for (name, slot) in &self.opt {
            if keep(name) {
                adam.insert_slot(name.clone(), slot.clone());
            }
        }
        adam
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);

        w.write_all(MAGIC).map_err(io_err)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io_err)?;
        w.write_u8(std::mem::size_of::<F>() as u8).map_err(io_err)?;

        let manifest = Manifest {
            stage: self.stage.name().to_string(),
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            rng: self.rng.clone(),
            sched: self.sched.clone(),
        };
        let mjson = serde_json::to_vec(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        w.write_u64::<LittleEndian>(mjson.len() as u64).map_err(io_err)?;
        w.write_all(&mjson).map_err(io_err)?;

        write_tensor_map(&mut w, &self.params).map_err(io_err)?;
        write_tensor_map(&mut w, &self.buffers).map_err(io_err)?;

        w.write_u64::<LittleEndian>(self.opt.len() as u64).map_err(io_err)?;
        for (name, slot) in &self.opt {
            write_name(&mut w, name).map_err(io_err)?;
            w.write_u64::<LittleEndian>(slot.step).map_err(io_err)?;
            write_tensor(&mut w, &slot.m).map_err(io_err)?;
            write_tensor(&mut w, &slot.v).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |why: String| Error::Checkpoint {
            path: path.to_path_buf(),
            why,
        };
        let io_err = |e: std::io::Error| Error::io(path, e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let dtype = r.read_u8().map_err(io_err)?;
        if dtype as usize != std::mem::size_of::<F>() {
            return Err(bad(format!(
                "element width {dtype} does not match the requested precision ({} bytes)",
                std::mem::size_of::<F>()
            )));
        }

        let mlen = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let mut mjson = vec![0u8; mlen];
        r.read_exact(&mut mjson).map_err(io_err)?;
        let manifest: Manifest =
            serde_json::from_slice(&mjson).map_err(|e| Error::Serde(e.to_string()))?;
        let stage = Stage::from_name(&manifest.stage)?;

        let params = read_tensor_map(&mut r).map_err(io_err)?;
        let buffers = read_tensor_map(&mut r).map_err(io_err)?;

        let count = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let mut opt = IndexMap::with_capacity(count);
        for _ in 0..count {
            let name = read_name(&mut r).map_err(io_err)?;
            let step = r.read_u64::<LittleEndian>().map_err(io_err)?;
            let m = read_tensor(&mut r).map_err(io_err)?;
            let v = read_tensor(&mut r).map_err(io_err)?;
            opt.insert(name, AdamSlot { step, m, v });
        }

        Ok(Checkpoint {
            stage,
            epoch: manifest.epoch,
            config_hash: manifest.config_hash,
            rng: manifest.rng,
            sched: manifest.sched,
            params,
            buffers,
            opt,
        })
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(name.len() as u64)?;
    w.write_all(name.as_bytes())
}

fn read_name<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_tensor<F: Scalar, W: Write>(w: &mut W, t: &ArrayD<F>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(t.ndim() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in t.iter() {
        w.write_f64::<LittleEndian>(x.as_f64())?;
    }
    Ok(())
}

fn read_tensor<F: Scalar, R: Read>(r: &mut R) -> std::io::Result<ArrayD<F>> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(F::of_f64(r.read_f64::<LittleEndian>()?));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_tensor_map<F: Scalar, W: Write>(
    w: &mut W,
    map: &IndexMap<String, ArrayD<F>>,
) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(map.len() as u64)?;
    for (name, t) in map {
        write_name(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_tensor_map<F: Scalar, R: Read>(
    r: &mut R,
) -> std::io::Result<IndexMap<String, ArrayD<F>>> {
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut map = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name = read_name(r)?;
        let t = read_tensor(r)?;
        map.insert(name, t);
    }
    Ok(map)
}
