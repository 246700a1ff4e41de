//! Binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "LGDC" | version u32 | stage u8 | epoch u32
//! config: len u32, UTF-8 TOML snapshot
//! sketch: input_dim u32, sketch_dim u32, seed u64, h1/h2 u32 × C, s1/s2 i8 × C
//! params, buffers, velocity: count u32, then per tensor
//!     name len u16, UTF-8 name, dtype u8, rank u8, dims u32 × rank, data
//! ```
//!
//! Nothing is returned unless the whole file parses and no bytes remain.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use lgd_core::nn::ParamStore;
use lgd_core::sketch::SketchConfig;
use lgd_core::train::Sgd;
use lgd_core::{DType, Network, Tensor};

use crate::config::{ConfigFile, Experiment};
use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 4] = b"LGDC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Experiment,
    pub stage: u8,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    pub params: ParamStore,
    pub buffers: ParamStore,
    /// Momentum buffers; empty for a fresh optimizer.
    pub velocity: ParamStore,
    pub sketch: SketchConfig,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::validation(format!("checkpoint: {}", msg.into()))
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> CliResult<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in 32 bits")))?;
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get<const N: usize, R: Read>(r: &mut R) -> CliResult<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> CliResult<usize> {
    Ok(u32::from_le_bytes(get(r)?) as usize)
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(bad("truncated"));
    }
    Ok(buf)
}

fn write_store<W: Write>(w: &mut W, store: &ParamStore, dtype: DType) -> CliResult<()> {
    put_u32(w, store.len())?;
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("name {name} too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype.code(), t.shape().len() as u8])?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for &x in t.data() {
            match dtype {
                DType::Single => w.write_all(&(x as f32).to_le_bytes())?,
                DType::Double => w.write_all(&x.to_le_bytes())?,
            }
        }
    }
    Ok(())
}

fn read_store<R: Read>(r: &mut R) -> CliResult<ParamStore> {
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(get(r)?) as usize;
        let name = String::from_utf8(get_bytes(r, len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let [code, rank] = get::<2, _>(r)?;
        let dtype = DType::from_code(code)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<CliResult<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        let raw = get_bytes(r, n.checked_mul(dtype.size()).ok_or_else(|| bad("tensor too large"))?)?;
        let data = match dtype {
            DType::Single => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::Double => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        if store.contains(&name) {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

impl Checkpoint {
    /// Snapshot of a network and optimizer after `epoch` epochs of `stage`.
    pub fn capture(config: &Experiment, stage: u8, epoch: usize, net: &Network, opt: Option<&Sgd>) -> Self {
        Checkpoint {
            config: config.clone(),
            stage,
            epoch,
            params: net.params.clone(),
            buffers: net.buffers.clone(),
            velocity: opt.map(|o| o.velocity.clone()).unwrap_or_default(),
            sketch: (*net.sketch).clone(),
        }
    }

    pub fn network(&self) -> CliResult<Network> {
        Ok(Network::from_parts(self.config.network.clone(), self.params.clone(), self.buffers.clone(), self.sketch.clone())?)
    }

    /// Optimizer state for continuing the stored stage.
    pub fn optimizer(&self) -> CliResult<Sgd> {
        let cfg = self.config.stage(self.stage)?;
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        for (name, v) in self.velocity.iter() {
            let p = self.params.get(name).map_err(|_| bad(format!("velocity for unknown parameter {name}")))?;
            if p.shape() != v.shape() {
                return Err(bad(format!("velocity of {name} has the wrong shape")));
            }
        }
        opt.velocity = self.velocity.clone();
        Ok(opt)
    }

    pub fn write_to<W: Write>(&self, w: &mut W, dtype: DType) -> CliResult<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.stage])?;
        put_u32(w, self.epoch)?;
        let text = self.config.to_toml()?;
        put_u32(w, text.len())?;
        w.write_all(text.as_bytes())?;

        let s = &self.sketch;
        put_u32(w, s.input_dim)?;
        put_u32(w, s.sketch_dim)?;
        w.write_all(&s.seed.to_le_bytes())?;
        for h in [&s.h1, &s.h2] {
            for &v in h.iter() {
                put_u32(w, v)?;
            }
        }
        for sign in [&s.s1, &s.s2] {
            w.write_all(&sign.iter().map(|&v| if v > 0.0 { 1u8 } else { 0xff }).collect::<Vec<_>>())?;
        }
        for store in [&self.params, &self.buffers, &self.velocity] {
            write_store(w, store, dtype)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> CliResult<Checkpoint> {
        if &get::<4, _>(r)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(get(r)?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let [stage] = get::<1, _>(r)?;
        let epoch = get_u32(r)?;
        let len = get_u32(r)?;
        let text = String::from_utf8(get_bytes(r, len)?).map_err(|_| bad("config snapshot is not UTF-8"))?;
        let config = ConfigFile::parse(&text)?.resolve()?;
        config.stage(stage)?;

        let (c, d) = (get_u32(r)?, get_u32(r)?);
        let seed = u64::from_le_bytes(get(r)?);
        if c > 1 << 24 {
            return Err(bad("sketch too large"));
        }
        let mut hash = || (0..c).map(|_| get_u32(r)).collect::<CliResult<Vec<_>>>();
        let (h1, h2) = (hash()?, hash()?);
        let mut sign = || -> CliResult<Vec<f64>> {
            get_bytes(r, c)?
                .into_iter()
                .map(|b| match b {
                    1 => Ok(1.0),
                    0xff => Ok(-1.0),
                    _ => Err(bad("sketch sign is not ±1")),
                })
                .collect()
        };
        let (s1, s2) = (sign()?, sign()?);
        let sketch = SketchConfig { input_dim: c, sketch_dim: d, seed, h1, h2, s1, s2 };
        sketch.validate()?;

        let params = read_store(r)?;
        let buffers = read_store(r)?;
        let velocity = read_store(r)?;
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(bad("trailing bytes"));
        }
        let ckpt = Checkpoint { config, stage, epoch, params, buffers, velocity, sketch };
        // Shape and name checks against the stored spec.
        ckpt.network()?;
        ckpt.optimizer()?;
        Ok(ckpt)
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path, dtype: DType) -> CliResult<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w, dtype)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Checkpoint> {
        let f = File::open(path).map_err(|e| CliError::validation(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Checkpoint::read_from(&mut BufReader::new(f))
    }
}
