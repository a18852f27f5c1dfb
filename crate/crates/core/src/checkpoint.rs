//! Binary trainer checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LDSC" | u32 version | u32 len | header JSON (config, epoch, step, total_steps)
//! u32 count | count × (u32 len, name, u32 rank, rank × u32 dim)
//! f32 payload of every tensor in table order
//! u64 optimizer steps | u32 buffer sets | sets × f32 over query tensors
//! rng: 32-byte seed | u64 stream | u128 word position
//! ```
//!
//! Query tensors are named `query/…`, key tensors `key/…`; both must match
//! the layout rebuilt from the stored config before anything is accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::DualEncoder;
use crate::numerics::rng::RngState;
use crate::numerics::{OptimizerKind, OptimizerState, ParamStore, Rng, Tensor};
use crate::pipeline::{PretrainConfig, Trainer};

pub const MAGIC: [u8; 4] = *b"LDSC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: PretrainConfig,
    epoch: u64,
    step: u64,
    total_steps: u64,
}

pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let header = Header {
        config: trainer.config.clone(),
        epoch: trainer.epoch(),
        step: trainer.step(),
        total_steps: trainer.schedule().total_steps,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);

    let enc = &trainer.encoder;
    let tables = [("query", &enc.query), ("key", &enc.key)];
    put_u32(&mut out, (enc.query.len() + enc.key.len()) as u32);
    for (prefix, store) in tables {
        for (name, t) in store.iter() {
            let full = format!("{prefix}/{name}");
            put_u32(&mut out, full.len() as u32);
            out.extend_from_slice(full.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
        }
    }
    for (_, store) in tables {
        for t in store.tensors() {
            put_f32s(&mut out, t.data());
        }
    }

    let opt = &trainer.optimizer;
    out.extend_from_slice(&opt.step_count().to_le_bytes());
    let sets: Vec<&[Vec<f32>]> = [opt.first_moments(), opt.second_moments()]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    put_u32(&mut out, sets.len() as u32);
    for set in sets {
        for buf in set {
            put_f32s(&mut out, buf);
        }
    }

    let rng = trainer.rng().state();
    out.extend_from_slice(&rng.seed);
    out.extend_from_slice(&rng.stream.to_le_bytes());
    out.extend_from_slice(&rng.word_pos.to_le_bytes());
    Ok(out)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(trainer)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::CheckpointMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("header")? as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
    header.config.validate()?;

    // Shapes come from the config; the stored table must agree exactly.
    let mut encoder = DualEncoder::<f32>::new(
        &header.config.vit,
        &header.config.heads,
        header.config.train.momentum,
        &mut Rng::seed(0),
    )?;
    let count = r.u32("shape table")? as usize;
    let expected: Vec<(String, Vec<usize>)> = [("query", &encoder.query), ("key", &encoder.key)]
        .into_iter()
        .flat_map(|(p, s)| s.iter().map(move |(n, t)| (format!("{p}/{n}"), t.shape().to_vec())))
        .collect();
    if count != expected.len() {
        return Err(Error::CheckpointShape(format!(
            "{count} stored tensors, model has {}",
            expected.len()
        )));
    }
    for (want_name, want_shape) in &expected {
        let n = r.u32("shape table")? as usize;
        let name = String::from_utf8_lossy(r.take(n, "shape table")?).into_owned();
        let rank = r.u32("shape table")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("shape table").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &name != want_name || &dims != want_shape {
            return Err(Error::CheckpointShape(format!(
                "stored {name} {dims:?}, expected {want_name} {want_shape:?}"
            )));
        }
    }
    fill(&mut r, &mut encoder.query)?;
    fill(&mut r, &mut encoder.key)?;

    let mut optimizer = OptimizerState::new(
        OptimizerKind::adamw(),
        header.config.train.weight_decay,
        &encoder.query,
    );
    let opt_steps = r.u64("optimizer")?;
    let sets = r.u32("optimizer")?;
    if sets != 2 {
        return Err(Error::CheckpointShape(format!("{sets} optimizer buffer sets, expected 2")));
    }
    let read_set = |r: &mut Reader| -> Result<Vec<Vec<f32>>> {
        encoder
            .query
            .tensors()
            .iter()
            .map(|t| r.f32s(t.numel(), "optimizer"))
            .collect()
    };
    let first = read_set(&mut r)?;
    let second = read_set(&mut r)?;
    optimizer.restore(opt_steps, first, second)?;

    let seed: [u8; 32] = r.take(32, "rng")?.try_into().expect("32 bytes");
    let stream = r.u64("rng")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng")?.try_into().expect("16 bytes"));
    if r.pos != bytes.len() {
        return Err(Error::CheckpointShape(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let rng = Rng::from_state(RngState {
        seed,
        stream,
        word_pos,
    });
    Trainer::from_parts(
        header.config,
        encoder,
        optimizer,
        rng,
        header.step,
        header.epoch,
        header.total_steps,
    )
}

fn fill(r: &mut Reader, store: &mut ParamStore<f32>) -> Result<()> {
    for t in store.tensors_mut() {
        let data = r.f32s(t.numel(), "payload")?;
        let mut fresh = Tensor::new(t.shape(), data)?;
        fresh.requires_grad = t.requires_grad;
        *t = fresh;
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::CheckpointTruncated { section })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, section: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::CheckpointTruncated { section })?, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
