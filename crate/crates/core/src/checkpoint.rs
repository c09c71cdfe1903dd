//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       5           magic "PNEU1"
//! 5       4  (u32)    config length L
//! 9       L           model config as UTF-8 `key = value` text
//! 9+L     4  (u32)    tensor count T
//!         T x {
//!           4  (u32)  element count E
//!           4E        E x f32
//!         }
//! end-8   8  (u64)    FNV-1a 64 of every preceding byte
//! ```
//!
//! Tensors appear in build order, per layer: parameters first, then
//! batch-norm running mean and variance.

use std::io::{Read, Write};

use crate::error::{CheckpointFault, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::SeededRng;

pub const MAGIC: &[u8; 5] = b"PNEU1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let config = model.config().to_text();
    let tensors: Vec<_> = model.layers().iter().flat_map(|l| l.state()).collect();
    let mut out = Vec::with_capacity(
        16 + config.len() + tensors.iter().map(|t| 4 + 4 * t.numel()).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.numel() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_checkpoint(model: &Model<f32>, sink: &mut impl Write) -> std::io::Result<()> {
    sink.write_all(&to_bytes(model))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::CorruptCheckpoint(CheckpointFault::Truncated))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let corrupt = |f| Error::CorruptCheckpoint(f);
    if bytes.len() < MAGIC.len() {
        return Err(corrupt(CheckpointFault::Truncated));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt(CheckpointFault::BadMagic));
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(corrupt(CheckpointFault::Truncated));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(corrupt(CheckpointFault::ChecksumMismatch { stored, computed }));
    }

    let mut cur = Cursor { buf: body, pos: MAGIC.len() };
    let len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| corrupt(CheckpointFault::Malformed("config is not UTF-8".into())))?;
    let config = ModelConfig::from_text(text)
        .map_err(|e| corrupt(CheckpointFault::Malformed(format!("embedded config: {e}"))))?;

    let mut model = Model::<f32>::build(&config, &mut SeededRng::new(0))?;
    let count = cur.u32()? as usize;
    let mut slots: Vec<_> = model.layers_mut().iter_mut().flat_map(|l| l.state_mut()).collect();
    if count != slots.len() {
        return Err(corrupt(CheckpointFault::Malformed(format!(
            "{count} tensors stored, config needs {}",
            slots.len()
        ))));
    }
    for (i, slot) in slots.iter_mut().enumerate() {
        let n = cur.u32()? as usize;
        if n != slot.numel() {
            return Err(corrupt(CheckpointFault::Malformed(format!(
                "tensor {i} has {n} elements, expected {}",
                slot.numel()
            ))));
        }
        let raw = cur.take(4 * n)?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if cur.pos != body.len() {
        return Err(corrupt(CheckpointFault::Malformed(format!(
            "{} trailing bytes",
            body.len() - cur.pos
        ))));
    }
    Ok(model)
}

pub fn load_checkpoint(source: &mut impl Read) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    from_bytes(&bytes)
}
