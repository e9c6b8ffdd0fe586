//! Model checkpoints.
//!
//! Little-endian layout, version 1:
//!
//! ```text
//! magic      8 bytes  "HTRMCKPT"
//! version    u32
//! frames     u32      T
//! dim        u32      d
//! heads      u32      H
//! half_win   u32      ΔK
//! drop_prob  f64      p
//! windows    3 × u32
//! flags      u8       bit 0 positional, bit 1 self-attention, bit 2 dual-softmax
//! count      u32      number of entries
//! entries:   u32 name length, UTF-8 name, u32 rank, rank × u32 extents,
//!            values as f64
//! ```
//!
//! Values are stored at full precision so a reloaded model reproduces the
//! saved one bit for bit.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HtrmError, Result};
use crate::regressor::{Model, ModelConfig, ModelParams};
use crate::tensor::{ByteReader, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HTRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.frames, c.dim, c.heads, c.half_window] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.drop_prob.to_le_bytes());
    for w in c.windows {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    let flags = c.positional as u8 | (c.self_attention as u8) << 1 | (c.dual_softmax as u8) << 2;
    out.push(flags);
    let named = model.params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Model> {
    let mut r = ByteReader::new(bytes, what);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(HtrmError::format(what, 0, "bad magic, expected \"HTRMCKPT\""));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(HtrmError::format(
            what,
            8,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let half_window = r.u32()? as usize;
    let drop_prob = r.f64()?;
    let windows = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let flags = r.u8()?;
    let config = ModelConfig {
        frames,
        dim,
        heads,
        half_window,
        drop_prob,
        windows,
        positional: flags & 1 != 0,
        self_attention: flags & 2 != 0,
        dual_softmax: flags & 4 != 0,
    };
    config
        .validate()
        .map_err(|e| HtrmError::format(what, 12, format!("invalid header: {e}")))?;

    // Template with the right names and shapes; values are overwritten below.
    let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(HtrmError::format(
            what,
            r.pos as u64 - 4,
            format!("{count} entries, expected {}", expected.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| HtrmError::format(what, at, "entry name is not UTF-8"))?;
        if name != want_name {
            return Err(HtrmError::format(
                what,
                at,
                format!("entry {name:?} where {want_name:?} was expected"),
            ));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if &shape != want_shape {
            return Err(HtrmError::format(
                what,
                at,
                format!("{name}: shape {shape:?} does not match {want_shape:?} for this header"),
            ));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        tensors.push(Tensor::from_parts(shape, data));
    }
    if r.remaining() != 0 {
        return Err(HtrmError::format(
            what,
            r.pos as u64,
            format!("{} trailing bytes", r.remaining()),
        ));
    }

    for ((_, slot), t) in params.named_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok(Model { config, params })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| HtrmError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| HtrmError::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let config = ModelConfig {
            frames: 8,
            dim: 16,
            heads: 2,
            half_window: 1,
            drop_prob: 0.25,
            windows: [1, 2, 4],
            positional: false,
            self_attention: true,
            dual_softmax: false,
        };
        Model::new(config, 42).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let back = from_bytes(&to_bytes(&m), "mem").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = to_bytes(&tiny());
        for cut in [0, 5, 20, 60, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut], "mem").unwrap_err();
            assert_eq!(err.exit_code(), 3, "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[12] = 9; // frames no longer match the stored shapes
        assert!(matches!(from_bytes(&bad, "mem"), Err(HtrmError::Format { .. })));
        let mut bad = bytes;
        bad[0] = b'x';
        assert!(matches!(from_bytes(&bad, "mem"), Err(HtrmError::Format { offset: 0, .. })));
    }
}
