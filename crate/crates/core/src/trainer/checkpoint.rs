//! Binary checkpoint format.
//!
//! ```text
//! "DROCK"  u8 version
//! array  := u64 length (LE), then `length` little-endian f64 or i64 values
//! i64[]  layer_dims
//! per layer: f64[] weights, f64[] biases
//! f64[]  store losses
//! i64[]  store last_update
//! i64[1] store step
//! f64[]  velocity
//! i64[1] train step
//! u32    CRC32 (IEEE) of every preceding byte, LE
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, DroError, Result};
use crate::sampler::StaleLossStore;
use crate::tinynet::MlpModel;
use crate::trainer::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DROCK";
pub const CHECKPOINT_VERSION: u8 = 1;

const HEADER_LEN: usize = 6;
const TRAILER_LEN: usize = 4;

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_i64s(buf: &mut Vec<u8>, values: &[i64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    let dims: Vec<i64> = state.model.layer_dims().iter().map(|&d| d as i64).collect();
    put_i64s(&mut buf, &dims);
    for layer in state.model.layers() {
        put_f64s(&mut buf, &layer.weights);
        put_f64s(&mut buf, &layer.biases);
    }
    put_f64s(&mut buf, state.store.losses());
    put_i64s(&mut buf, state.store.last_update());
    put_i64s(&mut buf, &[state.store.step()]);
    put_f64s(&mut buf, &state.velocity);
    put_i64s(&mut buf, &[state.step as i64]);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn len(&mut self, what: &str) -> std::result::Result<usize, CheckpointError> {
        let raw = self.take(8, what)?;
        let n = u64::from_le_bytes(raw.try_into().unwrap());
        usize::try_from(n).map_err(|_| CheckpointError::Truncated(format!("length of {what}")))
    }

    fn f64s(&mut self, what: &str) -> std::result::Result<Vec<f64>, CheckpointError> {
        let n = self.len(what)?;
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i64s(&mut self, what: &str) -> std::result::Result<Vec<i64>, CheckpointError> {
        let n = self.len(what)?;
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn scalar(&mut self, what: &str) -> std::result::Result<i64, CheckpointError> {
        match self.i64s(what)?.as_slice() {
            [v] => Ok(*v),
            other => Err(CheckpointError::Malformed(format!(
                "{what} holds {} values",
                other.len()
            ))),
        }
    }
}

struct Parsed {
    dims: Vec<usize>,
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    losses: Vec<f64>,
    last_update: Vec<i64>,
    store_step: i64,
    velocity: Vec<f64>,
    step: i64,
}

fn parse_body(body: &[u8]) -> std::result::Result<(Parsed, usize), CheckpointError> {
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let dims = r
        .i64s("layer dims")?
        .into_iter()
        .map(|d| {
            usize::try_from(d).map_err(|_| CheckpointError::Malformed(format!("layer dim {d}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if dims.len() < 2 {
        return Err(CheckpointError::Malformed(format!("layer dims {dims:?}")));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let w = r.f64s(&format!("layer {l} weights"))?;
        let b = r.f64s(&format!("layer {l} biases"))?;
        layers.push((w, b));
    }
    let losses = r.f64s("store losses")?;
    let last_update = r.i64s("store last_update")?;
    let store_step = r.scalar("store step")?;
    let velocity = r.f64s("velocity")?;
    let step = r.scalar("train step")?;
    Ok((
        Parsed {
            dims,
            layers,
            losses,
            last_update,
            store_step,
            velocity,
            step,
        },
        r.pos,
    ))
}

/// Decodes a checkpoint.
///
/// Checks run in order: magic, version, checksum. On a checksum mismatch the
/// body is scanned structurally so that a cut-off file reports
/// [`CheckpointError::Truncated`] instead.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated("missing version byte".into()).into());
    }
    let version = bytes[5];
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(CheckpointError::Truncated("missing checksum".into()).into());
    }
    let (content, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(content);
    let body = &content[HEADER_LEN..];
    if stored != computed {
        // In a cut-off file the "trailer" is really payload.
        let rest = &bytes[HEADER_LEN..];
        let err = match parse_body(rest) {
            Err(e @ CheckpointError::Truncated(_)) => e,
            Ok((_, consumed)) if rest.len() - consumed < TRAILER_LEN => {
                CheckpointError::Truncated("checksum cut off".into())
            }
            _ => CheckpointError::Checksum { stored, computed },
        };
        return Err(err.into());
    }
    let (p, consumed) = parse_body(body)?;
    if consumed != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes before checksum",
            body.len() - consumed
        ))
        .into());
    }
    let model = MlpModel::from_layers(&p.dims, p.layers).map_err(malformed)?;
    let store =
        StaleLossStore::from_parts(p.losses, p.last_update, p.store_step).map_err(malformed)?;
    if p.velocity.len() != model.param_count() {
        return Err(CheckpointError::Malformed(format!(
            "velocity has {} entries for {} parameters",
            p.velocity.len(),
            model.param_count()
        ))
        .into());
    }
    let step = u64::try_from(p.step)
        .map_err(|_| CheckpointError::Malformed(format!("negative step {}", p.step)))?;
    Ok(TrainState {
        model,
        store,
        velocity: p.velocity,
        step,
    })
}

fn malformed(e: DroError) -> DroError {
    CheckpointError::Malformed(e.to_string()).into()
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}
