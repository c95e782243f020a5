//! Checkpoint persistence. Little-endian layout: magic "KTCKPT01", u32 dim
//! and state_dim, the eleven parameter tensors as raw f64, a length-prefixed
//! JSON metadata block, and an FNV-1a checksum of everything before it.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng::fnv1a;
use crate::{Real, Tensor};

use super::model::KTModel;

const MAGIC: &[u8; 8] = b"KTCKPT01";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub seed: u64,
    pub epochs_trained: usize,
    pub calibrated: bool,
    pub epoch_losses: Vec<Real>,
}

impl CheckpointMeta {
    pub fn new(seed: u64, epochs_trained: usize, calibrated: bool, epoch_losses: Vec<Real>) -> Self {
        CheckpointMeta {
            schema_version: VERSION,
            seed,
            epochs_trained,
            calibrated,
            epoch_losses,
        }
    }
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    for &x in t.data() {
        buf.write_f64::<LittleEndian>(x).expect("vec write");
    }
}

fn read_tensor(cur: &mut Cursor<&[u8]>, rows: usize, cols: usize) -> Result<Tensor> {
    let mut data = vec![0.0 as Real; rows * cols];
    for x in data.iter_mut() {
        *x = cur
            .read_f64::<LittleEndian>()
            .map_err(|_| Error::data("checkpoint file truncated".to_string()))?;
    }
    Tensor::from_vec(rows, cols, data)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &KTModel,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(model.dim() as u32).unwrap();
    buf.write_u32::<LittleEndian>(model.state_dim() as u32).unwrap();
    for t in model.params() {
        write_tensor(&mut buf, t);
    }
    let meta_bytes =
        serde_json::to_vec(meta).map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
    buf.write_u32::<LittleEndian>(meta_bytes.len() as u32).unwrap();
    buf.extend_from_slice(&meta_bytes);
    let checksum = fnv1a(&buf);
    buf.write_u64::<LittleEndian>(checksum).unwrap();
    let tmp = path.as_ref().with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(KTModel, CheckpointMeta)> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < MAGIC.len() + 16 {
        return Err(Error::data("checkpoint file too small".to_string()));
    }
    if &bytes[..7] != &MAGIC[..7] {
        return Err(Error::data("not a KT checkpoint (bad magic)".to_string()));
    }
    if bytes[7] != MAGIC[7] {
        let found = (bytes[7] as char).to_digit(10).unwrap_or(0);
        return Err(Error::Version {
            found,
            expected: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = Cursor::new(tail).read_u64::<LittleEndian>().unwrap();
    if fnv1a(body) != stored {
        return Err(Error::data("checkpoint checksum mismatch".to_string()));
    }
    let mut cur = Cursor::new(&body[MAGIC.len()..]);
    let trunc = |_| Error::data("checkpoint file truncated".to_string());
    let dim = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let state_dim = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    if dim == 0 || state_dim == 0 {
        return Err(Error::data("checkpoint has zero dimensions".to_string()));
    }
    let mut model = KTModel::zeros(dim, state_dim);
    model.lstm.w_x = read_tensor(&mut cur, 2 * dim, 4 * state_dim)?;
    model.lstm.w_h = read_tensor(&mut cur, state_dim, 4 * state_dim)?;
    model.lstm.b = read_tensor(&mut cur, 1, 4 * state_dim)?;
    model.response = read_tensor(&mut cur, 2, dim)?;
    model.up_w = read_tensor(&mut cur, state_dim, dim)?;
    model.up_b = read_tensor(&mut cur, 1, dim)?;
    model.w1s = read_tensor(&mut cur, dim, 2 * dim)?;
    model.w1q = read_tensor(&mut cur, dim, 2 * dim)?;
    model.b1 = read_tensor(&mut cur, 1, 2 * dim)?;
    model.w2 = read_tensor(&mut cur, 2 * dim, 1)?;
    model.b2 = read_tensor(&mut cur, 1, 1)?;
    let meta_len = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let pos = cur.position() as usize;
    let rest = &body[MAGIC.len()..];
    if pos + meta_len != rest.len() {
        return Err(Error::data(
            "checkpoint metadata length does not match file size".to_string(),
        ));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&rest[pos..pos + meta_len])
        .map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
    model.set_requires_grad(true);
    Ok((model, meta))
}
