//! Binary persistence for the embedding space.
//!
//! Little-endian layout: magic "KTSPACE1", u32 header fields, cluster
//! assignment, step offsets, then the dense f64 payload (question, step,
//! KC vectors and the four encoder tensors), closed by an FNV-1a checksum
//! of everything before it. Floats round-trip bit-exactly.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numcore::rng::fnv1a;
use crate::{Real, Tensor};

use super::cluster::ClusterAssignment;
use super::{EmbeddingSpace, TextEncoder};

const MAGIC: &[u8; 8] = b"KTSPACE1";
const VERSION: u32 = 1;

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
            .map_err(|_| Error::data("embedding space file truncated".to_string()))?;
    }
    Tensor::from_vec(rows, cols, data)
}

pub fn save_space(path: impl AsRef<Path>, space: &EmbeddingSpace) -> Result<()> {
    let (q, s, offsets, kc, assignment, encoder) = space.parts();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let w = &mut buf;
    w.write_u32::<LittleEndian>(space.dim() as u32).unwrap();
    w.write_u32::<LittleEndian>(encoder.d_tok() as u32).unwrap();
    w.write_u32::<LittleEndian>(encoder.vocab()).unwrap();
    w.write_u32::<LittleEndian>(q.rows() as u32).unwrap();
    w.write_u32::<LittleEndian>(s.rows() as u32).unwrap();
    w.write_u32::<LittleEndian>(kc.rows() as u32).unwrap();
    for &c in assignment.raw() {
        w.write_u32::<LittleEndian>(c).unwrap();
    }
    for &o in offsets {
        w.write_u32::<LittleEndian>(o).unwrap();
    }
    write_tensor(&mut buf, q);
    write_tensor(&mut buf, s);
    write_tensor(&mut buf, kc);
    let [table, kinds, pw, pb] = encoder.params();
    write_tensor(&mut buf, table);
    write_tensor(&mut buf, kinds);
    write_tensor(&mut buf, pw);
    write_tensor(&mut buf, pb);
    let checksum = fnv1a(&buf);
    buf.write_u64::<LittleEndian>(checksum).unwrap();
    let tmp = path.as_ref().with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

pub fn load_space(path: impl AsRef<Path>) -> Result<EmbeddingSpace> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::data("embedding space file too small".to_string()));
    }
    if &bytes[..7] != &MAGIC[..7] {
        return Err(Error::data("not an embedding space file (bad magic)".to_string()));
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
        return Err(Error::data("embedding space checksum mismatch".to_string()));
    }
    let mut cur = Cursor::new(&body[MAGIC.len()..]);
    let trunc = |_| Error::data("embedding space file truncated".to_string());
    let dim = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let d_tok = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let vocab = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let num_q = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let num_s = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let num_kc = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut raw_assignment = vec![0u32; num_kc];
    for a in raw_assignment.iter_mut() {
        *a = cur.read_u32::<LittleEndian>().map_err(trunc)?;
    }
    let mut offsets = vec![0u32; num_q + 1];
    for o in offsets.iter_mut() {
        *o = cur.read_u32::<LittleEndian>().map_err(trunc)?;
    }
    let q = read_tensor(&mut cur, num_q, dim)?;
    let s = read_tensor(&mut cur, num_s, dim)?;
    let kc = read_tensor(&mut cur, num_kc, dim)?;
    let table = read_tensor(&mut cur, vocab, d_tok)?;
    let kinds = read_tensor(&mut cur, 3, d_tok)?;
    let pw = read_tensor(&mut cur, d_tok, dim)?;
    let pb = read_tensor(&mut cur, 1, dim)?;
    if (cur.position() as usize) != body.len() - MAGIC.len() {
        return Err(Error::data("embedding space file has trailing bytes".to_string()));
    }
    let assignment = ClusterAssignment::from_raw(raw_assignment)?;
    let encoder = TextEncoder::from_params(table, kinds, pw, pb);
    EmbeddingSpace::from_parts(q, s, offsets, kc, assignment, encoder)
}
