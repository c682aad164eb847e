//! Binary checkpoint serialization.
//!
//! Little-endian layout: magic "GSVR", version u32, then one block per table:
//! name length (u64) + UTF-8 bytes, vocab_size u64, dim u64, f64 weights
//! row-major, adam_m, adam_v, then per-row step counts (u64). Tables are read
//! until end of file. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embeddings::{EmbeddingTable, ParamStore, TableKind};
use crate::error::{GsvrError, Result};

const MAGIC: &[u8; 4] = b"GSVR";
const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn write_to<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for table in store.tables() {
        write_table(w, table)?;
    }
    Ok(())
}

fn write_table<W: Write>(w: &mut W, t: &EmbeddingTable) -> Result<()> {
    let name = t.name.as_bytes();
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(t.vocab_size as u64).to_le_bytes())?;
    w.write_all(&(t.dim as u64).to_le_bytes())?;
    for &x in &t.weights {
        w.write_all(&x.to_le_bytes())?;
    }
    for &x in &t.adam_m {
        w.write_all(&x.to_le_bytes())?;
    }
    for &x in &t.adam_v {
        w.write_all(&x.to_le_bytes())?;
    }
    for &c in &t.step_counts {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

/// Read every table in the file. Kinds are not stored; the caller matches
/// tables back onto a constructed model by name.
pub fn read_checkpoint(path: &Path) -> Result<Vec<EmbeddingTable>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_from(&mut r)
}

pub fn read_from<R: Read>(r: &mut R) -> Result<Vec<EmbeddingTable>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| GsvrError::Checkpoint("file too short for header".to_string()))?;
    if &magic != MAGIC {
        return Err(GsvrError::Checkpoint("bad magic".to_string()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(GsvrError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut tables = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read(&mut len_buf[..1])? {
            0 => break, // clean EOF between tables
            _ => r.read_exact(&mut len_buf[1..])?,
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| GsvrError::Checkpoint("non-UTF-8 table name".to_string()))?;
        let vocab = read_u64(r)? as usize;
        let dim = read_u64(r)? as usize;
        let count = vocab
            .checked_mul(dim)
            .ok_or_else(|| GsvrError::Checkpoint("table size overflow".to_string()))?;
        let weights = read_f64s(r, count)?;
        let adam_m = read_f64s(r, count)?;
        let adam_v = read_f64s(r, count)?;
        let mut step_counts = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            step_counts.push(read_u64(r)?);
        }
        let mut table = EmbeddingTable::from_weights(&name, vocab, dim, weights, TableKind::Dense);
        table.adam_m = adam_m;
        table.adam_v = adam_v;
        table.step_counts = step_counts;
        tables.push(table);
    }
    Ok(tables)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
