//! `RAPF-EMB v1` binary layout, little-endian:
//!
//! ```text
//! magic   8 bytes  "RAPFEMB1"
//! version u32      1
//! dim     u32
//! classes u32
//! per class:  u16 name_len, name bytes (UTF-8), dim x f32 text embedding
//! records u64
//! per record: u32 class_id, u8 split (0 = train, 1 = test), dim x f32 vector
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ClassCatalog, ClassEntry, EmbeddingStore, LabeledEmbedding, Split};
use crate::error::{RapfError, Result};

pub const MAGIC: &[u8; 8] = b"RAPFEMB1";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 4 + 4;

/// Exact size in bytes of the encoding of `store`.
pub fn encoded_len(store: &EmbeddingStore) -> u64 {
    let dim = store.catalog().dim() as u64;
    let catalog: u64 = store
        .catalog()
        .entries()
        .iter()
        .map(|e| 2 + e.name.len() as u64 + 4 * dim)
        .sum();
    HEADER_LEN as u64 + catalog + 8 + store.records().len() as u64 * (4 + 1 + 4 * dim)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let catalog = store.catalog();
    for (id, e) in catalog.entries().iter().enumerate() {
        if e.name.len() > u16::MAX as usize {
            return Err(RapfError::Integrity {
                class_id: id as u32,
                name: e.name.clone(),
                detail: "class name longer than 65535 bytes".into(),
            });
        }
    }
    let file = fs::File::create(path).map_err(|e| RapfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_all(&mut w, store).map_err(|e| RapfError::io(path, e))?;
    w.flush().map_err(|e| RapfError::io(path, e))
}

fn write_all(w: &mut impl Write, store: &EmbeddingStore) -> std::io::Result<()> {
    let catalog = store.catalog();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(catalog.dim() as u32).to_le_bytes())?;
    w.write_all(&(catalog.len() as u32).to_le_bytes())?;
    for e in catalog.entries() {
        w.write_all(&(e.name.len() as u16).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        write_f32s(w, &e.text)?;
    }
    w.write_all(&(store.records().len() as u64).to_le_bytes())?;
    for r in store.records() {
        w.write_all(&r.class_id.to_le_bytes())?;
        w.write_all(&[r.split as u8])?;
        write_f32s(w, &r.vector)?;
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, xs: &[f32]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(RapfError::Corruption(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| RapfError::io(path, e))?;
    decode(&buf)
}

pub(crate) fn decode(buf: &[u8]) -> Result<EmbeddingStore> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(RapfError::Format("missing RAPFEMB1 magic".into()));
    }
    let mut cur = Cursor {
        buf,
        pos: MAGIC.len(),
    };
    let version = cur
        .u32("version")
        .map_err(|_| RapfError::Format("missing version".into()))?;
    if version != VERSION {
        return Err(RapfError::Format(format!("unsupported version {version}")));
    }
    let dim = cur.u32("dim")? as usize;
    let num_classes = cur.u32("class count")? as usize;
    if dim < 2 {
        return Err(RapfError::Format(format!("embedding dimension {dim} < 2")));
    }

    let mut entries = Vec::with_capacity(num_classes.min(1 << 16));
    for id in 0..num_classes {
        let len = cur.u16("class name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "class name")?)
            .map_err(|_| RapfError::Corruption(format!("class {id} name is not UTF-8")))?
            .to_owned();
        let text = cur.f32s(dim, "text embedding")?;
        entries.push(ClassEntry { name, text });
    }
    let catalog = ClassCatalog::new(dim, entries)?;

    let num_records = cur.u64("record count")?;
    let record_len = 4 + 1 + 4 * dim as u64;
    let remaining = (buf.len() - cur.pos) as u64;
    if num_records.checked_mul(record_len) != Some(remaining) {
        return Err(RapfError::Corruption(format!(
            "record section holds {remaining} bytes, header announces {num_records} records of {record_len} bytes"
        )));
    }
    let mut records = Vec::with_capacity(num_records as usize);
    for i in 0..num_records {
        let class_id = cur.u32("record class id")?;
        if class_id as usize >= catalog.len() {
            return Err(RapfError::Corruption(format!(
                "record {i} references class {class_id} outside the catalog"
            )));
        }
        let split_byte = cur.u8("record split")?;
        let split = Split::from_byte(split_byte).ok_or_else(|| {
            RapfError::Corruption(format!("record {i} has invalid split byte {split_byte}"))
        })?;
        let vector = cur.f32s(dim, "record vector")?;
        records.push(LabeledEmbedding {
            class_id,
            split,
            vector,
        });
    }
    EmbeddingStore::new(catalog, records)
}
