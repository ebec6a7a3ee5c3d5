//! Binary utterance shards.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! header:  magic "TFSHARD\0" (8 bytes) | version u32 | records u32 | embed_dim u32 | attr_dim u32
//! record:  frames u32 | tokens u16 × frames | attribute f32 × attr_dim | embeddings f32 × frames·embed_dim (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::Utterance;
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 8] = b"TFSHARD\0";
pub const SHARD_VERSION: u32 = 1;

pub fn write_shard(path: &Path, utterances: &[Utterance], embed_dim: usize, attr_dim: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(SHARD_MAGIC);
    for v in [SHARD_VERSION, utterances.len() as u32, embed_dim as u32, attr_dim as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for u in utterances {
        if u.embeddings.dim() != (u.len(), embed_dim) || u.attribute.len() != attr_dim {
            return Err(Error::contract("utterance shape does not match shard dimensions"));
        }
        buf.extend_from_slice(&(u.len() as u32).to_le_bytes());
        u.tokens.iter().for_each(|t| buf.extend_from_slice(&t.to_le_bytes()));
        u.attribute.iter().for_each(|a| buf.extend_from_slice(&a.to_le_bytes()));
        u.embeddings.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated shard"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        Ok(self
            .take(2 * n)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn read_shard(path: &Path) -> Result<Vec<Utterance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if c.take(8)? != SHARD_MAGIC {
        return Err(Error::format(path, "bad shard magic"));
    }
    let version = c.u32()?;
    if version != SHARD_VERSION {
        return Err(Error::format(
            path,
            format!("shard version {version}, expected {SHARD_VERSION}"),
        ));
    }
    let records = c.u32()? as usize;
    let d = c.u32()? as usize;
    let a = c.u32()? as usize;
    let mut out = Vec::with_capacity(records);
    for _ in 0..records {
        let m = c.u32()? as usize;
        let tokens = c.u16s(m)?;
        let attribute = c.f32s(a)?;
        let emb = c.f32s(m * d)?;
        let embeddings = Array2::from_shape_vec((m, d), emb).map_err(|e| Error::format(path, e.to_string()))?;
        out.push(Utterance {
            tokens,
            embeddings,
            attribute,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GrammarConfig, GrammarSpec, RenderConfig, RenderSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let g = GrammarSpec::generate(&GrammarConfig::default(), 1).unwrap();
        let r = RenderSpec::generate(&RenderConfig::default(), 64, 2).unwrap();
        let corpus = generate_corpus(&g, &r, 25, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.shard");
        write_shard(&p, &corpus, 32, 8).unwrap();
        let back = read_shard(&p).unwrap();
        assert_eq!(back.len(), corpus.len());
        for (x, y) in corpus.iter().zip(&back) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.attribute, y.attribute);
            assert!(x.embeddings.iter().zip(y.embeddings.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let p2 = dir.path().join("b.shard");
        write_shard(&p2, &back, 32, 8).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_shards_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.shard");
        std::fs::write(&p, b"NOTASHARD___________").unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Format { .. })));
        let mut good = Vec::from(&SHARD_MAGIC[..]);
        good.extend_from_slice(&2u32.to_le_bytes());
        good.extend_from_slice(&[0; 12]);
        std::fs::write(&p, &good).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Format { .. })));
    }
}
