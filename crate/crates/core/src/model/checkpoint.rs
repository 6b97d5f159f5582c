//! Checkpoint file: one line of JSON header, then every parameter block as
//! raw little-endian `f64`, in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, ModelConfig, ModelParams};
use crate::error::{Error, Result};

const FORMAT: &str = "attnsteer-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub blocks: Vec<BlockEntry>,
    pub checksum: String,
}

pub fn write_checkpoint(params: &ModelParams, mut w: impl Write) -> std::io::Result<()> {
    let mut offset = 0;
    let blocks = params
        .blocks()
        .into_iter()
        .map(|(name, t)| {
            let e = BlockEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            };
            offset += t.len();
            e
        })
        .collect();
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config.clone(),
        blocks,
        checksum: params.checksum(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in params.blocks() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint(r: impl Read) -> Result<ModelParams> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)
        .map_err(|e| Error::parse("checkpoint", e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::parse("checkpoint header", e))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::parse(
            "checkpoint header",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut params = init_model(&header.config)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .blocks()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let found: Vec<(String, Vec<usize>)> = header
        .blocks
        .iter()
        .map(|b| (b.name.clone(), b.shape.clone()))
        .collect();
    if expected != found {
        return Err(Error::parse("checkpoint header", "block layout does not match config"));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::parse("checkpoint", e))?;
    let total: usize = header.blocks.iter().map(|b| b.len).sum();
    if payload.len() != total * 8 {
        return Err(Error::parse(
            "checkpoint",
            format!("payload is {} bytes, expected {}", payload.len(), total * 8),
        ));
    }
    for (entry, t) in header.blocks.iter().zip(params.blocks_mut()) {
        let bytes = &payload[entry.offset * 8..(entry.offset + entry.len) * 8];
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if params.checksum() != header.checksum {
        return Err(Error::parse("checkpoint", "checksum mismatch"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            grid: 2,
            max_seq: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = init_model(&cfg()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut buf2 = Vec::new();
        write_checkpoint(&q, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let p = init_model(&cfg()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let last = buf.len() - 3;
        buf[last] ^= 0x40;
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let p = init_model(&cfg()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
