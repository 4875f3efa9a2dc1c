//! `ATN1` binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "ATN1"
//! version      u32      1
//! h, w         u32, u32
//! block_count  u32
//! per block:   id_len u16, id bytes (UTF-8), default_weight f32,
//!              payload h·w·h·w f32 row-major over (k, l, r, c)
//! meta_count   u32
//! per entry:   key_len u16, key bytes, value_len u16, value bytes
//! ```
//!
//! `source_image_ref` travels as the meta entry `source_image_ref`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AttentionBlock, AttentionStack};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATN1";
const VERSION: u32 = 1;
const SOURCE_IMAGE_KEY: &str = "source_image_ref";

/// Reads and validates an `ATN1` file.
pub fn read_attention_file(path: impl AsRef<Path>) -> Result<AttentionStack> {
    let file = File::open(path.as_ref())?;
    read_attention_from(BufReader::new(file))
}

/// Validates `stack` and writes it to `path`.
pub fn write_attention_file(stack: &AttentionStack, path: impl AsRef<Path>) -> Result<()> {
    stack.validate()?;
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write_attention_to(&mut out, stack)?;
    out.flush()?;
    Ok(())
}

/// Low-level encoder. Performs no validation, so it can also produce files
/// that readers must reject.
pub fn write_attention_to<W: Write>(mut out: W, stack: &AttentionStack) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(to_u32(stack.h, "h")?)?;
    out.write_u32::<LittleEndian>(to_u32(stack.w, "w")?)?;
    out.write_u32::<LittleEndian>(to_u32(stack.blocks.len(), "block count")?)?;
    for block in &stack.blocks {
        write_str(&mut out, &block.id)?;
        out.write_f32::<LittleEndian>(block.default_weight)?;
        let mut buf = Vec::with_capacity(block.tensor.len() * 4);
        for v in &block.tensor {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }

    let mut meta: Vec<(&str, &str)> = stack
        .source_meta
        .iter()
        .filter(|(k, _)| k.as_str() != SOURCE_IMAGE_KEY)
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    if let Some(src) = &stack.source_image_ref {
        meta.push((SOURCE_IMAGE_KEY, src));
        meta.sort();
    }
    out.write_u32::<LittleEndian>(to_u32(meta.len(), "meta count")?)?;
    for (k, v) in meta {
        write_str(&mut out, k)?;
        write_str(&mut out, v)?;
    }
    Ok(())
}

/// Decodes and validates a stack from any reader.
pub fn read_attention_from<R: Read>(mut input: R) -> Result<AttentionStack> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"ATN1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = input
        .read_u32::<LittleEndian>()
        .map_err(truncated("version"))?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let h = input
        .read_u32::<LittleEndian>()
        .map_err(truncated("header"))? as usize;
    let w = input
        .read_u32::<LittleEndian>()
        .map_err(truncated("header"))? as usize;
    let block_count = input
        .read_u32::<LittleEndian>()
        .map_err(truncated("header"))? as usize;
    let n = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(n))
        .ok_or_else(|| Error::Format(format!("grid {h}x{w} too large")))?;

    let mut blocks = Vec::with_capacity(block_count.min(64));
    for _ in 0..block_count {
        let id = read_str(&mut input, "block id")?;
        let default_weight = input
            .read_f32::<LittleEndian>()
            .map_err(truncated("block weight"))?;
        let mut tensor = Vec::new();
        tensor
            .try_reserve_exact(n)
            .map_err(|_| Error::Format(format!("cannot allocate {n} payload entries")))?;
        tensor.resize(n, 0.0);
        input
            .read_f32_into::<LittleEndian>(&mut tensor)
            .map_err(truncated("block payload"))?;
        blocks.push(AttentionBlock {
            id,
            tensor,
            default_weight,
        });
    }

    let meta_count = input
        .read_u32::<LittleEndian>()
        .map_err(truncated("meta count"))?;
    let mut source_meta = BTreeMap::new();
    let mut source_image_ref = None;
    for _ in 0..meta_count {
        let key = read_str(&mut input, "meta key")?;
        let value = read_str(&mut input, "meta value")?;
        if key == SOURCE_IMAGE_KEY {
            source_image_ref = Some(value);
        } else {
            source_meta.insert(key, value);
        }
    }

    let stack = AttentionStack {
        h,
        w,
        blocks,
        source_image_ref,
        source_meta,
    };
    stack.validate()?;
    Ok(stack)
}

fn truncated(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Corrupt(format!("file truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::validation(format!("{what} {v} does not fit in u32")))
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| {
        Error::validation(format!("string of {} bytes exceeds u16 length", s.len()))
    })?;
    out.write_u16::<LittleEndian>(len)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(input: &mut R, what: &'static str) -> Result<String> {
    let len = input.read_u16::<LittleEndian>().map_err(truncated(what))? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf).map_err(truncated(what))?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
}
