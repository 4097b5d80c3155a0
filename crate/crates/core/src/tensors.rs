//! Flat binary container of named `f64` tensors.
//!
//! Layout: a UTF-8 manifest followed by raw little-endian data.
//!
//! ```text
//! DFLORA-TENSORS 1
//! <count>
//! <name>\t<d0>x<d1>x...\t<offset>\t<len>     (one line per tensor)
//! sha256\t<hex digest of the data block>
//! <blank line>
//! <data: sum(len) f64 values, little-endian, row-major>
//! ```
//!
//! `offset` and `len` count `f64` elements from the start of the data block.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "DFLORA-TENSORS 1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor '{name}' has {} values for shape {shape:?}",
                data.len()
            )));
        }
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("invalid tensor name {name:?}")));
        }
        Ok(NamedTensor { name, shape, data })
    }
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &[NamedTensor]) -> Result<()> {
    let mut manifest = format!("{MAGIC}\n{}\n", tensors.len());
    let mut offset = 0usize;
    for t in tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", t.name, dims.join("x"), offset, t.data.len()));
        offset += t.data.len();
    }
    let data: Vec<u8> = tensors
        .iter()
        .flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    manifest.push_str(&format!("sha256\t{}\n\n", hex_digest(&data)));
    out.write_all(manifest.as_bytes())?;
    out.write_all(&data)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(input: R) -> Result<Vec<NamedTensor>> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse("unexpected end of tensor manifest".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(Error::Parse("not a tensor container".into()));
    }
    let count: usize = next_line(&mut reader)?
        .parse()
        .map_err(|_| Error::Parse("bad tensor count".into()))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let row = next_line(&mut reader)?;
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!("manifest entry {i} has {} fields", fields.len())));
        }
        let shape = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse(format!("bad shape '{}' in entry {i}", fields[1])))?
        };
        let offset: usize = fields[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad offset in entry {i}")))?;
        let len: usize = fields[3]
            .parse()
            .map_err(|_| Error::Parse(format!("bad length in entry {i}")))?;
        if shape.iter().product::<usize>() != len {
            return Err(Error::Parse(format!("entry {i}: shape does not match length")));
        }
        entries.push((fields[0].to_string(), shape, offset, len));
    }
    let digest = next_line(&mut reader)?
        .strip_prefix("sha256\t")
        .map(str::to_string)
        .ok_or_else(|| Error::Parse("manifest has no sha256 line".into()))?;
    if !next_line(&mut reader)?.is_empty() {
        return Err(Error::Parse("manifest not terminated by a blank line".into()));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if hex_digest(&bytes) != digest {
        return Err(Error::Parse("data block does not match its sha256".into()));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse("data block is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    entries
        .into_iter()
        .map(|(name, shape, offset, len)| {
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= values.len())
                .ok_or_else(|| Error::Parse(format!("tensor '{name}' runs past the data block")))?;
            NamedTensor::new(name, shape, values[offset..end].to_vec())
        })
        .collect()
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(file), tensors)
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    read_tensors(std::fs::File::open(path)?)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over names, shapes and the exact bit patterns of the values.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a NamedTensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update(t.name.as_bytes());
        h.update([0u8]);
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
