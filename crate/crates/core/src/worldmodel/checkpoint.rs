//! Model checkpoints: a self-describing binary container.
//!
//! Layout: magic `NWM1`, format version (u32 LE), entry count (u64 LE),
//! then per entry a name (u32 LE length + UTF-8 bytes) and a tensor in the
//! serialization format of [`Tensor::write_to`]. A CRC32 of every byte
//! after the magic trails the file, so truncation and bit corruption are
//! detected at load time. The model config rides along as a JSON entry, so
//! a checkpoint alone reconstructs the model.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::ndgrad::Tensor;

use super::config::ModelConfig;
use super::net::Model;
use super::WmError;

const MAGIC: [u8; 4] = *b"NWM1";
const VERSION: u32 = 1;
/// Reserved entry name carrying the config JSON, one byte per f32 value.
const CONFIG_ENTRY: &str = "__config__";

/// Accumulates a CRC32 over everything written through it.
struct CrcWriter<W> {
    inner: W,
    crc: crc32fast::Hasher,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct CrcReader<R> {
    inner: R,
    crc: crc32fast::Hasher,
}

impl<R: Read> Read for CrcReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }
}

fn write_container<W: Write>(mut w: W, entries: &BTreeMap<String, Tensor>) -> Result<(), WmError> {
    w.write_all(&MAGIC)?;
    let mut w = CrcWriter { inner: w, crc: crc32fast::Hasher::new() };
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        tensor.write_to(&mut w)?;
    }
    let crc = w.crc.finalize();
    let mut w = w.inner;
    w.write_all(&crc.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Writes named tensors to `path` in container format.
pub fn save_tensors(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<(), WmError> {
    write_container(BufWriter::new(File::create(path)?), entries)
}

/// Reads a container back; verifies magic, version, CRC, and exact length.
pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>, WmError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(WmError::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let mut r = CrcReader { inner: r, crc: crc32fast::Hasher::new() };
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(WmError::Checkpoint(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf);
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        if name_len > 4096 {
            return Err(WmError::Checkpoint(format!("entry name of {name_len} bytes")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| WmError::Checkpoint(format!("entry name: {e}")))?;
        let tensor = Tensor::read_from(&mut r).map_err(|e| WmError::Checkpoint(format!("entry {name}: {e}")))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(WmError::Checkpoint(format!("duplicate entry {name}")));
        }
    }
    let crc = r.crc.finalize();
    let mut r = r.inner;
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != crc {
        return Err(WmError::Checkpoint("CRC mismatch: file is corrupt or truncated".into()));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(WmError::Checkpoint("trailing bytes after CRC".into()));
    }
    Ok(entries)
}

fn model_entries(model: &Model) -> Result<BTreeMap<String, Tensor>, WmError> {
    let mut entries = model.params.clone();
    let json = serde_json::to_string(&model.config)
        .map_err(|e| WmError::Checkpoint(format!("config serialization: {e}")))?;
    let bytes: Vec<f32> = json.bytes().map(|b| b as f32).collect();
    let n = bytes.len();
    entries.insert(CONFIG_ENTRY.to_string(), Tensor::from_vec(&[n], bytes)?);
    Ok(entries)
}

/// Saves a model (parameters plus config entry).
pub fn save_model(path: &Path, model: &Model) -> Result<(), WmError> {
    save_tensors(path, &model_entries(model)?)
}

/// Content hash of a model: the SHA-256 of its serialized container. Two
/// models hash equal iff they would produce byte-identical checkpoints.
pub fn params_hash(model: &Model) -> Result<String, WmError> {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_container(&mut buf, &model_entries(model)?)?;
    let digest = Sha256::digest(&buf);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads a model saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model, WmError> {
    let mut entries = load_tensors(path)?;
    let cfg = entries
        .remove(CONFIG_ENTRY)
        .ok_or_else(|| WmError::Checkpoint("checkpoint has no config entry".into()))?;
    let json: String = cfg
        .data()
        .iter()
        .map(|&v| {
            if (0.0..256.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8 as char)
            } else {
                Err(WmError::Checkpoint("config entry is not byte data".into()))
            }
        })
        .collect::<Result<_, _>>()?;
    let config: ModelConfig =
        serde_json::from_str(&json).map_err(|e| WmError::Checkpoint(format!("config entry: {e}")))?;
    Model::from_parts(config, entries)
}
