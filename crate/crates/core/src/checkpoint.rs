//! Checkpoint container: magic bytes, a length-prefixed JSON header, then
//! little-endian `f32` arrays in manifest order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelState};
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"CORECKPT";
const FORMAT_VERSION: u32 = 1;

/// Training phase a checkpoint was taken in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Relaxed model training.
    Coarse,
    /// Full model training (including a baseline run from scratch).
    Refined,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Coarse => "coarse",
            Phase::Refined => "refined",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub phase: Phase,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    pub step: u64,
    pub phase: Phase,
}

pub fn save(path: &Path, state: &ModelState<f32>, step: u64, phase: Phase) -> Result<()> {
    let mut offset = 0u64;
    let arrays = state
        .named_params()
        .into_iter()
        .map(|(name, t)| {
            let e = ArrayEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        step,
        phase,
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in state.named_params() {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Header> {
    let mut f = fs::File::open(path)?;
    read_header_from(&mut f)
}

fn read_header_from(f: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok(header)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let header = read_header_from(&mut f)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let mut state: ModelState<f32> = init_model(&header.config, &mut Rng::new(0))?;
    let names: Vec<(String, Vec<usize>)> = state
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != header.arrays.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} arrays, the config implies {}",
            header.arrays.len(),
            names.len()
        )));
    }
    for ((tensor, (name, shape)), entry) in state.params_mut().into_iter().zip(&names).zip(&header.arrays) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + 4 * tensor.numel();
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated inside {name}")))?;
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    state.validate()?;
    Ok(Checkpoint {
        state,
        step: header.step,
        phase: header.phase,
    })
}
