//! Checkpoint format: a fixed magic, a version word, a JSON header (spec,
//! training provenance, tensor table), then raw little-endian f32 tensor
//! data in header order. Tensor names come from the parameter visitor, so a
//! checkpoint loads back only into the architecture that wrote it.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arch, Network, NetworkSpec, Parameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMEMSNET";
const VERSION: u32 = 1;

/// Training provenance carried alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training method name, e.g. "imems" or "unet-c-multi".
    pub method: String,
    pub num_labels: usize,
    pub seed: u64,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept (lowest validation loss).
    pub selected_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Arch,
    spec: NetworkSpec,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, net: &mut Network<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    net.visit_params("", &mut |name, slots| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: slots.value.shape().to_vec(),
            offset: data.len() as u64,
        });
        for &v in slots.value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        arch: net.arch(),
        spec: *net.spec(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |file: &mut std::fs::File, bytes: &[u8]| -> Result<()> {
        file.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut file, MAGIC)?;
    write(&mut file, &VERSION.to_le_bytes())?;
    write(&mut file, &(json.len() as u64).to_le_bytes())?;
    write(&mut file, &json)?;
    write(&mut file, &data)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 20 + json_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + json_len])
        .map_err(|e| fail(&format!("bad header: {e}")))?;
    let data = &bytes[20 + json_len..];

    let table: HashMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();

    // Rebuild the architecture, then overwrite every parameter from the
    // tensor table. The init RNG is irrelevant; all values are replaced.
    let mut net = Network::build(header.arch, header.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut problem: Option<String> = None;
    let mut loaded = 0usize;
    net.visit_params("", &mut |name, mut slots| {
        if problem.is_some() {
            return;
        }
        let entry = match table.get(name) {
            Some(e) => e,
            None => {
                problem = Some(format!("missing tensor {name}"));
                return;
            }
        };
        if entry.shape != slots.value.shape() {
            problem = Some(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape,
                slots.value.shape()
            ));
            return;
        }
        let count = slots.value.len();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > data.len() {
            problem = Some(format!("tensor {name} overruns the data section"));
            return;
        }
        for (dst, chunk) in slots.value.iter_mut().zip(data[start..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        loaded += 1;
    });
    if let Some(msg) = problem {
        return Err(fail(&msg));
    }
    if loaded != header.tensors.len() {
        return Err(fail(&format!(
            "checkpoint lists {} tensors but the architecture has {loaded}",
            header.tensors.len()
        )));
    }
    Ok((net, header.meta))
}
