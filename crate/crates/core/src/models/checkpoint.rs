//! Checkpoint format: one line of JSON header, a newline, then every
//! parameter as little-endian `f32` in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "marsnav-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: ModelSpec,
    pub dtype: String,
    /// Optimizer steps taken when the parameters were captured.
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

pub fn write_checkpoint(w: &mut impl Write, net: &Network<f32>, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        spec: net.spec().clone(),
        dtype: "f32".to_string(),
        step,
        params: net
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for p in net.params().iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &Network<f32>, step: u64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, net, step)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint, rebuilding the network its header describes and
/// verifying every parameter name and shape against that build.
pub fn read_checkpoint(r: &mut impl BufRead) -> Result<(CheckpointHeader, Network<f32>)> {
    let mut line = String::new();
    r.read_line(&mut line)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", header.format)));
    }
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype `{}`", header.dtype)));
    }
    let mut net = Network::<f32>::new(header.spec.clone(), 0)?;
    if net.params().len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters in header, {} in a {} build",
            header.params.len(),
            net.params().len(),
            header.spec.arch
        )));
    }
    for (p, entry) in net.params_mut().iter_mut().zip(&header.params) {
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match architecture ({} {:?})",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let mut bytes = vec![0u8; p.value.len() * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        p.value = Tensor::from_vec(&entry.shape, values)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((header, net))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Network<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
