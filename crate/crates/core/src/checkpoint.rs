//! Binary checkpoints with bit-exact parameter round-trips.
//!
//! Layout: an 8-byte magic+version, a length-prefixed JSON header describing
//! what follows, then every tensor as raw little-endian f32 words. Tensors
//! are written in the network's deterministic traversal order, so loading
//! rebuilds the architecture from its spec and copies values back in place.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::detector::{build_detector, Detector, InputMode};
use crate::error::{Error, Result};
use crate::modelzoo::{build_classifier, ClassifierSpec, Network};
use crate::signal::WatermarkSignal;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<ClassifierSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detector: Option<DetectorMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    signal: Option<WatermarkSignal>,
    /// Shapes of the parameter tensors, in traversal order.
    params: Vec<Vec<usize>>,
    /// Lengths of the non-trainable buffers, in traversal order.
    buffers: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectorMeta {
    num_classes: usize,
    hidden_widths: Vec<usize>,
    input_mode: InputMode,
    seed: u64,
    early_stopped: bool,
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v).map_err(Error::Io)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, out: &mut [f32]) -> Result<()> {
    r.read_f32_into::<LittleEndian>(out).map_err(Error::Io)?;
    Ok(())
}

fn write_checkpoint(path: &Path, header: &Header, tensors: &[&[f32]]) -> Result<()> {
    let file = File::create(path).map_err(Error::Io)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(Error::Io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(Error::Io)?;
    let header_bytes = serde_json::to_vec(header).map_err(Error::Json)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)
        .map_err(Error::Io)?;
    w.write_all(&header_bytes).map_err(Error::Io)?;
    for t in tensors {
        write_f32s(&mut w, t)?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(Error::Io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(Error::Io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} in {}",
            path.display()
        )));
    }
    let len = r.read_u64::<LittleEndian>().map_err(Error::Io)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(Error::Io)?;
    serde_json::from_slice(&buf).map_err(Error::Json)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display()))
    })?;
    Ok(BufReader::new(file))
}

/// Saves a classifier (parameters plus batch-norm running statistics) and,
/// optionally, the watermark signal it was embedded with.
pub fn save_classifier(
    path: &Path,
    net: &dyn Network,
    signal: Option<&WatermarkSignal>,
) -> Result<()> {
    let params = net.params();
    let buffers = net.buffers();
    let header = Header {
        kind: "classifier".to_string(),
        spec: Some(*net.spec()),
        detector: None,
        signal: signal.cloned(),
        params: params.iter().map(|p| p.value.shape().to_vec()).collect(),
        buffers: buffers.iter().map(|b| b.len()).collect(),
    };
    let mut tensors: Vec<&[f32]> = Vec::new();
    for p in &params {
        tensors.push(p.value.as_slice().ok_or_else(|| {
            Error::Checkpoint("parameter tensor is not contiguous".to_string())
        })?);
    }
    for b in &buffers {
        tensors.push(b.as_slice().ok_or_else(|| {
            Error::Checkpoint("buffer tensor is not contiguous".to_string())
        })?);
    }
    write_checkpoint(path, &header, &tensors)
}

/// Rebuilds a classifier from its checkpoint; the returned signal is present
/// if one was stored.
pub fn load_classifier(path: &Path) -> Result<(Box<dyn Network>, Option<WatermarkSignal>)> {
    let mut r = open(path)?;
    let header = read_header(&mut r, path)?;
    if header.kind != "classifier" {
        return Err(Error::Checkpoint(format!(
            "expected a classifier checkpoint, found '{}' in {}",
            header.kind,
            path.display()
        )));
    }
    let spec = header.spec.ok_or_else(|| {
        Error::Checkpoint(format!("classifier checkpoint {} lacks a spec", path.display()))
    })?;
    let mut net = build_classifier(&spec)?;
    {
        let mut params = net.params_mut();
        if params.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "tensor count mismatch: architecture has {} parameters, checkpoint has {}",
                params.len(),
                header.params.len()
            )));
        }
        for (p, shape) in params.iter_mut().zip(&header.params) {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape mismatch: {:?} vs stored {:?}",
                    p.value.shape(),
                    shape
                )));
            }
            let slice = p.value.as_slice_mut().ok_or_else(|| {
                Error::Checkpoint("parameter tensor is not contiguous".to_string())
            })?;
            read_f32s(&mut r, slice)?;
        }
    }
    {
        let mut buffers = net.buffers_mut();
        if buffers.len() != header.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "buffer count mismatch: architecture has {}, checkpoint has {}",
                buffers.len(),
                header.buffers.len()
            )));
        }
        for (b, &len) in buffers.iter_mut().zip(&header.buffers) {
            if b.len() != len {
                return Err(Error::Checkpoint(format!(
                    "buffer length mismatch: {} vs stored {len}",
                    b.len()
                )));
            }
            let slice = b.as_slice_mut().ok_or_else(|| {
                Error::Checkpoint("buffer tensor is not contiguous".to_string())
            })?;
            read_f32s(&mut r, slice)?;
        }
    }
    Ok((net, header.signal))
}

pub fn save_detector(path: &Path, det: &Detector) -> Result<()> {
    let params = det.params();
    let header = Header {
        kind: "detector".to_string(),
        spec: None,
        detector: Some(DetectorMeta {
            num_classes: det.num_classes,
            hidden_widths: det.hidden_widths.clone(),
            input_mode: det.input_mode,
            seed: det.seed,
            early_stopped: det.early_stopped,
        }),
        signal: None,
        params: params.iter().map(|p| p.value.shape().to_vec()).collect(),
        buffers: Vec::new(),
    };
    let mut tensors: Vec<&[f32]> = Vec::new();
    for p in &params {
        tensors.push(p.value.as_slice().ok_or_else(|| {
            Error::Checkpoint("parameter tensor is not contiguous".to_string())
        })?);
    }
    write_checkpoint(path, &header, &tensors)
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    let mut r = open(path)?;
    let header = read_header(&mut r, path)?;
    if header.kind != "detector" {
        return Err(Error::Checkpoint(format!(
            "expected a detector checkpoint, found '{}' in {}",
            header.kind,
            path.display()
        )));
    }
    let meta = header.detector.ok_or_else(|| {
        Error::Checkpoint(format!("detector checkpoint {} lacks metadata", path.display()))
    })?;
    let mut det = build_detector(meta.num_classes, &meta.hidden_widths, meta.input_mode, meta.seed)?;
    det.early_stopped = meta.early_stopped;
    let mut params = det.params_mut();
    if params.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: detector has {} parameters, checkpoint has {}",
            params.len(),
            header.params.len()
        )));
    }
    for (p, shape) in params.iter_mut().zip(&header.params) {
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter shape mismatch: {:?} vs stored {:?}",
                p.value.shape(),
                shape
            )));
        }
        let slice = p.value.as_slice_mut().ok_or_else(|| {
            Error::Checkpoint("parameter tensor is not contiguous".to_string())
        })?;
        read_f32s(&mut r, slice)?;
    }
    drop(params);
    Ok(det)
}
