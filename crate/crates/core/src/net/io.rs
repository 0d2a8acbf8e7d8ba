//! Model file: `MFMD`, version, the network spec, then every tensor as
//! little-endian `f32` in declaration order.
//!
//! A file that ends right after the spec loads as a zero network.

use std::fs;
use std::path::Path;

use super::{Activation, NetworkParams, NetworkSpec};
use crate::data::{Reader, FORMAT_VERSION};
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"MFMD";

pub fn save_model(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub(crate) fn encode_spec(spec: &NetworkSpec, out: &mut Vec<u8>) {
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(spec.hidden_dims.len() as u32).to_le_bytes());
    for &h in &spec.hidden_dims {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.push(spec.activation.id());
    out.extend_from_slice(&(spec.n_classes as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_trials as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_pseudo_classes as u32).to_le_bytes());
}

pub(crate) fn encode(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 4 * params.n_parameters());
    encode_spec(&params.spec, &mut out);
    for tensor in params.tensors() {
        for v in tensor {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<NetworkParams> {
    let mut r = Reader::new(bytes, path);
    r.magic(MODEL_MAGIC)?;
    let input_dim = r.u32("input_dim")? as usize;
    let n_hidden = r.u32("hidden layer count")? as usize;
    if n_hidden > r.remaining() / 4 {
        return Err(r.error(format!("{n_hidden} hidden layers declared but the file is too short")));
    }
    let hidden_dims = (0..n_hidden)
        .map(|_| r.u32("hidden width").map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let id = r.u8("activation")?;
    let activation = Activation::from_id(id).ok_or_else(|| r.error(format!("unknown activation id {id}")))?;
    let spec = NetworkSpec {
        input_dim,
        hidden_dims,
        activation,
        n_classes: r.u32("C")? as usize,
        n_trials: r.u32("T")? as usize,
        n_pseudo_classes: r.u32("Z")? as usize,
    };
    spec.validate().map_err(|e| r.error(format!("invalid network spec: {e}")))?;
    let mut params = NetworkParams::zeros(&spec)?;
    if r.remaining() == 0 {
        return Ok(params);
    }
    let expected = params.n_parameters() * 4;
    if r.remaining() != expected {
        return Err(r.error(format!(
            "shape mismatch: spec needs {expected} bytes of parameters, found {}",
            r.remaining()
        )));
    }
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            let x = r.f32("parameters")?;
            if !x.is_finite() {
                return Err(r.error("non-finite parameter".into()));
            }
            *v = f64::from(x);
        }
    }
    r.finish()?;
    Ok(params)
}
