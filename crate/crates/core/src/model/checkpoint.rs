//! Binary checkpoint.
//!
//! One ASCII header line
//!
//! ```text
//! PEMOE v1 d_t=<int> d_v=<int> d_e=<int> h_g=<int> h_e=<int> tau=<float>\n
//! ```
//!
//! followed by every parameter tensor as little-endian `f32`, in this order:
//! gate layer1 W, b; gate layer2 W, b; then for sat, drone, ground:
//! adapter1 W, b; adapter2 W, b; projection W, b. Weights are row-major
//! `out x in`.

use std::path::Path;

use super::{ModelDims, PeMoeModel};
use crate::error::{PemoeError, Result};

const MAGIC: &str = "PEMOE v1";

pub fn write_checkpoint(model: &PeMoeModel) -> Vec<u8> {
    let d = model.dims();
    let mut out = format!(
        "{MAGIC} d_t={} d_v={} d_e={} h_g={} h_e={} tau={:?}\n",
        d.d_t, d.d_v, d.d_e, d.h_g, d.h_e, model.temperature
    )
    .into_bytes();
    out.reserve(4 * model.num_parameters());
    for (_, t) in model.tensors() {
        for &x in t {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<PeMoeModel> {
    let bad = |m: String| PemoeError::Checkpoint(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8".into()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad(format!("expected `{MAGIC}` header, found `{header}`")))?;
    let mut fields = std::collections::HashMap::new();
    for f in rest.split_whitespace() {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header field `{f}`")))?;
        fields.insert(k, v);
    }
    let dim = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("header field `{k}` missing or not an integer")))
    };
    let dims = ModelDims {
        d_t: dim("d_t")?,
        d_v: dim("d_v")?,
        d_e: dim("d_e")?,
        h_g: dim("h_g")?,
        h_e: dim("h_e")?,
    };
    dims.validate()?;
    let temperature = fields
        .get("tau")
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|t| *t > 0.0 && t.is_finite())
        .ok_or_else(|| bad("header field `tau` missing or not a positive number".into()))?;

    let mut model = PeMoeModel::init(dims, 0)?;
    model.temperature = temperature;
    let payload = &bytes[nl + 1..];
    let expected = 4 * model.num_parameters();
    if payload.len() != expected {
        return Err(PemoeError::dims(
            format!(
                "checkpoint payload for d_t={} d_v={} d_e={} h_g={} h_e={} (bytes)",
                dims.d_t, dims.d_v, dims.d_e, dims.h_g, dims.h_e
            ),
            expected,
            payload.len(),
        ));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    for t in model.tensors_mut() {
        for x in t.iter_mut() {
            *x = values.next().expect("length checked");
            if !x.is_finite() {
                return Err(bad("non-finite parameter".into()));
            }
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &PeMoeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| PemoeError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PeMoeModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| PemoeError::io(path, e))?;
    read_checkpoint(&bytes)
}
