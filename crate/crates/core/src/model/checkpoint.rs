//! Checkpoint layout: a short text manifest followed by the flat
//! little-endian `f64` parameter array.
//!
//! ```text
//! urrl-checkpoint 1
//! dims 20 128 128 32 5
//! params 23077
//! end
//! <params × 8 bytes>
//! ```

use std::io::{Read, Write};

use super::{init_params, ModelDims, ModelError, ModelParams};

const HEADER: &str = "urrl-checkpoint 1";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<(), ModelError> {
    let widths: Vec<String> = params.dims().widths().iter().map(usize::to_string).collect();
    let mut buf = format!("{HEADER}\ndims {}\nparams {}\nend\n", widths.join(" "), params.num_params()).into_bytes();
    for v in params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |m: &str| ModelError::Format(m.to_string());

    let mut lines = Vec::new();
    let mut pos = 0;
    while lines.last().map(String::as_str) != Some("end") {
        let rest = &bytes[pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated manifest"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8"))?;
        lines.push(line.trim().to_string());
        pos += nl + 1;
        if lines.len() > 8 {
            return Err(bad("manifest too long"));
        }
    }
    if lines.first().map(String::as_str) != Some(HEADER) {
        return Err(bad("missing checkpoint header"));
    }
    let field = |key: &str| {
        lines
            .iter()
            .find_map(|l| l.strip_prefix(key).map(str::trim))
            .ok_or_else(|| bad(&format!("missing `{key}` line")))
    };
    let widths = field("dims ")?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| bad("bad width")))
        .collect::<Result<Vec<_>, _>>()?;
    let count: usize = field("params ")?.parse().map_err(|_| bad("bad params count"))?;

    let dims = ModelDims::from_widths(&widths)?;
    let mut params = init_params(0, &dims);
    if count != params.num_params() {
        return Err(bad("params count does not match dims"));
    }
    let payload = &bytes[pos..];
    if payload.len() != count * 8 {
        return Err(bad("payload length does not match params count"));
    }
    let flat: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    params.load_flat(&flat)?;
    Ok(params)
}
