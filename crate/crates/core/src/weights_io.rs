//! Weight file format.
//!
//! A single JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "input_shape": [80, 80],
//!   "n_actions": 4,
//!   "layers": [
//!     {"kind": "dense", "shape": [1000, 6400], "stride": 1, "activation": "relu",
//!      "weights": "<base64>", "bias": "<base64>"}
//!   ]
//! }
//! ```
//!
//! `weights` and `bias` are base64 (standard alphabet, padded) encodings of
//! little-endian IEEE-754 `f32` values, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::ann::{Activation, LayerKind, LayerSpec, NetworkDescription};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightFile {
    format_version: u32,
    input_shape: Vec<usize>,
    n_actions: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    kind: LayerKind,
    shape: Vec<usize>,
    stride: usize,
    activation: Activation,
    weights: String,
    bias: String,
}

pub fn encode_f32s(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32s(text: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn to_json(net: &NetworkDescription) -> String {
    let file = WeightFile {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape.clone(),
        n_actions: net.n_actions,
        layers: net
            .layers
            .iter()
            .map(|l| LayerRecord {
                kind: l.kind,
                shape: l.weights.shape().to_vec(),
                stride: l.stride,
                activation: l.activation,
                weights: encode_f32s(l.weights.data()),
                bias: encode_f32s(l.bias.data()),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("weight file serializes")
}

pub fn from_json(text: &str) -> Result<NetworkDescription> {
    let file: WeightFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::invalid(
            "weight file",
            format!("unsupported format_version {}", file.format_version),
        ));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, rec) in file.layers.into_iter().enumerate() {
        let what = format!("layer {i}");
        let weights = decode_f32s(&rec.weights).map_err(|m| Error::invalid(&what, m))?;
        let bias = decode_f32s(&rec.bias).map_err(|m| Error::invalid(&what, m))?;
        let expected: usize = rec.shape.iter().product();
        if weights.len() != expected {
            return Err(Error::invalid(
                &what,
                format!(
                    "weight count {} does not match shape {:?} ({} values)",
                    weights.len(),
                    rec.shape,
                    expected
                ),
            ));
        }
        let weights = Tensor::new(rec.shape, weights).map_err(|e| Error::invalid(&what, e.to_string()))?;
        let bias_len = bias.len();
        let bias = Tensor::new(vec![bias_len], bias).map_err(|e| Error::invalid(&what, e.to_string()))?;
        layers.push(LayerSpec {
            kind: rec.kind,
            weights,
            bias,
            stride: rec.stride,
            activation: rec.activation,
        });
    }
    NetworkDescription::new(file.input_shape, file.n_actions, layers)
}

/// serde_json reports 1-based lines and columns; convert to a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn save_weights(net: &NetworkDescription, path: &Path) -> Result<()> {
    fs::write(path, to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<NetworkDescription> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shallow_round_trip_is_bit_exact() {
        let net = NetworkDescription::shallow(32, 4, 9);
        let back = from_json(&to_json(&net)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let text = to_json(&NetworkDescription::shallow(4, 4, 1));
        let cut = &text[..text.len() / 2];
        match from_json(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_weight_count_names_layer() {
        let net = NetworkDescription::shallow(4, 4, 1);
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&net)).unwrap();
        doc["layers"][1]["weights"] = serde_json::Value::String(encode_f32s(&[1.0; 7]));
        let err = from_json(&doc.to_string()).unwrap_err();
        match err {
            Error::Validation { what, .. } => assert_eq!(what, "layer 1"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn byte_offset_counts_lines() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("abc", 1, 1), 0);
    }
}
