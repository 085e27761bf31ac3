//! Model persistence: a JSON manifest describing the layer stack plus a raw
//! little-endian f64 blob holding the parameters, layer by layer, weights
//! before biases.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, Shape3, TrainConfig};
use crate::error::{Error, Result};
use crate::io;

pub const MODEL_FORMAT: &str = "xreg-cnn-f64le-v1";

/// What a model was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub group: u8,
    pub zone: (usize, usize),
    /// Outputs are multiplied by these to recover parameter deltas.
    pub label_scale: Vec<f64>,
    /// Indices into the six transformation parameters.
    pub outputs: Vec<usize>,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
    pub n_params: usize,
    pub meta: ModelMeta,
    pub weights_file: String,
}

impl ModelManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes).map_err(|e| Error::format("manifest", e.to_string()))?;
        if m.format != MODEL_FORMAT {
            return Err(Error::format("format", format!("unsupported model format `{}`", m.format)));
        }
        if m.meta.label_scale.len() != m.meta.outputs.len() {
            return Err(Error::format(
                "label_scale",
                format!("{} scales for {} outputs", m.meta.label_scale.len(), m.meta.outputs.len()),
            ));
        }
        if m.meta.outputs.iter().any(|&i| i >= 6) {
            return Err(Error::format("outputs", "parameter index out of range"));
        }
        if m.meta.label_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::format("label_scale", "scales must be positive"));
        }
        Ok(m)
    }
}

/// Manifest and parameter blob for `net`.
pub fn encode_model(net: &Network, meta: &ModelMeta, weights_file: &str) -> (ModelManifest, Vec<u8>) {
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        input: net.input_shape(),
        layers: net.specs().to_vec(),
        n_params: net.param_count(),
        meta: meta.clone(),
        weights_file: weights_file.into(),
    };
    (manifest, io::f64_to_le_bytes(&net.flat_params()))
}

/// Rebuilds a network from manifest JSON and its parameter blob.
pub fn decode_model(manifest: &[u8], blob: &[u8]) -> Result<(Network, ModelMeta)> {
    let m = ModelManifest::parse(manifest)?;
    // size checks first so a hostile manifest cannot force a large allocation
    let implied = Network::count_params(m.input, &m.layers).map_err(|e| e.context("layers"))?;
    if implied != m.n_params {
        return Err(Error::format(
            "n_params",
            format!("layers imply {implied} parameters, manifest says {}", m.n_params),
        ));
    }
    let params = io::f64_from_le_bytes(blob, m.n_params, "weights")?;
    let mut net = Network::new(m.input, &m.layers).map_err(|e| e.context("layers"))?;
    if net.output_len() != m.meta.outputs.len() {
        return Err(Error::format(
            "outputs",
            format!("network has {} outputs, manifest lists {}", net.output_len(), m.meta.outputs.len()),
        ));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("weights", "non-finite parameter"));
    }
    net.set_flat_params(&params)?;
    Ok((net, m.meta))
}

/// Writes `<name>.model.json` at `path` and `<name>.f64` next to it.
pub fn save_model(net: &Network, meta: &ModelMeta, path: &Path) -> Result<()> {
    let weights_file = format!("{}.f64", io::stem_of(path, ".model.json"));
    let (manifest, blob) = encode_model(net, meta, &weights_file);
    io::write_bytes(&io::sibling(path, &weights_file), &blob)?;
    io::write_json(path, &manifest)
}

pub fn load_model(path: &Path) -> Result<(Network, ModelMeta)> {
    let manifest = io::read_bytes(path)?;
    let m = ModelManifest::parse(&manifest)?;
    let blob = io::read_bytes(&io::sibling(path, &m.weights_file))?;
    decode_model(&manifest, &blob)
}
