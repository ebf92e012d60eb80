//! Replay of golden activation vectors produced by an external reference
//! implementation alongside a PGWB bundle.
//!
//! The fixture is a JSON document:
//!
//! ```json
//! { "bundle": "tiny.pgwb", "input_shape": [3, 8, 8], "input": [...],
//!   "vectors": [{ "layer_index": 0, "layer": "conv1_1",
//!                 "shape": [8, 8, 8], "output": [...] }] }
//! ```
//!
//! `bundle` is resolved relative to the JSON file. Flat arrays use the
//! channel-major layout of [`Tensor`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{load_bundle, WeightBundle};
use crate::error::{Error, Result};
use crate::tensor::{forward_taps, Tensor};

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenFile {
    pub bundle: String,
    pub input_shape: [usize; 3],
    pub input: Vec<f32>,
    pub vectors: Vec<GoldenVector>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenVector {
    pub layer_index: usize,
    pub layer: String,
    pub shape: [usize; 3],
    pub output: Vec<f32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerParity {
    pub layer: String,
    pub max_abs_diff: f32,
    pub elements: usize,
}

pub fn load_golden(path: &Path) -> Result<(GoldenFile, WeightBundle)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let golden: GoldenFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(None, format!("{}: {e}", path.display())))?;
    let bundle_path = path.parent().unwrap_or(Path::new(".")).join(&golden.bundle);
    let bundle = load_bundle(bundle_path)?;
    Ok((golden, bundle))
}

/// Runs the fixture input through `bundle` and reports the largest
/// absolute deviation from each recorded activation.
pub fn replay(golden: &GoldenFile, bundle: &WeightBundle) -> Result<Vec<LayerParity>> {
    let [c, h, w] = golden.input_shape;
    let input = Tensor::new(c, h, w, golden.input.clone())?;
    let taps: Vec<usize> = golden.vectors.iter().map(|v| v.layer_index).collect();
    let outputs = forward_taps(&input, bundle.layers(), &taps)?;
    golden
        .vectors
        .iter()
        .zip(outputs)
        .map(|(v, out)| {
            let name = &bundle.layer_names()[v.layer_index];
            if name != &v.layer {
                return Err(Error::Validation(format!(
                    "golden vector names layer `{}` but index {} is `{name}`",
                    v.layer, v.layer_index
                )));
            }
            let [vc, vh, vw] = v.shape;
            if out.shape() != (vc, vh, vw) || v.output.len() != vc * vh * vw {
                return Err(Error::Shape(format!(
                    "layer `{}`: engine produced {:?}, golden has {:?} with {} values",
                    v.layer,
                    out.shape(),
                    v.shape,
                    v.output.len()
                )));
            }
            let max_abs_diff = out
                .data()
                .iter()
                .zip(&v.output)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            Ok(LayerParity {
                layer: v.layer.clone(),
                max_abs_diff,
                elements: v.output.len(),
            })
        })
        .collect()
}
