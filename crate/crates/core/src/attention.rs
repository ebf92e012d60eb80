//! Channel-mean attention maps and the max-attention indicator.
//!
//! The attention map of an activation `F` (C×H×W) is the per-pixel mean over
//! channels. The indicator is the largest value in that map; perturbed
//! inputs concentrate attention on the patch and push it up.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::WeightBundle;
use crate::error::{Error, Result};
use crate::tensor::{forward_taps, LayerOp, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height * width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "attention map of {height}x{width} with {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// The scalar detection statistic of one image.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Indicator(pub f32);

impl Indicator {
    pub fn value(self) -> f32 {
        self.0
    }
}

/// Whether the indicator reads a convolution's raw output or the ReLU
/// output following it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Pre,
    #[default]
    Post,
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tap::Pre => "pre",
            Tap::Post => "post",
        })
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Tap::Pre),
            "post" => Ok(Tap::Post),
            other => Err(Error::Config(format!(
                "tap must be `pre` or `post`, got `{other}`"
            ))),
        }
    }
}

/// A detection layer resolved against a particular bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapPoint {
    /// Name of the convolution layer.
    pub layer: String,
    pub conv_index: usize,
    /// Index of the layer whose output is read.
    pub tap_index: usize,
    pub tap: Tap,
}

impl TapPoint {
    /// Resolves `layer` (a layer name, or a numeric index into the layer
    /// list) to a convolution, then to the ReLU right after it when `tap` is
    /// [`Tap::Post`].
    pub fn resolve(bundle: &WeightBundle, layer: &str, tap: Tap) -> Result<Self> {
        let conv_index = bundle
            .layer_index(layer)
            .or_else(|| layer.parse::<usize>().ok())
            .filter(|&i| i < bundle.layers().len())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown layer `{layer}`; convolution layers are: {}",
                    bundle.conv_layer_names().collect::<Vec<_>>().join(", ")
                ))
            })?;
        let name = bundle.layer_names()[conv_index].clone();
        if !bundle.layers()[conv_index].is_conv() {
            return Err(Error::Config(format!(
                "layer `{name}` is a {} layer, not a convolution",
                bundle.layers()[conv_index].kind()
            )));
        }
        let tap_index = match tap {
            Tap::Pre => conv_index,
            Tap::Post => match bundle.layers().get(conv_index + 1) {
                Some(LayerOp::Relu) => conv_index + 1,
                _ => {
                    return Err(Error::Config(format!(
                        "post-activation tap requested but no ReLU follows `{name}`"
                    )))
                }
            },
        };
        Ok(Self {
            layer: name,
            conv_index,
            tap_index,
            tap,
        })
    }
}

/// Mean over the channel axis: `out[h,w] = (1/C)·Σ_i F[i,h,w]`.
pub fn attention_map(activation: &Tensor) -> AttentionMap {
    let (c, h, w) = activation.shape();
    let mut sums = vec![0.0f32; h * w];
    for ch in 0..c {
        for (s, v) in sums.iter_mut().zip(activation.channel(ch)) {
            *s += v;
        }
    }
    let inv = c as f32;
    for s in &mut sums {
        *s /= inv;
    }
    AttentionMap {
        height: h,
        width: w,
        values: sums,
    }
}

/// Largest value of the attention map.
pub fn indicator_ir(map: &AttentionMap) -> Result<Indicator> {
    map.values
        .iter()
        .copied()
        .reduce(f32::max)
        .map(Indicator)
        .ok_or_else(|| Error::Shape("empty attention map".into()))
}

/// Indicator of an already-preprocessed image at one detection layer.
pub fn indicator_at_layer(
    image: &Tensor,
    bundle: &WeightBundle,
    layer: &str,
    tap: Tap,
) -> Result<Indicator> {
    let point = TapPoint::resolve(bundle, layer, tap)?;
    Ok(indicators_at(image, bundle, std::slice::from_ref(&point))?[0])
}

/// Indicators at several resolved points with a single forward pass.
pub fn indicators_at(
    image: &Tensor,
    bundle: &WeightBundle,
    points: &[TapPoint],
) -> Result<Vec<Indicator>> {
    let taps: Vec<usize> = points.iter().map(|p| p.tap_index).collect();
    let activations = forward_taps(image, bundle.layers(), &taps)?;
    activations
        .iter()
        .map(|a| {
            let ir = indicator_ir(&attention_map(a))?;
            if !ir.0.is_finite() {
                return Err(Error::Numeric(format!("non-finite indicator {}", ir.0)));
            }
            Ok(ir)
        })
        .collect()
}
