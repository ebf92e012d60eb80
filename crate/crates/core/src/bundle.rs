//! PGWB weight bundles: a portable container for shallow network prefixes.
//!
//! All integers and floats are little-endian. Strings are a `u32` byte
//! length followed by UTF-8 bytes.
//!
//! ```text
//! magic            4 bytes  "PGWB"
//! version          u16      1
//! model_name       string
//! preprocess       target_height u32, target_width u32, channel_order u8
//!                  (0 = RGB, 1 = BGR), scale f32, mean 3×f32, std 3×f32
//! layer_count      u32
//! per layer        name string, kind u8 (0 = conv, 1 = relu, 2 = maxpool2x2)
//!   conv only      out_channels u32, in_channels u32, kernel_h u32 (3),
//!                  kernel_w u32 (3), kernel f32 × out·in·9, bias f32 × out
//! ```
//!
//! Trailing bytes after the last layer are rejected.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::preprocess::{ChannelOrder, Preprocess};
use crate::tensor::{ConvLayerSpec, LayerOp};
use crate::util::write_atomic;

pub const MAGIC: [u8; 4] = *b"PGWB";
pub const VERSION: u16 = 1;

const KIND_CONV: u8 = 0;
const KIND_RELU: u8 = 1;
const KIND_MAXPOOL: u8 = 2;
const MAX_STRING_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    model_name: String,
    preprocess: Preprocess,
    layers: Vec<LayerOp>,
    layer_names: Vec<String>,
}

/// One row of [`WeightBundle::summary`].
#[derive(Debug, Clone, Serialize)]
pub struct LayerSummary {
    pub index: usize,
    pub name: String,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
}

impl WeightBundle {
    pub fn new(
        model_name: impl Into<String>,
        preprocess: Preprocess,
        layers: Vec<LayerOp>,
        layer_names: Vec<String>,
    ) -> Result<Self> {
        let bundle = Self {
            model_name: model_name.into(),
            preprocess,
            layers,
            layer_names,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Convenience constructor from `(name, op)` pairs.
    pub fn from_named(
        model_name: impl Into<String>,
        preprocess: Preprocess,
        layers: impl IntoIterator<Item = (String, LayerOp)>,
    ) -> Result<Self> {
        let (layer_names, layers) = layers.into_iter().unzip();
        Self::new(model_name, preprocess, layers, layer_names)
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn layers(&self) -> &[LayerOp] {
        &self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layer_names.iter().position(|n| n == name)
    }

    /// Channel count the first convolution expects.
    pub fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerOp::Conv(spec) => Some(spec.in_channels()),
            _ => None,
        })
    }

    pub fn conv_layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers
            .iter()
            .zip(&self.layer_names)
            .filter(|(l, _)| l.is_conv())
            .map(|(_, n)| n.as_str())
    }

    pub fn summary(&self) -> Vec<LayerSummary> {
        self.layers
            .iter()
            .zip(&self.layer_names)
            .enumerate()
            .map(|(index, (op, name))| {
                let (in_channels, out_channels) = match op {
                    LayerOp::Conv(s) => (Some(s.in_channels()), Some(s.out_channels())),
                    _ => (None, None),
                };
                LayerSummary {
                    index,
                    name: name.clone(),
                    kind: op.kind(),
                    in_channels,
                    out_channels,
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.model_name.is_empty() {
            return Err(Error::Validation("model_name is empty".into()));
        }
        self.preprocess.validate()?;
        if self.layers.len() != self.layer_names.len() {
            return Err(Error::Validation(format!(
                "{} layers but {} layer names",
                self.layers.len(),
                self.layer_names.len()
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Validation("bundle has no layers".into()));
        }
        let mut seen = HashSet::new();
        let mut channels: Option<usize> = None;
        for (op, name) in self.layers.iter().zip(&self.layer_names) {
            if name.is_empty() {
                return Err(Error::Validation("empty layer name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate layer name `{name}`")));
            }
            if let LayerOp::Conv(spec) = op {
                if let Some(c) = channels {
                    if c != spec.in_channels() {
                        return Err(Error::Validation(format!(
                            "layer `{name}` expects {} input channels but receives {c}",
                            spec.in_channels()
                        )));
                    }
                }
                if !spec.is_finite() {
                    return Err(Error::Validation(format!(
                        "layer `{name}` has non-finite weights"
                    )));
                }
                channels = Some(spec.out_channels());
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.model_name);

        let p = &self.preprocess;
        put_u32(&mut out, p.target_height);
        put_u32(&mut out, p.target_width);
        out.push(match p.channel_order {
            ChannelOrder::Rgb => 0,
            ChannelOrder::Bgr => 1,
        });
        put_f32s(&mut out, &[p.scale]);
        put_f32s(&mut out, &p.mean);
        put_f32s(&mut out, &p.std);

        put_u32(&mut out, self.layers.len() as u32);
        for (op, name) in self.layers.iter().zip(&self.layer_names) {
            put_str(&mut out, name);
            match op {
                LayerOp::Conv(spec) => {
                    out.push(KIND_CONV);
                    for dim in [spec.out_channels(), spec.in_channels(), 3, 3] {
                        put_u32(&mut out, dim as u32);
                    }
                    put_f32s(&mut out, spec.kernel());
                    put_f32s(&mut out, spec.bias());
                }
                LayerOp::Relu => out.push(KIND_RELU),
                LayerOp::MaxPool2x2 => out.push(KIND_MAXPOOL),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {magic:02x?}, expected \"PGWB\""),
            ));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let model_name = r.string("model_name")?;

        let target_height = r.u32("target_height")?;
        let target_width = r.u32("target_width")?;
        let order_at = r.pos;
        let channel_order = match r.u8("channel_order")? {
            0 => ChannelOrder::Rgb,
            1 => ChannelOrder::Bgr,
            other => {
                return Err(Error::format(
                    order_at,
                    format!("unknown channel order tag {other}"),
                ))
            }
        };
        let scale = r.f32("scale")?;
        let mean = r.f32x3("mean")?;
        let std = r.f32x3("std")?;
        let preprocess = Preprocess {
            target_height,
            target_width,
            channel_order,
            scale,
            mean,
            std,
        };

        let count = r.u32("layer_count")? as usize;
        let mut layers = Vec::new();
        let mut names = Vec::new();
        for _ in 0..count {
            let name = r.string("layer name")?;
            let kind_at = r.pos;
            let op = match r.u8("layer kind")? {
                KIND_CONV => {
                    let dims_at = r.pos;
                    let out_c = r.u32("out_channels")? as usize;
                    let in_c = r.u32("in_channels")? as usize;
                    let kh = r.u32("kernel_h")?;
                    let kw = r.u32("kernel_w")?;
                    if (kh, kw) != (3, 3) {
                        return Err(Error::format(
                            dims_at,
                            format!(
                                "layer `{name}`: only 3x3 kernels are supported, got {kh}x{kw}"
                            ),
                        ));
                    }
                    if out_c == 0 || in_c == 0 {
                        return Err(Error::format(
                            dims_at,
                            format!("layer `{name}`: zero channel count"),
                        ));
                    }
                    let n_kernel = out_c
                        .checked_mul(in_c)
                        .and_then(|v| v.checked_mul(9))
                        .ok_or_else(|| Error::format(dims_at, "kernel size overflows"))?;
                    let kernel = r.f32s(n_kernel, "kernel")?;
                    let bias = r.f32s(out_c, "bias")?;
                    LayerOp::Conv(
                        ConvLayerSpec::new(in_c, out_c, kernel, bias)
                            .map_err(|e| Error::format(dims_at, e.to_string()))?,
                    )
                }
                KIND_RELU => LayerOp::Relu,
                KIND_MAXPOOL => LayerOp::MaxPool2x2,
                other => {
                    return Err(Error::format(
                        kind_at,
                        format!("layer `{name}`: unknown layer kind tag {other}"),
                    ))
                }
            };
            names.push(name);
            layers.push(op);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos,
                format!("{} trailing bytes after last layer", bytes.len() - r.pos),
            ));
        }
        Self::new(model_name, preprocess, layers, names)
    }
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightBundle::from_bytes(&bytes)
}

/// Writes atomically: the destination is either the complete new file or
/// untouched.
pub fn save_bundle(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &bundle.to_bytes())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {remaining} left"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32x3(&mut self, what: &str) -> Result<[f32; 3]> {
        Ok([self.f32(what)?, self.f32(what)?, self.f32(what)?])
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos, format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        if len > MAX_STRING_LEN {
            return Err(Error::format(
                at,
                format!("{what} length {len} exceeds limit"),
            ));
        }
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(at + 4, format!("{what} is not valid UTF-8")))
    }
}
