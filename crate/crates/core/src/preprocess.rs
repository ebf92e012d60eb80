//! Image decoding and normalization into the network's input tensor.

use std::path::Path;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

/// Input pipeline stored alongside the weights.
///
/// `mean` and `std` are indexed by *output* channel, i.e. after any
/// RGB→BGR reordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub target_height: u32,
    pub target_width: u32,
    pub channel_order: ChannelOrder,
    pub scale: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Preprocess {
    /// Standard ImageNet normalization at 224×224.
    pub fn imagenet() -> Self {
        Self {
            target_height: 224,
            target_width: 224,
            channel_order: ChannelOrder::Rgb,
            scale: 1.0 / 255.0,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    /// Scale to `[0, 1]` with no mean/std shift.
    pub fn unit_range(height: u32, width: u32) -> Self {
        Self {
            target_height: height,
            target_width: width,
            channel_order: ChannelOrder::Rgb,
            scale: 1.0 / 255.0,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::Validation(format!(
                "preprocess target size must be positive, got {}x{}",
                self.target_height, self.target_width
            )));
        }
        if !self.scale.is_finite() || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation(
                "preprocess scale and mean must be finite".into(),
            ));
        }
        if let Some(s) = self.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Validation(format!(
                "preprocess std must be strictly positive, got {s}"
            )));
        }
        Ok(())
    }
}

/// Decodes any supported image file into 8-bit RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))?;
    Ok(img.into_rgb8())
}

/// Like [`preprocess_rgb`], for an already-decoded image of unknown layout.
/// Anything other than three colour channels is a shape error.
pub fn preprocess_image(raw: &DynamicImage, pre: &Preprocess) -> Result<Tensor> {
    let channels = raw.color().channel_count();
    if channels != 3 {
        return Err(Error::Shape(format!(
            "expected a 3-channel image, got {channels} channels"
        )));
    }
    match raw.as_rgb8() {
        Some(rgb) => preprocess_rgb(rgb, pre),
        None => preprocess_rgb(&raw.to_rgb8(), pre),
    }
}

/// Bilinear resize to the target size, then `(v·scale − mean[c]) / std[c]`.
pub fn preprocess_rgb(raw: &RgbImage, pre: &Preprocess) -> Result<Tensor> {
    pre.validate()?;
    let (in_w, in_h) = raw.dimensions();
    if in_w == 0 || in_h == 0 {
        return Err(Error::Shape("image has zero size".into()));
    }
    let (out_h, out_w) = (pre.target_height as usize, pre.target_width as usize);
    let plane = out_h * out_w;
    let mut data = vec![0.0f32; 3 * plane];

    for src_c in 0..3 {
        let dst_c = match pre.channel_order {
            ChannelOrder::Rgb => src_c,
            ChannelOrder::Bgr => 2 - src_c,
        };
        let resized = resize_channel(raw, src_c, out_h, out_w);
        let (mean, std) = (pre.mean[dst_c], pre.std[dst_c]);
        for (d, v) in data[dst_c * plane..(dst_c + 1) * plane]
            .iter_mut()
            .zip(resized)
        {
            *d = (v * pre.scale - mean) / std;
        }
    }
    Tensor::new(3, out_h, out_w, data)
}

/// Bilinear interpolation with half-pixel centers and edge clamping.
/// Same-size requests copy the channel unchanged.
fn resize_channel(raw: &RgbImage, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let (in_w, in_h) = (raw.width() as usize, raw.height() as usize);
    let px = |x: usize, y: usize| raw.get_pixel(x as u32, y as u32)[c] as f32;
    if (in_h, in_w) == (out_h, out_w) {
        return (0..out_h)
            .flat_map(|y| (0..out_w).map(move |x| (x, y)))
            .map(|(x, y)| px(x, y))
            .collect();
    }
    let xs = axis_weights(in_w, out_w);
    let ys = axis_weights(in_h, out_h);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
            let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Rgb};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-pixel bilinear sample written from the textbook definition:
    /// map the output center back to input coordinates, clamp, and blend
    /// the four neighbours.
    fn bilinear_oracle(img: &RgbImage, c: usize, oh: usize, ow: usize) -> Vec<f64> {
        let (iw, ih) = (img.width() as f64, img.height() as f64);
        let mut out = Vec::new();
        for y in 0..oh {
            for x in 0..ow {
                let sy = ((y as f64 + 0.5) * ih / oh as f64 - 0.5).clamp(0.0, ih - 1.0);
                let sx = ((x as f64 + 0.5) * iw / ow as f64 - 0.5).clamp(0.0, iw - 1.0);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (y1, x1) = ((y0 + 1.0).min(ih - 1.0), (x0 + 1.0).min(iw - 1.0));
                let (ty, tx) = (sy - y0, sx - x0);
                let p = |xx: f64, yy: f64| img.get_pixel(xx as u32, yy as u32)[c] as f64;
                out.push(
                    (1.0 - ty) * ((1.0 - tx) * p(x0, y0) + tx * p(x1, y0))
                        + ty * ((1.0 - tx) * p(x0, y1) + tx * p(x1, y1)),
                );
            }
        }
        out
    }

    #[test]
    fn mid_gray_normalizes_to_zero() {
        let img = RgbImage::from_pixel(32, 32, Rgb([128, 128, 128]));
        let gray = 128.0 / 255.0;
        let pre = Preprocess {
            mean: [gray; 3],
            std: [1.0; 3],
            ..Preprocess::unit_range(16, 16)
        };
        let t = preprocess_rgb(&img, &pre).unwrap();
        assert_eq!(t.shape(), (3, 16, 16));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_size_only_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = RgbImage::from_fn(224, 224, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let pre = Preprocess::imagenet();
        let t = preprocess_rgb(&img, &pre).unwrap();
        for (x, y) in [(0, 0), (17, 200), (223, 223)] {
            for c in 0..3 {
                let raw = img.get_pixel(x, y)[c] as f32;
                let want = (raw * pre.scale - pre.mean[c]) / pre.std[c];
                assert_eq!(t.get(c, y as usize, x as usize), want);
            }
        }
    }

    #[test]
    fn checkerboard_downsample_matches_oracle() {
        let img = RgbImage::from_fn(448, 448, |x, y| {
            if (x + y) % 2 == 0 {
                Rgb([255, 0, 255])
            } else {
                Rgb([0, 255, 0])
            }
        });
        let pre = Preprocess {
            scale: 1.0,
            ..Preprocess::unit_range(224, 224)
        };
        let t = preprocess_rgb(&img, &pre).unwrap();
        for c in 0..3 {
            for (got, want) in t.channel(c).iter().zip(bilinear_oracle(&img, c, 224, 224)) {
                assert!((*got as f64 - want).abs() <= 1e-4, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn random_resizes_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let (w, h) = (rng.gen_range(3..60), rng.gen_range(3..60));
            let (ow, oh) = (rng.gen_range(2..50), rng.gen_range(2..50));
            let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
            let pre = Preprocess {
                scale: 1.0,
                ..Preprocess::unit_range(oh, ow)
            };
            let t = preprocess_rgb(&img, &pre).unwrap();
            for c in 0..3 {
                let want = bilinear_oracle(&img, c, oh as usize, ow as usize);
                for (got, want) in t.channel(c).iter().zip(want) {
                    assert!((*got as f64 - want).abs() <= 1e-3, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn bgr_reorders_channels() {
        let img = RgbImage::from_pixel(4, 4, Rgb([10, 20, 30]));
        let pre = Preprocess {
            channel_order: ChannelOrder::Bgr,
            scale: 1.0,
            ..Preprocess::unit_range(4, 4)
        };
        let t = preprocess_rgb(&img, &pre).unwrap();
        assert_eq!(t.get(0, 0, 0), 30.0);
        assert_eq!(t.get(2, 0, 0), 10.0);
    }

    #[test]
    fn non_rgb_input_is_shape_error() {
        let gray = DynamicImage::ImageLuma8(GrayImage::new(8, 8));
        let err = preprocess_image(&gray, &Preprocess::imagenet()).unwrap_err();
        assert!(err.is_shape());
    }

    #[test]
    fn output_is_finite_with_target_shape() {
        let img = RgbImage::from_pixel(37, 19, Rgb([255, 0, 7]));
        let t = preprocess_image(&DynamicImage::ImageRgb8(img), &Preprocess::imagenet()).unwrap();
        assert_eq!(t.shape(), (3, 224, 224));
        assert!(t.is_finite());
    }

    #[test]
    fn zero_std_rejected() {
        let pre = Preprocess {
            std: [1.0, 0.0, 1.0],
            ..Preprocess::imagenet()
        };
        assert!(pre.validate().unwrap_err().is_validation());
    }
}
