//! Synthetic scenes and hand-built bundles with known behaviour, for
//! end-to-end checks that do not need downloaded weights or image corpora.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::WeightBundle;
use crate::error::Result;
use crate::preprocess::{ChannelOrder, Preprocess};
use crate::tensor::{ConvLayerSpec, LayerOp};

/// A smooth natural-looking scene: a tinted vertical gradient, one soft
/// bright blob and mild pixel noise. Never saturates to pure white.
pub fn scene(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(30.0..110.0));
    let slope: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-30.0..30.0));
    let peak = rng.gen_range(0.35..0.85) * 255.0;
    let (cx, cy) = (
        rng.gen_range(0.0..width as f32),
        rng.gen_range(0.0..height as f32),
    );
    let radius = rng.gen_range(0.15..0.35) * width.min(height) as f32;

    let mut img = RgbImage::new(width, height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let t = y as f32 / height.max(2) as f32 - 0.5;
        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
        let blob = (-d2 / (2.0 * radius * radius)).exp();
        *px = Rgb(std::array::from_fn(|c| {
            let bg = base[c] + slope[c] * t;
            let v = bg + (peak - bg).max(0.0) * blob + rng.gen_range(-6.0..6.0);
            v.clamp(0.0, 235.0) as u8
        }));
    }
    img
}

/// Preprocessing for the crafted bundles: unit scale, centred on 0.5.
pub fn crafted_preprocess(height: u32, width: u32) -> Preprocess {
    Preprocess {
        target_height: height,
        target_width: width,
        channel_order: ChannelOrder::Rgb,
        scale: 1.0 / 255.0,
        mean: [0.5; 3],
        std: [0.25; 3],
    }
}

/// `depth` conv+ReLU pairs with non-negative kernels, named `conv1`,
/// `relu1`, ... The first convolution is centre-weighted, so its response
/// follows individual pixels; later ones average their 3×3 neighbourhood,
/// smoothing out fine high-contrast texture.
pub fn crafted_bundle(
    depth: usize,
    channels: usize,
    height: u32,
    width: u32,
) -> Result<WeightBundle> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for d in 0..depth {
        let mut kernel = Vec::with_capacity(channels * cin * 9);
        for o in 0..channels {
            for _ in 0..cin {
                for k in 0..9 {
                    let w = if d == 0 {
                        if k == 4 {
                            1.0
                        } else {
                            0.02 * (o + 1) as f32
                        }
                    } else {
                        1.0 / 9.0
                    };
                    kernel.push(w / cin as f32);
                }
            }
        }
        let spec = ConvLayerSpec::new(cin, channels, kernel, vec![0.0; channels])?;
        layers.push((format!("conv{}", d + 1), LayerOp::Conv(spec)));
        layers.push((format!("relu{}", d + 1), LayerOp::Relu));
        cin = channels;
    }
    WeightBundle::from_named("crafted", crafted_preprocess(height, width), layers)
}

/// Random-weight stand-in with the shapes of VGG-16's first block
/// (`conv1_1` 3→64, `conv1_2` 64→64) and standard ImageNet preprocessing.
pub fn vgg16_block1_shapes(seed: u64) -> Result<WeightBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |cin: usize, cout: usize| {
        let bound = (6.0 / (cin * 9) as f32).sqrt();
        ConvLayerSpec::new(
            cin,
            cout,
            (0..cout * cin * 9)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        )
    };
    let (c1, c2) = (conv(3, 64)?, conv(64, 64)?);
    WeightBundle::from_named(
        "vgg16",
        Preprocess::imagenet(),
        [
            ("conv1_1".to_string(), LayerOp::Conv(c1)),
            ("relu1_1".to_string(), LayerOp::Relu),
            ("conv1_2".to_string(), LayerOp::Conv(c2)),
            ("relu1_2".to_string(), LayerOp::Relu),
            ("pool1".to_string(), LayerOp::MaxPool2x2),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_varied() {
        assert_eq!(scene(1, 32, 24), scene(1, 32, 24));
        assert_ne!(scene(1, 32, 24), scene(2, 32, 24));
        assert!(scene(3, 32, 32)
            .pixels()
            .all(|p| p.0.iter().all(|&v| v <= 235)));
    }

    #[test]
    fn crafted_kernels_are_non_negative() {
        let b = crafted_bundle(3, 4, 16, 16).unwrap();
        assert_eq!(
            b.conv_layer_names().collect::<Vec<_>>(),
            ["conv1", "conv2", "conv3"]
        );
        for l in b.layers() {
            if let LayerOp::Conv(s) = l {
                assert!(s.kernel().iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn vgg_shapes() {
        let b = vgg16_block1_shapes(0).unwrap();
        let s = b.summary();
        assert_eq!(s[0].out_channels, Some(64));
        assert_eq!(s[2].in_channels, Some(64));
    }
}
