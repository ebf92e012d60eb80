//! Dense rank-3 feature maps and the three layer kernels needed to run
//! shallow VGG-style prefixes: 3×3 same-padding convolution, ReLU and 2×2
//! max-pooling.
//!
//! Layout is channel-major, then row-major within a channel. The weight
//! bundle format relies on the same layout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `channels × height × width` activation map of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match {channels}x{height}x{width} = {expected}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value at channel `c`, row `y`, column `x`. Panics when out of range.
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Contiguous `height × width` plane of one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what} contains non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot combine tensors of shape {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Tensor::new(self.channels, self.height, self.width, data)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// Weights of a 3×3, stride 1, zero-padding 1 convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    in_channels: usize,
    out_channels: usize,
    /// `out_channels × in_channels × 3 × 3`.
    kernel: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvLayerSpec {
    pub const KERNEL_SIZE: usize = 3;

    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Shape(format!(
                "conv channel counts must be positive, got {in_channels}->{out_channels}"
            )));
        }
        let expected = out_channels * in_channels * 9;
        if kernel.len() != expected {
            return Err(Error::Shape(format!(
                "kernel length {} does not match {out_channels}x{in_channels}x3x3 = {expected}",
                kernel.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "bias length {} does not match out_channels {out_channels}",
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> &[f32] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// The 9 taps connecting input channel `i` to output channel `o`.
    pub fn taps(&self, o: usize, i: usize) -> &[f32] {
        let start = (o * self.in_channels + i) * 9;
        &self.kernel[start..start + 9]
    }

    pub fn is_finite(&self) -> bool {
        self.kernel.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    Conv(ConvLayerSpec),
    Relu,
    MaxPool2x2,
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv(_) => "conv",
            LayerOp::Relu => "relu",
            LayerOp::MaxPool2x2 => "maxpool",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerOp::Conv(_))
    }

    /// Output shape for an input of shape `input`, without evaluating.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (c, h, w) = input;
        match self {
            LayerOp::Conv(spec) => {
                if c != spec.in_channels {
                    return Err(channel_mismatch(c, spec.in_channels));
                }
                Ok((spec.out_channels, h, w))
            }
            LayerOp::Relu => Ok(input),
            LayerOp::MaxPool2x2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(odd_pool(h, w));
                }
                Ok((c, h / 2, w / 2))
            }
        }
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            LayerOp::Conv(spec) => conv3x3(input, spec),
            LayerOp::Relu => Ok(relu(input)),
            LayerOp::MaxPool2x2 => maxpool2x2(input),
        }
    }
}

fn channel_mismatch(got: usize, want: usize) -> Error {
    Error::Shape(format!(
        "input has {got} channels but convolution expects {want}"
    ))
}

fn odd_pool(h: usize, w: usize) -> Error {
    Error::Shape(format!(
        "2x2 max-pool needs even spatial dimensions, got {h}x{w}"
    ))
}

/// 3×3 convolution, stride 1, zero padding 1. Output has the same spatial
/// size as the input.
pub fn conv3x3(input: &Tensor, spec: &ConvLayerSpec) -> Result<Tensor> {
    if input.channels != spec.in_channels {
        return Err(channel_mismatch(input.channels, spec.in_channels));
    }
    input.ensure_finite("convolution input")?;

    let (h, w) = (input.height, input.width);
    let plane = h * w;
    let mut out = vec![0.0f32; spec.out_channels * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(o, acc)| {
        acc.fill(spec.bias[o]);
        for i in 0..spec.in_channels {
            let src = input.channel(i);
            let taps = spec.taps(o, i);
            for ky in 0..3 {
                // Output rows whose source row y + ky - 1 is in range.
                let y_lo = 1usize.saturating_sub(ky);
                let y_hi = (h + 1).saturating_sub(ky).min(h);
                for kx in 0..3 {
                    let weight = taps[ky * 3 + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let dst = &mut acc[y * w + x_lo..y * w + x_hi];
                        let s0 = sy * w + x_lo + kx - 1;
                        let row = &src[s0..s0 + dst.len()];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += weight * s;
                        }
                    }
                }
            }
        }
    });

    let out = Tensor::new(spec.out_channels, h, w, out)?;
    out.ensure_finite("convolution output")?;
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
        ..input.clone()
    }
}

/// Non-overlapping 2×2 max-pooling. Odd spatial dimensions are rejected.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(odd_pool(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = input.channel(ch);
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                let m = r0[2 * x]
                    .max(r0[2 * x + 1])
                    .max(r1[2 * x])
                    .max(r1[2 * x + 1]);
                out.push(m);
            }
        }
    }
    Tensor::new(c, oh, ow, out)
}

/// Output shape after `layers[..=upto]`, computed from the layer list alone.
pub fn prefix_output_shape(input: Shape, layers: &[LayerOp], upto: usize) -> Result<Shape> {
    check_upto(layers, upto)?;
    layers[..=upto]
        .iter()
        .enumerate()
        .try_fold(input, |shape, (index, layer)| {
            layer.output_shape(shape).map_err(|e| at_layer(index, e))
        })
}

/// Runs `layers[0..=upto]` in order and returns the activation map at that
/// depth. Failures carry the index of the offending layer.
pub fn forward_prefix(input: &Tensor, layers: &[LayerOp], upto: usize) -> Result<Tensor> {
    let mut taps = forward_taps(input, layers, &[upto])?;
    Ok(taps.pop().expect("one tap requested"))
}

/// Runs the prefix once up to the deepest requested index and returns the
/// activation after each index in `taps`, in the order given.
pub fn forward_taps(input: &Tensor, layers: &[LayerOp], taps: &[usize]) -> Result<Vec<Tensor>> {
    let Some(&deepest) = taps.iter().max() else {
        return Ok(Vec::new());
    };
    check_upto(layers, deepest)?;

    let mut captured: Vec<Option<Tensor>> = vec![None; taps.len()];
    let mut current = std::borrow::Cow::Borrowed(input);
    for (index, layer) in layers[..=deepest].iter().enumerate() {
        let next = layer.apply(&current).map_err(|e| at_layer(index, e))?;
        current = std::borrow::Cow::Owned(next);
        for (slot, &t) in captured.iter_mut().zip(taps) {
            if t == index {
                *slot = Some(current.as_ref().clone());
            }
        }
    }
    Ok(captured
        .into_iter()
        .map(|t| t.expect("every tap index was visited"))
        .collect())
}

fn check_upto(layers: &[LayerOp], upto: usize) -> Result<()> {
    if upto >= layers.len() {
        return Err(Error::Config(format!(
            "layer index {upto} out of range for a {}-layer stack",
            layers.len()
        )));
    }
    Ok(())
}

fn at_layer(index: usize, source: Error) -> Error {
    Error::AtLayer {
        index,
        source: Box::new(source),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the convolution sum, one output at a time.
    fn conv_oracle(input: &Tensor, spec: &ConvLayerSpec) -> Vec<f32> {
        let (c, h, w) = input.shape();
        let mut out = vec![0.0f32; spec.out_channels() * h * w];
        for o in 0..spec.out_channels() {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = spec.bias()[o];
                    for i in 0..c {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let sy = y as isize + dy as isize - 1;
                                let sx = x as isize + dx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += spec.taps(o, i)[dy * 3 + dx]
                                    * input.get(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn pool_oracle(input: &Tensor) -> Vec<f32> {
        let (c, h, w) = input.shape();
        let mut out = Vec::new();
        for ch in 0..c {
            for y in (0..h).step_by(2) {
                for x in (0..w).step_by(2) {
                    let window = [
                        input.get(ch, y, x),
                        input.get(ch, y, x + 1),
                        input.get(ch, y + 1, x),
                        input.get(ch, y + 1, x + 1),
                    ];
                    out.push(window.into_iter().fold(f32::NEG_INFINITY, f32::max));
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(c, h, w, data).unwrap()
    }

    fn random_conv(rng: &mut impl Rng, cin: usize, cout: usize, with_bias: bool) -> ConvLayerSpec {
        let kernel = (0..cout * cin * 9)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let bias = (0..cout)
            .map(|_| {
                if with_bias {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        ConvLayerSpec::new(cin, cout, kernel, bias).unwrap()
    }

    #[test]
    fn conv_oracle_matches_hand_computed_case() {
        // 1x2x2 input [[1,2],[3,4]], kernel taps 1..=9, bias 0.5.
        // out(0,0) = 5*1 + 6*2 + 8*3 + 9*4 + 0.5 = 77.5
        // out(0,1) = 4*1 + 5*2 + 7*3 + 8*4 + 0.5 = 67.5
        // out(1,0) = 2*1 + 3*2 + 5*3 + 6*4 + 0.5 = 47.5
        // out(1,1) = 1*1 + 2*2 + 4*3 + 5*4 + 0.5 = 37.5
        let input = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec =
            ConvLayerSpec::new(1, 1, (1..=9).map(|v| v as f32).collect(), vec![0.5]).unwrap();
        let expected = vec![77.5, 67.5, 47.5, 37.5];
        assert_eq!(conv_oracle(&input, &spec), expected);
        assert_eq!(conv3x3(&input, &spec).unwrap().data(), &expected[..]);
    }

    #[test]
    fn zero_input_passes_only_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = random_conv(&mut rng, 1, 1, false);
        spec.bias = vec![0.75];
        let out = conv3x3(&Tensor::zeros(1, 3, 3).unwrap(), &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn identity_kernel_single_pixel() {
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let spec = ConvLayerSpec::new(1, 1, kernel, vec![0.0]).unwrap();
        let out = conv3x3(&Tensor::new(1, 1, 1, vec![-3.25]).unwrap(), &spec).unwrap();
        assert_eq!(out.data(), &[-3.25]);
    }

    #[test]
    fn conv_matches_oracle_on_random_2x5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, 2, 5, 5);
        let spec = random_conv(&mut rng, 2, 4, true);
        let got = conv3x3(&input, &spec).unwrap();
        for (g, e) in got.data().iter().zip(conv_oracle(&input, &spec)) {
            assert!((g - e).abs() <= 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn conv_matches_oracle_on_many_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..120 {
            let (c, h, w) = (
                rng.gen_range(1..=8),
                rng.gen_range(1..=16),
                rng.gen_range(1..=16),
            );
            let cout = rng.gen_range(1..=6);
            let input = random_tensor(&mut rng, c, h, w);
            let spec = random_conv(&mut rng, c, cout, true);
            let got = conv3x3(&input, &spec).unwrap();
            assert_eq!(got.shape(), (cout, h, w));
            for (g, e) in got.data().iter().zip(conv_oracle(&input, &spec)) {
                assert!((g - e).abs() <= 1e-5, "{g} vs {e} for {c}x{h}x{w}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = random_conv(&mut rng, 2, 1, true);
        let err = conv3x3(&Tensor::zeros(3, 4, 4).unwrap(), &spec).unwrap_err();
        assert!(err.is_shape());

        let mut data = vec![0.0; 2 * 4 * 4];
        data[5] = f32::NAN;
        let err = conv3x3(&Tensor::new(2, 4, 4, data).unwrap(), &spec).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::new(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::filled(2, 3, 3, -0.5).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_examples() {
        let t = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2x2(&t).unwrap();
        assert_eq!(p.shape(), (1, 1, 1));
        assert_eq!(p.data(), &[4.0]);

        let constant = Tensor::filled(2, 6, 4, 1.5).unwrap();
        let p = maxpool2x2(&constant).unwrap();
        assert_eq!(p.shape(), (2, 3, 2));
        assert!(p.data().iter().all(|&v| v == 1.5));

        assert!(maxpool2x2(&Tensor::zeros(1, 3, 4).unwrap())
            .unwrap_err()
            .is_shape());
        assert!(maxpool2x2(&Tensor::zeros(1, 4, 5).unwrap())
            .unwrap_err()
            .is_shape());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let input = random_tensor(&mut rng, 3, 8, 8);
            assert_eq!(maxpool2x2(&input).unwrap().data(), &pool_oracle(&input)[..]);
        }
    }

    #[test]
    fn forward_prefix_base_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = random_conv(&mut rng, 3, 4, false);
        let layers = vec![LayerOp::Conv(conv.clone()), LayerOp::Relu];

        let zero = Tensor::zeros(3, 6, 6).unwrap();
        let out = forward_prefix(&zero, &layers, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = random_tensor(&mut rng, 3, 6, 6);
        assert_eq!(
            forward_prefix(&x, &layers, 0).unwrap(),
            conv3x3(&x, &conv).unwrap()
        );
    }

    #[test]
    fn forward_prefix_equals_manual_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c1 = random_conv(&mut rng, 3, 5, true);
        let layers = vec![
            LayerOp::Conv(c1.clone()),
            LayerOp::Relu,
            LayerOp::MaxPool2x2,
        ];
        let x = random_tensor(&mut rng, 3, 8, 10);
        let manual = maxpool2x2(&relu(&conv3x3(&x, &c1).unwrap())).unwrap();
        assert_eq!(forward_prefix(&x, &layers, 2).unwrap(), manual);
    }

    #[test]
    fn forward_prefix_reports_failing_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers = vec![
            LayerOp::Conv(random_conv(&mut rng, 1, 2, true)),
            LayerOp::MaxPool2x2,
        ];
        let err = forward_prefix(&Tensor::zeros(1, 5, 4).unwrap(), &layers, 1).unwrap_err();
        assert!(matches!(err, Error::AtLayer { index: 1, .. }));
        assert!(err.is_shape());
        assert!(forward_prefix(&Tensor::zeros(1, 4, 4).unwrap(), &layers, 2)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn forward_taps_capture_requested_depths() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layers = vec![
            LayerOp::Conv(random_conv(&mut rng, 2, 3, true)),
            LayerOp::Relu,
            LayerOp::Conv(random_conv(&mut rng, 3, 2, true)),
            LayerOp::Relu,
        ];
        let x = random_tensor(&mut rng, 2, 6, 6);
        let taps = forward_taps(&x, &layers, &[3, 0, 1]).unwrap();
        for (tap, idx) in taps.iter().zip([3, 0, 1]) {
            assert_eq!(tap, &forward_prefix(&x, &layers, idx).unwrap());
        }
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(data in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let t = Tensor::new(1, 1, data.len(), data).unwrap();
            prop_assert_eq!(relu(&relu(&t)), relu(&t));
        }

        #[test]
        fn prefix_shape_is_predicted(seed in any::<u64>(), c in 1usize..4, h2 in 1usize..6, w2 in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers = vec![
                LayerOp::Conv(random_conv(&mut rng, c, 3, true)),
                LayerOp::Relu,
                LayerOp::MaxPool2x2,
                LayerOp::Conv(random_conv(&mut rng, 3, 2, true)),
            ];
            let x = random_tensor(&mut rng, c, 2 * h2, 2 * w2);
            for upto in 0..layers.len() {
                let predicted = prefix_output_shape(x.shape(), &layers, upto).unwrap();
                prop_assert_eq!(forward_prefix(&x, &layers, upto).unwrap().shape(), predicted);
            }
        }

        #[test]
        fn conv_is_linear_without_bias(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_conv(&mut rng, 3, 4, false);
            let x = random_tensor(&mut rng, 3, 7, 5);
            let y = random_tensor(&mut rng, 3, 7, 5);
            let lhs = conv3x3(&x.axpby(a, &y, b).unwrap(), &spec).unwrap();
            let rhs = conv3x3(&x, &spec).unwrap().axpby(a, &conv3x3(&y, &spec).unwrap(), b).unwrap();
            let scale = rhs.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-4 * scale, "{} vs {}", l, r);
            }
        }

        #[test]
        fn kernels_keep_finite_values(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_conv(&mut rng, 2, 3, true);
            let x = random_tensor(&mut rng, 2, 4, 6);
            let out = conv3x3(&x, &spec).unwrap();
            prop_assert!(out.is_finite());
            prop_assert!(relu(&out).is_finite());
            prop_assert!(maxpool2x2(&out).unwrap().is_finite());
        }
    }
}
