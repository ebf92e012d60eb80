use patchguard_core::bundle::{MAGIC, VERSION};
use patchguard_core::synthetic::{crafted_bundle, vgg16_block1_shapes};
use patchguard_core::{load_bundle, save_bundle, ConvLayerSpec, LayerOp, Preprocess, WeightBundle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HEADER_LEN: usize = MAGIC.len() + std::mem::size_of_val(&VERSION);

fn sample_bytes() -> Vec<u8> {
    crafted_bundle(2, 3, 16, 16).unwrap().to_bytes()
}

#[test]
fn every_header_byte_corruption_is_a_format_error() {
    let bytes = sample_bytes();
    let mut checked = 0;
    for pos in 0..HEADER_LEN {
        for value in 0..=255u8 {
            if value == bytes[pos] {
                continue;
            }
            let mut bad = bytes.clone();
            bad[pos] = value;
            let err = WeightBundle::from_bytes(&bad).unwrap_err();
            assert!(err.is_format(), "byte {pos} = {value:#04x}: {err}");
            checked += 1;
        }
    }
    assert_eq!(checked, HEADER_LEN * 255);
}

#[test]
fn corruption_anywhere_never_panics() {
    let bytes = sample_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for pos in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << rng.gen_range(0..8);
        let _ = WeightBundle::from_bytes(&bad);
        bad[pos] = 0xff;
        let _ = WeightBundle::from_bytes(&bad);
    }
    for _ in 0..2000 {
        let mut bad = bytes.clone();
        for _ in 0..rng.gen_range(1..6) {
            let i = rng.gen_range(0..bad.len());
            bad[i] = rng.gen();
        }
        bad.truncate(rng.gen_range(0..=bad.len()));
        let _ = WeightBundle::from_bytes(&bad);
    }
}

#[test]
fn huge_declared_sizes_fail_cleanly() {
    let mut bytes = sample_bytes();
    // model_name length field sits right after the header.
    bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(WeightBundle::from_bytes(&bytes).unwrap_err().is_format());
}

#[test]
fn saving_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = vgg16_block1_shapes(3).unwrap();
    let (a, b) = (dir.path().join("a.pgwb"), dir.path().join("b.pgwb"));
    save_bundle(&bundle, &a).unwrap();
    save_bundle(&bundle, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_bundle(&a).unwrap(), bundle);
}

#[test]
fn payloads_survive_bit_exactly() {
    let special = [
        f32::from_bits(1),
        f32::from_bits(0x007f_ffff),
        -f32::from_bits(0x0000_0400),
        f32::MIN_POSITIVE,
        1.0,
        2.0,
        0.5,
        2f32.powi(-126),
        2f32.powi(100),
        -0.0,
        0.0,
        f32::MAX,
        f32::MIN,
        -2f32.powi(-140),
        1.0 / 3.0,
        0.1,
        -7.25,
        2f32.powi(-149),
    ];
    let kernel: Vec<f32> = special.iter().cycle().take(2 * 9).copied().collect();
    let spec = ConvLayerSpec::new(1, 2, kernel.clone(), vec![f32::from_bits(3), -0.0]).unwrap();
    let bundle = WeightBundle::from_named(
        "bits",
        Preprocess::unit_range(4, 4),
        [("c".to_string(), LayerOp::Conv(spec))],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bits.pgwb");
    save_bundle(&bundle, &path).unwrap();
    let back = load_bundle(&path).unwrap();
    let LayerOp::Conv(got) = &back.layers()[0] else {
        panic!("not a conv");
    };
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(got.kernel()), bits(&kernel));
    assert_eq!(bits(got.bias()), vec![3, (-0.0f32).to_bits()]);
}

#[test]
fn vgg16_stand_in_reports_64_channels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg.pgwb");
    save_bundle(&vgg16_block1_shapes(0).unwrap(), &path).unwrap();
    let bundle = load_bundle(&path).unwrap();
    let conv1_1 = &bundle.summary()[bundle.layer_index("conv1_1").unwrap()];
    assert_eq!(conv1_1.out_channels, Some(64));
    assert_eq!(conv1_1.in_channels, Some(3));
}

fn arb_bundle() -> impl Strategy<Value = WeightBundle> {
    (1usize..4, 1usize..4, 1usize..4, any::<u64>(), any::<bool>()).prop_map(
        |(depth, cin, width, seed, pool)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layers = Vec::new();
            let mut c = cin;
            for d in 0..depth {
                let n = width * c * 9;
                let spec = ConvLayerSpec::new(
                    c,
                    width,
                    (0..n)
                        .map(|_| f32::from_bits(rng.gen::<u32>() & 0xbfff_ffff))
                        .collect(),
                    (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                layers.push((format!("conv{d}"), LayerOp::Conv(spec)));
                layers.push((format!("relu{d}"), LayerOp::Relu));
                c = width;
            }
            if pool {
                layers.push(("pool".to_string(), LayerOp::MaxPool2x2));
            }
            let mut pre = Preprocess::unit_range(8, 8);
            pre.mean = [0.1, 0.2, 0.3];
            WeightBundle::from_named(format!("m{seed}"), pre, layers).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn load_inverts_save(bundle in arb_bundle()) {
        let bytes = bundle.to_bytes();
        let back = WeightBundle::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, bundle);
    }
}
