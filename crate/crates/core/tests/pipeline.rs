use std::path::{Path, PathBuf};

use image::RgbImage;
use patchguard_core::calibration::collect_clean_indicators;
use patchguard_core::dataset::{apply_patch, save_png, PatchContent, PatchSpec, Placement};
use patchguard_core::eval::{layer_scan, recommend_layer};
use patchguard_core::golden::{load_golden, replay, GoldenFile};
use patchguard_core::synthetic::{crafted_bundle, scene};
use patchguard_core::{indicator_at_layer, preprocess_rgb, Tap};

fn write_scenes(dir: &Path, seeds: std::ops::Range<u64>) -> Vec<PathBuf> {
    seeds
        .map(|s| {
            let p = dir.join(format!("img{s}.png"));
            save_png(&scene(s, 48, 40), &p).unwrap();
            p
        })
        .collect()
}

#[test]
fn collection_matches_single_image_calls() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = crafted_bundle(2, 4, 32, 32).unwrap();
    let paths = write_scenes(dir.path(), 0..20);
    for tap in [Tap::Pre, Tap::Post] {
        let got = collect_clean_indicators(&paths, &bundle, "conv2", tap, 4).unwrap();
        assert!(got.failures.is_empty());
        for (sample, path) in got.samples.iter().zip(&paths) {
            let rgb = patchguard_core::preprocess::load_rgb(path).unwrap();
            let x = preprocess_rgb(&rgb, bundle.preprocess()).unwrap();
            let want = indicator_at_layer(&x, &bundle, "conv2", tap)
                .unwrap()
                .value();
            assert_eq!(sample.value.to_bits(), want.to_bits());
            assert_eq!(
                sample.source_id,
                path.file_stem().unwrap().to_str().unwrap()
            );
        }
    }
}

#[test]
fn identical_images_give_identical_values() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = crafted_bundle(1, 2, 16, 16).unwrap();
    let img = scene(5, 16, 16);
    let paths: Vec<PathBuf> = (0..6)
        .map(|i| {
            let p = dir.path().join(format!("copy{i}.png"));
            save_png(&img, &p).unwrap();
            p
        })
        .collect();
    let got = collect_clean_indicators(&paths, &bundle, "conv1", Tap::Post, 3).unwrap();
    assert!(got.samples.windows(2).all(|w| w[0].value == w[1].value));
}

fn patched(clean: &[RgbImage], value: u8) -> Vec<RgbImage> {
    clean
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let spec = PatchSpec {
                area_fraction: 0.06,
                side: Some(16),
                content: PatchContent::SolidColor([value; 3]),
                placement: Placement::UniformRandom { seed: i as u64 },
            };
            apply_patch(img, &spec).unwrap().0
        })
        .collect()
}

#[test]
fn brighter_patch_separates_better_at_layer_one() {
    let bundle = crafted_bundle(3, 4, 64, 64).unwrap();
    let clean: Vec<RgbImage> = (0..120).map(|s| scene(s, 64, 64)).collect();
    let others: Vec<RgbImage> = (1000..1120).map(|s| scene(s, 64, 64)).collect();
    let layers: Vec<String> = ["conv1", "conv2", "conv3"].map(String::from).to_vec();

    let bright = layer_scan(
        &clean,
        &patched(&others, 255),
        &bundle,
        &layers,
        Tap::Post,
        4,
    )
    .unwrap();
    let dim = layer_scan(
        &clean,
        &patched(&others, 128),
        &bundle,
        &layers,
        Tap::Post,
        4,
    )
    .unwrap();
    let (b1, d1) = (bright.layers[0].overlap, dim.layers[0].overlap);
    assert!(b1 < d1, "bright overlap {b1} not below halved {d1}");
    assert_eq!(recommend_layer(&bright).unwrap().layer, "conv1");
}

#[test]
fn golden_fixture_replays() {
    let (g, bundle) = golden();
    assert_eq!(bundle.model_name(), "golden-tiny");
    let parity = replay(&g, &bundle).unwrap();
    assert_eq!(parity.len(), 5);
    for p in &parity {
        assert!(p.max_abs_diff <= 1e-4, "{}: {}", p.layer, p.max_abs_diff);
        assert!(p.elements > 0);
    }
}

fn golden() -> (GoldenFile, patchguard_core::WeightBundle) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden/tiny_golden.json");
    load_golden(&path).unwrap()
}

#[test]
fn golden_mismatches_are_reported() {
    let (mut g, bundle) = golden();
    g.vectors[0].output[3] += 0.5;
    let parity = replay(&g, &bundle).unwrap();
    assert!((parity[0].max_abs_diff - 0.5).abs() < 1e-3);

    let (mut g, bundle) = golden();
    g.vectors[1].layer = "conv9".into();
    assert!(replay(&g, &bundle).unwrap_err().is_validation());

    let (mut g, bundle) = golden();
    g.vectors[2].output.pop();
    assert!(replay(&g, &bundle).unwrap_err().is_shape());
}

#[test]
fn golden_missing_bundle_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    std::fs::write(
        &path,
        r#"{"bundle":"nope.pgwb","input_shape":[1,1,1],"input":[0],"vectors":[]}"#,
    )
    .unwrap();
    assert!(matches!(
        load_golden(&path).unwrap_err(),
        patchguard_core::Error::Io { .. }
    ));
    std::fs::write(&path, "{").unwrap();
    assert!(load_golden(&path).unwrap_err().is_format());
}
