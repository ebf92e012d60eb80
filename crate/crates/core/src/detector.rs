//! The deployable decision pipeline: image → preprocess → shallow forward →
//! attention → indicator → threshold comparison.

use std::fmt;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{indicators_at, TapPoint};
use crate::bundle::WeightBundle;
use crate::calibration::CalibrationProfile;
use crate::error::{Error, Result};
use crate::preprocess::{load_rgb, preprocess_image, preprocess_rgb};
use crate::tensor::Tensor;
use crate::util::{source_id, with_pool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Clean,
    Perturbed,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Clean => "clean",
            Verdict::Perturbed => "perturbed",
        })
    }
}

/// Perturbed exactly when `indicator > theta`; equality is clean.
pub fn decide(indicator: f32, theta: f32) -> Verdict {
    if indicator > theta {
        Verdict::Perturbed
    } else {
        Verdict::Clean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub source_id: String,
    pub verdict: Verdict,
    pub indicator: f32,
    pub theta: f32,
    /// `indicator - theta`; positive exactly when perturbed.
    pub margin: f32,
    pub layer: String,
}

/// One entry of a batch run.
#[derive(Debug)]
pub struct BatchItem {
    pub source_id: String,
    pub path: PathBuf,
    pub outcome: Result<DetectionResult>,
}

/// A bundle and profile checked against each other.
#[derive(Debug, Clone)]
pub struct Detector<'a> {
    bundle: &'a WeightBundle,
    profile: &'a CalibrationProfile,
    point: TapPoint,
}

impl<'a> Detector<'a> {
    pub fn new(bundle: &'a WeightBundle, profile: &'a CalibrationProfile) -> Result<Self> {
        if profile.model_name != bundle.model_name() {
            return Err(Error::Config(format!(
                "profile was calibrated for model `{}` but the weights are `{}`",
                profile.model_name,
                bundle.model_name()
            )));
        }
        profile
            .validate()
            .map_err(|e| Error::Config(format!("invalid profile: {e}")))?;
        let point = TapPoint::resolve(bundle, &profile.layer, profile.tap)?;
        Ok(Self {
            bundle,
            profile,
            point,
        })
    }

    pub fn bundle(&self) -> &WeightBundle {
        self.bundle
    }

    pub fn profile(&self) -> &CalibrationProfile {
        self.profile
    }

    pub fn detect_tensor(&self, input: &Tensor, source_id: &str) -> Result<DetectionResult> {
        let indicator = indicators_at(input, self.bundle, std::slice::from_ref(&self.point))?[0].0;
        let theta = self.profile.theta;
        Ok(DetectionResult {
            source_id: source_id.to_string(),
            verdict: decide(indicator, theta),
            indicator,
            theta,
            margin: indicator - theta,
            layer: self.point.layer.clone(),
        })
    }

    pub fn detect_rgb(&self, image: &RgbImage, source_id: &str) -> Result<DetectionResult> {
        let tensor = preprocess_rgb(image, self.bundle.preprocess())?;
        self.detect_tensor(&tensor, source_id)
    }

    pub fn detect_image(&self, image: &DynamicImage, source_id: &str) -> Result<DetectionResult> {
        let tensor = preprocess_image(image, self.bundle.preprocess())?;
        self.detect_tensor(&tensor, source_id)
    }

    pub fn detect_path(&self, path: &Path, source_id: &str) -> Result<DetectionResult> {
        self.detect_rgb(&load_rgb(path)?, source_id)
    }

    /// Detects every `(source_id, path)` item on `jobs` worker threads.
    /// Output order matches input order and does not depend on `jobs`.
    /// Fails as a whole only when every item fails.
    pub fn detect_items(&self, items: &[(String, PathBuf)], jobs: usize) -> Result<Vec<BatchItem>> {
        if items.is_empty() {
            return Err(Error::Input("no images given".into()));
        }
        let outcomes: Vec<Result<DetectionResult>> = with_pool(jobs, || {
            items
                .par_iter()
                .map(|(id, path)| self.detect_path(path, id))
                .collect()
        })?;
        let batch: Vec<BatchItem> = items
            .iter()
            .zip(outcomes)
            .map(|((id, path), outcome)| BatchItem {
                source_id: id.clone(),
                path: path.clone(),
                outcome,
            })
            .collect();
        if batch.iter().all(|b| b.outcome.is_err()) {
            let causes: Vec<String> = batch
                .iter()
                .take(3)
                .map(|b| format!("{}: {}", b.path.display(), b.outcome.as_ref().unwrap_err()))
                .collect();
            return Err(Error::Input(format!(
                "all {} images failed ({}{})",
                batch.len(),
                causes.join("; "),
                if batch.len() > 3 { "; ..." } else { "" }
            )));
        }
        Ok(batch)
    }

    /// [`Detector::detect_items`] with each file's stem as its source id.
    pub fn detect_batch(&self, paths: &[PathBuf], jobs: usize) -> Result<Vec<BatchItem>> {
        let items: Vec<(String, PathBuf)> =
            paths.iter().map(|p| (source_id(p), p.clone())).collect();
        self.detect_items(&items, jobs)
    }
}

pub fn detect(
    image: &DynamicImage,
    bundle: &WeightBundle,
    profile: &CalibrationProfile,
    source_id: &str,
) -> Result<DetectionResult> {
    Detector::new(bundle, profile)?.detect_image(image, source_id)
}

pub fn detect_batch(
    paths: &[PathBuf],
    bundle: &WeightBundle,
    profile: &CalibrationProfile,
    parallelism: usize,
) -> Result<Vec<BatchItem>> {
    Detector::new(bundle, profile)?.detect_batch(paths, parallelism)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Tap;
    use crate::preprocess::Preprocess;
    use crate::tensor::{ConvLayerSpec, LayerOp};
    use image::Rgb;

    fn bundle() -> WeightBundle {
        let conv = ConvLayerSpec::new(3, 2, vec![0.1; 54], vec![0.0; 2]).unwrap();
        WeightBundle::from_named(
            "toy",
            Preprocess::unit_range(8, 8),
            [
                ("conv1".into(), LayerOp::Conv(conv)),
                ("relu1".into(), LayerOp::Relu),
            ],
        )
        .unwrap()
    }

    fn profile(theta: f32) -> CalibrationProfile {
        CalibrationProfile {
            model_name: "toy".into(),
            layer: "conv1".into(),
            tap: Tap::Post,
            confidence_p: 0.95,
            theta,
            n_samples: 1,
            created_at: "t".into(),
        }
    }

    #[test]
    fn boundary_is_clean() {
        for theta in [0.0f32, 1.5, -3.0, 1e-30, f32::MAX] {
            assert_eq!(decide(theta, theta), Verdict::Clean);
            let above = f32::from_bits(if theta >= 0.0 {
                theta.to_bits() + 1
            } else {
                theta.to_bits() - 1
            });
            if above.is_finite() {
                assert_eq!(decide(above, theta), Verdict::Perturbed);
            }
        }
    }

    #[test]
    fn zero_image_is_clean_with_zero_indicator() {
        let b = bundle();
        let p = profile(0.25);
        let img = DynamicImage::ImageRgb8(RgbImage::new(8, 8));
        let r = detect(&img, &b, &p, "zero").unwrap();
        assert_eq!(r.verdict, Verdict::Clean);
        assert_eq!(r.indicator, 0.0);
        assert_eq!(r.margin, -0.25);
    }

    #[test]
    fn max_theta_is_always_clean() {
        let b = bundle();
        let p = profile(f32::MAX);
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(8, 8, Rgb([255, 255, 255])));
        assert_eq!(detect(&img, &b, &p, "w").unwrap().verdict, Verdict::Clean);
    }

    #[test]
    fn white_image_exceeds_small_theta() {
        let b = bundle();
        let p = profile(0.1);
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(8, 8, Rgb([255, 255, 255])));
        let r = detect(&img, &b, &p, "w").unwrap();
        assert_eq!(r.verdict, Verdict::Perturbed);
        assert!(r.margin > 0.0);
    }

    #[test]
    fn mismatched_profile_rejected() {
        let b = bundle();
        let mut p = profile(1.0);
        p.model_name = "vgg16".into();
        assert!(Detector::new(&b, &p).unwrap_err().is_config());
        let mut p = profile(1.0);
        p.layer = "conv7".into();
        assert!(Detector::new(&b, &p).unwrap_err().is_config());
    }

    #[test]
    fn batch_keeps_failures_in_place() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.png");
        RgbImage::from_pixel(8, 8, Rgb([10, 20, 30]))
            .save(&good)
            .unwrap();
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not an image").unwrap();

        let b = bundle();
        let p = profile(1.0);
        let out = detect_batch(&[bad.clone(), good.clone()], &b, &p, 2).unwrap();
        assert!(out[0].outcome.as_ref().unwrap_err().is_input());
        assert_eq!(out[1].outcome.as_ref().unwrap().source_id, "good");

        let err = detect_batch(&[bad.clone(), bad], &b, &p, 1).unwrap_err();
        assert!(err.is_input());
        assert!(detect_batch(&[good], &b, &p, 0).unwrap_err().is_config());
    }
}
