//! Threshold calibration from clean images only, and the persisted profile
//! holding the single deployable threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{indicators_at, Tap, TapPoint};
use crate::bundle::WeightBundle;
use crate::error::{Error, Result};
use crate::preprocess::{load_rgb, preprocess_rgb};
use crate::util::{source_id, with_pool, write_atomic};

/// Confidence level used when none is given.
pub const DEFAULT_CONFIDENCE: f32 = 0.95;

/// Indicator value of one clean image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndicatorSample {
    pub value: f32,
    pub source_id: String,
}

/// Outcome of [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub theta: f32,
    pub confidence_p: f32,
    pub n_samples: usize,
    /// Fraction of the calibration values `<= theta`. At least
    /// `confidence_p`; ties at theta can push it higher.
    pub achieved_fraction: f64,
}

/// Picks the smallest order statistic `theta` such that at least a fraction
/// `p` of `values` satisfy `v <= theta`: the `ceil(p·N)`-th smallest value.
///
/// `p` is taken at its exact `f32` value, so e.g. `0.3f32` (slightly above
/// 0.3) on 10 samples needs 4 of them.
pub fn calibrate_values(values: &[f32], p: f32) -> Result<Threshold> {
    if values.is_empty() {
        return Err(Error::Config(
            "cannot calibrate on an empty sample set".into(),
        ));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!(
            "confidence p must lie in (0, 1], got {p}"
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite indicator value {bad} in calibration set"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);

    let n = sorted.len();
    // Exact for n < 2^29: a 24-bit mantissa times n fits in an f64.
    let k = ((p as f64) * (n as f64)).ceil() as usize;
    let k = k.clamp(1, n);
    let theta = sorted[k - 1];
    let covered = sorted.partition_point(|&v| v <= theta);
    Ok(Threshold {
        theta,
        confidence_p: p,
        n_samples: n,
        achieved_fraction: covered as f64 / n as f64,
    })
}

pub fn calibrate(samples: &[IndicatorSample], p: f32) -> Result<Threshold> {
    let values: Vec<f32> = samples.iter().map(|s| s.value).collect();
    calibrate_values(&values, p)
}

/// Samples from a batch of clean images along with the images that could
/// not be processed.
#[derive(Debug, Default)]
pub struct Collection {
    pub samples: Vec<IndicatorSample>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// Computes the indicator of every image, in input order, using `jobs`
/// worker threads. Per-image failures are collected; the call fails only
/// if the list is empty or no image succeeds.
pub fn collect_clean_indicators(
    image_paths: &[PathBuf],
    bundle: &WeightBundle,
    layer: &str,
    tap: Tap,
    jobs: usize,
) -> Result<Collection> {
    if image_paths.is_empty() {
        return Err(Error::Config("no calibration images given".into()));
    }
    let point = TapPoint::resolve(bundle, layer, tap)?;
    let results: Vec<Result<IndicatorSample>> = with_pool(jobs, || {
        image_paths
            .par_iter()
            .map(|path| {
                let rgb = load_rgb(path)?;
                let tensor = preprocess_rgb(&rgb, bundle.preprocess())?;
                let value = indicators_at(&tensor, bundle, std::slice::from_ref(&point))?[0].0;
                if value.is_nan() {
                    return Err(Error::Numeric(format!(
                        "NaN indicator for {}",
                        path.display()
                    )));
                }
                Ok(IndicatorSample {
                    value,
                    source_id: source_id(path),
                })
            })
            .collect()
    })?;

    let mut out = Collection::default();
    for (path, result) in image_paths.iter().zip(results) {
        match result {
            Ok(s) => out.samples.push(s),
            Err(e) => out.failures.push((path.clone(), e)),
        }
    }
    if out.samples.is_empty() {
        let causes: Vec<String> = out
            .failures
            .iter()
            .take(3)
            .map(|(p, e)| format!("{}: {e}", p.display()))
            .collect();
        return Err(Error::Input(format!(
            "none of the {} calibration images could be used ({})",
            image_paths.len(),
            causes.join("; ")
        )));
    }
    Ok(out)
}

/// Deployable calibration state: one scalar threshold for one model layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationProfile {
    pub model_name: String,
    pub layer: String,
    pub tap: Tap,
    pub confidence_p: f32,
    pub theta: f32,
    pub n_samples: usize,
    pub created_at: String,
}

const PROFILE_HEADER: &str = "# patchguard calibration profile";
const KEYS: [&str; 9] = [
    "model_name",
    "layer",
    "tap",
    "confidence_p",
    "confidence_p_hex",
    "theta",
    "theta_hex",
    "n_samples",
    "created_at",
];

impl CalibrationProfile {
    pub fn new(
        model_name: impl Into<String>,
        layer: impl Into<String>,
        tap: Tap,
        threshold: &Threshold,
        created_at: impl Into<String>,
    ) -> Result<Self> {
        let profile = Self {
            model_name: model_name.into(),
            layer: layer.into(),
            tap,
            confidence_p: threshold.confidence_p,
            theta: threshold.theta,
            n_samples: threshold.n_samples,
            created_at: created_at.into(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_p > 0.0 && self.confidence_p <= 1.0) {
            return Err(Error::Validation(format!(
                "confidence_p must lie in (0, 1], got {}",
                self.confidence_p
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::Validation(format!(
                "theta must be finite, got {}",
                self.theta
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Validation("n_samples must be at least 1".into()));
        }
        for (key, value) in [
            ("model_name", &self.model_name),
            ("layer", &self.layer),
            ("created_at", &self.created_at),
        ] {
            if value.contains('\n') {
                return Err(Error::Validation(format!("{key} contains a newline")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{PROFILE_HEADER}").unwrap();
        writeln!(s, "model_name = {}", self.model_name).unwrap();
        writeln!(s, "layer = {}", self.layer).unwrap();
        writeln!(s, "tap = {}", self.tap).unwrap();
        writeln!(s, "confidence_p = {}", self.confidence_p).unwrap();
        writeln!(
            s,
            "confidence_p_hex = {:#010x}",
            self.confidence_p.to_bits()
        )
        .unwrap();
        writeln!(s, "theta = {}", self.theta).unwrap();
        writeln!(s, "theta_hex = {:#010x}", self.theta.to_bits()).unwrap();
        writeln!(s, "n_samples = {}", self.n_samples).unwrap();
        writeln!(s, "created_at = {}", self.created_at).unwrap();
        s
    }

    /// Parses the `key = value` profile format. Blank lines and `#`
    /// comments are ignored. When a `*_hex` bit pattern is present it is
    /// authoritative and must agree with the decimal mirror.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(None, format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::format(
                    None,
                    format!("line {}: unknown key `{key}`", lineno + 1),
                ));
            }
            if map.insert(key, value).is_some() {
                return Err(Error::format(
                    None,
                    format!("line {}: duplicate key `{key}`", lineno + 1),
                ));
            }
        }

        let get = |key: &str| -> Result<&str> {
            map.get(key)
                .copied()
                .ok_or_else(|| Error::Validation(format!("missing key `{key}`")))
        };
        let float = |key: &str| -> Result<f32> {
            let decimal: f32 = get(key)?
                .parse()
                .map_err(|_| Error::format(None, format!("`{key}` is not a number")))?;
            let hex_key = format!("{key}_hex");
            let Some(hex) = map.get(hex_key.as_str()) else {
                return Ok(decimal);
            };
            let bits = hex
                .strip_prefix("0x")
                .or_else(|| hex.strip_prefix("0X"))
                .and_then(|h| u32::from_str_radix(h, 16).ok())
                .ok_or_else(|| {
                    Error::format(None, format!("`{hex_key}` is not a 0x-prefixed u32"))
                })?;
            let exact = f32::from_bits(bits);
            if exact.to_bits() != decimal.to_bits() {
                return Err(Error::Validation(format!(
                    "`{key}` = {decimal} disagrees with `{hex_key}` = {hex} ({exact})"
                )));
            }
            Ok(exact)
        };

        let profile = Self {
            model_name: get("model_name")?.to_string(),
            layer: get("layer")?.to_string(),
            tap: get("tap")?
                .parse()
                .map_err(|e: Error| Error::format(None, e.to_string()))?,
            confidence_p: float("confidence_p")?,
            theta: float("theta")?,
            n_samples: get("n_samples")?
                .parse()
                .map_err(|_| Error::format(None, "`n_samples` is not an integer"))?,
            created_at: get("created_at")?.to_string(),
        };
        profile.validate()?;
        Ok(profile)
    }
}

pub fn save_profile(profile: &CalibrationProfile, path: impl AsRef<Path>) -> Result<()> {
    profile.validate()?;
    write_atomic(path.as_ref(), profile.to_text().as_bytes())
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::format(e.utf8_error().valid_up_to(), "profile is not UTF-8"))?;
    CalibrationProfile::from_text(&text)
}
