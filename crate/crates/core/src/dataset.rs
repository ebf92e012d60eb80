//! Evaluation corpora: seeded analysis/test splits, square patch
//! application, balanced attacked/clean test sets and their manifest files.
//!
//! Randomness is always derived from `(seed, source_id)`, so results do not
//! depend on processing order or worker count.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::load_rgb;
use crate::util::{derive_seed, with_pool, write_atomic};

/// Patch area as a fraction of the image.
pub const DEFAULT_AREA_FRACTION: f32 = 0.06;
pub const DEFAULT_ANALYSIS_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    pub analysis_fraction: f64,
    pub test_fraction: f64,
    /// Optional class label per image id; when present each class is split
    /// separately.
    pub strata: Option<HashMap<String, String>>,
}

impl SplitSpec {
    pub fn new(seed: u64, analysis_fraction: f64) -> Self {
        Self {
            seed,
            analysis_fraction,
            test_fraction: 1.0 - analysis_fraction,
            strata: None,
        }
    }

    pub fn stratified(mut self, strata: HashMap<String, String>) -> Self {
        self.strata = Some(strata);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.analysis_fraction > 0.0 && self.test_fraction > 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive, got {}/{}",
                self.analysis_fraction, self.test_fraction
            )));
        }
        if (self.analysis_fraction + self.test_fraction - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {} + {}",
                self.analysis_fraction, self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Partitions `ids` into `(analysis, test)`. Each list keeps the input
/// order. Per class (or overall, without strata) the analysis side gets
/// `round(analysis_fraction · n)` items.
pub fn split(ids: &[String], spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty id list".into()));
    }
    spec.validate()?;
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Config(format!("duplicate image id `{dup}`")));
    }

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let class = match &spec.strata {
            None => "",
            Some(map) => map
                .get(id)
                .ok_or_else(|| Error::Config(format!("no stratum given for image `{id}`")))?
                .as_str(),
        };
        groups.entry(class).or_default().push(i);
    }

    let mut in_analysis = vec![false; ids.len()];
    for (class, mut members) in groups {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, class));
        members.shuffle(&mut rng);
        let take = (spec.analysis_fraction * members.len() as f64).round() as usize;
        for &i in &members[..take.min(members.len())] {
            in_analysis[i] = true;
        }
    }
    let (analysis, test): (Vec<_>, Vec<_>) = ids.iter().zip(&in_analysis).partition(|(_, &a)| a);
    Ok((
        analysis.into_iter().map(|(id, _)| id.clone()).collect(),
        test.into_iter().map(|(id, _)| id.clone()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PatchContent {
    /// An externally produced patch image, resized to the patch side.
    File(PathBuf),
    /// Independent black/white values per pixel and channel.
    HighContrastNoise {
        seed: u64,
    },
    SolidColor([u8; 3]),
}

impl PatchContent {
    /// Provenance key used to group evaluation results.
    pub fn kind_label(&self) -> String {
        match self {
            PatchContent::File(p) => format!("file:{}", crate::util::source_id(p)),
            PatchContent::HighContrastNoise { .. } => "noise".into(),
            PatchContent::SolidColor([r, g, b]) => format!("solid:{r},{g},{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    UniformRandom {
        seed: u64,
    },
    /// Top-left corner.
    Fixed {
        x: u32,
        y: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub area_fraction: f32,
    /// Absolute side length, overriding `area_fraction` when set.
    pub side: Option<u32>,
    pub content: PatchContent,
    pub placement: Placement,
}

impl PatchSpec {
    pub fn noise(seed: u64) -> Self {
        Self {
            area_fraction: DEFAULT_AREA_FRACTION,
            side: None,
            content: PatchContent::HighContrastNoise { seed },
            placement: Placement::UniformRandom { seed },
        }
    }

    pub fn with_area(mut self, area_fraction: f32) -> Self {
        self.area_fraction = area_fraction;
        self
    }

    pub fn with_side(mut self, side: u32) -> Self {
        self.side = Some(side);
        self
    }

    /// Side length for a `width × height` image:
    /// `round(sqrt(area_fraction · width · height))` unless overridden.
    pub fn side_for(&self, width: u32, height: u32) -> Result<u32> {
        if let Some(side) = self.side {
            if side == 0 {
                return Err(Error::Config("patch side must be at least 1".into()));
            }
            return Ok(side);
        }
        if !(self.area_fraction > 0.0 && self.area_fraction < 1.0) {
            return Err(Error::Config(format!(
                "patch area fraction must lie in (0, 1), got {}",
                self.area_fraction
            )));
        }
        let side = (self.area_fraction as f64 * width as f64 * height as f64)
            .sqrt()
            .round() as u32;
        if side == 0 {
            return Err(Error::Config(format!(
                "patch area {} of a {width}x{height} image rounds to zero pixels",
                self.area_fraction
            )));
        }
        Ok(side)
    }

    /// Copy with all seeds re-derived from `(seed, source_id)`.
    pub fn for_source(&self, source_id: &str) -> Self {
        let mut spec = self.clone();
        if let PatchContent::HighContrastNoise { seed } = &mut spec.content {
            *seed = derive_seed(*seed, &format!("content/{source_id}"));
        }
        if let Placement::UniformRandom { seed } = &mut spec.placement {
            *seed = derive_seed(*seed, &format!("placement/{source_id}"));
        }
        spec
    }
}

/// Where a patch landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlacement {
    pub x: u32,
    pub y: u32,
    pub side: u32,
}

/// Overwrites a `side × side` square of `image`; every other pixel is left
/// untouched.
pub fn apply_patch(image: &RgbImage, spec: &PatchSpec) -> Result<(RgbImage, PatchPlacement)> {
    let (w, h) = image.dimensions();
    let side = spec.side_for(w, h)?;
    if side > w || side > h {
        return Err(Error::Config(format!(
            "patch side {side} does not fit a {w}x{h} image"
        )));
    }
    let (x, y) = match spec.placement {
        Placement::Fixed { x, y } => {
            if x.checked_add(side).is_none_or(|e| e > w)
                || y.checked_add(side).is_none_or(|e| e > h)
            {
                return Err(Error::Config(format!(
                    "patch of side {side} at ({x}, {y}) exceeds the {w}x{h} image"
                )));
            }
            (x, y)
        }
        Placement::UniformRandom { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (rng.gen_range(0..=w - side), rng.gen_range(0..=h - side))
        }
    };

    let patch: RgbImage = match &spec.content {
        PatchContent::SolidColor(rgb) => RgbImage::from_pixel(side, side, Rgb(*rgb)),
        PatchContent::HighContrastNoise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            RgbImage::from_fn(side, side, |_, _| {
                Rgb(std::array::from_fn(
                    |_| if rng.gen::<bool>() { 255 } else { 0 },
                ))
            })
        }
        PatchContent::File(path) => {
            let src = load_rgb(path)?;
            imageops::resize(&src, side, side, imageops::FilterType::Triangle)
        }
    };

    let mut out = image.clone();
    imageops::replace(&mut out, &patch, x as i64, y as i64);
    Ok((out, PatchPlacement { x, y, side }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// Attacked.
    Positive,
    /// Clean.
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub source_id: String,
    pub label: Label,
    /// Per-image patch spec; present exactly for positives.
    pub provenance: Option<PatchSpec>,
}

impl LabeledSample {
    pub fn negative(source_id: impl Into<String>) -> Self {
        Self {
            source_id: source_id.into(),
            label: Label::Negative,
            provenance: None,
        }
    }

    pub fn positive(source_id: impl Into<String>, spec: PatchSpec) -> Self {
        Self {
            source_id: source_id.into(),
            label: Label::Positive,
            provenance: Some(spec),
        }
    }
}

/// Marks `floor(N/2)` of `test_ids`, chosen by `seed`, as attacked. Output
/// keeps the input order; positives carry a per-image copy of `spec`.
pub fn build_balanced_testset(
    test_ids: &[String],
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if test_ids.len() < 2 {
        return Err(Error::Config(format!(
            "a balanced test set needs at least 2 images, got {}",
            test_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..test_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut positive = vec![false; test_ids.len()];
    for &i in &order[..test_ids.len() / 2] {
        positive[i] = true;
    }
    Ok(test_ids
        .iter()
        .zip(positive)
        .map(|(id, pos)| {
            if pos {
                LabeledSample::positive(id.clone(), spec.for_source(id))
            } else {
                LabeledSample::negative(id.clone())
            }
        })
        .collect())
}

/// One line of a test-set manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub label: Label,
    /// Image path, relative to the manifest's directory unless absolute.
    pub file: String,
    pub patch_kind: Option<String>,
    pub x: Option<u32>,
    pub y: Option<u32>,
    pub side: Option<u32>,
}

impl ManifestRecord {
    pub fn placement(&self) -> Option<PatchPlacement> {
        Some(PatchPlacement {
            x: self.x?,
            y: self.y?,
            side: self.side?,
        })
    }
}

/// Writes each sample's image into `out_dir` as `<source_id>.png`, patching
/// the positives, and returns the manifest records in input order.
pub fn materialize_testset(
    samples: &[LabeledSample],
    sources: &HashMap<String, PathBuf>,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    with_pool(jobs, || {
        samples
            .par_iter()
            .map(|sample| {
                let src = sources.get(&sample.source_id).ok_or_else(|| {
                    Error::Config(format!("no source image for `{}`", sample.source_id))
                })?;
                let image = load_rgb(src)?;
                let file = format!("{}.png", sample.source_id);
                let (image, patch) = match &sample.provenance {
                    Some(spec) => {
                        let (img, placement) = apply_patch(&image, spec)?;
                        (img, Some((spec.content.kind_label(), placement)))
                    }
                    None => (image, None),
                };
                save_png(&image, &out_dir.join(&file))?;
                Ok(ManifestRecord {
                    source_id: sample.source_id.clone(),
                    label: sample.label,
                    file,
                    patch_kind: patch.as_ref().map(|(k, _)| k.clone()),
                    x: patch.as_ref().map(|(_, p)| p.x),
                    y: patch.as_ref().map(|(_, p)| p.y),
                    side: patch.as_ref().map(|(_, p)| p.side),
                })
            })
            .collect()
    })?
}

/// PNG-encodes and writes atomically.
pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    image
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Input(format!("cannot encode {}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in records {
        writer
            .serialize(r)
            .map_err(|e| Error::format(None, format!("manifest encoding: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::format(None, format!("manifest encoding: {e}")))?;
    write_atomic(path, &bytes)
}

/// Reads a manifest and checks that labels and patch fields agree and that
/// ids are unique.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(None, format!("{other:?}")),
    })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<ManifestRecord>().enumerate() {
        let line = i + 2;
        let r = row.map_err(|e| {
            Error::format(
                e.position().map(|p| p.byte() as usize),
                format!("manifest line {line}: {e}"),
            )
        })?;
        let has_patch = r.placement().is_some() && r.patch_kind.is_some();
        if (r.label == Label::Positive) != has_patch {
            return Err(Error::Validation(format!(
                "manifest line {line}: `{}` is {} but {} patch information",
                r.source_id,
                r.label,
                if has_patch { "has" } else { "lacks" }
            )));
        }
        if !seen.insert(r.source_id.clone()) {
            return Err(Error::Validation(format!(
                "manifest line {line}: duplicate source id `{}`",
                r.source_id
            )));
        }
        records.push(r);
    }
    Ok(records)
}

/// Absolute path of a manifest record's image.
pub fn resolve_record_path(manifest: &Path, record: &ManifestRecord) -> PathBuf {
    let file = Path::new(&record.file);
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(file)
    }
}
