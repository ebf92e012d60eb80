//! Scoring of detection runs and per-layer separation analysis of the
//! indicator distributions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{indicators_at, Tap, TapPoint};
use crate::bundle::WeightBundle;
use crate::dataset::{Label, LabeledSample, ManifestRecord};
use crate::detector::{DetectionResult, Verdict};
use crate::error::{Error, Result};
use crate::preprocess::{load_rgb, preprocess_rgb};
use crate::util::{with_pool, write_atomic};

pub const MIN_BINS: usize = 16;
pub const MAX_BINS: usize = 256;

/// Confusion counts with Positive = Perturbed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Precision, recall and F-score. A metric whose denominator is zero is
/// reported as 0 with its `*_degenerate` flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f32,
    pub recall: f32,
    pub fscore: f32,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub fscore_degenerate: bool,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, label: Label, verdict: Verdict) {
        match (label, verdict) {
            (Label::Positive, Verdict::Perturbed) => self.tp += 1,
            (Label::Positive, Verdict::Clean) => self.fn_ += 1,
            (Label::Negative, Verdict::Perturbed) => self.fp += 1,
            (Label::Negative, Verdict::Clean) => self.tn += 1,
        }
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                ((num as f64 / den as f64) as f32, false)
            }
        };
        let (precision, precision_degenerate) = ratio(self.tp, self.tp + self.fp);
        let (recall, recall_degenerate) = ratio(self.tp, self.tp + self.fn_);
        let (p, r) = (precision as f64, recall as f64);
        let (fscore, fscore_degenerate) = if p + r == 0.0 {
            (0.0, true)
        } else {
            ((2.0 * p * r / (p + r)) as f32, false)
        };
        Metrics {
            precision,
            recall,
            fscore,
            precision_degenerate,
            recall_degenerate,
            fscore_degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceReport {
    /// Attacked images from this source.
    pub n_positive: usize,
    #[serde(flatten)]
    pub confusion: Confusion,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_total: usize,
    #[serde(flatten)]
    pub confusion: Confusion,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Keyed by patch provenance. Each entry scores that source's attacked
    /// images together with every clean image.
    pub per_source: BTreeMap<String, SourceReport>,
}

/// `(source_id, label, provenance key)` ground truth for one image.
type Truth<'a> = (&'a str, Label, Option<String>);

pub fn score(results: &[DetectionResult], labels: &[LabeledSample]) -> Result<EvalReport> {
    let truth: Vec<Truth> = labels
        .iter()
        .map(|l| {
            (
                l.source_id.as_str(),
                l.label,
                l.provenance.as_ref().map(|p| p.content.kind_label()),
            )
        })
        .collect();
    score_truth(results, &truth)
}

/// [`score`] against manifest records.
pub fn score_records(
    results: &[DetectionResult],
    records: &[ManifestRecord],
) -> Result<EvalReport> {
    let truth: Vec<Truth> = records
        .iter()
        .map(|r| (r.source_id.as_str(), r.label, r.patch_kind.clone()))
        .collect();
    score_truth(results, &truth)
}

fn score_truth(results: &[DetectionResult], truth: &[Truth]) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &Truth> = HashMap::new();
    let mut problems = Vec::new();
    for t in truth {
        if by_id.insert(t.0, t).is_some() {
            problems.push(format!("duplicate label for `{}`", t.0));
        }
    }
    let mut seen = HashSet::new();
    for r in results {
        if !seen.insert(r.source_id.as_str()) {
            problems.push(format!("duplicate result for `{}`", r.source_id));
        } else if !by_id.contains_key(r.source_id.as_str()) {
            problems.push(format!("result `{}` has no label", r.source_id));
        }
    }
    for t in truth {
        if !seen.contains(t.0) {
            problems.push(format!("label `{}` has no result", t.0));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!(
            "results and labels do not align: {}",
            problems.join("; ")
        )));
    }

    let mut overall = Confusion::default();
    let mut negatives = Confusion::default();
    let mut sources: BTreeMap<String, Confusion> = BTreeMap::new();
    for r in results {
        let (_, label, kind) = by_id[r.source_id.as_str()];
        overall.record(*label, r.verdict);
        match label {
            Label::Negative => negatives.record(*label, r.verdict),
            Label::Positive => sources
                .entry(kind.clone().unwrap_or_else(|| "unknown".into()))
                .or_default()
                .record(*label, r.verdict),
        }
    }
    let per_source = sources
        .into_iter()
        .map(|(kind, pos)| {
            let confusion = Confusion {
                fp: negatives.fp,
                tn: negatives.tn,
                ..pos
            };
            let report = SourceReport {
                n_positive: pos.tp + pos.fn_,
                confusion,
                metrics: confusion.metrics(),
            };
            (kind, report)
        })
        .collect();
    Ok(EvalReport {
        n_total: overall.total(),
        confusion: overall,
        metrics: overall.metrics(),
        per_source,
    })
}

/// Shared binning of the clean and perturbed indicators of one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub clean_counts: Vec<usize>,
    pub perturbed_counts: Vec<usize>,
}

impl Histogram {
    /// Bins `clean ∪ perturbed` over their joint range. The bin count is
    /// the Freedman–Diaconis rule on the pooled sample, clamped to
    /// `[MIN_BINS, MAX_BINS]`.
    pub fn build(clean: &[f32], perturbed: &[f32]) -> Self {
        let mut pooled: Vec<f64> = clean.iter().chain(perturbed).map(|&v| v as f64).collect();
        pooled.sort_by(f64::total_cmp);
        let (mut lo, mut hi) = (pooled[0], pooled[pooled.len() - 1]);
        if hi <= lo {
            lo -= 0.5;
            hi += 0.5;
        }
        let iqr = quantile(&pooled, 0.75) - quantile(&pooled, 0.25);
        let width = 2.0 * iqr / (pooled.len() as f64).cbrt();
        let bins = if width > 0.0 {
            (((hi - lo) / width).ceil() as usize).clamp(MIN_BINS, MAX_BINS)
        } else {
            MIN_BINS
        };
        let mut h = Self {
            lo,
            hi,
            clean_counts: vec![0; bins],
            perturbed_counts: vec![0; bins],
        };
        for &v in clean {
            let b = h.bin_of(v as f64);
            h.clean_counts[b] += 1;
        }
        for &v in perturbed {
            let b = h.bin_of(v as f64);
            h.perturbed_counts[b] += 1;
        }
        h
    }

    pub fn bins(&self) -> usize {
        self.clean_counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    /// `[lo, hi)` of bin `i`; the last bin also includes `hi`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = self.bin_width();
        let hi = if i + 1 == self.bins() {
            self.hi
        } else {
            self.lo + (i + 1) as f64 * w
        };
        (self.lo + i as f64 * w, hi)
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let i = ((v - self.lo) / self.bin_width()).floor();
        (i.max(0.0) as usize).min(self.bins() - 1)
    }

    /// `Σ_bins min(clean_i / n_clean, perturbed_i / n_perturbed)`.
    pub fn overlap(&self) -> f64 {
        let nc: usize = self.clean_counts.iter().sum();
        let np: usize = self.perturbed_counts.iter().sum();
        self.clean_counts
            .iter()
            .zip(&self.perturbed_counts)
            .map(|(&c, &p)| (c as f64 / nc as f64).min(p as f64 / np as f64))
            .sum::<f64>()
            .min(1.0)
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScan {
    pub layer: String,
    /// Position of the convolution in the bundle; smaller is shallower.
    pub depth: usize,
    pub clean: Vec<f32>,
    pub perturbed: Vec<f32>,
    pub histogram: Histogram,
    pub overlap: f64,
}

impl LayerScan {
    pub fn from_values(
        layer: impl Into<String>,
        depth: usize,
        clean: Vec<f32>,
        perturbed: Vec<f32>,
    ) -> Result<Self> {
        if clean.is_empty() || perturbed.is_empty() {
            return Err(Error::Config(
                "layer scan needs both clean and perturbed samples".into(),
            ));
        }
        if clean.iter().chain(&perturbed).any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "non-finite indicator in layer scan".into(),
            ));
        }
        let histogram = Histogram::build(&clean, &perturbed);
        let overlap = histogram.overlap();
        Ok(Self {
            layer: layer.into(),
            depth,
            clean,
            perturbed,
            histogram,
            overlap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScanReport {
    pub tap: Tap,
    pub layers: Vec<LayerScan>,
}

/// Indicators of every image at every requested layer. Returns
/// `values[layer][image]`.
fn indicator_table<T: Sync>(
    items: &[T],
    load: impl Fn(&T) -> Result<RgbImage> + Sync,
    bundle: &WeightBundle,
    points: &[TapPoint],
    jobs: usize,
) -> Result<Vec<Vec<f32>>> {
    let rows: Vec<Vec<f32>> = with_pool(jobs, || {
        items
            .par_iter()
            .map(|item| {
                let tensor = preprocess_rgb(&load(item)?, bundle.preprocess())?;
                Ok(indicators_at(&tensor, bundle, points)?
                    .into_iter()
                    .map(|i| i.0)
                    .collect())
            })
            .collect::<Result<_>>()
    })??;
    Ok((0..points.len())
        .map(|l| rows.iter().map(|r| r[l]).collect())
        .collect())
}

fn scan<T: Sync>(
    clean: &[T],
    perturbed: &[T],
    load: impl Fn(&T) -> Result<RgbImage> + Sync,
    bundle: &WeightBundle,
    layers: &[String],
    tap: Tap,
    jobs: usize,
) -> Result<LayerScanReport> {
    if clean.is_empty() || perturbed.is_empty() {
        return Err(Error::Config(
            "layer scan needs non-empty clean and perturbed sets".into(),
        ));
    }
    if layers.is_empty() {
        return Err(Error::Config("no layers to scan".into()));
    }
    let points: Vec<TapPoint> = layers
        .iter()
        .map(|l| TapPoint::resolve(bundle, l, tap))
        .collect::<Result<_>>()?;
    let clean_values = indicator_table(clean, &load, bundle, &points, jobs)?;
    let pert_values = indicator_table(perturbed, &load, bundle, &points, jobs)?;
    let layers = points
        .iter()
        .zip(clean_values.into_iter().zip(pert_values))
        .map(|(p, (c, v))| LayerScan::from_values(p.layer.clone(), p.conv_index, c, v))
        .collect::<Result<_>>()?;
    Ok(LayerScanReport { tap, layers })
}

/// Indicator populations and their separation at each of `layers`.
pub fn layer_scan(
    clean: &[RgbImage],
    perturbed: &[RgbImage],
    bundle: &WeightBundle,
    layers: &[String],
    tap: Tap,
    jobs: usize,
) -> Result<LayerScanReport> {
    scan(
        clean,
        perturbed,
        |img| Ok(img.clone()),
        bundle,
        layers,
        tap,
        jobs,
    )
}

/// [`layer_scan`] over image files, decoding lazily.
pub fn layer_scan_paths(
    clean: &[PathBuf],
    perturbed: &[PathBuf],
    bundle: &WeightBundle,
    layers: &[String],
    tap: Tap,
    jobs: usize,
) -> Result<LayerScanReport> {
    scan(clean, perturbed, |p| load_rgb(p), bundle, layers, tap, jobs)
}

/// The layer with the smallest overlap; ties go to the shallowest.
pub fn recommend_layer(report: &LayerScanReport) -> Option<&LayerScan> {
    report
        .layers
        .iter()
        .min_by(|a, b| a.overlap.total_cmp(&b.overlap).then(a.depth.cmp(&b.depth)))
}

/// CSV with one row per `(layer, bin)`, empty bins included.
pub fn histogram_csv(report: &LayerScanReport) -> String {
    let mut out = String::from("layer,bin_lo,bin_hi,clean_count,perturbed_count\n");
    for scan in &report.layers {
        let h = &scan.histogram;
        for i in 0..h.bins() {
            let (lo, hi) = h.edges(i);
            writeln!(
                out,
                "{},{lo},{hi},{},{}",
                scan.layer, h.clean_counts[i], h.perturbed_counts[i]
            )
            .unwrap();
        }
    }
    out
}

pub fn export_histogram(report: &LayerScanReport, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), histogram_csv(report).as_bytes())
}
