use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use patchguard_core::calibration::{
    calibrate, collect_clean_indicators, load_profile, save_profile, CalibrationProfile,
    DEFAULT_CONFIDENCE,
};
use patchguard_core::dataset::{
    build_balanced_testset, materialize_testset, read_manifest, resolve_record_path, split,
    write_manifest, LabeledSample, ManifestRecord, PatchContent, PatchSpec, SplitSpec,
    DEFAULT_ANALYSIS_FRACTION, DEFAULT_AREA_FRACTION,
};
use patchguard_core::eval::{export_histogram, layer_scan_paths, recommend_layer, score_records};
use patchguard_core::util::write_atomic;
use patchguard_core::{load_bundle, Detector, Tap, Verdict, WeightBundle};

const EXIT_USAGE: u8 = 64;
const EXIT_ERROR: u8 = 1;
const EXIT_PERTURBED: u8 = 2;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Adversarial patch detection from shallow-layer attention.
#[derive(Parser, Debug)]
#[command(name = "patchguard", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the threshold from a directory of clean images
    Calibrate(CalibrateArgs),
    /// Classify images as clean or perturbed
    Detect(DetectArgs),
    /// Score a profile against a labelled test-set manifest
    Eval(EvalArgs),
    /// Compare clean and perturbed indicator histograms across layers
    LayerScan(LayerScanArgs),
    /// Split a corpus and build a balanced, patched test set
    MakeTestset(MakeTestsetArgs),
    /// Print the layers of a weight bundle
    InspectWeights(InspectArgs),
}

#[derive(Args, Debug)]
struct WeightsArg {
    /// PGWB weight bundle
    #[arg(long, env = "PATCHGUARD_WEIGHTS")]
    weights: PathBuf,
}

#[derive(Args, Debug)]
struct JobsArg {
    /// Worker threads [default: logical CPU count]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
}

impl JobsArg {
    fn get(&self) -> usize {
        self.jobs.map(|j| j as usize).unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    weights: WeightsArg,
    /// Detection layer, by name or index
    #[arg(long, default_value = "conv1_2")]
    layer: String,
    #[arg(long, default_value_t = Tap::Post)]
    tap: Tap,
    /// Target fraction of clean images at or below the threshold
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE, value_parser = parse_confidence)]
    p: f32,
    /// Directory of clean calibration images
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Timestamp recorded in the profile [default: SOURCE_DATE_EPOCH, else "unspecified"]
    #[arg(long)]
    created_at: Option<String>,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long)]
    profile: PathBuf,
    /// One JSON object per image instead of tab-separated text
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    jobs: JobsArg,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// JSON report destination
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct LayerScanArgs {
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    perturbed: PathBuf,
    /// Comma-separated layers [default: every convolution]
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    #[arg(long, default_value_t = Tap::Post)]
    tap: Tap,
    /// Histogram CSV destination
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report with the raw indicator populations
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct MakeTestsetArgs {
    /// Directory of clean source images
    #[arg(long)]
    images: PathBuf,
    /// `noise`, `solid:R,G,B` or `file:PATH`
    #[arg(long, default_value = "noise")]
    patch: String,
    /// Patch area as a fraction of the image
    #[arg(long, default_value_t = DEFAULT_AREA_FRACTION, value_parser = parse_area)]
    area: f32,
    /// Absolute patch side in pixels; overrides --area
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    side: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of images kept clean for calibration
    #[arg(long, default_value_t = DEFAULT_ANALYSIS_FRACTION, value_parser = parse_fraction)]
    analysis_fraction: f64,
    /// CSV with `source_id,class` columns for a per-class split
    #[arg(long)]
    strata: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long)]
    json: bool,
}

fn parse_confidence(s: &str) -> Result<f32, String> {
    let p: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err("must lie in (0, 1]".into())
    }
}

fn parse_area(s: &str) -> Result<f32, String> {
    let a: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err("must lie in (0, 1)".into())
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if f > 0.0 && f < 1.0 {
        Ok(f)
    } else {
        Err("must lie in (0, 1)".into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("patchguard: error: {}", one_line(&e));
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(": ")
        .replace('\n', " ")
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::LayerScan(a) => cmd_layer_scan(a),
        Command::MakeTestset(a) => cmd_make_testset(a),
        Command::InspectWeights(a) => cmd_inspect(a),
    }
}

fn load_weights(arg: &WeightsArg) -> anyhow::Result<WeightBundle> {
    load_bundle(&arg.weights).with_context(|| format!("loading {}", arg.weights.display()))
}

fn load_profile_for(path: &Path) -> anyhow::Result<CalibrationProfile> {
    load_profile(path).with_context(|| format!("loading {}", path.display()))
}

/// Image files directly inside `dir`, sorted by name.
fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        bail!("no png or jpeg images in {}", dir.display());
    }
    Ok(paths)
}

fn created_at(flag: Option<String>) -> anyhow::Result<String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v
                .trim()
                .parse()
                .with_context(|| format!("SOURCE_DATE_EPOCH `{v}` is not an integer"))?;
            let t = chrono::DateTime::from_timestamp(secs, 0)
                .with_context(|| format!("SOURCE_DATE_EPOCH {secs} is out of range"))?;
            Ok(t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
        }
        Err(_) => Ok("unspecified".into()),
    }
}

fn warn_failures<'a>(what: &str, failures: impl IntoIterator<Item = (&'a Path, String)>) {
    for (path, e) in failures {
        eprintln!(
            "patchguard: warning: skipped {what} {}: {e}",
            path.display()
        );
    }
}

fn cmd_calibrate(a: CalibrateArgs) -> anyhow::Result<u8> {
    let bundle = load_weights(&a.weights)?;
    let created_at = created_at(a.created_at)?;
    let images = list_images(&a.images)?;
    let collected = collect_clean_indicators(&images, &bundle, &a.layer, a.tap, a.jobs.get())?;
    warn_failures(
        "image",
        collected
            .failures
            .iter()
            .map(|(p, e)| (p.as_path(), e.to_string())),
    );
    let threshold = calibrate(&collected.samples, a.p)?;
    let profile = CalibrationProfile::new(
        bundle.model_name(),
        a.layer.clone(),
        a.tap,
        &threshold,
        created_at,
    )?;
    save_profile(&profile, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "patchguard: theta = {} at {} ({}), p = {}, {} of {} images at or below",
        threshold.theta,
        a.layer,
        a.tap,
        a.p,
        (threshold.achieved_fraction * threshold.n_samples as f64).round(),
        threshold.n_samples
    );
    Ok(0)
}

fn cmd_detect(a: DetectArgs) -> anyhow::Result<u8> {
    let bundle = load_weights(&a.weights)?;
    let profile = load_profile_for(&a.profile)?;
    let detector = Detector::new(&bundle, &profile)?;
    let batch = detector.detect_batch(&a.images, a.jobs.get())?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let (mut perturbed, mut failed) = (false, false);
    for item in &batch {
        match &item.outcome {
            Ok(r) => {
                perturbed |= r.verdict == Verdict::Perturbed;
                if a.json {
                    writeln!(out, "{}", serde_json::to_string(r)?)?;
                } else {
                    writeln!(
                        out,
                        "{}\t{}\t{}\t{}",
                        r.source_id, r.verdict, r.indicator, r.theta
                    )?;
                }
            }
            Err(e) => {
                failed = true;
                eprintln!("patchguard: error: {}: {e}", item.path.display());
            }
        }
    }
    out.flush()?;
    Ok(if perturbed {
        EXIT_PERTURBED
    } else if failed {
        EXIT_ERROR
    } else {
        0
    })
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<u8> {
    let bundle = load_weights(&a.weights)?;
    let profile = load_profile_for(&a.profile)?;
    let records =
        read_manifest(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let detector = Detector::new(&bundle, &profile)?;
    let items: Vec<(String, PathBuf)> = records
        .iter()
        .map(|r| (r.source_id.clone(), resolve_record_path(&a.manifest, r)))
        .collect();
    let mut results = Vec::with_capacity(items.len());
    for item in detector.detect_items(&items, a.jobs.get())? {
        let r = item
            .outcome
            .with_context(|| format!("detecting {}", item.path.display()))?;
        results.push(r);
    }
    let report = score_records(&results, &records)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_atomic(&a.report, &json).with_context(|| format!("writing {}", a.report.display()))?;
    let m = &report.metrics;
    eprintln!(
        "patchguard: n = {}, precision {:.4}, recall {:.4}, F {:.4}",
        report.n_total, m.precision, m.recall, m.fscore
    );
    Ok(0)
}

fn cmd_layer_scan(a: LayerScanArgs) -> anyhow::Result<u8> {
    let bundle = load_weights(&a.weights)?;
    let clean = list_images(&a.clean)?;
    let perturbed = list_images(&a.perturbed)?;
    let layers: Vec<String> = if a.layers.is_empty() {
        bundle.conv_layer_names().map(str::to_string).collect()
    } else {
        a.layers
    };
    let report = layer_scan_paths(&clean, &perturbed, &bundle, &layers, a.tap, a.jobs.get())?;
    export_histogram(&report, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.report {
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        write_atomic(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    for l in &report.layers {
        eprintln!("patchguard: {} overlap {:.4}", l.layer, l.overlap);
    }
    if let Some(best) = recommend_layer(&report) {
        eprintln!("patchguard: recommended layer {}", best.layer);
    }
    Ok(0)
}

fn parse_patch(s: &str) -> anyhow::Result<PatchContent> {
    if s == "noise" {
        return Ok(PatchContent::HighContrastNoise { seed: 0 });
    }
    if let Some(rgb) = s.strip_prefix("solid:") {
        let parts: Vec<u8> = rgb
            .split(',')
            .map(|v| v.trim().parse::<u8>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad colour in --patch `{s}`"))?;
        let [r, g, b] = parts[..] else {
            bail!("--patch solid needs three components, got `{s}`");
        };
        return Ok(PatchContent::SolidColor([r, g, b]));
    }
    if let Some(path) = s.strip_prefix("file:") {
        let path = PathBuf::from(path);
        if !path.is_file() {
            bail!("patch image {} does not exist", path.display());
        }
        return Ok(PatchContent::File(path));
    }
    bail!("unknown --patch `{s}`; expected noise, solid:R,G,B or file:PATH")
}

fn read_strata(path: &Path) -> anyhow::Result<HashMap<String, String>> {
    #[derive(serde::Deserialize)]
    struct Row {
        source_id: String,
        class: String,
    }
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut strata = HashMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.with_context(|| format!("parsing {}", path.display()))?;
        strata.insert(row.source_id, row.class);
    }
    Ok(strata)
}

fn cmd_make_testset(a: MakeTestsetArgs) -> anyhow::Result<u8> {
    let content = parse_patch(&a.patch)?;
    let mut spec = PatchSpec::noise(a.seed).with_area(a.area);
    spec.content = match content {
        PatchContent::HighContrastNoise { .. } => spec.content,
        other => other,
    };
    if let Some(side) = a.side {
        spec = spec.with_side(side);
    }
    let mut split_spec = SplitSpec::new(a.seed, a.analysis_fraction);
    if let Some(path) = &a.strata {
        split_spec = split_spec.stratified(read_strata(path)?);
    }

    let paths = list_images(&a.images)?;
    let sources: HashMap<String, PathBuf> = paths
        .iter()
        .map(|p| (patchguard_core::util::source_id(p), p.clone()))
        .collect();
    let ids: Vec<String> = paths
        .iter()
        .map(|p| patchguard_core::util::source_id(p))
        .collect();
    if sources.len() != ids.len() {
        bail!("two images in {} share a file stem", a.images.display());
    }
    let (analysis, test) = split(&ids, &split_spec)?;
    let labels = build_balanced_testset(&test, &spec, a.seed)?;
    let jobs = a.jobs.get();

    let clean: Vec<LabeledSample> = analysis.iter().map(LabeledSample::negative).collect();
    if !clean.is_empty() {
        materialize_testset(&clean, &sources, &a.out.join("analysis"), jobs)?;
    }
    let records: Vec<ManifestRecord> =
        materialize_testset(&labels, &sources, &a.out.join("test"), jobs)?
            .into_iter()
            .map(|r| ManifestRecord {
                file: format!("test/{}", r.file),
                ..r
            })
            .collect();
    let manifest = a.out.join("manifest.csv");
    write_manifest(&records, &manifest)?;
    let positives = labels.iter().filter(|l| l.provenance.is_some()).count();
    eprintln!(
        "patchguard: {} analysis images, {} test images ({} patched), manifest {}",
        analysis.len(),
        test.len(),
        positives,
        manifest.display()
    );
    Ok(0)
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<u8> {
    let bundle = load_weights(&a.weights)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let summary = bundle.summary();
    if a.json {
        let doc = serde_json::json!({
            "model_name": bundle.model_name(),
            "preprocess": bundle.preprocess(),
            "layers": summary,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
        return Ok(0);
    }
    let pre = bundle.preprocess();
    writeln!(out, "model\t{}", bundle.model_name())?;
    writeln!(
        out,
        "input\t{}x{} {:?} scale {} mean {:?} std {:?}",
        pre.target_height, pre.target_width, pre.channel_order, pre.scale, pre.mean, pre.std
    )?;
    for l in summary {
        let channels = match (l.in_channels, l.out_channels) {
            (Some(i), Some(o)) => format!("{i}->{o}"),
            _ => "-".into(),
        };
        writeln!(out, "{}\t{}\t{}\t{}", l.index, l.name, l.kind, channels)?;
    }
    Ok(0)
}
