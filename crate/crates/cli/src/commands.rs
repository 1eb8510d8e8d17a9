use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use saaformer::dataflow::{
    block_split, bucket_overlap, overlap_rates, random_split, read_cube, read_split, write_cube, write_split,
    generate_synthetic, HsiCube, LabelMap, OverlapBuckets, SplitSpec, SyntheticParams,
};
use saaformer::metrics::{bucketed_accuracy, ConfusionMatrix, MetricsReport};
use saaformer::model::{read_checkpoint, train as train_model, write_checkpoint, SaaFormer, SaaFormerConfig, TrainConfig};

use crate::manifest::{suffixed, RunManifest};
use crate::{ppm, Failure};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 12)]
    pub tile: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Random,
    Block,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Per-class training fraction (random mode).
    #[arg(long, default_value_t = 0.05)]
    pub train_frac: f64,
    /// Tile side (block mode).
    #[arg(long, default_value_t = 12)]
    pub block: usize,
    /// Excluded strip width around training tiles (block mode).
    #[arg(long, default_value_t = 4)]
    pub gap: usize,
    #[arg(long, default_value_t = 5)]
    pub patch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub embed: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, value_delimiter = ',', default_value = "128,64,32")]
    pub levels: Vec<usize>,
    /// `off` replaces the levels with a single one spanning the embedding.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub multi_level: Toggle,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path; the loss trace goes to `<out>.loss.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Add per-overlap-bucket accuracy to the report.
    #[arg(long)]
    pub audit_overlap: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AuditArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Window size; defaults to the split's patch size.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Classify unlabeled pixels too.
    #[arg(long)]
    pub all_pixels: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::data("io", format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Failure::data("json", e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Refuses outputs that would overwrite an input.
fn check_distinct(inputs: &[&Path], outputs: &[&Path]) -> Result<(), Failure> {
    for out in outputs {
        let Ok(out_real) = out.canonicalize() else { continue };
        for input in inputs {
            if input.canonicalize().is_ok_and(|i| i == out_real) {
                return Err(Failure::usage(format!("output {} would overwrite an input", out.display())));
            }
        }
    }
    Ok(())
}

fn with_context(path: &Path, e: saaformer::Error) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn load_labeled(path: &Path) -> Result<(HsiCube, LabelMap), Failure> {
    match read_cube(path).map_err(|e| with_context(path, e))? {
        (cube, Some(labels)) => Ok((cube, labels)),
        (_, None) => Err(Failure::data("missing_labels", format!("{} has no label map", path.display()))),
    }
}

fn load_split(path: &Path, labels: &LabelMap) -> Result<SplitSpec, Failure> {
    let split = read_split(path).map_err(|e| with_context(path, e))?;
    split.validate_against(labels).map_err(|e| with_context(path, e))?;
    Ok(split)
}

fn load_model(path: &Path, cube: &HsiCube) -> Result<SaaFormer, Failure> {
    let model = read_checkpoint(path).map_err(|e| with_context(path, e))?;
    if model.config().bands != cube.bands() {
        return Err(Failure::data(
            "band_mismatch",
            format!("checkpoint expects {} bands, cube has {}", model.config().bands, cube.bands()),
        ));
    }
    Ok(model)
}

pub fn gen(a: &GenArgs) -> Result<(), Failure> {
    let scene = generate_synthetic(&SyntheticParams {
        height: a.height,
        width: a.width,
        bands: a.bands,
        classes: a.classes,
        tile: a.tile,
        noise: a.noise,
        seed: a.seed,
    })?;
    write_cube(&a.out, &scene.cube, Some(&scene.labels)).map_err(|e| with_context(&a.out, e))?;
    RunManifest::new("gen", Some(a.seed), &[], &[&a.out], a)?.write(&a.out)
}

pub fn split(a: &SplitArgs) -> Result<(), Failure> {
    check_distinct(&[&a.data], &[&a.out])?;
    let (_, labels) = load_labeled(&a.data)?;
    let spec = match a.mode {
        ModeArg::Random => random_split(&labels, a.train_frac, a.patch, a.seed)?,
        ModeArg::Block => block_split(&labels, a.block, a.gap, a.patch, a.seed)?,
    };
    write_split(&a.out, &spec).map_err(|e| with_context(&a.out, e))?;
    RunManifest::new("split", Some(a.seed), &[&a.data], &[&a.out], a)?.write(&a.out)
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let trace_path = suffixed(&a.out, ".loss.json");
    check_distinct(&[&a.data, &a.split], &[&a.out, &trace_path])?;
    let (cube, labels) = load_labeled(&a.data)?;
    let split = load_split(&a.split, &labels)?;
    let mut config = SaaFormerConfig {
        bands: cube.bands(),
        embed: a.embed,
        heads: a.heads,
        depth: a.depth,
        levels: a.levels.clone(),
        patch: split.patch,
        dropout: a.dropout,
        classes: labels.class_count(),
    };
    if a.multi_level == Toggle::Off {
        config = config.single_level();
    }
    let mut model = SaaFormer::new(config, a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
    };
    let trace = train_model(&mut model, &cube, &labels, &split, &cfg)?;
    write_checkpoint(&a.out, &model).map_err(|e| with_context(&a.out, e))?;
    write_file(&trace_path, &to_json(&trace)?)?;
    RunManifest::new("train", Some(a.seed), &[&a.data, &a.split], &[&a.out, &trace_path], a)?.write(&a.out)
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    check_distinct(&[&a.data, &a.split, &a.ckpt], &[&a.report])?;
    let (cube, labels) = load_labeled(&a.data)?;
    let split = load_split(&a.split, &labels)?;
    let model = load_model(&a.ckpt, &cube)?;
    if model.config().patch != split.patch {
        return Err(Failure::data(
            "patch_mismatch",
            format!("checkpoint patch {} differs from split patch {}", model.config().patch, split.patch),
        ));
    }
    let predicted = model.predict(&cube, &split.test)?;
    let truth: Vec<usize> = split.test.iter().map(|&(r, c)| labels.get(r, c) as usize).collect();
    let cm = ConfusionMatrix::from_pairs(
        model.config().classes,
        truth.iter().zip(&predicted).map(|(&t, &p)| (t, p as usize)),
    )?;
    let buckets = a.audit_overlap.then(|| {
        let rates = overlap_rates(&split.test, &split.train, split.patch);
        let records: Vec<_> = truth
            .iter()
            .zip(&predicted)
            .zip(rates)
            .map(|((&t, &p), r)| (t, p as usize, r))
            .collect();
        bucketed_accuracy(&records)
    });
    let report = MetricsReport::new(&cm, buckets)?;
    write_file(&a.report, &report.to_json()?)?;
    RunManifest::new("eval", None, &[&a.data, &a.split, &a.ckpt], &[&a.report], a)?.write(&a.report)
}

#[derive(Debug, Serialize)]
struct AuditReport {
    patch: usize,
    test_samples: usize,
    buckets: OverlapBuckets,
    /// Bucket shares of the test set, in the order none, partial, high.
    fractions: [f64; 3],
    mean_overlap: f64,
}

pub fn audit(a: &AuditArgs) -> Result<(), Failure> {
    if let Some(out) = &a.out {
        check_distinct(&[&a.data, &a.split], &[out])?;
    }
    let (_, labels) = load_labeled(&a.data)?;
    let split = load_split(&a.split, &labels)?;
    let patch = a.patch.unwrap_or(split.patch);
    if patch.is_multiple_of(2) {
        return Err(Failure::usage(format!("patch must be odd, got {patch}")));
    }
    let rates = overlap_rates(&split.test, &split.train, patch);
    let buckets = bucket_overlap(&rates);
    let n = rates.len().max(1) as f64;
    let report = AuditReport {
        patch,
        test_samples: rates.len(),
        buckets,
        fractions: [buckets.none as f64 / n, buckets.partial as f64 / n, buckets.high as f64 / n],
        mean_overlap: rates.iter().sum::<f64>() / n,
    };
    let json = to_json(&report)?;
    match &a.out {
        Some(out) => {
            write_file(out, &json)?;
            RunManifest::new("audit", None, &[&a.data, &a.split], &[out], a)?.write(out)
        }
        None => {
            print!("{}", String::from_utf8_lossy(&json));
            Ok(())
        }
    }
}

pub fn map(a: &MapArgs) -> Result<(), Failure> {
    check_distinct(&[&a.data, &a.ckpt], &[&a.out])?;
    let (cube, labels) = read_cube(&a.data).map_err(|e| with_context(&a.data, e))?;
    let model = load_model(&a.ckpt, &cube)?;
    let mask = if a.all_pixels { None } else { labels.as_ref() };
    let predicted = model.predict_map(&cube, mask)?;
    write_file(&a.out, &ppm::encode(&predicted))?;
    RunManifest::new("map", None, &[&a.data, &a.ckpt], &[&a.out], a)?.write(&a.out)
}

fn args_of<T: serde::de::DeserializeOwned>(m: &RunManifest) -> Result<T, Failure> {
    serde_json::from_value(m.args.clone())
        .map_err(|e| Failure::data("manifest", format!("arguments for {}: {e}", m.command)))
}

pub fn replay(a: &ReplayArgs) -> Result<(), Failure> {
    let m = RunManifest::read(&a.manifest)?;
    match m.command.as_str() {
        "gen" => gen(&args_of(&m)?),
        "split" => split(&args_of(&m)?),
        "train" => train(&args_of(&m)?),
        "eval" => eval(&args_of(&m)?),
        "audit" => audit(&args_of(&m)?),
        "map" => map(&args_of(&m)?),
        other => Err(Failure::data("manifest", format!("unknown command {other:?}"))),
    }
}
