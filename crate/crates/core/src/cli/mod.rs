//! The `fsb` command line: argument parsing, model bundles and one function
//! per subcommand. `main` only maps the outcome to an exit code.

mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

pub use config::{BenchSettings, RunConfig};

use crate::bodymodel::{load_template, make_toy_models, save_template, BodyTemplate, PoseState};
use crate::decoder::{Decoder, ModelWeights};
use crate::error::{Error, Result};
use crate::pipeline::{bench, waterfall_rows, BenchRow, Engine, Frame, PipelineConfig};
use crate::priors::Scene;
use crate::projection::{
    bench_conversion, fit_bridged, motion_dataset, precompute_bary, train_denoiser,
    train_projector, BaryMap, ConversionSet, DenoiserEpoch, ProjectorWeights,
};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "FSB_THREADS";

/// Fit error bound used by the fit gate and the synth re-check.
pub const FIT_TOLERANCE: f32 = 1e-2;

#[derive(Debug, Parser)]
#[command(
    name = "fsb",
    version,
    about = "Toy body-mesh-recovery pipeline and topology projection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate models, scenes and fitted conversion pairs.
    Synth(SynthArgs),
    /// Compute the barycentric map from one template to another.
    PrecomputeBary(BaryArgs),
    /// Fit target-model parameters to every mesh of a pair set.
    Fit(FitArgs),
    /// Train the feedforward projector on fitted pairs.
    TrainProjector(TrainProjectorArgs),
    /// Train the body-pose denoiser on synthetic motion.
    TrainDenoiser(TrainDenoiserArgs),
    /// Run one pathway on a scene and write its latency report.
    Run(RunArgs),
    /// Cumulative latency waterfall over a toggle matrix.
    Bench(BenchArgs),
    /// Compare iterative fitting against the projector.
    BenchConvert(BenchConvertArgs),
    /// Tabulate latency reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaryArgs {
    /// Source template sidecar.
    #[arg(long)]
    pub source: PathBuf,
    /// Target template sidecar.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model bundle location shared by several subcommands.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory written by `synth`; models are rebuilt from the config
    /// seed when omitted.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Barycentric map replacing the bundle's construction-time map.
    #[arg(long)]
    pub bary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Fit only the first `count` meshes.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exit 4 unless 95% of fits reach the error tolerance.
    #[arg(long)]
    pub gate: bool,
}

#[derive(Debug, Args)]
pub struct TrainProjectorArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Trailing pairs held out for model selection.
    #[arg(long, default_value_t = 200)]
    pub heldout: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Training curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDenoiserArgs {
    #[arg(long, default_value_t = 64)]
    pub sequences: usize,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub heldout_sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Serial,
    Fast,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Measured frames; the config's bench setting when omitted.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Seeds the detector stub's keypoint noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Merged parameters and camera of the last frame as JSON.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Per-layer decoder tokens of one extra frame as JSON.
    #[arg(long)]
    pub dump_intermediates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON list of `{toggle, config}` rows; the standard waterfall when
    /// omitted.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub csv: PathBuf,
    /// Full waterfall with per-row reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Exit 4 on a 2x speedup miss or a row slower than its predecessor
    /// beyond the 5% band.
    #[arg(long)]
    pub gate: bool,
}

#[derive(Debug, Args)]
pub struct BenchConvertArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub projector: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Convert the last `count` meshes of the set.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exit 4 unless the projector is 100x faster at no worse than twice
    /// the fit error.
    #[arg(long)]
    pub gate: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Latency report JSON files; the first is the baseline.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// How a successful invocation ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Ran to completion but missed a gated threshold.
    BelowThreshold(String),
}

pub fn exit_code(outcome: &Result<Status>) -> i32 {
    match outcome {
        Ok(Status::Ok) => 0,
        Ok(Status::BelowThreshold(_)) => 4,
        Err(Error::Config(_) | Error::Json { .. }) => 2,
        Err(e) if e.is_numeric() => 3,
        Err(_) => 1,
    }
}

/// Caps the global rayon pool from `FSB_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

pub fn execute(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::PrecomputeBary(a) => bary(&a),
        Command::Fit(a) => fit(&a),
        Command::TrainProjector(a) => train_proj(&a),
        Command::TrainDenoiser(a) => train_den(&a),
        Command::Run(a) => run(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::BenchConvert(a) => bench_convert(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

/// Toy templates, their construction-time map and the frozen decoder.
#[derive(Clone, Debug)]
pub struct Models {
    pub mhr: Arc<BodyTemplate>,
    pub smpl: Arc<BodyTemplate>,
    pub bary: BaryMap,
    pub weights: Arc<ModelWeights>,
}

const MHR_FILE: &str = "mhr.json";
const SMPL_FILE: &str = "smpl.json";
const BARY_FILE: &str = "bary.json";
const DECODER_FILE: &str = "decoder.json";

impl Models {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let toy = make_toy_models(cfg.model_seed, cfg.models)?;
        Ok(Self {
            mhr: Arc::new(toy.mhr),
            smpl: Arc::new(toy.smpl),
            bary: toy.ground_truth,
            weights: Arc::new(ModelWeights::init(cfg.decoder, cfg.model_seed)?),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_template(&dir.join(MHR_FILE), &self.mhr)?;
        save_template(&dir.join(SMPL_FILE), &self.smpl)?;
        self.bary.save(&dir.join(BARY_FILE))?;
        self.weights.save(&dir.join(DECODER_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mhr = load_template(&dir.join(MHR_FILE))?;
        let bary = BaryMap::load(&dir.join(BARY_FILE), &mhr)?;
        Ok(Self {
            mhr: Arc::new(mhr),
            smpl: Arc::new(load_template(&dir.join(SMPL_FILE))?),
            bary,
            weights: Arc::new(ModelWeights::load(&dir.join(DECODER_FILE))?),
        })
    }

    fn resolve(args: &ModelArgs, cfg: &RunConfig) -> Result<Self> {
        let mut m = match &args.models {
            Some(dir) => Self::load(dir)?,
            None => Self::build(cfg)?,
        };
        if let Some(p) = &args.bary {
            m.bary = BaryMap::load(p, &m.mhr)?;
        }
        if m.bary.len() != m.smpl.num_vertices() {
            return Err(Error::Shape(format!(
                "map has {} rows for {} target vertices",
                m.bary.len(),
                m.smpl.num_vertices()
            )));
        }
        Ok(m)
    }

    pub fn decoder(&self) -> Result<Decoder> {
        Decoder::new(self.weights.clone(), self.mhr.clone())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Seed of the `i`-th synthesized scene.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i as u64)
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    config: &'a RunConfig,
    n: usize,
    seed: u64,
    scenes: Vec<String>,
    pairs: &'static str,
    max_fit_error: f32,
    /// Pairs whose stored fit misses the tolerance.
    over_tolerance: usize,
}

fn synth(a: &SynthArgs) -> Result<Status> {
    if a.n == 0 {
        return Err(Error::Config("synth needs n >= 1".into()));
    }
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let models = Models::build(&cfg)?;
    create_dir(&a.out)?;
    models.save(&a.out)?;
    let scene_dir = a.out.join("scenes");
    create_dir(&scene_dir)?;
    let mut scenes = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let name = format!("scenes/scene_{i:04}.json");
        Scene::synthetic(scene_seed(a.seed, i)).save(&a.out.join(&name))?;
        scenes.push(name);
    }
    let set = ConversionSet::generate(
        &models.mhr,
        &models.smpl,
        &models.bary,
        a.n,
        a.seed,
        &cfg.fit,
    )?;
    set.save(&a.out.join("pairs.json"))?;
    let over = set.fit_error.iter().filter(|&&e| e > FIT_TOLERANCE).count();
    let max_fit_error = set.fit_error.iter().copied().fold(0.0, f32::max);
    write_json(
        &a.out.join("synth.json"),
        &SynthManifest {
            config: &cfg,
            n: a.n,
            seed: a.seed,
            scenes,
            pairs: "pairs.json",
            max_fit_error,
            over_tolerance: over,
        },
    )?;
    eprintln!(
        "synth: {} scenes and pairs in {}; max fit error {max_fit_error:.5}, {over} over {FIT_TOLERANCE}",
        a.n,
        a.out.display()
    );
    Ok(Status::Ok)
}

fn bary(a: &BaryArgs) -> Result<Status> {
    let source = load_template(&a.source)?;
    let target = load_template(&a.target)?;
    let map = precompute_bary(&source, &target)?;
    map.save(&a.out)?;
    eprintln!(
        "precompute-bary: {} rows, {} degenerate",
        map.len(),
        map.degenerate_rows().len()
    );
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct FitRecord {
    index: usize,
    error: f32,
    pose: Vec<f32>,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    config: &'a RunConfig,
    count: usize,
    mean_error: f32,
    max_error: f32,
    within_tolerance: f32,
    fits: Vec<FitRecord>,
}

fn fit(a: &FitArgs) -> Result<Status> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let models = Models::resolve(&a.models, &cfg)?;
    let set = ConversionSet::load(&a.pairs)?;
    let n = a.count.unwrap_or(set.len()).min(set.len());
    if n == 0 {
        return Err(Error::Usage("no meshes to fit".into()));
    }
    let start = Instant::now();
    let fits = set.meshes[..n]
        .par_iter()
        .enumerate()
        .map(|(index, m)| {
            let t = crate::projection::bridge(m, &models.bary)?;
            let r = fit_bridged(&t, &models.smpl, &cfg.fit, &PoseState::zeros())?;
            Ok(FitRecord {
                index,
                error: r.error,
                pose: r.pose.as_slice().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let errs: Vec<f32> = fits.iter().map(|f| f.error).collect();
    let within = errs.iter().filter(|&&e| e <= FIT_TOLERANCE).count() as f32 / n as f32;
    let summary = FitSummary {
        config: &cfg,
        count: n,
        mean_error: errs.iter().sum::<f32>() / n as f32,
        max_error: errs.iter().copied().fold(0.0, f32::max),
        within_tolerance: within,
        fits,
    };
    write_json(&a.out, &summary)?;
    eprintln!(
        "fit: {n} meshes in {:.2}s, mean error {:.5}, {:.0}% within {FIT_TOLERANCE}",
        start.elapsed().as_secs_f64(),
        summary.mean_error,
        100.0 * within
    );
    if a.gate && within < 0.95 {
        return Ok(Status::BelowThreshold(format!(
            "{:.0}% of fits within {FIT_TOLERANCE}, need 95%",
            100.0 * within
        )));
    }
    Ok(Status::Ok)
}

fn train_proj(a: &TrainProjectorArgs) -> Result<Status> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let models = Models::resolve(&a.models, &cfg)?;
    let (train, heldout) = ConversionSet::load(&a.pairs)?.split_tail(a.heldout)?;
    let out = train_projector(
        &train,
        &heldout,
        &models.bary,
        &models.smpl,
        cfg.projector,
        &cfg.train,
    )?;
    out.weights.save(&a.out)?;
    if let Some(p) = &a.curve {
        out.write_csv(p)?;
    }
    let best = out.best();
    eprintln!(
        "train-projector: best epoch {} of {}, held-out vertex error {:.5}",
        best.epoch,
        out.curve.len(),
        best.heldout_vertex_err
    );
    Ok(Status::Ok)
}

fn train_den(a: &TrainDenoiserArgs) -> Result<Status> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if a.sequences <= a.heldout_sequences || a.heldout_sequences == 0 || a.frames == 0 {
        return Err(Error::Config(
            "need frames > 0 and 0 < heldout-sequences < sequences".into(),
        ));
    }
    let data = motion_dataset(a.sequences, a.frames, a.seed);
    let (train, held) = data.split_at(a.sequences - a.heldout_sequences);
    let flat = |s: &[Vec<PoseState>]| s.iter().flatten().copied().collect::<Vec<_>>();
    let out = train_denoiser(&flat(train), &flat(held), &cfg.denoiser)?;
    out.weights.save(&a.out)?;
    if let Some(p) = &a.curve {
        write_denoiser_curve(p, &out.curve)?;
    }
    if let Some(last) = out.curve.last() {
        eprintln!(
            "train-denoiser: final held-out loss {:.5}",
            last.heldout_loss
        );
    }
    Ok(Status::Ok)
}

fn write_denoiser_curve(path: &Path, curve: &[DenoiserEpoch]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,heldout_loss\n");
    for e in curve {
        text.push_str(&format!(
            "{},{},{}\n",
            e.epoch, e.train_loss, e.heldout_loss
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ParamsOut {
    params: Vec<f32>,
    camera: [f32; 3],
}

fn run(a: &RunArgs) -> Result<Status> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if a.mode == Mode::Serial {
        cfg.pipeline = PipelineConfig::serial();
    }
    let models = Models::resolve(&a.models, &cfg)?;
    let decoder = models.decoder()?;
    let scene = Scene::load(&a.scene)?;
    let frame = Frame::from_scene(&scene, &models.mhr, a.seed)?;
    let mut engine = Engine::new(&decoder, cfg.pipeline.clone())?;
    if let Some(p) = &a.dump_intermediates {
        let (_, dumps) = engine.run_recorded(&frame)?;
        write_json(p, &dumps)?;
    }
    let measured = a.frames.unwrap_or(cfg.bench.frames);
    let (outs, mut report) =
        engine.run_frames(std::slice::from_ref(&frame), measured, cfg.bench.warmup)?;
    report.config = Some(cfg.to_value());
    write_json(&a.out, &report)?;
    if let (Some(p), Some(o)) = (&a.params, outs.last()) {
        write_json(
            p,
            &ParamsOut {
                params: o.params.as_slice().to_vec(),
                camera: o.camera,
            },
        )?;
    }
    eprintln!(
        "run: {} over {} frames, mean {:.3} ms, p50 {:.3} ms",
        report.mode, report.frames, report.total_ms, report.total_p50_ms
    );
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct BenchOut<'a> {
    config: &'a RunConfig,
    speedup: f64,
    waterfall: &'a crate::pipeline::Waterfall,
}

/// Relative noise band for waterfall monotonicity.
pub const WATERFALL_BAND: f64 = 0.05;
/// Minimum serial-to-fast speedup on the default configuration.
pub const MIN_PIPELINE_SPEEDUP: f64 = 2.0;

fn bench_cmd(a: &BenchArgs) -> Result<Status> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let rows: Vec<BenchRow> = match &a.matrix {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => waterfall_rows(),
    };
    let models = Models::resolve(&a.models, &cfg)?;
    let decoder = models.decoder()?;
    let frames = (0..cfg.bench.scenes)
        .map(|i| Frame::synthetic(i as u64, &models.mhr))
        .collect::<Result<Vec<_>>>()?;
    let measured = a.frames.unwrap_or(cfg.bench.frames);
    let w = bench(&decoder, &rows, &frames, measured, cfg.bench.warmup)?;
    w.write_csv(&a.csv)?;
    if let Some(p) = &a.out {
        write_json(
            p,
            &BenchOut {
                config: &cfg,
                speedup: w.speedup(),
                waterfall: &w,
            },
        )?;
    }
    for r in &w.rows {
        eprintln!("{:<28} {:>9.3} ms {:>+9.3}", r.toggle, r.cum_ms, r.delta_ms);
    }
    eprintln!("speedup {:.2}x", w.speedup());
    if a.gate {
        let regressions = w.regressions(WATERFALL_BAND);
        if w.speedup() < MIN_PIPELINE_SPEEDUP || !regressions.is_empty() {
            return Ok(Status::BelowThreshold(format!(
                "speedup {:.2}x, rows slower than their predecessor: {regressions:?}",
                w.speedup()
            )));
        }
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct ConvertOut<'a> {
    config: &'a RunConfig,
    report: crate::projection::ConversionReport,
}

/// Projector-over-fit thresholds for the conversion gate.
pub const MIN_CONVERSION_SPEEDUP: f64 = 100.0;
pub const MAX_ERROR_RATIO: f32 = 2.0;

fn bench_convert(a: &BenchConvertArgs) -> Result<Status> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let models = Models::resolve(&a.models, &cfg)?;
    let set = ConversionSet::load(&a.pairs)?;
    let n = a.count.min(set.len());
    let projector = ProjectorWeights::load(&a.projector)?;
    let report = bench_conversion(
        &set.meshes[set.len() - n..],
        &models.bary,
        &models.smpl,
        &cfg.fit,
        &projector,
    )?;
    eprintln!(
        "bench-convert: fit {:.2} ms, projector {:.4} ms, speedup {:.1}x, error {:.5} vs {:.5} (ratio {:.2})",
        report.fit_ms,
        report.project_ms,
        report.speedup,
        report.fit_error,
        report.projector_error,
        report.error_ratio
    );
    let gate =
        a.gate && (report.speedup < MIN_CONVERSION_SPEEDUP || report.error_ratio > MAX_ERROR_RATIO);
    let msg = format!(
        "speedup {:.1}x, error ratio {:.2}",
        report.speedup, report.error_ratio
    );
    write_json(
        &a.out,
        &ConvertOut {
            config: &cfg,
            report,
        },
    )?;
    Ok(if gate {
        Status::BelowThreshold(msg)
    } else {
        Status::Ok
    })
}

fn report_cmd(a: &ReportArgs) -> Result<Status> {
    let inputs = report::load_all(&a.inputs)?;
    let rows = report::rows(&inputs)?;
    print!("{}", report::table(&rows));
    if let Some(p) = &a.csv {
        report::write_csv(p, &rows)?;
    }
    if let Some(p) = &a.json {
        write_json(p, &rows)?;
    }
    Ok(Status::Ok)
}
