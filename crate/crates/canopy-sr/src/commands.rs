//! Command-line surface. Parsing lives here so tests can drive commands
//! exactly as the binary does.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use canopy_core::calendar::{parse_day_month, JULY_FIRST_DOY};
use canopy_core::config::Resolution;
use canopy_core::datapipe::{generate_synthetic, ChannelStats};
use canopy_core::metrics::fap_with_bins;
use canopy_core::trainer::{EvalSummary, Scene, StepLog, TrainObserver, TrainState, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::container::{load_patch, load_scene, save_patch, PatchFile, EXTENSION};
use crate::error::{AppError, AppResult};
use crate::geotiff::{read_geotiff, write_geotiff};
use crate::manifest::{Entry, Manifest, Split, MANIFEST_NAME};
use crate::plot::plot_fap;
use crate::predict::{Bicubic, HeightPredictor, ModelPredictor};
use crate::report::evaluate;
use crate::runconfig::RunConfig;

pub const CONFIG_NAME: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "canopy-sr", version, about = "Canopy height regression and super-resolution from satellite image time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (patch containers + manifest).
    Synth(SynthArgs),
    /// Train a model; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Predict a height raster for one patch.
    Predict(PredictArgs),
    /// Compare frequency attenuation profiles of rasters.
    Fap(FapArgs),
    /// Print a commented configuration template.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigSource {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigSource {
    fn load(&self, extra: &[String]) -> AppResult<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of patches; overrides data.count and puts count / 5 patches
    /// in each of the validation and test splits.
    #[arg(long)]
    pub count: Option<usize>,
    /// Base seed (overrides data.synth.seed); patch i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    /// Dataset directory holding manifest.txt (or the manifest itself).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Output resolution in meters (10, 5 or 2.5).
    #[arg(long)]
    pub resolution: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report directory; defaults to the run's reports/ directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run each patch in one pass instead of tiles.
    #[arg(long)]
    pub whole: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Upsample {
    Bicubic,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Patch container.
    #[arg(long)]
    pub patch: PathBuf,
    /// Output GeoTIFF.
    #[arg(long)]
    pub out: PathBuf,
    /// Conditioning date DD-MM (default 01-07).
    #[arg(long)]
    pub date: Option<String>,
    /// Upsample the model output instead of relying on its own factor.
    #[arg(long, value_enum)]
    pub upsample: Option<Upsample>,
    /// Upsampling factor for `--upsample`; defaults to reaching 2.5 m.
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub whole: bool,
}

#[derive(Debug, Args)]
pub struct FapArgs {
    /// First raster (GeoTIFF).
    pub raster_a: PathBuf,
    /// Second raster (GeoTIFF).
    pub raster_b: PathBuf,
    /// Optional high-resolution reference raster drawn as a third curve.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Output SVG; a CSV table with the same stem is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Curve labels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long, default_value_t = canopy_core::metrics::FAP_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, default_value_t = 2.5)]
    pub resolution: f64,
    /// Write to a file instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Fap(a) => cmd_fap(&a),
        Command::Config(a) => cmd_config(&a),
    }
}

fn create_dir(p: &Path) -> AppResult<()> {
    fs::create_dir_all(p).map_err(|e| AppError::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> AppResult<()> {
    fs::write(p, bytes).map_err(|e| AppError::io(p, e))
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_synth(a: &SynthArgs) -> AppResult<()> {
    let mut extra = Vec::new();
    if let Some(n) = a.count {
        extra.push(format!("data.count={n}"));
        extra.push(format!("data.val_count={}", n / 5));
        extra.push(format!("data.test_count={}", n / 5));
    }
    if let Some(s) = a.seed {
        extra.push(format!("data.synth.seed={s}"));
    }
    let cfg = a.cfg.load(&extra)?;
    if is_non_empty_dir(&a.out) && !a.force {
        return Err(AppError::Usage(format!(
            "output directory {} is not empty (use --force to overwrite)",
            a.out.display()
        )));
    }
    create_dir(&a.out)?;
    if a.force {
        for e in fs::read_dir(&a.out).map_err(|e| AppError::io(&a.out, e))?.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == EXTENSION) || p.file_name().is_some_and(|n| n == MANIFEST_NAME) {
                fs::remove_file(&p).map_err(|e| AppError::io(&p, e))?;
            }
        }
    }
    let d = &cfg.data;
    if d.count == 0 {
        log::warn!("data.count = 0: writing an empty manifest");
    }
    let n_train = d.count - d.val_count - d.test_count;
    let mut manifest = Manifest::default();
    for i in 0..d.count {
        let mut sc = d.synth.clone();
        sc.seed = d.synth.seed.wrapping_add(i as u64);
        let (patch, reference) = generate_synthetic(&sc)?;
        let name = format!("patch_{i:04}.{EXTENSION}");
        save_patch(a.out.join(&name), &PatchFile::new(patch, Some(reference)))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + d.val_count {
            Split::Val
        } else {
            Split::Test
        };
        manifest.entries.push(Entry {
            path: PathBuf::from(name),
            split,
        });
    }
    write_file(&a.out.join(MANIFEST_NAME), manifest.render(Path::new("")))?;
    write_file(&a.out.join(CONFIG_NAME), cfg.to_toml_string())?;
    println!("wrote {} patches to {}", d.count, a.out.display());
    Ok(())
}

fn load_split(manifest: &Manifest, split: Split) -> AppResult<Vec<Scene>> {
    manifest.paths(split).into_iter().map(load_scene).collect()
}

/// Run directory layout.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> AppResult<Self> {
        for sub in ["checkpoints", "logs", "reports", "rasters"] {
            create_dir(&root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

#[derive(Serialize)]
struct StepRecord<'a> {
    #[serde(flatten)]
    log: &'a StepLog,
    elapsed_ms: u128,
}

#[derive(Serialize)]
struct ValRecord<'a> {
    step: u64,
    #[serde(flatten)]
    summary: &'a EvalSummary,
    improved: bool,
}

struct RunObserver {
    config: RunConfig,
    ckpt_dir: PathBuf,
    train_log: BufWriter<File>,
    val_log: BufWriter<File>,
    start: Instant,
}

fn open_append(p: &Path) -> AppResult<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(p)
        .map(BufWriter::new)
        .map_err(|e| AppError::io(p, e))
}

impl RunObserver {
    fn save(&self, trainer: &Trainer, state: &TrainState, names: &[String]) -> AppResult<()> {
        let ck = Checkpoint::capture(&self.config, trainer, state);
        for n in names {
            ck.save(self.ckpt_dir.join(n))?;
        }
        Ok(())
    }
}

fn observer_err(e: AppError) -> canopy_core::Error {
    canopy_core::Error::Observer(e.to_string())
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, log: &StepLog) {
        let rec = StepRecord {
            log,
            elapsed_ms: self.start.elapsed().as_millis(),
        };
        if let Err(e) = serde_json::to_writer(&mut self.train_log, &rec).map(|_| writeln!(self.train_log)) {
            log::warn!("could not write training log: {e}");
        }
        if log.step % 50 == 0 {
            log::info!("step {} lr {:.3e} loss {:.4}", log.step, log.lr, log.loss);
        }
    }

    fn on_validation(&mut self, trainer: &Trainer, state: &TrainState, summary: &EvalSummary, improved: bool) -> canopy_core::Result<()> {
        let rec = ValRecord {
            step: state.step,
            summary,
            improved,
        };
        serde_json::to_writer(&mut self.val_log, &rec).map_err(|e| canopy_core::Error::Observer(e.to_string()))?;
        writeln!(self.val_log).and_then(|_| self.val_log.flush()).map_err(|e| canopy_core::Error::Observer(e.to_string()))?;
        log::info!("validation at step {}: MAE {:.4} m", state.step, summary.metrics.mae);
        if improved {
            self.save(trainer, state, &["best.ckpt".into()]).map_err(observer_err)?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, trainer: &Trainer, state: &TrainState) -> canopy_core::Result<()> {
        self.train_log.flush().map_err(|e| canopy_core::Error::Observer(e.to_string()))?;
        self.save(trainer, state, &[format!("step_{:08}.ckpt", state.step), "latest.ckpt".into()])
            .map_err(observer_err)
    }
}

pub fn cmd_train(a: &TrainArgs) -> AppResult<()> {
    let mut extra = Vec::new();
    if let Some(r) = a.resolution {
        Resolution::from_meters(r).map_err(|e| AppError::Usage(e.to_string()))?;
        extra.push(format!("resolution={r}"));
        // sub-configs follow the resolution unless set explicitly
        extra.push(format!("data.synth.resolution={r}"));
    }
    if let Some(n) = a.max_steps {
        extra.push(format!("train.max_steps={n}"));
    }
    if let Some(s) = a.seed {
        extra.push(format!("train.seed={s}"));
    }
    let cfg = a.cfg.load(&extra)?;
    let manifest = Manifest::load(&a.data)?;
    let train = load_split(&manifest, Split::Train)?;
    let val = load_split(&manifest, Split::Val)?;
    if train.is_empty() {
        return Err(AppError::Usage("manifest has no training patches".into()));
    }
    let run = RunDir::create(&a.out)?;
    write_file(&run.root.join(CONFIG_NAME), cfg.to_toml_string())?;
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let stats = match &resumed {
        Some(ck) => ck.header.stats.clone(),
        None => ChannelStats::compute(&train.iter().map(|s| &s.patch).collect::<Vec<_>>())?,
    };
    let trainer = Trainer::new(&cfg.model, cfg.loss.clone(), cfg.train.clone(), cfg.sampler.clone(), stats)?;
    let mut state = match &resumed {
        Some(ck) => {
            if ck.header.config.model != cfg.model {
                return Err(AppError::Config("resumed checkpoint was trained with a different model configuration".into()));
            }
            ck.restore(&trainer)?
        }
        None => trainer.init_state(),
    };
    log::info!(
        "training {} parameters at {} m on {} patches ({} validation), steps {}..{}",
        trainer.model.num_params(),
        cfg.resolution.meters(),
        train.len(),
        val.len(),
        state.step,
        cfg.train.max_steps
    );
    let logs = run.logs();
    let mut obs = RunObserver {
        config: cfg.clone(),
        ckpt_dir: run.checkpoints(),
        train_log: open_append(&logs.join("train.jsonl"))?,
        val_log: open_append(&logs.join("val.jsonl"))?,
        start: Instant::now(),
    };
    let outcome = trainer.fit(&mut state, &train, &val, &mut obs)?;
    obs.train_log.flush().map_err(|e| AppError::io(logs.join("train.jsonl"), e))?;
    obs.save(&trainer, &state, &["latest.ckpt".into()])?;
    println!(
        "trained to step {}{}; checkpoint {}",
        outcome.steps,
        if outcome.stopped_early { " (early stop)" } else { "" },
        run.checkpoints().join("latest.ckpt").display()
    );
    if let Some(m) = outcome.best_val_mae {
        println!("best validation MAE {m:.4} m");
    }
    Ok(())
}

fn default_report_dir(checkpoint: &Path) -> PathBuf {
    match checkpoint.parent() {
        Some(p) if p.file_name().is_some_and(|n| n == "checkpoints") => p.parent().unwrap_or(Path::new(".")).join("reports"),
        _ => PathBuf::from("reports"),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> AppResult<()> {
    let split: Split = a.split.parse().map_err(AppError::Usage)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut predictor = ModelPredictor::from_checkpoint(&ck)?;
    if a.whole {
        predictor.tile = None;
    }
    let manifest = Manifest::load(&a.data)?;
    let scenes = load_split(&manifest, split)?;
    if scenes.is_empty() {
        return Err(AppError::Usage(format!("manifest has no `{split}` patches")));
    }
    let report = evaluate(&predictor, &scenes, ck.header.config.eval.fap_bins)?;
    let dir = a.out.clone().unwrap_or_else(|| default_report_dir(&a.checkpoint));
    let stem = format!("eval_{split}");
    report.write(&dir, &stem)?;
    if let Some(f) = &report.fap {
        let pred = canopy_core::metrics::FapProfile {
            freq: f.freq.clone(),
            values: f.prediction.clone(),
        };
        let refp = canopy_core::metrics::FapProfile {
            freq: f.freq.clone(),
            values: f.reference.clone(),
        };
        plot_fap(&dir.join(format!("{stem}_fap.svg")), "Frequency attenuation profile", &[("prediction", &pred), ("reference", &refp)])?;
    }
    print!("{}", report.to_text());
    Ok(())
}

pub fn parse_date(text: Option<&str>) -> AppResult<u16> {
    match text {
        None => Ok(JULY_FIRST_DOY),
        Some(t) => parse_day_month(t).map_err(|e| AppError::Usage(format!("--date: {e}"))),
    }
}

pub fn cmd_predict(a: &PredictArgs) -> AppResult<()> {
    let doy = parse_date(a.date.as_deref())?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut predictor = ModelPredictor::from_checkpoint(&ck)?;
    if a.whole {
        predictor.tile = None;
    }
    let file = load_patch(&a.patch)?;
    let patch = file
        .series
        .ok_or_else(|| AppError::format(&a.patch, "container has no image series"))?;
    let raster = match a.upsample {
        None => {
            if a.factor.is_some() {
                return Err(AppError::Usage("--factor requires --upsample".into()));
            }
            predictor.predict(&patch, doy)?
        }
        Some(Upsample::Bicubic) => {
            let f = a.factor.unwrap_or((4 / predictor.factor()).max(1));
            if f == 0 {
                return Err(AppError::Usage("--factor must be positive".into()));
            }
            Bicubic { inner: predictor, factor: f }.predict(&patch, doy)?
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_geotiff(&a.out, &raster)?;
    println!(
        "wrote {}x{} raster at {} m (conditioned on day {doy}) to {}",
        raster.width,
        raster.height,
        raster.geo.pixel_size,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_fap(a: &FapArgs) -> AppResult<()> {
    let mut inputs = vec![a.raster_a.clone(), a.raster_b.clone()];
    inputs.extend(a.reference.clone());
    let default_labels = ["a", "b", "reference"];
    let mut curves = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let r = read_geotiff(p)?;
        if r.height != r.width {
            return Err(AppError::Usage(format!(
                "{} is {}x{}; FAP needs a square raster, resample or crop it first",
                p.display(),
                r.height,
                r.width
            )));
        }
        let prof = fap_with_bins(&r.data, r.height, r.width, a.bins).map_err(|e| AppError::Usage(format!("{}: {e}", p.display())))?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| default_labels[i].to_string());
        curves.push((label, prof));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let refs: Vec<(&str, &canopy_core::metrics::FapProfile)> = curves.iter().map(|(l, p)| (l.as_str(), p)).collect();
    plot_fap(&a.out, "Normalized log frequency attenuation profile", &refs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["freq".to_string()];
    header.extend(curves.iter().map(|(l, _)| l.clone()));
    let csv_err = |e: csv::Error| AppError::format(&a.out, e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    let freq = &curves[0].1.freq;
    for (k, f) in freq.iter().enumerate() {
        let mut row = vec![f.to_string()];
        row.extend(curves.iter().map(|(_, p)| p.values.get(k).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row).map_err(csv_err)?;
    }
    let table = w.into_inner().expect("in-memory writer");
    write_file(&a.out.with_extension("csv"), &table)?;
    print!("{}", String::from_utf8_lossy(&table));
    Ok(())
}

pub fn cmd_config(a: &ConfigArgs) -> AppResult<()> {
    let res = Resolution::from_meters(a.resolution).map_err(|e| AppError::Usage(e.to_string()))?;
    let text = RunConfig::for_resolution(res).to_template();
    match &a.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
