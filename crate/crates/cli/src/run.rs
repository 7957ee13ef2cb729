//! Experiment stages and the file-writing commands built on them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fgrm_core::checkpoint::Checkpoint;
use fgrm_core::CoreError;
use fgrm_core::eval::{self, PixelOutputs};
use fgrm_core::metrics::CalibrationReport;
use fgrm_core::model;
use fgrm_core::scenes::{self, SceneSample};
use fgrm_core::train::{self, EpochLog};
use fgrm_core::tuner::{self, FisherMode, RewardMode, StepLog, TunerConfig};
use fgrm_tensor::ParameterSet;
use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, SplitName};
use crate::error::{Result, RunError};

pub struct Experiment {
    pub config: ExperimentConfig,
    /// Hash of `config`, embedded in every artifact.
    pub hash: String,
    pub data: Dataset,
}

pub struct Evaluation {
    pub report: CalibrationReport,
    pub id: PixelOutputs,
    pub ood: Option<PixelOutputs>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = Dataset::build(&config)?;
        Ok(Self::with_data(config, data))
    }

    pub fn with_data(config: ExperimentConfig, data: Dataset) -> Self {
        Self {
            hash: config.hash(),
            config,
            data,
        }
    }

    pub fn pretrain(&self) -> Result<(ParameterSet, Vec<EpochLog>)> {
        let cfg = &self.config;
        let init = model::init_params(&cfg.model)?;
        Ok(train::pretrain(&cfg.model, &cfg.pretrain, init, &self.data.split(SplitName::Train))?)
    }

    /// Tunes `reference` on the validation split.
    pub fn tune(&self, reference: &ParameterSet, tuner: &TunerConfig) -> Result<(ParameterSet, Vec<StepLog>)> {
        Ok(tuner::tune(&self.config.model, reference, &self.data.split(SplitName::Val), tuner)?)
    }

    /// With `ood`, the split is paired with copies corrupted by
    /// `tuner.corruption` and the report gains PR / BR.
    pub fn evaluate(&self, params: &ParameterSet, split: SplitName, ood: bool) -> Result<Evaluation> {
        let cfg = &self.config;
        let samples = self.data.split(split);
        let id = eval::infer(&cfg.model, params, &samples)?;
        let ood = if ood {
            let corrupted = samples
                .iter()
                .map(|s| scenes::corrupt(s, cfg.tuner.corruption))
                .collect::<fgrm_core::Result<Vec<SceneSample>>>()?;
            Some(eval::infer(&cfg.model, params, &corrupted.iter().collect::<Vec<_>>())?)
        } else {
            None
        };
        let report = eval::build_report(&id, ood.as_ref(), cfg.model.classes, &cfg.metrics, &self.hash, cfg.seed)?;
        Ok(Evaluation { report, id, ood })
    }

    /// Runs every cell, `workers` at a time; rows come back in grid order.
    pub fn sweep(&self, reference: &ParameterSet, cells: &[SweepCell], workers: usize) -> Result<Vec<SweepResult>> {
        if cells.is_empty() {
            return Err(RunError::Sweep("the grid is empty".into()));
        }
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<SweepResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers.clamp(1, cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(cell) = cells.get(i) else { break };
                    let out = self.run_cell(reference, *cell);
                    results.lock().expect("worker panicked")[i] = Some(out);
                });
            }
        });
        results
            .into_inner()
            .expect("worker panicked")
            .into_iter()
            .map(|r| r.expect("every cell ran"))
            .collect()
    }

    fn run_cell(&self, reference: &ParameterSet, cell: SweepCell) -> Result<SweepResult> {
        let tuner = cell.apply(&self.config.tuner);
        log::info!("sweep cell {} beta {}", cell.mode, cell.beta);
        let (params, log) = self.tune(reference, &tuner)?;
        let eval = self.evaluate(&params, SplitName::Test, true)?;
        let r = &eval.report;
        Ok(SweepResult {
            row: SweepRow {
                mode: cell.mode,
                beta: cell.beta,
                ece: r.ece,
                mi: r.mi,
                dice: r.dice,
                pr: r.pr.expect("evaluated with OOD"),
                br: r.br.expect("evaluated with OOD"),
                max_drift: params.max_abs_diff(reference).map_err(CoreError::from)?,
            },
            params,
            log,
        })
    }
}

/// Fisher weighting compared by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Squared-gradient Fisher weights.
    Finegrained,
    Reciprocal,
    Uniform,
}

impl SweepMode {
    pub fn fisher(self) -> FisherMode {
        match self {
            SweepMode::Finegrained => FisherMode::Squared,
            SweepMode::Reciprocal => FisherMode::Reciprocal,
            SweepMode::Uniform => FisherMode::Uniform,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepMode::Finegrained => "finegrained",
            SweepMode::Reciprocal => "reciprocal",
            SweepMode::Uniform => "uniform",
        }
    }
}

impl std::fmt::Display for SweepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepMode {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "finegrained" | "fine-grained" | "squared" => Ok(SweepMode::Finegrained),
            "reciprocal" => Ok(SweepMode::Reciprocal),
            "uniform" => Ok(SweepMode::Uniform),
            other => Err(RunError::Sweep(format!(
                "unknown mode `{other}` (expected finegrained, reciprocal or uniform)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub mode: SweepMode,
    pub beta: f64,
}

impl SweepCell {
    pub fn apply(&self, base: &TunerConfig) -> TunerConfig {
        TunerConfig {
            fisher: self.mode.fisher(),
            beta: self.beta,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: SweepMode,
    pub beta: f64,
    pub ece: f64,
    pub mi: f64,
    pub dice: f64,
    pub pr: f64,
    pub br: f64,
    pub max_drift: f64,
}

pub struct SweepResult {
    pub row: SweepRow,
    pub params: ParameterSet,
    pub log: Vec<StepLog>,
}

/// Parses `beta=0.01,0.1,1` and `finegrained,uniform` into the
/// mode-major cross-product.
pub fn parse_grid(sweep: &str, modes: &str) -> Result<Vec<SweepCell>> {
    let (key, values) = sweep
        .split_once('=')
        .ok_or_else(|| RunError::Sweep(format!("expected `beta=v1,v2,...`, got `{sweep}`")))?;
    if key.trim() != "beta" {
        return Err(RunError::Sweep(format!("only `beta` can be swept, got `{key}`")));
    }
    let betas = values
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| match v.trim().parse::<f64>() {
            Ok(b) if b >= 0.0 && b.is_finite() => Ok(b),
            _ => Err(RunError::Sweep(format!("invalid beta `{v}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let modes = modes
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(SweepMode::from_str)
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<SweepCell> = modes
        .iter()
        .flat_map(|&mode| betas.iter().map(move |&beta| SweepCell { mode, beta }))
        .collect();
    if cells.is_empty() {
        return Err(RunError::Sweep("the grid is empty".into()));
    }
    Ok(cells)
}

fn stamp(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash},seed={seed}\n")
}

pub fn pretrain_log_csv(log: &[EpochLog], hash: &str, seed: u64) -> String {
    let mut out = stamp(hash, seed);
    out.push_str("epoch,loss,dice\n");
    for e in log {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.loss, e.dice);
    }
    out
}

pub fn tune_log_csv(log: &[StepLog], hash: &str, seed: u64) -> String {
    stamp(hash, seed) + &tuner::log_to_csv(log)
}

pub fn summary_csv(rows: &[SweepRow], hash: &str, seed: u64) -> String {
    let mut out = stamp(hash, seed);
    out.push_str("mode,beta,ece,mi,dice,pr,br,max_drift\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mode, r.beta, r.ece, r.mi, r.dice, r.pr, r.br, r.max_drift
        );
    }
    out
}

/// One row per pixel; floats use shortest round-trip formatting, so the
/// report can be recomputed exactly from this file.
pub fn scatter_csv(out: &PixelOutputs, hash: &str, seed: u64) -> String {
    let mut s = stamp(hash, seed);
    s.push_str("image,pixel,predicted,truth,correct,confidence,aleatoric,epistemic\n");
    let plane = out.plane();
    for i in 0..out.confidence.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            i / plane,
            i % plane,
            out.predicted[i],
            out.truth[i],
            u8::from(out.predicted[i] == out.truth[i]),
            out.confidence[i],
            out.aleatoric[i],
            out.epistemic[i]
        );
    }
    s
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| RunError::io(path, e))
}

/// 8-bit map on the fixed scale [0, 1] → [0, 255].
fn write_map(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).expect("map matches dimensions");
    img.save_with_format(path, ImageFormat::Png).map_err(|source| RunError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

fn load_experiment(cfg: ExperimentConfig) -> Result<Experiment> {
    let data = Dataset::load(&dataset_dir(&cfg), &cfg)?;
    Ok(Experiment::with_data(cfg, data))
}

fn load_checkpoint(exp: &Experiment, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    exp.config.model.check_params(&ck.params)?;
    Ok(ck)
}

/// Builds and exports the dataset, pretrains, and writes
/// `pretrain/model.ckpt` and `pretrain/train_log.csv`.
pub fn cmd_pretrain(config_path: &Path) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let exp = Experiment::new(cfg)?;
    let cfg = &exp.config;
    exp.data.export(&dataset_dir(cfg), cfg, &exp.hash)?;
    write(&cfg.output_dir.join("config.json"), cfg.to_json())?;
    let (params, log) = exp.pretrain()?;
    let dir = cfg.output_dir.join("pretrain");
    write(&dir.join("train_log.csv"), pretrain_log_csv(&log, &exp.hash, cfg.seed))?;
    let path = dir.join("model.ckpt");
    Checkpoint::new(cfg.model.clone(), params, &exp.hash, cfg.seed, "pretrained")?.save(&path)?;
    Ok(path)
}

/// Writes `tune-{id|ood}/model.ckpt` and `tune_log.csv`.
pub fn cmd_tune(config_path: &Path, checkpoint: &Path, reward: RewardMode) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.tuner.reward = reward;
    let exp = load_experiment(cfg)?;
    let cfg = &exp.config;
    let reference = load_checkpoint(&exp, checkpoint)?;
    let (params, log) = exp.tune(&reference.params, &cfg.tuner)?;
    let tag = match reward {
        RewardMode::Id => "id",
        RewardMode::Ood => "ood",
    };
    let dir = cfg.output_dir.join(format!("tune-{tag}"));
    write(&dir.join("tune_log.csv"), tune_log_csv(&log, &exp.hash, cfg.seed))?;
    let path = dir.join("model.ckpt");
    Checkpoint::new(cfg.model.clone(), params, &exp.hash, cfg.seed, &format!("tuned-{tag}"))?.save(&path)?;
    Ok(path)
}

/// Writes the report, reliability table, per-pixel scatter table and
/// uncertainty maps. Defaults to `eval-<stage>-<split>[-ood]` under the
/// output directory.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint: &Path,
    split: SplitName,
    ood: bool,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let exp = load_experiment(cfg)?;
    let cfg = &exp.config;
    let ck = load_checkpoint(&exp, checkpoint)?;
    let result = exp.evaluate(&ck.params, split, ood)?;
    let dir = out.unwrap_or_else(|| {
        let suffix = if ood { "-ood" } else { "" };
        cfg.output_dir
            .join(format!("eval-{}-{}{suffix}", ck.header.stage, split.as_str()))
    });
    let report = serde_json::to_string_pretty(&result.report).expect("report is plain data");
    write(&dir.join("report.json"), report + "\n")?;
    write(
        &dir.join("reliability.csv"),
        stamp(&exp.hash, cfg.seed) + &result.report.reliability.to_csv(),
    )?;
    write(&dir.join("scatter.csv"), scatter_csv(&result.id, &exp.hash, cfg.seed))?;
    let maps = dir.join("maps");
    fs::create_dir_all(&maps).map_err(|e| RunError::io(&maps, e))?;
    let mut sets = vec![("", &result.id)];
    if let Some(o) = &result.ood {
        write(&dir.join("scatter_ood.csv"), scatter_csv(o, &exp.hash, cfg.seed))?;
        sets.push(("ood_", o));
    }
    for (prefix, set) in sets {
        let plane = set.plane();
        for i in 0..set.images {
            let r = i * plane..(i + 1) * plane;
            write_map(&maps.join(format!("{prefix}aleatoric_{i:04}.png")), &set.aleatoric[r.clone()], set.width, set.height)?;
            write_map(&maps.join(format!("{prefix}epistemic_{i:04}.png")), &set.epistemic[r], set.width, set.height)?;
        }
    }
    Ok(dir)
}

/// Tunes and evaluates every grid cell, writing `ablation/summary.csv` and
/// each cell's tuning log.
pub fn cmd_ablation(
    config_path: &Path,
    checkpoint: &Path,
    sweep: &str,
    modes: &str,
    workers: usize,
) -> Result<PathBuf> {
    let cells = parse_grid(sweep, modes)?;
    let cfg = ExperimentConfig::load(config_path)?;
    let exp = load_experiment(cfg)?;
    let cfg = &exp.config;
    let reference = load_checkpoint(&exp, checkpoint)?;
    let results = exp.sweep(&reference.params, &cells, workers)?;
    let dir = cfg.output_dir.join("ablation");
    for r in &results {
        let cell = dir.join(format!("{}-beta{}", r.row.mode, r.row.beta));
        write(&cell.join("tune_log.csv"), tune_log_csv(&r.log, &exp.hash, cfg.seed))?;
    }
    let rows: Vec<SweepRow> = results.into_iter().map(|r| r.row).collect();
    let path = dir.join("summary.csv");
    write(&path, summary_csv(&rows, &exp.hash, cfg.seed))?;
    Ok(path)
}
