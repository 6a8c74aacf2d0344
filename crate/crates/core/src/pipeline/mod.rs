//! Batch commands: data generation, training, evaluation, prediction,
//! ablation sweeps and plotting. Every command writes a manifest with the
//! config hash, the seed and a checksum per output file.

mod plot;
mod train;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use plot::{axis_range, cmd_plot, cmd_plot_scene, PlotError};
pub use train::{train_model, EpochLog};

use crate::config::{ConfigError, Modalities, RunConfig};
use crate::diffusion::DiffusionError;
use crate::encoder::EncoderError;
use crate::metrics::{evaluate, MetricsError, MetricsReport, PredictionSet};
use crate::model::{build_input, eval_seed, Model, ModelError};
use crate::rng;
use crate::runtime::{read_checkpoint, write_checkpoint, RuntimeError};
use crate::scenario::{load_dataset, make_dataset, save_dataset, Dataset, DatasetError, KindCounts, ScenarioError, Split};

pub const MANIFEST: &str = "manifest.toml";
pub const TRAIN_DATA: &str = "train.bin";
pub const TEST_DATA: &str = "test.bin";
pub const CHECKPOINT_BEST: &str = "checkpoint_best.ckpt";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TIMING: &str = "timing.csv";
pub const REPORT: &str = "report.csv";
pub const SUMMARY: &str = "summary.txt";
pub const PREDICTIONS: &str = "predictions.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint kept")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset {path} was generated with a different scenario config; regenerate it")]
    StaleData { path: PathBuf },
    #[error("item {item} out of range ({len} test samples)")]
    ItemRange { item: usize, len: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<(), PipelineError> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(PipelineError::Exists(p.clone())),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Output file name to SHA-256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(ConfigError::Parse(e)))
    }
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, files: &[&str]) -> Result<Manifest, PipelineError> {
    let mut sums = BTreeMap::new();
    for f in files {
        sums.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    let m = Manifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: sums,
    };
    write_file(&dir.join(MANIFEST), toml::to_string(&m).expect("manifest serializes").as_bytes())?;
    Ok(m)
}

pub fn dataset_seed(cfg: &RunConfig) -> u64 {
    rng::derive_seed(cfg.seed, &[0xDA7A])
}

/// Writes `train.bin` and `test.bin` into `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    refuse_existing(&[out.join(TRAIN_DATA), out.join(TEST_DATA)], force)?;
    let seed = dataset_seed(cfg);
    let scen = &cfg.data.scenario;
    let train = make_dataset(&KindCounts::uniform(cfg.data.train_samples), Split::Train, scen, seed)?;
    let test = make_dataset(&KindCounts::uniform(cfg.data.test_samples), Split::Test, scen, seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    save_dataset(&train, &out.join(TRAIN_DATA))?;
    save_dataset(&test, &out.join(TEST_DATA))?;
    write_manifest(out, "gen-data", cfg, &[TRAIN_DATA, TEST_DATA])
}

pub fn load_split(cfg: &RunConfig, data_dir: &Path, split: Split) -> Result<Dataset, PipelineError> {
    let path = data_dir.join(match split {
        Split::Train => TRAIN_DATA,
        Split::Test => TEST_DATA,
    });
    let ds = load_dataset(&path)?;
    if ds.config != cfg.data.scenario {
        return Err(PipelineError::StaleData { path });
    }
    Ok(ds)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub manifest: Manifest,
}

fn train_log_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,l_diffusion,l_road,l_total\n");
    for l in logs {
        writeln!(s, "{},{:.9e},{:.9e},{:.9e},{:.9e}", l.epoch, l.learning_rate, l.diffusion, l.road, l.total).unwrap();
    }
    s
}

/// Trains on `data_dir/train.bin`; writes checkpoints and logs into `out`.
/// The final checkpoint is rewritten after every epoch, so an aborted run
/// leaves the last finite one behind.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path, force: bool) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    refuse_existing(&[out.join(CHECKPOINT_FINAL), out.join(CHECKPOINT_BEST)], force)?;
    let ds = load_split(cfg, data_dir, Split::Train)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut logs_so_far = Vec::new();
    let mut timing = String::from("epoch,seconds\n");
    let mut best = (f64::INFINITY, 0);
    let mut clock = Instant::now();
    let result = train_model(cfg, &ds, |log, model| {
        if !model.store.is_finite() {
            return Err(PipelineError::NonFiniteLoss {
                epoch: log.epoch,
                batch: 0,
            });
        }
        logs_so_far.push(*log);
        writeln!(timing, "{},{:.3}", log.epoch, clock.elapsed().as_secs_f64()).unwrap();
        clock = Instant::now();
        write_checkpoint(&out.join(CHECKPOINT_FINAL), &model.store)?;
        if log.total < best.0 {
            best = (log.total, log.epoch);
            write_checkpoint(&out.join(CHECKPOINT_BEST), &model.store)?;
        }
        write_file(&out.join(TRAIN_LOG), train_log_csv(&logs_so_far).as_bytes())?;
        write_file(&out.join(TIMING), timing.as_bytes())
    });
    let (_, logs) = result?;
    let manifest = write_manifest(out, "train", cfg, &[CHECKPOINT_BEST, CHECKPOINT_FINAL, TRAIN_LOG, "config.toml"])?;
    Ok(TrainOutcome {
        logs,
        best_epoch: best.1,
        manifest,
    })
}

pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model, PipelineError> {
    Ok(Model::from_store(cfg, read_checkpoint(checkpoint)?)?)
}

/// Candidate sets for the chosen test items, sampled in parallel and
/// merged in item order. Seconds per item are returned alongside.
pub fn predict_sets(
    model: &Model,
    cfg: &RunConfig,
    test: &Dataset,
    items: &[usize],
    k: usize,
    modalities: Modalities,
) -> Result<Vec<(PredictionSet, f64)>, PipelineError> {
    let seed = eval_seed(cfg);
    items
        .par_iter()
        .map(|&i| {
            let s = test.samples.get(i).ok_or(PipelineError::ItemRange {
                item: i,
                len: test.len(),
            })?;
            let start = Instant::now();
            let x = build_input(s, cfg, modalities)?;
            let c = model.condition(&[&x])?.remove(0);
            let cands = model.sample(&c, k, seed, i as u64)?;
            let secs = start.elapsed().as_secs_f64();
            Ok((PredictionSet::new(cands, s.future.clone())?, secs))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub seconds: Vec<f64>,
    pub head_evaluations: u64,
    pub manifest: Manifest,
}

pub fn cmd_eval(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, out: &Path, force: bool) -> Result<EvalOutcome, PipelineError> {
    cfg.validate()?;
    refuse_existing(&[out.join(REPORT)], force)?;
    let model = load_model(cfg, checkpoint)?;
    let test = load_split(cfg, data_dir, Split::Test)?;
    let items: Vec<usize> = (0..test.len()).collect();
    let rows = predict_sets(&model, cfg, &test, &items, cfg.diffusion.candidates, cfg.train.modalities)?;
    let (sets, seconds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let report = evaluate(&sets, &cfg.eval)?;

    let mut timing = String::from("sample,seconds\n");
    for (i, s) in seconds.iter().enumerate() {
        writeln!(timing, "{i},{s:.6}").unwrap();
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join(REPORT), report.to_csv().as_bytes())?;
    write_file(&out.join(SUMMARY), format!("{}\n", report.summary()).as_bytes())?;
    write_file(&out.join(TIMING), timing.as_bytes())?;
    let manifest = write_manifest(out, "eval", cfg, &[REPORT, SUMMARY])?;
    Ok(EvalOutcome {
        report,
        seconds,
        head_evaluations: model.encoder.head_evaluations(),
        manifest,
    })
}

#[derive(Clone, Debug)]
pub struct PredictOutcome {
    pub path: PathBuf,
    pub head_evaluations: u64,
    pub manifest: Manifest,
}

fn push_rows(out: &mut String, item: usize, kind: &str, index: usize, pts: &[(f64, f64)]) {
    for (step, (x, y)) in pts.iter().enumerate() {
        writeln!(out, "{item},{kind},{index},{step},{x:.6},{y:.6}").unwrap();
    }
}

/// Writes route, history, ground truth and K candidates per item as one
/// long CSV table.
pub fn cmd_predict(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    items: Option<&[usize]>,
    force: bool,
) -> Result<PredictOutcome, PipelineError> {
    cfg.validate()?;
    let path = out.join(PREDICTIONS);
    refuse_existing(std::slice::from_ref(&path), force)?;
    let model = load_model(cfg, checkpoint)?;
    let test = load_split(cfg, data_dir, Split::Test)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let items = items.unwrap_or(&all);
    let rows = predict_sets(&model, cfg, &test, items, cfg.diffusion.candidates, cfg.train.modalities)?;

    let mut csv = String::from("item,kind,index,step,x,y\n");
    for (&i, (set, _)) in items.iter().zip(&rows) {
        let s = &test.samples[i];
        push_rows(&mut csv, i, "route", 0, s.route.waypoints());
        push_rows(&mut csv, i, "history", 0, s.history.waypoints());
        push_rows(&mut csv, i, "ground_truth", 0, set.ground_truth().waypoints());
        for (j, c) in set.candidates().iter().enumerate() {
            push_rows(&mut csv, i, "candidate", j, c.waypoints());
        }
    }
    write_file(&path, csv.as_bytes())?;
    let manifest = write_manifest(out, "predict", cfg, &[PREDICTIONS])?;
    Ok(PredictOutcome {
        path,
        head_evaluations: model.encoder.head_evaluations(),
        manifest,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Steps,
    Samples,
    Modalities,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Steps => "steps",
            Axis::Samples => "samples",
            Axis::Modalities => "modalities",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "steps" => Some(Axis::Steps),
            "samples" => Some(Axis::Samples),
            "modalities" => Some(Axis::Modalities),
            _ => None,
        }
    }

    pub fn default_points(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Steps => &["5", "10", "20"],
            Axis::Samples => &["1", "2", "4", "8"],
            Axis::Modalities => &["L", "L+M", "L+M+H"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub config_hash: String,
    /// `None` when the point's checkpoint is missing.
    pub metrics: Option<crate::metrics::SampleMetrics>,
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub axis: Axis,
    /// Subset of sweep points; all of them when `None`.
    pub points: Option<Vec<String>>,
    /// Train checkpoints that do not exist yet instead of reporting them
    /// as missing.
    pub train_missing: bool,
    pub force: bool,
}

pub fn sweep_file(axis: Axis) -> String {
    format!("sweep_{}.csv", axis.name())
}

/// Training directory for one sweep configuration under `out`.
pub fn run_dir(out: &Path, cfg: &RunConfig) -> PathBuf {
    out.join("runs").join(&cfg.hash()[..16])
}

fn point_config(base: &RunConfig, axis: Axis, value: &str) -> Result<RunConfig, ConfigError> {
    let bad = || ConfigError::Range(format!("unknown {} sweep point `{value}`", axis.name()));
    let mut cfg = base.clone();
    match axis {
        Axis::Steps => cfg.diffusion.steps = value.parse().map_err(|_| bad())?,
        Axis::Samples => {
            value.parse::<usize>().ok().filter(|&k| k >= 1).ok_or_else(bad)?;
        }
        Axis::Modalities => {
            cfg.train.modalities = match value {
                "L" => Modalities::LIDAR,
                "L+M" => Modalities::LIDAR_ROUTE,
                "L+M+H" => Modalities::ALL,
                _ => return Err(bad()),
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_checkpoint(cfg: &RunConfig, data_dir: &Path, out: &Path, train_missing: bool) -> Result<Option<PathBuf>, PipelineError> {
    let dir = run_dir(out, cfg);
    let ckpt = dir.join(CHECKPOINT_FINAL);
    let complete = dir.join(MANIFEST).exists() && ckpt.exists();
    if complete {
        return Ok(Some(ckpt));
    }
    if !train_missing {
        return Ok(None);
    }
    cmd_train(cfg, data_dir, &dir, true)?;
    Ok(Some(ckpt))
}

fn sweep_csv(axis: Axis, rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,config_hash,status,fde,min_ade,hit_rate,hausdorff\n");
    for r in rows {
        match &r.metrics {
            Some(m) => writeln!(
                s,
                "{},{},{},ok,{:.9},{:.9},{:.6},{:.9}",
                axis.name(),
                r.value,
                r.config_hash,
                m.fde,
                m.min_ade,
                m.hit,
                m.hausdorff
            ),
            None => writeln!(s, "{},{},{},missing,,,,", axis.name(), r.value, r.config_hash),
        }
        .unwrap();
    }
    s
}

/// One row per sweep point. Steps and modalities retrain per point; the
/// samples axis scores nested prefixes of one set of draws.
pub fn cmd_ablate(base: &RunConfig, data_dir: &Path, out: &Path, opts: &AblateOptions) -> Result<Vec<SweepRow>, PipelineError> {
    base.validate()?;
    let axis = opts.axis;
    let file = sweep_file(axis);
    refuse_existing(&[out.join(&file)], opts.force)?;
    let points = opts.points.clone().unwrap_or_else(|| axis.default_points());
    let configs = points
        .iter()
        .map(|p| point_config(base, axis, p))
        .collect::<Result<Vec<_>, _>>()?;
    let test = load_split(base, data_dir, Split::Test)?;
    let items: Vec<usize> = (0..test.len()).collect();
    let mut rows = Vec::with_capacity(points.len());

    match axis {
        Axis::Samples => {
            let ks: Vec<usize> = points.iter().map(|p| p.parse().expect("validated")).collect();
            let hash = base.hash();
            match ensure_checkpoint(base, data_dir, out, opts.train_missing)? {
                None => rows.extend(points.iter().map(|p| SweepRow {
                    value: p.clone(),
                    config_hash: hash.clone(),
                    metrics: None,
                })),
                Some(ckpt) => {
                    let model = load_model(base, &ckpt)?;
                    let kmax = ks.iter().copied().max().unwrap_or(1);
                    let full = predict_sets(&model, base, &test, &items, kmax, base.train.modalities)?;
                    for (p, &k) in points.iter().zip(&ks) {
                        let sets = full.iter().map(|(s, _)| s.prefix(k)).collect::<Result<Vec<_>, _>>()?;
                        rows.push(SweepRow {
                            value: p.clone(),
                            config_hash: hash.clone(),
                            metrics: Some(evaluate(&sets, &base.eval)?.mean),
                        });
                    }
                }
            }
        }
        Axis::Steps | Axis::Modalities => {
            for (p, cfg) in points.iter().zip(&configs) {
                let metrics = match ensure_checkpoint(cfg, data_dir, out, opts.train_missing)? {
                    None => None,
                    Some(ckpt) => {
                        let model = load_model(cfg, &ckpt)?;
                        let sets = predict_sets(&model, cfg, &test, &items, cfg.diffusion.candidates, cfg.train.modalities)?;
                        let sets: Vec<_> = sets.into_iter().map(|(s, _)| s).collect();
                        Some(evaluate(&sets, &cfg.eval)?.mean)
                    }
                };
                rows.push(SweepRow {
                    value: p.clone(),
                    config_hash: cfg.hash(),
                    metrics,
                });
            }
        }
    }
    write_file(&out.join(&file), sweep_csv(axis, &rows).as_bytes())?;
    write_manifest(out, &format!("ablate-{}", axis.name()), base, &[&file])?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::GridSpec;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.grid = GridSpec {
            height: 32,
            width: 32,
            cell_size: 2.0,
            ego_row: 24,
            ego_col: 16,
        };
        c.data.train_samples = 8;
        c.data.test_samples = 5;
        c.model.width = 4;
        c.model.time_dim = 8;
        c.diffusion.steps = 3;
        c.train.epochs = 2;
        c.train.batch_size = 4;
        c
    }

    #[test]
    fn gen_data_refuses_then_overwrites_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let m1 = cmd_gen_data(&cfg, dir.path(), false).unwrap();
        assert!(matches!(cmd_gen_data(&cfg, dir.path(), false), Err(PipelineError::Exists(_))));
        let m2 = cmd_gen_data(&cfg, dir.path(), true).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(load_split(&cfg, dir.path(), Split::Train).unwrap().len(), 8);
        let mut other = cfg.clone();
        other.data.scenario.jitter_sigma = 0.1;
        assert!(matches!(load_split(&other, dir.path(), Split::Test), Err(PipelineError::StaleData { .. })));
    }

    #[test]
    fn train_eval_predict_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        cmd_gen_data(&cfg, dir.path(), false).unwrap();
        let run = dir.path().join("run");
        let t = cmd_train(&cfg, dir.path(), &run, false).unwrap();
        assert_eq!(t.logs.len(), 2);
        assert!(matches!(cmd_train(&cfg, dir.path(), &run, false), Err(PipelineError::Exists(_))));
        let ckpt = run.join(CHECKPOINT_FINAL);
        let e = cmd_eval(&cfg, dir.path(), &ckpt, &dir.path().join("eval"), false).unwrap();
        assert_eq!(e.report.n(), 5);
        assert_eq!(e.head_evaluations, 0);
        assert!(e.seconds.iter().all(|&s| s > 0.0));
        let p = cmd_predict(&cfg, dir.path(), &ckpt, &dir.path().join("pred"), Some(&[1, 3]), false).unwrap();
        let text = fs::read_to_string(&p.path).unwrap();
        let cands = text
            .lines()
            .filter(|l| {
                let f: Vec<&str> = l.split(',').collect();
                f[1] == "candidate" && f[3] == "0"
            })
            .count();
        assert_eq!(cands, 2 * cfg.diffusion.candidates);

        let mut wide = cfg.clone();
        wide.model.width = 6;
        assert!(matches!(load_model(&wide, &ckpt), Err(PipelineError::Model(ModelError::Mismatch(_)))));
    }

    #[test]
    fn ablate_reports_missing_points() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        cmd_gen_data(&cfg, dir.path(), false).unwrap();
        let opts = AblateOptions {
            axis: Axis::Steps,
            points: None,
            train_missing: false,
            force: false,
        };
        let rows = cmd_ablate(&cfg, dir.path(), dir.path(), &opts).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.metrics.is_none()));
        let text = fs::read_to_string(dir.path().join("sweep_steps.csv")).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains(",missing,")).count(), 3);
    }

    #[test]
    fn samples_axis_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        cmd_gen_data(&cfg, dir.path(), false).unwrap();
        let opts = AblateOptions {
            axis: Axis::Samples,
            points: None,
            train_missing: true,
            force: false,
        };
        let rows = cmd_ablate(&cfg, dir.path(), dir.path(), &opts).unwrap();
        let ade: Vec<f64> = rows.iter().map(|r| r.metrics.unwrap().min_ade).collect();
        assert_eq!(ade.len(), 4);
        assert!(ade.windows(2).all(|w| w[1] <= w[0]));
    }
}
