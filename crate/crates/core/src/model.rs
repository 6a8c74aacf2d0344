//! Encoder and denoiser sharing one parameter store, plus the input
//! pipeline that turns a scenario into network tensors.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bev::{assemble_input, rasterize_history, rasterize_lidar, rasterize_route, BevError, BevGrid};
use crate::config::{Modalities, RunConfig};
use crate::diffusion::{denormalize, normalize, sample_chains, Denoiser, DenoiserConfig, DiffusionError, NoiseSchedule};
use crate::encoder::{rasterize_gt_road_mask, Encoder, EncoderError};
use crate::rng;
use crate::runtime::{Graph, ParamStore, RuntimeError, ShapeDisplay, Tensor};
use crate::scenario::ScenarioSample;
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error("checkpoint does not match the config:\n{0}")]
    Mismatch(ParamDiff),
}

/// Field-level differences between two parameter layouts.
#[derive(Debug, Default, PartialEq)]
pub struct ParamDiff {
    pub lines: Vec<String>,
}

impl fmt::Display for ParamDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "  {l}")?;
        }
        Ok(())
    }
}

pub fn param_diff(expected: &ParamStore, found: &ParamStore) -> ParamDiff {
    let shapes = |s: &ParamStore| -> BTreeMap<String, Vec<usize>> { s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect() };
    let (e, f) = (shapes(expected), shapes(found));
    let mut lines = Vec::new();
    for (name, shape) in &e {
        match f.get(name) {
            None => lines.push(format!("{name}: missing (expected {})", ShapeDisplay(shape))),
            Some(got) if got != shape => lines.push(format!("{name}: expected {}, found {}", ShapeDisplay(shape), ShapeDisplay(got))),
            _ => {}
        }
    }
    for (name, shape) in &f {
        if !e.contains_key(name) {
            lines.push(format!("{name}: unexpected {}", ShapeDisplay(shape)));
        }
    }
    ParamDiff { lines }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub scale: f64,
}

fn denoiser_config(cfg: &RunConfig, cond_len: usize) -> DenoiserConfig {
    DenoiserConfig {
        horizon: cfg.data.scenario.future_len,
        time_dim: cfg.model.time_dim,
        cond_len,
        width: cfg.model.width,
    }
}

impl Model {
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, &cfg.grid, &mut rng)?;
        let denoiser = Denoiser::register(&mut store, denoiser_config(cfg, encoder.cond_len()), &mut rng)?;
        Ok(Self {
            store,
            encoder,
            denoiser,
            schedule: NoiseSchedule::new(cfg.diffusion.steps, cfg.diffusion.schedule)?,
            scale: cfg.model.scale,
        })
    }

    /// Wraps loaded parameters, rejecting any layout that differs from
    /// what `cfg` would build.
    pub fn from_store(cfg: &RunConfig, store: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::init(cfg, 0)?;
        let diff = param_diff(&reference.store, &store);
        if !diff.lines.is_empty() {
            return Err(ModelError::Mismatch(diff));
        }
        let encoder = Encoder::bind(&store, &cfg.grid)?;
        let denoiser = Denoiser::bind(&store, denoiser_config(cfg, encoder.cond_len()))?;
        Ok(Self {
            store,
            encoder,
            denoiser,
            schedule: reference.schedule,
            scale: cfg.model.scale,
        })
    }

    /// Conditioning vectors for a batch of prepared inputs; the
    /// segmentation head is not evaluated.
    pub fn condition(&self, inputs: &[&BevGrid]) -> Result<Vec<Vec<f64>>, ModelError> {
        let grid = self.encoder.grid();
        let mut data = Vec::with_capacity(inputs.len() * 5 * grid.cells());
        for g in inputs {
            data.extend_from_slice(g.data());
        }
        let mut graph = Graph::new();
        let x = graph.input(&Tensor::new(vec![inputs.len(), 5, grid.height, grid.width], data)?)?;
        let c = self.encoder.encode_condition(&mut graph, &self.store, x)?;
        let len = self.encoder.cond_len();
        Ok(graph.value(c).chunks(len).map(<[f64]>::to_vec).collect())
    }

    /// `k` candidate futures for one conditioning vector. Candidate `j`
    /// draws its noise from a stream keyed by `(seed, item, j)`, so the
    /// first `k` candidates do not depend on how many are requested.
    pub fn sample(&self, c: &[f64], k: usize, seed: u64, item: u64) -> Result<Vec<Trajectory>, ModelError> {
        let len = 2 * self.denoiser.config.horizon;
        let chains = sample_chains(k, len, &self.schedule, seed, &[item], |chains, t| {
            let n = chains.len();
            self.denoiser.predict_noise(&self.store, chains, &vec![t; n], &vec![c.to_vec(); n])
        })?;
        chains.iter().map(|ch| Ok(denormalize(ch, self.scale)?)).collect()
    }

    pub fn normalize(&self, traj: &Trajectory) -> Vec<f64> {
        normalize(traj, self.scale)
    }
}

/// Input raster for one scenario, with masked modalities zeroed.
pub fn build_input(sample: &ScenarioSample, cfg: &RunConfig, modalities: Modalities) -> Result<BevGrid, ModelError> {
    let lidar = rasterize_lidar(&sample.cloud, &cfg.grid, &cfg.lidar)?.grid;
    let mut history = rasterize_history(&sample.history, &cfg.grid)?;
    let mut route = rasterize_route(&sample.route, &cfg.grid, cfg.model.route_halfwidth)?;
    if !modalities.history {
        history.channel_mut(0).fill(0.0);
    }
    if !modalities.route {
        route.channel_mut(0).fill(0.0);
    }
    Ok(assemble_input(&lidar, &history, &route)?)
}

pub fn build_mask(sample: &ScenarioSample, cfg: &RunConfig) -> Result<BevGrid, ModelError> {
    Ok(rasterize_gt_road_mask(&sample.future, &cfg.grid, cfg.model.mask_halfwidth)?)
}

/// Seed for everything random inside one evaluation pass.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    rng::derive_seed(cfg.seed, &[0xE7A1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioKind};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.grid = crate::bev::GridSpec {
            height: 32,
            width: 32,
            cell_size: 2.0,
            ego_row: 24,
            ego_col: 16,
        };
        c.model.width = 4;
        c.diffusion.steps = 3;
        c
    }

    #[test]
    fn layout_mismatch_is_reported_per_field() {
        let cfg = tiny();
        let m = Model::init(&cfg, 1).unwrap();
        let mut other = cfg.clone();
        other.model.width = 5;
        let err = Model::from_store(&other, m.store.clone()).unwrap_err();
        let ModelError::Mismatch(diff) = err else { panic!("expected mismatch") };
        assert!(diff.lines.iter().any(|l| l.starts_with("den.down1.w: expected [5, 2, 3]")));
        assert!(Model::from_store(&cfg, m.store).is_ok());
    }

    #[test]
    fn sampling_is_nested_and_deterministic() {
        let cfg = tiny();
        let m = Model::init(&cfg, 2).unwrap();
        let s = generate_scenario(ScenarioKind::CurveLeft, 3, &cfg.data.scenario).unwrap();
        let x = build_input(&s, &cfg, Modalities::ALL).unwrap();
        let c = &m.condition(&[&x]).unwrap()[0];
        let five = m.sample(c, 5, 9, 0).unwrap();
        assert_eq!(five, m.sample(c, 5, 9, 0).unwrap());
        let two = m.sample(c, 2, 9, 0).unwrap();
        assert_eq!(&five[..2], &two[..]);
        assert_ne!(five[0], five[1]);
        assert_ne!(five, m.sample(c, 5, 9, 1).unwrap());
        assert_eq!(m.encoder.head_evaluations(), 0);
    }

    #[test]
    fn masked_modalities_are_zero() {
        let cfg = tiny();
        let s = generate_scenario(ScenarioKind::Straight, 3, &cfg.data.scenario).unwrap();
        let full = build_input(&s, &cfg, Modalities::ALL).unwrap();
        let lidar = build_input(&s, &cfg, Modalities::LIDAR).unwrap();
        assert!(full.count_set(3) > 0 && full.count_set(4) > 0);
        assert_eq!((lidar.count_set(3), lidar.count_set(4)), (0, 0));
        assert_eq!(full.channel(0), lidar.channel(0));
    }
}
