//! Conditional DDPM over future waypoint sequences.
//!
//! Trajectories are handled as channel-first `[2, T_f]` buffers in
//! normalized units: the `x` row, then the `y` row. `gamma[t - 1]` is the
//! cumulative signal coefficient at step `t`, so
//! `q(tau_t | tau_0) = N(sqrt(gamma_t) tau_0, (1 - gamma_t) I)`.

mod denoiser;

pub use denoiser::{Denoiser, DenoiserConfig};

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::runtime::{Graph, RuntimeError, Tensor, Var};
use crate::trajectory::{Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion needs at least one step")]
    NoSteps,
    #[error("step {t} outside 1..={steps}")]
    StepRange { t: usize, steps: usize },
    #[error("noise draw is required for steps above 1")]
    MissingNoise,
    #[error("step 1 is deterministic; no noise draw allowed")]
    UnexpectedNoise,
    #[error("embedding dimension {0} must be even and positive")]
    EmbeddingDim(usize),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("need at least one candidate")]
    NoCandidates,
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("road loss weight must be finite and non-negative, got {0}")]
    RoadWeight(f64),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    gamma: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MIN_ALPHA: f64 = 0.001;

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::NoSteps);
        }
        let mut gamma = Vec::with_capacity(steps);
        let mut prev = 1.0;
        match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                for t in 1..=steps {
                    let g = (f(t as f64) / f0).max(MIN_ALPHA * prev);
                    gamma.push(g);
                    prev = g;
                }
            }
            ScheduleKind::Linear => {
                // The 1e-4..0.02 range of a 1000-step chain, rescaled to `steps`.
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(1.0 - MIN_ALPHA));
                for t in 0..steps {
                    let beta = if steps == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * t as f64 / (steps - 1) as f64
                    };
                    prev *= 1.0 - beta;
                    gamma.push(prev);
                }
            }
        }
        Ok(Self { kind, gamma })
    }

    pub fn steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// `gamma_t`, with `gamma_0 = 1`.
    pub fn gamma(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.gamma[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.gamma(t) / self.gamma(t - 1)
    }

    /// Posterior variance of the reverse step at `t`; zero at `t = 1`.
    pub fn sigma2(&self, t: usize) -> f64 {
        (1.0 - self.gamma(t - 1)) / (1.0 - self.gamma(t)) * (1.0 - self.alpha(t))
    }
}

/// Meters per normalized unit.
pub const DEFAULT_SCALE: f64 = 32.0;

/// Meters to the channel-first normalized layout.
pub fn normalize(traj: &Trajectory, scale: f64) -> Vec<f64> {
    let w = traj.waypoints();
    w.iter().map(|p| p.0 / scale).chain(w.iter().map(|p| p.1 / scale)).collect()
}

pub fn denormalize(flat: &[f64], scale: f64) -> Result<Trajectory, DiffusionError> {
    if flat.is_empty() || flat.len() % 2 != 0 {
        return Err(DiffusionError::Length {
            expected: 2 * (flat.len() / 2).max(1),
            got: flat.len(),
        });
    }
    let l = flat.len() / 2;
    Ok(Trajectory::new((0..l).map(|i| (flat[i] * scale, flat[l + i] * scale)).collect())?)
}

pub fn forward_diffuse(tau0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    if eps.len() != tau0.len() {
        return Err(DiffusionError::Length {
            expected: tau0.len(),
            got: eps.len(),
        });
    }
    let g = sched.gamma(t);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(tau0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Sinusoidal encoding laid out as `(sin(t w_0), cos(t w_0), sin(t w_1), ...)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>, DiffusionError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(DiffusionError::EmbeddingDim(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * j as f64 / dim as f64);
        let (s, c) = (t as f64 * w).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// One ancestral step from `tau_t` to `tau_{t-1}`.
pub fn reverse_step(
    tau_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    z: Option<&[f64]>,
) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    if eps_hat.len() != tau_t.len() {
        return Err(DiffusionError::Length {
            expected: tau_t.len(),
            got: eps_hat.len(),
        });
    }
    match (t, z) {
        (1, Some(_)) => return Err(DiffusionError::UnexpectedNoise),
        (t, None) if t > 1 => return Err(DiffusionError::MissingNoise),
        (_, Some(z)) if z.len() != tau_t.len() => {
            return Err(DiffusionError::Length {
                expected: tau_t.len(),
                got: z.len(),
            })
        }
        _ => {}
    }
    let alpha = sched.alpha(t);
    let k = (1.0 - alpha) / (1.0 - sched.gamma(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out: Vec<f64> = tau_t.iter().zip(eps_hat).map(|(x, e)| inv * (x - k * e)).collect();
    if let Some(z) = z {
        let sigma = sched.sigma2(t).sqrt();
        out.iter_mut().zip(z).for_each(|(o, z)| *o += sigma * z);
    }
    Ok(out)
}

pub fn standard_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Noised training batch: per-sample steps, noise, and `tau_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyBatch {
    pub steps: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
    pub tau_t: Vec<Vec<f64>>,
}

impl NoisyBatch {
    pub fn draw<R: Rng>(tau0: &[Vec<f64>], sched: &NoiseSchedule, rng: &mut R) -> Result<Self, DiffusionError> {
        if tau0.is_empty() {
            return Err(DiffusionError::Empty("batch"));
        }
        let mut out = Self {
            steps: Vec::with_capacity(tau0.len()),
            eps: Vec::with_capacity(tau0.len()),
            tau_t: Vec::with_capacity(tau0.len()),
        };
        for x in tau0 {
            let t = rng.random_range(1..=sched.steps());
            let eps = standard_normal(rng, x.len());
            out.tau_t.push(forward_diffuse(x, t, &eps, sched)?);
            out.steps.push(t);
            out.eps.push(eps);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Mean of `(eps - eps_hat)^2` over a batch; `predict(tau_t, t, i)` is the
/// denoiser applied to item `i`.
pub fn diffusion_loss<R, F>(tau0: &[Vec<f64>], sched: &NoiseSchedule, rng: &mut R, mut predict: F) -> Result<f64, DiffusionError>
where
    R: Rng,
    F: FnMut(&[f64], usize, usize) -> Vec<f64>,
{
    let batch = NoisyBatch::draw(tau0, sched, rng)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..batch.len() {
        let eps_hat = predict(&batch.tau_t[i], batch.steps[i], i);
        if eps_hat.len() != batch.eps[i].len() {
            return Err(DiffusionError::Length {
                expected: batch.eps[i].len(),
                got: eps_hat.len(),
            });
        }
        total += batch.eps[i].iter().zip(&eps_hat).map(|(e, h)| (e - h).powi(2)).sum::<f64>();
        count += eps_hat.len();
    }
    Ok(total / count as f64)
}

/// Graph form of the diffusion loss against constant noise targets.
pub fn diffusion_loss_graph(g: &mut Graph, eps_hat: Var, eps: &Tensor) -> Result<Var, DiffusionError> {
    let target = g.input(eps)?;
    let diff = g.sub(eps_hat, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq)?)
}

/// `L_diffusion + lambda * L_road`.
pub fn total_loss(g: &mut Graph, diffusion: Var, road: Var, lambda: f64) -> Result<Var, DiffusionError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DiffusionError::RoadWeight(lambda));
    }
    let weighted = g.scale(road, lambda);
    Ok(g.add(diffusion, weighted)?)
}

/// Scalar counterpart of [`total_loss`].
pub fn total_loss_value(diffusion: f64, road: f64, lambda: f64) -> Result<f64, DiffusionError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DiffusionError::RoadWeight(lambda));
    }
    Ok(diffusion + lambda * road)
}

/// Runs `k` independent reverse chains of `len` values. Chain `j` draws all
/// of its noise from `rng::stream(seed, [stream_tag..., j])`, so candidates
/// never share randomness. `predict(chains, t)` returns the noise estimate
/// for every chain, concatenated in order.
pub fn sample_chains<F>(
    k: usize,
    len: usize,
    sched: &NoiseSchedule,
    seed: u64,
    stream_tag: &[u64],
    mut predict: F,
) -> Result<Vec<Vec<f64>>, DiffusionError>
where
    F: FnMut(&[Vec<f64>], usize) -> Result<Vec<f64>, DiffusionError>,
{
    if k == 0 {
        return Err(DiffusionError::NoCandidates);
    }
    let mut rngs: Vec<_> = (0..k as u64)
        .map(|j| {
            let mut path = stream_tag.to_vec();
            path.push(j);
            rng::stream(seed, &path)
        })
        .collect();
    let mut chains: Vec<Vec<f64>> = rngs.iter_mut().map(|r| standard_normal(r, len)).collect();
    for t in (1..=sched.steps()).rev() {
        let eps_hat = predict(&chains, t)?;
        if eps_hat.len() != k * len {
            return Err(DiffusionError::Length {
                expected: k * len,
                got: eps_hat.len(),
            });
        }
        for (j, chain) in chains.iter_mut().enumerate() {
            let z = (t > 1).then(|| standard_normal(&mut rngs[j], len));
            *chain = reverse_step(chain, t, &eps_hat[j * len..(j + 1) * len], sched, z.as_deref())?;
        }
    }
    Ok(chains)
}
