//! Displacement and set-distance metrics for multi-candidate predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::dist;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction set has no candidates")]
    NoCandidates,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("candidate has {got} waypoints, ground truth has {expected}")]
    Horizon { expected: usize, got: usize },
    #[error("hit threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("no prediction sets to evaluate")]
    NoSets,
    #[error("sample {index} has {got} candidates, expected {expected}")]
    CandidateCount { index: usize, expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    candidates: Vec<Trajectory>,
    ground_truth: Trajectory,
}

impl PredictionSet {
    pub fn new(candidates: Vec<Trajectory>, ground_truth: Trajectory) -> Result<Self, MetricsError> {
        if candidates.is_empty() {
            return Err(MetricsError::NoCandidates);
        }
        for c in &candidates {
            if c.len() != ground_truth.len() {
                return Err(MetricsError::Horizon {
                    expected: ground_truth.len(),
                    got: c.len(),
                });
            }
        }
        Ok(Self {
            candidates,
            ground_truth,
        })
    }

    pub fn candidates(&self) -> &[Trajectory] {
        &self.candidates
    }

    pub fn ground_truth(&self) -> &Trajectory {
        &self.ground_truth
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    /// The first `k` candidates against the same ground truth.
    pub fn prefix(&self, k: usize) -> Result<Self, MetricsError> {
        Self::new(self.candidates[..k.min(self.k())].to_vec(), self.ground_truth.clone())
    }
}

fn check_pair(a: &Trajectory, b: &Trajectory) -> Result<(), MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    if a.len() != b.len() {
        return Err(MetricsError::Horizon {
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(())
}

/// Distance between final waypoints.
pub fn fde(candidate: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    check_pair(candidate, gt)?;
    Ok(dist(candidate.last(), gt.last()))
}

/// Mean waypoint error.
pub fn ade(candidate: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    check_pair(candidate, gt)?;
    let sum: f64 = candidate.waypoints().iter().zip(gt.waypoints()).map(|(&a, &b)| dist(a, b)).sum();
    Ok(sum / gt.len() as f64)
}

/// Worst waypoint error.
pub fn max_error(candidate: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    check_pair(candidate, gt)?;
    Ok(candidate
        .waypoints()
        .iter()
        .zip(gt.waypoints())
        .map(|(&a, &b)| dist(a, b))
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FdeMode {
    #[default]
    MinOverCandidates,
    MeanOverCandidates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffMode {
    /// Hausdorff distance of the candidate selected by minADE.
    #[default]
    BestAde,
    MinOverCandidates,
}

pub fn set_fde(set: &PredictionSet, mode: FdeMode) -> Result<f64, MetricsError> {
    let vals = set
        .candidates
        .iter()
        .map(|c| fde(c, &set.ground_truth))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match mode {
        FdeMode::MinOverCandidates => vals.into_iter().fold(f64::INFINITY, f64::min),
        FdeMode::MeanOverCandidates => vals.iter().sum::<f64>() / vals.len() as f64,
    })
}

/// `(minADE, argmin)`; ties keep the lowest index.
pub fn min_ade_with_index(set: &PredictionSet) -> Result<(f64, usize), MetricsError> {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in set.candidates.iter().enumerate() {
        let a = ade(c, &set.ground_truth)?;
        if a < best.0 {
            best = (a, i);
        }
    }
    Ok(best)
}

pub fn min_ade(set: &PredictionSet) -> Result<f64, MetricsError> {
    min_ade_with_index(set).map(|(v, _)| v)
}

/// Whether some candidate keeps every waypoint strictly within `d`.
pub fn is_hit(set: &PredictionSet, d: f64) -> Result<bool, MetricsError> {
    if !(d > 0.0) {
        return Err(MetricsError::Threshold(d));
    }
    let mut best = f64::INFINITY;
    for c in &set.candidates {
        best = best.min(max_error(c, &set.ground_truth)?);
    }
    Ok(best < d)
}

pub fn hit_rate(sets: &[PredictionSet], d: f64) -> Result<f64, MetricsError> {
    if !(d > 0.0) {
        return Err(MetricsError::Threshold(d));
    }
    if sets.is_empty() {
        return Err(MetricsError::NoSets);
    }
    let mut hits = 0usize;
    for s in sets {
        hits += usize::from(is_hit(s, d)?);
    }
    Ok(hits as f64 / sets.len() as f64)
}

fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter()
        .map(|&p| b.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between the two waypoint sets.
pub fn hausdorff(a: &Trajectory, b: &Trajectory) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    Ok(directed(a.waypoints(), b.waypoints()).max(directed(b.waypoints(), a.waypoints())))
}

pub fn set_hausdorff(set: &PredictionSet, mode: HausdorffMode) -> Result<f64, MetricsError> {
    match mode {
        HausdorffMode::BestAde => {
            let (_, i) = min_ade_with_index(set)?;
            hausdorff(&set.candidates[i], &set.ground_truth)
        }
        HausdorffMode::MinOverCandidates => {
            let mut best = f64::INFINITY;
            for c in &set.candidates {
                best = best.min(hausdorff(c, &set.ground_truth)?);
            }
            Ok(best)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub hit_threshold: f64,
    #[serde(default)]
    pub fde_mode: FdeMode,
    #[serde(default)]
    pub hausdorff_mode: HausdorffMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            hit_threshold: 2.0,
            fde_mode: FdeMode::default(),
            hausdorff_mode: HausdorffMode::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub fde: f64,
    pub min_ade: f64,
    /// 1.0 for a hit, 0.0 otherwise; its mean is the hit rate.
    pub hit: f64,
    pub hausdorff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub k: usize,
    pub config: MetricsConfig,
    pub rows: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

impl MetricsReport {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// One row per sample, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,fde,min_ade,hit,hausdorff\n");
        let mut row = |label: &str, m: &SampleMetrics| {
            writeln!(out, "{label},{:.9},{:.9},{:.6},{:.9}", m.fde, m.min_ade, m.hit, m.hausdorff).unwrap();
        };
        for (i, r) in self.rows.iter().enumerate() {
            row(&i.to_string(), r);
        }
        row("mean", &self.mean);
        out
    }

    /// FDE, minADE, HitRate, HD on one line.
    pub fn summary(&self) -> String {
        format!(
            "FDE {:.3} m | minADE_{k} {:.3} m | HitRate_{k},{d} {:.3} | HD {:.3} m | N = {n}",
            self.mean.fde,
            self.mean.min_ade,
            self.mean.hit,
            self.mean.hausdorff,
            k = self.k,
            d = self.config.hit_threshold,
            n = self.n(),
        )
    }
}

pub fn score(set: &PredictionSet, cfg: &MetricsConfig) -> Result<SampleMetrics, MetricsError> {
    Ok(SampleMetrics {
        fde: set_fde(set, cfg.fde_mode)?,
        min_ade: min_ade(set)?,
        hit: if is_hit(set, cfg.hit_threshold)? { 1.0 } else { 0.0 },
        hausdorff: set_hausdorff(set, cfg.hausdorff_mode)?,
    })
}

pub fn evaluate(sets: &[PredictionSet], cfg: &MetricsConfig) -> Result<MetricsReport, MetricsError> {
    let first = sets.first().ok_or(MetricsError::NoSets)?;
    let k = first.k();
    for (index, s) in sets.iter().enumerate() {
        if s.k() != k {
            return Err(MetricsError::CandidateCount {
                index,
                expected: k,
                got: s.k(),
            });
        }
    }
    let rows = sets.iter().map(|s| score(s, cfg)).collect::<Result<Vec<_>, _>>()?;
    let n = rows.len() as f64;
    let mean_of = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = SampleMetrics {
        fde: mean_of(|r| r.fde),
        min_ade: mean_of(|r| r.min_ade),
        hit: mean_of(|r| r.hit),
        hausdorff: mean_of(|r| r.hausdorff),
    };
    Ok(MetricsReport {
        k,
        config: *cfg,
        rows,
        mean,
    })
}
