use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory has no waypoints")]
    Empty,
    #[error("waypoint {0} is not finite")]
    NonFinite(usize),
    #[error("expected {expected} waypoints, got {got}")]
    Length { expected: usize, got: usize },
}

/// Ordered `(x, y)` waypoints in the ego frame, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    waypoints: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<(f64, f64)>) -> Result<Self, TrajectoryError> {
        if waypoints.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        if let Some(i) = waypoints.iter().position(|p| !(p.0.is_finite() && p.1.is_finite())) {
            return Err(TrajectoryError::NonFinite(i));
        }
        Ok(Self { waypoints })
    }

    /// Builds from a flat `[x0, y0, x1, y1, ...]` buffer.
    pub fn from_flat(flat: &[f64]) -> Result<Self, TrajectoryError> {
        Self::new(flat.chunks_exact(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            waypoints: vec![(0.0, 0.0); len],
        }
    }

    pub fn waypoints(&self) -> &[(f64, f64)] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn last(&self) -> (f64, f64) {
        *self.waypoints.last().expect("trajectory is non-empty")
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            waypoints: self.waypoints.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
        }
    }
}
