//! Ground-truth distance computation for the coordinate-distance task.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default correctness threshold for claimed distances, in meters.
pub const DISTANCE_TOLERANCE_M: f64 = 0.5;

/// Absorbs binary representation noise when comparing decimal inputs such
/// as `10.6 - 10.1` against the threshold. Far below any reported precision.
const REPRESENTATION_SLACK_M: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate in point ({x}, {y})")]
    NonFinite { x: f64, y: f64 },
}

/// A point in a shared planar frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn check(&self) -> Result<(), GeometryError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::NonFinite { x: self.x, y: self.y })
        }
    }
}

/// Euclidean distance between two points.
///
/// Uses `hypot` so that large coordinates do not overflow the intermediate
/// sum of squares.
pub fn pythagorean_distance(a: Point2D, b: Point2D) -> Result<f64, GeometryError> {
    a.check()?;
    b.check()?;
    Ok((a.x - b.x).hypot(a.y - b.y))
}

/// Outcome of comparing a claimed distance with the reference value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correctness {
    Correct,
    Incorrect,
}

impl Correctness {
    pub fn is_correct(self) -> bool {
        matches!(self, Correctness::Correct)
    }
}

/// A claim is correct when its absolute error is not more than `tol`.
/// The boundary is inclusive.
pub fn within_tolerance(claimed: f64, truth: f64, tol: f64) -> Correctness {
    debug_assert!(tol > 0.0);
    if (claimed - truth).abs() <= tol + REPRESENTATION_SLACK_M {
        Correctness::Correct
    } else {
        Correctness::Incorrect
    }
}
