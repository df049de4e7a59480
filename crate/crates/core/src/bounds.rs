use nalgebra::DVector;

use crate::error::{Error, Result};

/// Per-coordinate box `lower ≤ v ≤ upper`. Infinite entries mean unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Parameter(
                "box bounds need matching, non-empty lower and upper vectors".into(),
            ));
        }
        if lower
            .iter()
            .zip(upper.iter())
            .any(|(l, u)| l.is_nan() || u.is_nan() || l > u)
        {
            return Err(Error::Parameter(
                "box bounds must satisfy lower ≤ upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// `-limit ≤ v_i ≤ limit` in every coordinate.
    pub fn symmetric(dim: usize, limit: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(dim, -limit),
            DVector::from_element(dim, limit),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn is_finite(&self) -> bool {
        self.lower
            .iter()
            .chain(self.upper.iter())
            .all(|v| v.is_finite())
    }

    pub fn contains_origin(&self) -> bool {
        self.lower.iter().all(|&l| l <= 0.0) && self.upper.iter().all(|&u| u >= 0.0)
    }

    /// Largest amount by which `v` leaves the box (0 inside).
    pub fn violation(&self, v: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..v.len() {
            worst = worst.max(self.lower[i] - v[i]).max(v[i] - self.upper[i]);
        }
        worst
    }

    /// Signed margin `max_i max(v_i − upper_i, lower_i − v_i)`; non-positive inside.
    pub fn signed_margin(&self, v: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..v.len() {
            worst = worst.max(self.lower[i] - v[i]).max(v[i] - self.upper[i]);
        }
        worst
    }

    /// Same box with every finite limit multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lower: &self.lower * factor,
            upper: &self.upper * factor,
        }
    }
}
