use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConstraintSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Primal,
    Dual,
}

/// An `n × d` block of points, tagged with the space it lives in.
///
/// Primal batches carry their constraint and are only constructed from rows
/// that satisfy it.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    data: Array2<f64>,
    space: Space,
    constraint: Option<Arc<ConstraintSet>>,
}

impl SampleBatch {
    pub fn primal(data: Array2<f64>, constraint: Arc<ConstraintSet>) -> Result<Self> {
        if data.ncols() != constraint.dim() {
            return Err(Error::DimensionMismatch {
                expected: constraint.dim(),
                got: data.ncols(),
            });
        }
        for row in data.outer_iter() {
            let c = constraint.contains(&row.to_vec());
            if !c.inside {
                let margin = c.margins.iter().copied().fold(f64::INFINITY, f64::min);
                return Err(Error::PointOutsideSet { margin });
            }
        }
        Ok(Self {
            data,
            space: Space::Primal,
            constraint: Some(constraint),
        })
    }

    pub fn dual(data: Array2<f64>) -> Self {
        Self {
            data,
            space: Space::Dual,
            constraint: None,
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn constraint(&self) -> Option<&Arc<ConstraintSet>> {
        self.constraint.as_ref()
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Push a primal batch through `∇φ`.
    pub fn to_dual(&self) -> Result<SampleBatch> {
        match (&self.space, &self.constraint) {
            (Space::Primal, Some(c)) => Ok(SampleBatch::dual(c.forward_batch(self.data.view())?)),
            _ => Ok(self.clone()),
        }
    }

    /// Map a dual batch back through `∇φ*` onto `constraint`.
    ///
    /// The inverse map is exact, but rows whose dual coordinates are large
    /// enough to round onto the boundary in `f64` are rejected by the
    /// primal constructor rather than silently accepted.
    pub fn to_primal(&self, constraint: Arc<ConstraintSet>) -> Result<SampleBatch> {
        if self.space == Space::Primal {
            return Ok(self.clone());
        }
        let x = constraint.inverse_batch(self.data.view())?;
        SampleBatch::primal(x, constraint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BallConstraint;
    use ndarray::array;

    #[test]
    fn primal_rejects_outside_rows() {
        let ball = Arc::new(ConstraintSet::from(BallConstraint::unit(2).unwrap()));
        assert!(SampleBatch::primal(array![[0.1, 0.2], [0.0, 0.0]], ball.clone()).is_ok());
        assert!(SampleBatch::primal(array![[0.1, 0.2], [1.0, 0.5]], ball.clone()).is_err());
        assert!(SampleBatch::primal(array![[0.1, 0.2, 0.3]], ball).is_err());
    }

    #[test]
    fn dual_round_trip() {
        let ball = Arc::new(ConstraintSet::from(BallConstraint::unit(2).unwrap()));
        let x = SampleBatch::primal(array![[0.5, 0.0], [0.0, -0.3]], ball.clone()).unwrap();
        let y = x.to_dual().unwrap();
        assert_eq!(y.space(), Space::Dual);
        assert!((y.data()[[0, 0]] - 4.0 / 3.0).abs() < 1e-15);
        let back = y.to_primal(ball).unwrap();
        for (a, b) in back.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
