//! Phase-space fields `g(x_j, ξ_r)` on a space grid times the orbit space.

use crate::error::{LabError, Result};
use serde::{Deserialize, Serialize};

/// Station-major storage: `data[j·nv + r]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    /// Number of space stations.
    pub nx: usize,
    /// Number of reduced velocity unknowns.
    pub nv: usize,
    /// Values.
    pub data: Vec<f64>,
}

impl Field {
    /// All zeros.
    pub fn zeros(nx: usize, nv: usize) -> Self {
        Self {
            nx,
            nv,
            data: vec![0.0; nx * nv],
        }
    }

    /// Builds from one velocity vector per station.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let nx = rows.len();
        let nv = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nx * nv);
        for r in rows {
            if r.len() != nv {
                return Err(LabError::DimensionMismatch {
                    expected: nv,
                    found: r.len(),
                });
            }
            data.extend(r);
        }
        Ok(Self { nx, nv, data })
    }

    /// Velocity vector at station `j`.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.nv..(j + 1) * self.nv]
    }

    /// Mutable velocity vector at station `j`.
    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.nv..(j + 1) * self.nv]
    }

    /// Iterator over stations.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.nv.max(1))
    }

    /// `max |g|`.
    pub fn sup(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |g − other|`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max_r |weight_r g(x_j, ξ_r)|` for every station.
    pub fn weighted_profile(&self, weight: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|r| r.iter().zip(weight).fold(0.0f64, |m, (v, w)| m.max((v * w).abs())))
            .collect()
    }

    /// Checks that two fields have the same shape.
    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.nx != other.nx || self.nv != other.nv {
            return Err(LabError::DimensionMismatch {
                expected: self.nx * self.nv,
                found: other.nx * other.nv,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let f = Field::from_rows(vec![vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        assert_eq!(f.row(1), &[3.0, 0.5]);
        assert_eq!(f.sup(), 3.0);
        assert_eq!(f.weighted_profile(&[2.0, 1.0]), vec![2.0, 6.0]);
        assert!(Field::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
