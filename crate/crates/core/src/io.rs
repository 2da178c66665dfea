//! On-disk layout of a solution bundle and the CSV tables.
//!
//! A bundle directory holds `g.bin` and `f.bin` (little-endian `f64`,
//! station-major: the value at station `j` and reduced velocity `r` sits at
//! offset `8·(j·nv + r)`), a JSON sidecar `field.json` describing both
//! arrays, and the tables `h.csv`, `moments.csv` and `convergence.csv`.

use crate::error::{LabError, Result};
use crate::field::Field;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Schema tag of the field sidecar.
pub const FIELD_SCHEMA: &str = "kinlayer.field/1";

/// Axes and provenance of the binary fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    /// Schema tag.
    pub schema: String,
    /// Element type.
    pub dtype: String,
    /// Memory order.
    pub order: String,
    /// `[stations, velocities]`.
    pub shape: [usize; 2],
    /// Stations.
    pub x: Vec<f64>,
    /// Representative velocity of each reduced index.
    pub velocities: Vec<[f64; 3]>,
    /// Quadrature mass of each reduced index (orbit weight).
    pub weights: Vec<f64>,
    /// Files described by this sidecar.
    pub files: Vec<String>,
    /// Hash of the configuration that produced the data.
    pub config_hash: String,
}

/// Everything written by the `solve` subcommand.
#[derive(Clone, Debug)]
pub struct Bundle {
    /// Axes and provenance.
    pub sidecar: FieldSidecar,
    /// `g`.
    pub g: Field,
    /// `f = e^{−γx}(g − hφ_u)`.
    pub f: Field,
    /// `h`.
    pub h: Vec<f64>,
    /// Penalty moments `(⟨(ξ₁+u)X₊g⟩, ⟨(ξ₁+u)ψ_u g⟩)` per station.
    pub moments: Vec<[f64; 2]>,
    /// Relative Picard change per iteration.
    pub history: Vec<f64>,
}

fn write_f64(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 8 * expected {
        return Err(LabError::DimensionMismatch {
            expected: 8 * expected,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Renders rows as CSV with a header line. Values use Rust's shortest
/// round-trip formatting.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
    out
}

fn parse_csv(text: &str, columns: usize) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: Vec<f64> = l
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| LabError::Config(format!("csv value `{c}`: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != columns {
                return Err(LabError::DimensionMismatch {
                    expected: columns,
                    found: row.len(),
                });
            }
            Ok(row)
        })
        .collect()
}

impl Bundle {
    /// Writes the bundle into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_f64(&dir.join("g.bin"), &self.g.data)?;
        write_f64(&dir.join("f.bin"), &self.f.data)?;
        fs::write(dir.join("field.json"), serde_json::to_string_pretty(&self.sidecar)?)?;
        let x = &self.sidecar.x;
        fs::write(
            dir.join("h.csv"),
            csv_table(&["x", "h"], x.iter().zip(&self.h).map(|(a, b)| vec![*a, *b])),
        )?;
        fs::write(
            dir.join("moments.csv"),
            csv_table(
                &["x", "flux_x_plus", "flux_psi"],
                x.iter().zip(&self.moments).map(|(a, m)| vec![*a, m[0], m[1]]),
            ),
        )?;
        fs::write(
            dir.join("convergence.csv"),
            csv_table(
                &["iteration", "relative_change"],
                self.history.iter().enumerate().map(|(k, c)| vec![(k + 1) as f64, *c]),
            ),
        )?;
        Ok(())
    }

    /// Reads a bundle written by [`Bundle::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let sidecar: FieldSidecar = serde_json::from_str(&fs::read_to_string(dir.join("field.json"))?)?;
        if sidecar.schema != FIELD_SCHEMA {
            return Err(LabError::Config(format!("unknown field schema `{}`", sidecar.schema)));
        }
        let [nx, nv] = sidecar.shape;
        let g = Field {
            nx,
            nv,
            data: read_f64(&dir.join("g.bin"), nx * nv)?,
        };
        let f = Field {
            nx,
            nv,
            data: read_f64(&dir.join("f.bin"), nx * nv)?,
        };
        let h = parse_csv(&fs::read_to_string(dir.join("h.csv"))?, 2)?.into_iter().map(|r| r[1]).collect();
        let moments = parse_csv(&fs::read_to_string(dir.join("moments.csv"))?, 3)?
            .into_iter()
            .map(|r| [r[1], r[2]])
            .collect();
        let history = parse_csv(&fs::read_to_string(dir.join("convergence.csv"))?, 2)?
            .into_iter()
            .map(|r| r[1])
            .collect();
        Ok(Self {
            sidecar,
            g,
            f,
            h,
            moments,
            history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trips_bit_for_bit() {
        let x = vec![0.0, 0.5, 1.25];
        let g = Field::from_rows(vec![vec![1.0, -2.5e-300], vec![0.1, 0.2], vec![3.0, f64::MIN_POSITIVE]]).unwrap();
        let f = Field::from_rows(vec![vec![0.3, 1.0 / 3.0], vec![-0.0, 7.0], vec![1e10, 2.0]]).unwrap();
        let b = Bundle {
            sidecar: FieldSidecar {
                schema: FIELD_SCHEMA.into(),
                dtype: "f64-le".into(),
                order: "station-major".into(),
                shape: [3, 2],
                x: x.clone(),
                velocities: vec![[0.5, 0.5, 0.5], [-0.5, 0.5, 0.5]],
                weights: vec![1.0, 1.0],
                files: vec!["g.bin".into(), "f.bin".into()],
                config_hash: "abc".into(),
            },
            g,
            f,
            h: vec![1.0 / 7.0, 0.0, -1e-20],
            moments: vec![[1.0, 2.0], [0.1, 0.2], [1e-300, 3.0]],
            history: vec![1.0, 0.01],
        };
        let dir = std::env::temp_dir().join(format!("kinlayer-io-{}", std::process::id()));
        b.write(&dir).unwrap();
        let r = Bundle::read(&dir).unwrap();
        assert_eq!(r.sidecar, b.sidecar);
        assert_eq!(r.g.data, b.g.data);
        assert_eq!(r.f.data, b.f.data);
        assert_eq!(r.h, b.h);
        assert_eq!(r.moments, b.moments);
        assert_eq!(r.history, b.history);
        fs::remove_dir_all(&dir).unwrap();
    }
}
