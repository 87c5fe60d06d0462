//! Electrode montages and their projection onto border-cropped activity meshes.

mod clough_tocher;
mod mesh;
mod projection;

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

pub use clough_tocher::{CloughTocher, Triangle};
pub use mesh::{
    border_crop, interpolate_mesh, trial_to_frames, GridExtent, MeshFrameStack, MeshProjector,
    ScalarField,
};
pub use projection::project_azimuthal;

use crate::error::{Error, Result};

/// Named sensor positions on the unit sphere.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElectrodeMontage {
    labels: Vec<String>,
    positions: Vec<[f64; 3]>,
    center_label: String,
}

impl ElectrodeMontage {
    /// Builds a montage, normalizing every coordinate to unit length.
    pub fn new(labels: Vec<String>, coords: Vec<[f64; 3]>, center_label: &str) -> Result<Self> {
        if labels.len() != coords.len() {
            return Err(Error::Montage(format!(
                "{} labels for {} positions",
                labels.len(),
                coords.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Montage("montage has no electrodes".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Montage(format!("duplicate label {dup}")));
        }
        if !labels.iter().any(|l| l == center_label) {
            return Err(Error::Montage(format!(
                "center label {center_label} not in montage"
            )));
        }
        let positions = labels
            .iter()
            .zip(coords)
            .map(|(label, c)| {
                let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(Error::Montage(format!(
                        "electrode {label} has zero-norm or non-finite coordinates"
                    )));
                }
                Ok([c[0] / norm, c[1] / norm, c[2] / norm])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels,
            positions,
            center_label: center_label.to_string(),
        })
    }

    /// Like [`ElectrodeMontage::new`] with the topmost (largest z) electrode
    /// as projection center.
    pub fn with_top_center(labels: Vec<String>, coords: Vec<[f64; 3]>) -> Result<Self> {
        let top = coords
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                (n > 0.0).then(|| (i, c[2] / n))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Montage("montage has no usable electrodes".into()))?;
        let center = labels
            .get(top)
            .cloned()
            .ok_or_else(|| Error::Montage("label count mismatch".into()))?;
        Self::new(labels, coords, &center)
    }

    /// Deterministic cap of `n` electrodes on a golden-angle spiral covering
    /// the upper part of the sphere, centered on `Cz` at the pole.
    pub fn synthetic_cap(n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::Montage(
                "synthetic cap needs at least 4 electrodes".into(),
            ));
        }
        // polar angle up to ~115 degrees, like a dense scalp net
        let max_polar = 2.0_f64;
        let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
        let mut labels = vec!["Cz".to_string()];
        let mut coords = vec![[0.0, 0.0, 1.0]];
        for i in 1..n {
            let frac = i as f64 / (n - 1) as f64;
            let z = 1.0 - frac * (1.0 - max_polar.cos());
            let r = (1.0 - z * z).max(0.0).sqrt();
            let az = golden * i as f64;
            labels.push(format!("E{}", i + 1));
            coords.push([r * az.cos(), r * az.sin(), z]);
        }
        Self::new(labels, coords, "Cz")
    }

    /// Parses `label,x,y,z` CSV with a header row; `#` lines are comments.
    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let expected = ["label", "x", "y", "z"];
        if headers.len() != 4
            || headers
                .iter()
                .zip(expected)
                .any(|(h, e)| !h.eq_ignore_ascii_case(e))
        {
            return Err(Error::format(origin, "montage header must be label,x,y,z"));
        }
        let mut labels = Vec::new();
        let mut coords = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|_| {
                    Error::format(origin, format!("row {}: bad number {:?}", row + 1, &rec[i]))
                })
            };
            labels.push(rec[0].to_string());
            coords.push([num(1)?, num(2)?, num(3)?]);
        }
        Self::with_top_center(labels, coords)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,x,y,z\n");
        for (l, p) in self.labels.iter().zip(&self.positions) {
            out.push_str(&format!("{},{:.17},{:.17},{:.17}\n", l, p[0], p[1], p[2]));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn center_label(&self) -> &str {
        &self.center_label
    }

    pub fn center(&self) -> [f64; 3] {
        let i = self
            .labels
            .iter()
            .position(|l| *l == self.center_label)
            .expect("center label validated at construction");
        self.positions[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_normalized() {
        let m = ElectrodeMontage::new(
            vec!["a".into(), "b".into()],
            vec![[0.0, 0.0, 9.0], [3.0, 4.0, 0.0]],
            "a",
        )
        .unwrap();
        for p in m.positions() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.positions()[1], [0.6, 0.8, 0.0]);
    }

    #[test]
    fn invalid_montages_are_rejected() {
        let two = |a: &str, b: &str| vec![a.to_string(), b.to_string()];
        assert!(ElectrodeMontage::new(two("a", "a"), vec![[0.0, 0.0, 1.0]; 2], "a").is_err());
        assert!(ElectrodeMontage::new(two("a", "b"), vec![[0.0, 0.0, 1.0]; 2], "c").is_err());
        assert!(
            ElectrodeMontage::new(two("a", "b"), vec![[0.0, 0.0, 1.0], [0.0; 3]], "a").is_err()
        );
        assert!(ElectrodeMontage::new(two("a", "b"), vec![[0.0, 0.0, 1.0]], "a").is_err());
    }

    #[test]
    fn csv_round_trip_with_comments() {
        let text =
            "# demo montage\nlabel,x,y,z\nFz,0.0,0.5,0.8\n# a comment\nCz,0,0,2\nPz,0,-0.5,0.8\n";
        let m = ElectrodeMontage::parse_csv(text, Path::new("m.csv")).unwrap();
        assert_eq!(m.labels(), &["Fz", "Cz", "Pz"]);
        assert_eq!(m.center_label(), "Cz");
        assert_eq!(m.center(), [0.0, 0.0, 1.0]);
        let again = ElectrodeMontage::parse_csv(&m.to_csv(), Path::new("m.csv")).unwrap();
        assert_eq!(again.labels(), m.labels());
        for (a, b) in again.positions().iter().zip(m.positions()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-15);
            }
        }
        assert!(ElectrodeMontage::parse_csv("name,x,y,z\na,0,0,1\n", Path::new("m")).is_err());
        assert!(ElectrodeMontage::parse_csv("label,x,y,z\na,0,zz,1\n", Path::new("m")).is_err());
    }

    #[test]
    fn synthetic_cap_is_valid_and_centered() {
        let m = ElectrodeMontage::synthetic_cap(124).unwrap();
        assert_eq!(m.len(), 124);
        assert_eq!(m.center(), [0.0, 0.0, 1.0]);
        assert!(m.positions().iter().all(|p| p[2] > -0.5));
    }
}
