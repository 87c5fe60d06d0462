//! Sampling the interpolant on a regular grid, border cropping, and the
//! per-trial frame stack.

use serde::{Deserialize, Serialize};

use super::{project_azimuthal, CloughTocher, ElectrodeMontage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar bounding box the G1×G2 grid is laid over, endpoints inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridExtent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridExtent {
    pub fn bounding(points: &[[f64; 2]]) -> Self {
        let mut e = GridExtent {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in points {
            e.x_min = e.x_min.min(p[0]);
            e.x_max = e.x_max.max(p[0]);
            e.y_min = e.y_min.min(p[1]);
            e.y_max = e.y_max.max(p[1]);
        }
        e
    }

    /// Plane coordinates of node (row, col); rows run along y, columns along x.
    pub fn node(&self, row: usize, col: usize, g1: usize, g2: usize) -> [f64; 2] {
        let lerp = |lo: f64, hi: f64, i: usize, n: usize| {
            if n == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        [
            lerp(self.x_min, self.x_max, col, g2),
            lerp(self.y_min, self.y_max, row, g1),
        ]
    }
}

/// Row-major 2-D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Clough-Tocher interpolant of `values` sampled on a `g1`×`g2` grid over
/// the points' bounding box; nodes outside the convex hull are 0.
pub fn interpolate_mesh(
    points: &[[f64; 2]],
    values: &[f64],
    g1: usize,
    g2: usize,
) -> Result<ScalarField> {
    if g1 == 0 || g2 == 0 {
        return Err(Error::InvalidArgument(
            "grid extents must be positive".into(),
        ));
    }
    let ct = CloughTocher::new(points)?;
    let extent = GridExtent::bounding(points);
    let nodes: Vec<[f64; 2]> = (0..g1)
        .flat_map(|r| (0..g2).map(move |c| (r, c)))
        .map(|(r, c)| extent.node(r, c, g1, g2))
        .collect();
    let data = ct
        .interpolate(values, &nodes)?
        .into_iter()
        .map(|v| v.unwrap_or(0.0))
        .collect();
    Ok(ScalarField {
        rows: g1,
        cols: g2,
        data,
    })
}

/// Drops the outermost ring of nodes.
pub fn border_crop(field: &ScalarField) -> Result<ScalarField> {
    if field.rows < 3 || field.cols < 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot border-crop a {}x{} field",
            field.rows, field.cols
        )));
    }
    let (rows, cols) = (field.rows - 2, field.cols - 2);
    let data = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| field.at(r + 1, c + 1))
        .collect();
    Ok(ScalarField { rows, cols, data })
}

/// Interpolation plus crop for a fixed montage, stored as the dense linear
/// map from channel values to cropped mesh nodes. Exact because the
/// interpolant is linear in the data.
#[derive(Clone, Debug)]
pub struct MeshProjector {
    grid: usize,
    channels: usize,
    extent: GridExtent,
    /// (M·M) × channels, row-major.
    weights: Vec<f64>,
}

impl MeshProjector {
    pub fn new(montage: &ElectrodeMontage, grid: usize) -> Result<Self> {
        if grid < 3 {
            return Err(Error::InvalidArgument(format!(
                "grid size {grid} is below 3"
            )));
        }
        let points = project_azimuthal(montage);
        let ct = CloughTocher::new(&points)?;
        let extent = GridExtent::bounding(&points);
        let n = points.len();
        let m = grid - 2;
        let located: Vec<Option<(usize, [f64; 3])>> = (0..m * m)
            .map(|k| ct.locate(extent.node(k / m + 1, k % m + 1, grid, grid)))
            .collect();
        let mut weights = vec![0.0; m * m * n];
        let mut basis = vec![0.0; n];
        for ch in 0..n {
            basis.fill(0.0);
            basis[ch] = 1.0;
            let grads = ct.gradients(&basis)?;
            for (k, loc) in located.iter().enumerate() {
                if loc.is_some() {
                    let node = extent.node(k / m + 1, k % m + 1, grid, grid);
                    weights[k * n + ch] = ct
                        .evaluate_with_gradients(node, &basis, &grads)
                        .unwrap_or(0.0);
                }
            }
        }
        Ok(Self {
            grid,
            channels: n,
            extent,
            weights,
        })
    }

    /// Side of the uncropped grid (G1 = G2).
    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Side of the cropped mesh.
    pub fn mesh_size(&self) -> usize {
        self.grid - 2
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> GridExtent {
        self.extent
    }

    /// Cropped mesh for one vector of channel values.
    pub fn frame(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "{} channel values for a {}-electrode montage",
                values.len(),
                self.channels
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.channels)
            .map(|row| row.iter().zip(values).map(|(w, v)| w * v).sum())
            .collect())
    }

    /// Projects a `channels × t` row-major trial into an `M × M × t` buffer
    /// (height, width, time).
    pub fn project_trial<S: crate::tensor::Scalar>(&self, trial: &[S], t: usize) -> Result<Vec<S>> {
        if trial.len() != self.channels * t {
            return Err(Error::InvalidArgument(format!(
                "trial has {} values, expected {} channels x {t} frames",
                trial.len(),
                self.channels
            )));
        }
        let mut out = vec![S::zero(); self.weights.len() / self.channels * t];
        for (node, row) in self.weights.chunks_exact(self.channels).enumerate() {
            let dst = &mut out[node * t..(node + 1) * t];
            for (ch, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let w = S::of(w);
                for (d, &x) in dst.iter_mut().zip(&trial[ch * t..(ch + 1) * t]) {
                    *d += w * x;
                }
            }
        }
        Ok(out)
    }
}

/// Mesh sequence for one trial, shape `1 × M × M × T`.
#[derive(Clone, Debug)]
pub struct MeshFrameStack {
    pub data: Tensor<f64>,
    pub grid_extent: GridExtent,
}

/// Projects a `channels × T` trial into border-cropped meshes, one per frame.
pub fn trial_to_frames(
    trial: &Tensor<f64>,
    montage: &ElectrodeMontage,
    g1: usize,
) -> Result<MeshFrameStack> {
    if trial.rank() != 2 || trial.shape()[0] != montage.len() {
        return Err(Error::InvalidArgument(format!(
            "trial shape {:?} does not match a {}-channel montage",
            trial.shape(),
            montage.len()
        )));
    }
    let t = trial.shape()[1];
    let projector = MeshProjector::new(montage, g1)?;
    let m = projector.mesh_size();
    let data = projector.project_trial(trial.data(), t)?;
    let data = Tensor::new(&[1, m, m, t], data)?;
    data.ensure_finite("mesh frames")?;
    Ok(MeshFrameStack {
        data,
        grid_extent: projector.extent(),
    })
}
