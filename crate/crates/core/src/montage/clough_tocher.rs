//! C¹ piecewise-cubic Clough-Tocher interpolation over a Delaunay
//! triangulation of scattered 2-D points.
//!
//! Vertex gradients come from the global minimum-curvature estimate: the
//! gradients minimize, summed over all triangulation edges, the integral of
//! the squared second derivative of the cubic Hermite curve running along the
//! edge. Stationarity gives one SPD 2N×2N linear system
//!
//! ```text
//!   Σ_edges (2 g_i + g_j)·e e / |e|³ = Σ_edges 3 (f_j − f_i) e / |e|³
//! ```
//!
//! which is solved exactly (Cholesky) once per point set; the solution is
//! linear in the data values, so the whole interpolant is a linear map.
//!
//! Each triangle is split at its centroid into three cubic Bézier patches.
//! Cross-boundary continuity uses the classic condition that the derivative
//! normal to each macro edge varies linearly along that edge.

use nalgebra::{DMatrix, DVector};
use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use crate::error::{Error, Result};

/// Barycentric tolerance for point location on shared edges and the hull.
const LOCATE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug)]
struct Site {
    pos: Point2<f64>,
    id: usize,
}

impl HasPosition for Site {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

/// Triangle of the Delaunay triangulation as counter-clockwise vertex indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triangle(pub [usize; 3]);

/// Interpolator over a fixed point set. Reusable for any number of value
/// vectors.
#[derive(Clone, Debug)]
pub struct CloughTocher {
    points: Vec<[f64; 2]>,
    triangles: Vec<Triangle>,
    /// Maps data values (N) to stacked vertex gradients (2N, x then y).
    gradient_operator: DMatrix<f64>,
}

impl CloughTocher {
    pub fn new(points: &[[f64; 2]]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Triangulation(format!(
                "need at least 3 points, got {}",
                points.len()
            )));
        }
        let mut sorted: Vec<(usize, [f64; 2])> = points.iter().copied().enumerate().collect();
        if sorted
            .iter()
            .any(|(_, p)| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::Triangulation("non-finite point".into()));
        }
        sorted.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]).then(a.1[1].total_cmp(&b.1[1])));
        if let Some(w) = sorted.windows(2).find(|w| w[0].1 == w[1].1) {
            return Err(Error::Triangulation(format!(
                "duplicate points {} and {}",
                w[0].0, w[1].0
            )));
        }

        let mut dt: DelaunayTriangulation<Site> = DelaunayTriangulation::new();
        for (id, p) in points.iter().enumerate() {
            dt.insert(Site {
                pos: Point2::new(p[0], p[1]),
                id,
            })
            .map_err(|e| Error::Triangulation(format!("point {id}: {e:?}")))?;
        }
        if dt.num_inner_faces() == 0 {
            return Err(Error::Triangulation("all points are collinear".into()));
        }
        let triangles: Vec<Triangle> = dt
            .inner_faces()
            .map(|f| {
                let [a, b, c] = f.vertices();
                Triangle([a.data().id, b.data().id, c.data().id])
            })
            .collect();
        let edges: Vec<(usize, usize)> = dt
            .undirected_edges()
            .map(|e| {
                let [a, b] = e.vertices();
                (a.data().id, b.data().id)
            })
            .collect();
        let gradient_operator = minimum_curvature_operator(points, &edges)?;
        Ok(Self {
            points: points.to_vec(),
            triangles,
            gradient_operator,
        })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    /// Estimated gradient at every data point.
    pub fn gradients(&self, values: &[f64]) -> Result<Vec<[f64; 2]>> {
        let n = self.points.len();
        if values.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} points",
                values.len(),
                n
            )));
        }
        let g = &self.gradient_operator * DVector::from_column_slice(values);
        Ok((0..n).map(|i| [g[2 * i], g[2 * i + 1]]).collect())
    }

    /// Triangle containing `p` with its barycentric coordinates, if `p` is
    /// inside the convex hull.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for t in 0..self.triangles.len() {
            let b = barycentric(self.corners(t), p);
            let worst = b.iter().copied().fold(f64::INFINITY, f64::min);
            if worst >= 0.0 {
                return Some((t, b));
            }
            if worst > -LOCATE_TOL && best.is_none_or(|(_, _, w)| worst > w) {
                best = Some((t, b, worst));
            }
        }
        best.map(|(t, b, _)| (t, b))
    }

    fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let Triangle([a, b, c]) = self.triangles[t];
        [self.points[a], self.points[b], self.points[c]]
    }

    /// Interpolant at `p` for the given values and vertex gradients; `None`
    /// outside the convex hull.
    pub fn evaluate_with_gradients(
        &self,
        p: [f64; 2],
        values: &[f64],
        grads: &[[f64; 2]],
    ) -> Option<f64> {
        let (t, b) = self.locate(p)?;
        let Triangle(idx) = self.triangles[t];
        let f = idx.map(|i| values[i]);
        let g = idx.map(|i| grads[i]);
        Some(patch_value(self.corners(t), f, g, b))
    }

    /// Interpolates `values` at each query point, `None` outside the hull.
    pub fn interpolate(&self, values: &[f64], queries: &[[f64; 2]]) -> Result<Vec<Option<f64>>> {
        let grads = self.gradients(values)?;
        Ok(queries
            .iter()
            .map(|&q| self.evaluate_with_gradients(q, values, &grads))
            .collect())
    }
}

fn minimum_curvature_operator(
    points: &[[f64; 2]],
    edges: &[(usize, usize)],
) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
    let mut r = DMatrix::<f64>::zeros(2 * n, n);
    for &(i, j) in edges {
        let e = [points[j][0] - points[i][0], points[j][1] - points[i][1]];
        let l2 = e[0] * e[0] + e[1] * e[1];
        let w = 1.0 / (l2 * l2.sqrt());
        for p in 0..2 {
            for q in 0..2 {
                let eq = e[p] * e[q] * w;
                a[(2 * i + p, 2 * i + q)] += 2.0 * eq;
                a[(2 * j + p, 2 * j + q)] += 2.0 * eq;
                a[(2 * i + p, 2 * j + q)] += eq;
                a[(2 * j + p, 2 * i + q)] += eq;
            }
            // right-hand side 3 (f_j − f_i) e / |e|³ for both endpoints
            for v in [i, j] {
                r[(2 * v + p, j)] += 3.0 * e[p] * w;
                r[(2 * v + p, i)] -= 3.0 * e[p] * w;
            }
        }
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Triangulation("gradient system is not positive definite".into()))?;
    Ok(chol.solve(&r))
}

pub(crate) fn barycentric(t: [[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = t;
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    [l1, l2, 1.0 - l1 - l2]
}

/// Cubic Bézier ordinates of the split triangle, indexed by the exponents of
/// (V1, V2, V3, centroid), each summing to 3.
struct SplitPatch {
    c: [[[[f64; 4]; 4]; 4]; 4],
}

impl SplitPatch {
    fn get(&self, i: [usize; 4]) -> f64 {
        self.c[i[0]][i[1]][i[2]][i[3]]
    }

    fn set(&mut self, i: [usize; 4], v: f64) {
        self.c[i[0]][i[1]][i[2]][i[3]] = v;
    }
}

fn unit(k: usize, n: usize) -> [usize; 4] {
    let mut e = [0; 4];
    e[k] = n;
    e
}

fn add(a: [usize; 4], b: [usize; 4]) -> [usize; 4] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

fn build_patch(v: [[f64; 2]; 3], f: [f64; 3], g: [[f64; 2]; 3]) -> SplitPatch {
    let mut s = SplitPatch {
        c: [[[[0.0; 4]; 4]; 4]; 4],
    };
    let centroid = [
        (v[0][0] + v[1][0] + v[2][0]) / 3.0,
        (v[0][1] + v[1][1] + v[2][1]) / 3.0,
    ];
    // vertex values and the ordinates along each edge from the gradients
    for a in 0..3 {
        s.set(unit(a, 3), f[a]);
        for b in 0..3 {
            if a != b {
                let e = [v[b][0] - v[a][0], v[b][1] - v[a][1]];
                s.set(
                    add(unit(a, 2), unit(b, 1)),
                    f[a] + (g[a][0] * e[0] + g[a][1] * e[1]) / 3.0,
                );
            }
        }
    }
    // first ring around each vertex stays in its tangent plane
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        let val = (s.get(unit(a, 3))
            + s.get(add(unit(a, 2), unit(b, 1)))
            + s.get(add(unit(a, 2), unit(c, 1))))
            / 3.0;
        s.set(add(unit(a, 2), unit(3, 1)), val);
    }
    // edge-interior ordinates from the linear normal-derivative condition
    for opp in 0..3 {
        let (a, b) = ((opp + 1) % 3, (opp + 2) % 3);
        let edge = [v[b][0] - v[a][0], v[b][1] - v[a][1]];
        let normal = [-edge[1], edge[0]];
        // direction in barycentrics of the micro triangle (V_a, V_b, centroid)
        let micro = [v[a], v[b], centroid];
        let origin = barycentric(micro, centroid);
        let moved = barycentric(micro, [centroid[0] + normal[0], centroid[1] + normal[1]]);
        let d = [
            moved[0] - origin[0],
            moved[1] - origin[1],
            moved[2] - origin[2],
        ];
        let idx = |i: usize, j: usize, l: usize| add(add(unit(a, i), unit(b, j)), unit(3, l));
        let end_a =
            d[0] * s.get(idx(3, 0, 0)) + d[1] * s.get(idx(2, 1, 0)) + d[2] * s.get(idx(2, 0, 1));
        let end_b =
            d[0] * s.get(idx(1, 2, 0)) + d[1] * s.get(idx(0, 3, 0)) + d[2] * s.get(idx(0, 2, 1));
        let mid_known = d[0] * s.get(idx(2, 1, 0)) + d[1] * s.get(idx(1, 2, 0));
        s.set(idx(1, 1, 1), (0.5 * (end_a + end_b) - mid_known) / d[2]);
    }
    // second ring and the centroid from C¹ continuity across interior edges
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        let around = s.get(add(unit(a, 2), unit(3, 1)))
            + s.get(add(add(unit(a, 1), unit(b, 1)), unit(3, 1)))
            + s.get(add(add(unit(a, 1), unit(c, 1)), unit(3, 1)));
        s.set(add(unit(a, 1), unit(3, 2)), around / 3.0);
    }
    let center = (0..3)
        .map(|a| s.get(add(unit(a, 1), unit(3, 2))))
        .sum::<f64>()
        / 3.0;
    s.set(unit(3, 3), center);
    s
}

/// Value of the split cubic patch at macro barycentric coordinates `b`.
fn patch_value(v: [[f64; 2]; 3], f: [f64; 3], g: [[f64; 2]; 3], b: [f64; 3]) -> f64 {
    let s = build_patch(v, f, g);
    // the micro triangle opposite the smallest coordinate contains the point
    let m = (0..3).min_by(|&i, &j| b[i].total_cmp(&b[j])).unwrap();
    let (a, c) = ((m + 1) % 3, (m + 2) % 3);
    let w = [b[a] - b[m], b[c] - b[m], 3.0 * b[m]];
    let mut total = 0.0;
    for i in 0..=3usize {
        for j in 0..=(3 - i) {
            let l = 3 - i - j;
            let coef = 6.0 / (factorial(i) * factorial(j) * factorial(l));
            let ord = s.get(add(add(unit(a, i), unit(c, j)), unit(3, l)));
            total += coef * ord * w[0].powi(i as i32) * w[1].powi(j as i32) * w[2].powi(l as i32);
        }
    }
    total
}

fn factorial(n: usize) -> f64 {
    (1..=n).product::<usize>() as f64
}
