//! Azimuthal equidistant projection about the montage center.

use super::ElectrodeMontage;

/// Below this tangential magnitude an electrode is treated as antipodal.
const ANTIPODE_TOL: f64 = 1e-12;

/// Orthonormal tangent basis at `c`. For the north pole this is the x and y
/// axes, so longitude is measured from +x.
fn tangent_basis(c: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let reference = if c[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let d = dot(reference, c);
    let e1 = normalize([
        reference[0] - d * c[0],
        reference[1] - d * c[1],
        reference[2] - d * c[2],
    ]);
    let e2 = cross(c, e1);
    (e1, e2)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Maps each electrode to the plane so that its distance from the origin is
/// the great-circle distance to the center and its angle is its longitude
/// about the center axis. An electrode antipodal to the center gets azimuth 0
/// and a warning.
pub fn project_azimuthal(montage: &ElectrodeMontage) -> Vec<[f64; 2]> {
    let c = montage.center();
    let (e1, e2) = tangent_basis(c);
    montage
        .labels()
        .iter()
        .zip(montage.positions())
        .map(|(label, &p)| {
            let (u, v) = (dot(p, e1), dot(p, e2));
            let tangential = (u * u + v * v).sqrt();
            // atan2 keeps full precision near both the center and the antipode
            let rho = tangential.atan2(dot(p, c));
            if rho == 0.0 {
                return [0.0, 0.0];
            }
            if tangential < ANTIPODE_TOL {
                log::warn!("electrode {label} is antipodal to the center; azimuth set to 0");
                return [rho, 0.0];
            }
            [rho * u / tangential, rho * v / tangential]
        })
        .collect()
}
