//! Grids, quadrature rules, and group actions consumed by every convolution.
//!
//! Regular planar grids use the trapezoidal rule (`q_j` is the cell volume).
//! The equiangular sphere grid uses exact spherical cell areas so that the
//! weights sum to `4*pi` up to roundoff.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Domain topology of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Topology {
    PeriodicBox { extent: Vec<f64> },
    BoundedBox { extent: Vec<f64> },
    Sphere,
    Unstructured,
}

impl Topology {
    pub fn extent(&self) -> Option<&[f64]> {
        match self {
            Topology::PeriodicBox { extent } | Topology::BoundedBox { extent } => Some(extent),
            _ => None,
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, Topology::PeriodicBox { .. })
    }
}

/// A discretization: points, quadrature weights, and topology.
///
/// Points are stored row-major as `m * dim` coordinates. On the sphere the
/// two coordinates are colatitude and longitude in radians. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub points: Vec<f64>,
    pub quad_weights: Vec<f64>,
    pub topology: Topology,
    /// Characteristic width `h`, recorded for isotropic regular grids.
    pub width: Option<f64>,
    /// Per-dimension point counts for regular grids.
    pub shape: Option<Vec<usize>>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.quad_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quad_weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    /// Per-axis grid spacings for regular grids.
    pub fn spacings(&self) -> Option<Vec<f64>> {
        let shape = self.shape.as_ref()?;
        let extent = self.topology.extent()?;
        Some(
            shape
                .iter()
                .zip(extent)
                .map(|(&n, &e)| e / n as f64)
                .collect(),
        )
    }

    /// Width used for 1/h scalings: the isotropic width when present,
    /// otherwise the geometric mean of the per-axis spacings.
    pub fn effective_width(&self) -> Option<f64> {
        if let Some(h) = self.width {
            return Some(h);
        }
        let hs = self.spacings()?;
        let log_mean = hs.iter().map(|h| h.ln()).sum::<f64>() / hs.len() as f64;
        Some(log_mean.exp())
    }

    pub fn require_shape(&self) -> Result<&[usize]> {
        self.shape
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("grid has no regular shape".into()))
    }
}

/// Equidistant grid on a box. Periodic grids place points at cell vertices
/// `j*h` (no duplicate at the seam); bounded grids place them at cell centers
/// `(j + 1/2)*h`. Quadrature weights are the cell volumes.
pub fn make_regular_grid(shape: &[usize], extent: &[f64], periodic: bool) -> Result<Grid> {
    if shape.is_empty() || shape.len() != extent.len() {
        return Err(Error::InvalidArgument(format!(
            "shape ({}) and extent ({}) dimensions must match and be nonzero",
            shape.len(),
            extent.len()
        )));
    }
    if shape.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument("all counts must be >= 2".into()));
    }
    if extent.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidArgument("all extents must be > 0".into()));
    }

    let dim = shape.len();
    let hs: Vec<f64> = shape
        .iter()
        .zip(extent)
        .map(|(&n, &e)| e / n as f64)
        .collect();
    let cell = hs.iter().product::<f64>();
    let m: usize = shape.iter().product();

    let mut points = Vec::with_capacity(m * dim);
    let mut index = vec![0usize; dim];
    for _ in 0..m {
        for k in 0..dim {
            let j = index[k] as f64;
            let x = if periodic {
                j * hs[k]
            } else {
                (j + 0.5) * hs[k]
            };
            points.push(x);
        }
        // odometer increment, last axis fastest
        for k in (0..dim).rev() {
            index[k] += 1;
            if index[k] < shape[k] {
                break;
            }
            index[k] = 0;
        }
    }

    let isotropic = hs.iter().all(|&h| (h - hs[0]).abs() <= 1e-15 * hs[0].abs());
    Ok(Grid {
        dim,
        points,
        quad_weights: vec![cell; m],
        topology: if periodic {
            Topology::PeriodicBox {
                extent: extent.to_vec(),
            }
        } else {
            Topology::BoundedBox {
                extent: extent.to_vec(),
            }
        },
        width: if isotropic { Some(hs[0]) } else { None },
        shape: Some(shape.to_vec()),
    })
}

/// Equiangular latitude-longitude grid with cell-centered colatitudes.
///
/// Weights are exact spherical cell areas
/// `q = dlambda * (cos(theta_south_edge_above) - cos(theta_edge_below))`,
/// so they sum to `4*pi` up to roundoff. Point ordering is latitude-major.
pub fn make_equiangular_sphere_grid(nlat: usize, nlon: usize) -> Result<Grid> {
    if nlat < 2 {
        return Err(Error::InvalidArgument("nlat must be >= 2".into()));
    }
    if nlon < 4 {
        return Err(Error::InvalidArgument("nlon must be >= 4".into()));
    }
    let dtheta = PI / nlat as f64;
    let dlambda = 2.0 * PI / nlon as f64;
    let m = nlat * nlon;
    let mut points = Vec::with_capacity(m * 2);
    let mut quad_weights = Vec::with_capacity(m);
    for i in 0..nlat {
        let theta = (i as f64 + 0.5) * dtheta;
        let area = dlambda * ((i as f64 * dtheta).cos() - ((i + 1) as f64 * dtheta).cos());
        for k in 0..nlon {
            points.push(theta);
            points.push(k as f64 * dlambda);
            quad_weights.push(area);
        }
    }
    Ok(Grid {
        dim: 2,
        points,
        quad_weights,
        topology: Topology::Sphere,
        width: None,
        shape: Some(vec![nlat, nlon]),
    })
}

/// Scattered points with user-supplied quadrature weights.
pub fn make_unstructured(dim: usize, points: Vec<f64>, quad_weights: Vec<f64>) -> Result<Grid> {
    if dim == 0 || points.len() != quad_weights.len() * dim {
        return Err(Error::InvalidArgument(
            "points length must equal weights length times dim".into(),
        ));
    }
    if quad_weights.iter().any(|&q| q <= 0.0) {
        return Err(Error::InvalidArgument(
            "quadrature weights must be positive".into(),
        ));
    }
    Ok(Grid {
        dim,
        points,
        quad_weights,
        topology: Topology::Unstructured,
        width: None,
        shape: None,
    })
}

/// The rotation taking the north pole to `(colatitude, longitude)` with the
/// first Euler angle fixed to zero, i.e. `R_z(longitude) * R_y(colatitude)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereRotation {
    pub colatitude: f64,
    pub longitude: f64,
}

impl SphereRotation {
    pub fn new(colatitude: f64, longitude: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&colatitude) {
            return Err(Error::InvalidArgument(format!(
                "colatitude {colatitude} outside [0, pi]"
            )));
        }
        if !(0.0..2.0 * PI).contains(&longitude) {
            return Err(Error::InvalidArgument(format!(
                "longitude {longitude} outside [0, 2*pi)"
            )));
        }
        Ok(Self {
            colatitude,
            longitude,
        })
    }
}

fn sphere_to_xyz(theta: f64, lambda: f64) -> [f64; 3] {
    [
        theta.sin() * lambda.cos(),
        theta.sin() * lambda.sin(),
        theta.cos(),
    ]
}

/// Coordinates of `point` after applying the inverse rotation of `center`.
///
/// The radial coordinate equals the great-circle distance to the center;
/// the azimuthal coordinate lies in `[0, 2*pi)`.
pub fn geodesic_offset(center: SphereRotation, point: (f64, f64)) -> (f64, f64) {
    let p = sphere_to_xyz(point.0, point.1);
    // R_z(-lambda)
    let (sl, cl) = center.longitude.sin_cos();
    let x1 = p[0] * cl + p[1] * sl;
    let y1 = -p[0] * sl + p[1] * cl;
    let z1 = p[2];
    // R_y(-theta)
    let (st, ct) = center.colatitude.sin_cos();
    let x2 = x1 * ct - z1 * st;
    let z2 = x1 * st + z1 * ct;

    // atan2 form is stable near both poles, where acos(z) loses half the
    // significant digits and breaks rotation equivariance of tiny offsets
    let radial = (x2 * x2 + y1 * y1).sqrt().atan2(z2);
    let mut azimuthal = y1.atan2(x2);
    if azimuthal < 0.0 {
        azimuthal += 2.0 * PI;
    }
    if azimuthal >= 2.0 * PI {
        azimuthal = 0.0;
    }
    (radial, azimuthal)
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    dim: usize,
    m: usize,
    topology: Topology,
    shape: Option<Vec<usize>>,
    width: Option<f64>,
}

fn write_f64_le(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64_le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

impl Grid {
    /// Write a JSON header at `path` and points/weights as little-endian
    /// 64-bit floats in a sibling `.bin` file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GridHeader {
            dim: self.dim,
            m: self.len(),
            topology: self.topology.clone(),
            shape: self.shape.clone(),
            width: self.width,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&header)?)?;
        let mut payload = Vec::with_capacity(8 * (self.points.len() + self.quad_weights.len()));
        write_f64_le(&mut payload, &self.points);
        write_f64_le(&mut payload, &self.quad_weights);
        std::fs::write(path.with_extension("bin"), payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Grid> {
        let header: GridHeader = serde_json::from_slice(&std::fs::read(path)?)?;
        let payload = std::fs::read(path.with_extension("bin"))?;
        let expected = 8 * header.m * (header.dim + 1);
        if payload.len() != expected {
            return Err(Error::IncompatibleDataset(format!(
                "grid payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let values = read_f64_le(&payload);
        let (points, weights) = values.split_at(header.m * header.dim);
        Ok(Grid {
            dim: header.dim,
            points: points.to_vec(),
            quad_weights: weights.to_vec(),
            topology: header.topology,
            width: header.width,
            shape: header.shape,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn regular_1d_periodic() {
        let g = make_regular_grid(&[4], &[1.0], true).unwrap();
        assert_eq!(g.points, vec![0.0, 0.25, 0.5, 0.75]);
        assert!(g.quad_weights.iter().all(|&q| q == 0.25));
        assert_eq!(g.width, Some(0.25));
    }

    #[test]
    fn regular_2d_bounded() {
        let g = make_regular_grid(&[2, 2], &[1.0, 1.0], false).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.quad_weights.iter().all(|&q| q == 0.25));
        assert_relative_eq!(g.quad_weights.iter().sum::<f64>(), 1.0);
        // consecutive points along each axis differ by exactly h
        assert_eq!(g.point(0), &[0.25, 0.25]);
        assert_eq!(g.point(1), &[0.25, 0.75]);
        assert_eq!(g.point(2), &[0.75, 0.25]);
    }

    #[test]
    fn darcy_training_grid_shape() {
        let g = make_regular_grid(&[256, 256], &[1.0, 1.0], false).unwrap();
        assert_eq!(g.len(), 256 * 256);
        assert_eq!(g.width, Some(1.0 / 256.0));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_regular_grid(&[1], &[1.0], true).is_err());
        assert!(make_regular_grid(&[4], &[0.0], true).is_err());
        assert!(make_equiangular_sphere_grid(1, 8).is_err());
        assert!(make_equiangular_sphere_grid(4, 3).is_err());
    }

    #[test]
    fn sphere_weights_sum_to_sphere_area() {
        for (nlat, nlon) in [(2, 4), (16, 32), (7, 9), (33, 64)] {
            let g = make_equiangular_sphere_grid(nlat, nlon).unwrap();
            let total: f64 = g.quad_weights.iter().sum();
            assert_relative_eq!(total, 4.0 * PI, max_relative = 1e-12);
            // each latitude ring has equal weight
            for i in 0..nlat {
                let ring = &g.quad_weights[i * nlon..(i + 1) * nlon];
                assert!(ring.iter().all(|&q| q == ring[0]));
            }
        }
    }

    #[test]
    fn sphere_constant_integration() {
        let g = make_equiangular_sphere_grid(16, 32).unwrap();
        let integral: f64 = g.quad_weights.iter().map(|q| q * 1.0).sum();
        assert_relative_eq!(integral, 4.0 * PI, max_relative = 1e-12);
    }

    #[test]
    fn trig_quadrature_exactness_below_nyquist() {
        // trapezoidal rule on the torus integrates trig polynomials below
        // the Nyquist frequency exactly
        let g = make_regular_grid(&[16], &[1.0], true).unwrap();
        for k in 1..8 {
            let integral: f64 = (0..g.len())
                .map(|j| g.quad_weights[j] * (2.0 * PI * k as f64 * g.point(j)[0]).cos())
                .sum();
            assert!(integral.abs() <= 1e-10, "mode {k}: {integral}");
        }
        let one: f64 = g.quad_weights.iter().sum();
        assert_relative_eq!(one, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn geodesic_offset_identity_at_north_pole() {
        let c = SphereRotation::new(0.0, 0.0).unwrap();
        let (r, a) = geodesic_offset(c, (0.7, 1.3));
        assert_relative_eq!(r, 0.7, epsilon = 1e-12);
        assert_relative_eq!(a, 1.3, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_offset_coincident_and_equator() {
        let c = SphereRotation::new(1.1, 2.2).unwrap();
        let (r, _) = geodesic_offset(c, (1.1, 2.2));
        assert!(r.abs() <= 1e-12);

        let c = SphereRotation::new(PI / 2.0, 0.0).unwrap();
        let (r, _) = geodesic_offset(c, (PI / 2.0, PI / 2.0));
        assert_relative_eq!(r, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_offset_radial_matches_arccos_of_dot_product() {
        let g = make_equiangular_sphere_grid(6, 11).unwrap();
        let c = SphereRotation::new(0.9, 4.0).unwrap();
        let cx = sphere_to_xyz(0.9, 4.0);
        for j in 0..g.len() {
            let p = g.point(j);
            let px = sphere_to_xyz(p[0], p[1]);
            let dot: f64 = cx.iter().zip(&px).map(|(a, b)| a * b).sum();
            let (r, a) = geodesic_offset(c, (p[0], p[1]));
            assert_relative_eq!(r, dot.clamp(-1.0, 1.0).acos(), epsilon = 1e-12);
            assert!((0.0..2.0 * PI).contains(&a));
        }
    }

    #[test]
    fn grid_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.json");
        for g in [
            make_regular_grid(&[4, 6], &[1.0, 2.0], true).unwrap(),
            make_equiangular_sphere_grid(4, 8).unwrap(),
        ] {
            g.save(&path).unwrap();
            let back = Grid::load(&path).unwrap();
            assert_eq!(g, back);
        }
    }
}
