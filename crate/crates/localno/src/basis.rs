//! Compactly supported piecewise-linear kernel basis functions for
//! discrete-continuous convolutions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hat functions on `[0, x_cutoff]` with strictly increasing collocation
/// points. The l-th function is 1 at its collocation point and 0 at the
/// neighboring ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HatBasis1D {
    /// Interior collocation points `xi^(1)..xi^(L)`.
    pub collocation: Vec<f64>,
    /// Left boundary point `xi^(0)`.
    pub left: f64,
    /// Right boundary point `xi^(L+1)`.
    pub right: f64,
    pub cutoff: f64,
}

impl HatBasis1D {
    /// Equidistant collocation points `0, d, 2d, ...` with `d = cutoff / l`,
    /// so the support of the last hat ends exactly at the cutoff.
    pub fn equidistant(l: usize, cutoff: f64) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidArgument("basis count must be >= 1".into()));
        }
        if cutoff <= 0.0 {
            return Err(Error::InvalidArgument("cutoff must be > 0".into()));
        }
        let d = cutoff / l as f64;
        let collocation: Vec<f64> = (0..l).map(|i| i as f64 * d).collect();
        Ok(HatBasis1D {
            left: -d,
            right: cutoff,
            collocation,
            cutoff,
        })
    }

    pub fn len(&self) -> usize {
        self.collocation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collocation.is_empty()
    }

    /// Evaluate all L hat functions at offset `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let l = self.collocation.len();
        let mut out = vec![0.0; l];
        for (i, v) in out.iter_mut().enumerate() {
            let center = self.collocation[i];
            let lo = if i == 0 { self.left } else { self.collocation[i - 1] };
            let hi = if i + 1 == l {
                self.right
            } else {
                self.collocation[i + 1]
            };
            if x >= lo && x < center {
                *v = (x - lo) / (center - lo);
            } else if x >= center && x < hi {
                *v = (hi - x) / (hi - center);
            }
        }
        out
    }
}

/// Anisotropic basis on a disc: one isotropic center function plus rings of
/// azimuthal hats. Radial coordinates are Euclidean lengths on the plane and
/// geodesic radians on the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialAnisotropicBasis {
    pub r_cutoff: f64,
    pub n_rings: usize,
    pub n_azimuth: usize,
}

impl RadialAnisotropicBasis {
    pub fn new(r_cutoff: f64, n_rings: usize, n_azimuth: usize) -> Result<Self> {
        if r_cutoff <= 0.0 {
            return Err(Error::InvalidArgument("r_cutoff must be > 0".into()));
        }
        if n_azimuth == 0 {
            return Err(Error::InvalidArgument("n_azimuth must be >= 1".into()));
        }
        Ok(RadialAnisotropicBasis {
            r_cutoff,
            n_rings,
            n_azimuth,
        })
    }

    /// Total number of basis functions.
    pub fn len(&self) -> usize {
        1 + self.n_rings * self.n_azimuth
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Radial spacing between collocation rings.
    pub fn ring_spacing(&self) -> f64 {
        self.r_cutoff / (self.n_rings + 1) as f64
    }

    /// Evaluate all basis functions at polar offset `(radial, azimuthal)`.
    pub fn eval(&self, radial: f64, azimuthal: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        if radial >= self.r_cutoff || radial < 0.0 {
            return out;
        }
        let dr = self.ring_spacing();
        // center function depends on radius only
        if radial < dr {
            out[0] = (dr - radial) / dr;
        }
        if self.n_rings == 0 {
            return out;
        }
        let dphi = 2.0 * PI / self.n_azimuth as f64;
        for k in 1..=self.n_rings {
            let rk = k as f64 * dr;
            let hat_r = 1.0 - (radial - rk).abs() / dr;
            if hat_r <= 0.0 {
                continue;
            }
            for a in 0..self.n_azimuth {
                let phi_a = a as f64 * dphi;
                // periodic distance on the circle
                let mut dist = (azimuthal - phi_a).rem_euclid(2.0 * PI);
                if dist > PI {
                    dist = 2.0 * PI - dist;
                }
                let hat_phi = 1.0 - dist / dphi;
                if hat_phi > 0.0 {
                    out[1 + (k - 1) * self.n_azimuth + a] = hat_r * hat_phi;
                }
            }
        }
        out
    }
}

/// The planar default: five basis functions (one center plus a ring of four)
/// with a cutoff radius of 0.007 on a unit-extent domain scale.
pub fn default_planar_basis() -> RadialAnisotropicBasis {
    RadialAnisotropicBasis {
        r_cutoff: 0.007,
        n_rings: 1,
        n_azimuth: 4,
    }
}
