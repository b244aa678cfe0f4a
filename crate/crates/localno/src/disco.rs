//! Sparse assembly and application of discrete-continuous convolutions on
//! planar, toroidal, spherical, and unstructured grids.
//!
//! The kernel is a learnable linear combination of fixed basis functions.
//! Assembly evaluates the group action analytically per output point and
//! stores one sparse matrix per basis function, all sharing one sparsity
//! pattern.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{HatBasis1D, RadialAnisotropicBasis};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{geodesic_offset, Grid, SphereRotation, Topology};

/// Above this input size, assembly switches from the brute-force neighbor
/// scan to spatial hashing (planar) or latitude-band pruning (sphere).
/// Results are identical either way.
const BRUTE_FORCE_MAX: usize = 4096;

/// Kernel basis used by an assembled convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelBasis {
    Hat1D(HatBasis1D),
    Radial(RadialAnisotropicBasis),
}

impl KernelBasis {
    pub fn len(&self) -> usize {
        match self {
            KernelBasis::Hat1D(b) => b.len(),
            KernelBasis::Radial(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cutoff(&self) -> f64 {
        match self {
            KernelBasis::Hat1D(b) => b.cutoff,
            KernelBasis::Radial(b) => b.r_cutoff,
        }
    }
}

/// Per-basis-function sparse matrices `K^(l)_ij = kappa^(l)(g_i^{-1} x_j)`
/// in row-compressed form with one shared sparsity pattern.
///
/// Values are stored entry-major (`values[e * l_count + l]`) so that the
/// per-entry basis vector is contiguous.
#[derive(Debug, Clone)]
pub struct AssembledKernel {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub l_count: usize,
    pub grid_in: Arc<Grid>,
    pub grid_out: Arc<Grid>,
    /// Whether quadrature weights are folded into the stored entries.
    pub quad_folded: bool,
}

impl AssembledKernel {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s * self.l_count..e * self.l_count])
    }

    /// Fold the input quadrature weights into the stored entries.
    pub fn fold_quadrature(mut self) -> Self {
        if !self.quad_folded {
            for (e, &j) in self.col_idx.iter().enumerate() {
                let q = self.grid_in.quad_weights[j];
                for v in &mut self.values[e * self.l_count..(e + 1) * self.l_count] {
                    *v *= q;
                }
            }
            self.quad_folded = true;
        }
        self
    }
}

/// Trainable coefficients `theta` of shape `(out_channels, in_channels, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub l_count: usize,
    pub theta: Vec<f64>,
}

impl DiscoParams {
    pub fn zeros(out_channels: usize, in_channels: usize, l_count: usize) -> Self {
        DiscoParams {
            out_channels,
            in_channels,
            l_count,
            theta: vec![0.0; out_channels * in_channels * l_count],
        }
    }

    pub fn new(
        out_channels: usize,
        in_channels: usize,
        l_count: usize,
        theta: Vec<f64>,
    ) -> Result<Self> {
        if theta.len() != out_channels * in_channels * l_count {
            return Err(Error::ShapeMismatch("theta length mismatch".into()));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("theta entries must be finite".into()));
        }
        Ok(DiscoParams {
            out_channels,
            in_channels,
            l_count,
            theta,
        })
    }
}

/// Common planar frame of the two grids: hash origin, extents, periodicity.
/// Box grids must agree exactly; unstructured point clouds (on either side)
/// get a bounding box over both point sets and are never periodic.
fn planar_frame(grid_in: &Grid, grid_out: &Grid) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    if grid_in.dim != grid_out.dim {
        return Err(Error::InvalidArgument(
            "input and output grids must share dimension".into(),
        ));
    }
    if matches!(grid_in.topology, Topology::Sphere) || matches!(grid_out.topology, Topology::Sphere)
    {
        return Err(Error::UnsupportedTopology(
            "planar assembly does not apply to spheres".into(),
        ));
    }
    match (grid_in.topology.extent(), grid_out.topology.extent()) {
        (Some(ein), Some(eout)) => {
            if ein != eout {
                return Err(Error::InvalidArgument(
                    "input and output grids must share extent".into(),
                ));
            }
            if grid_in.topology.is_periodic() != grid_out.topology.is_periodic() {
                return Err(Error::InvalidArgument(
                    "input and output grids must share periodicity".into(),
                ));
            }
            Ok((vec![0.0; grid_in.dim], ein.to_vec(), grid_in.topology.is_periodic()))
        }
        _ => {
            // at least one unstructured cloud; a torus partner has no
            // minimal-image metric against a cloud
            if grid_in.topology.is_periodic() || grid_out.topology.is_periodic() {
                return Err(Error::UnsupportedTopology(
                    "cannot assemble between periodic and unstructured grids".into(),
                ));
            }
            let d = grid_in.dim;
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for g in [grid_in, grid_out] {
                for j in 0..g.len() {
                    for (k, &x) in g.point(j).iter().enumerate() {
                        lo[k] = lo[k].min(x);
                        hi[k] = hi[k].max(x);
                    }
                }
            }
            let extent = lo
                .iter()
                .zip(&hi)
                .map(|(&a, &b)| (b - a).max(f64::MIN_POSITIVE))
                .collect();
            Ok((lo, extent, false))
        }
    }
}

/// Candidate input indices within `cutoff` of output point `y`, in ascending
/// index order. `hash` is the optional spatial hash over the input points.
struct PlanarHash {
    cells: Vec<Vec<usize>>,
    n_cells: Vec<usize>,
    cell_size: Vec<f64>,
    origin: Vec<f64>,
    periodic: bool,
}

impl PlanarHash {
    fn build(grid: &Grid, origin: &[f64], extent: &[f64], cutoff: f64) -> Self {
        let dim = grid.dim;
        let periodic = grid.topology.is_periodic();
        let n_cells: Vec<usize> = extent
            .iter()
            .map(|&e| ((e / cutoff).floor() as usize).max(1))
            .collect();
        let cell_size: Vec<f64> = extent.iter().zip(&n_cells).map(|(&e, &n)| e / n as f64).collect();
        let total: usize = n_cells.iter().product();
        let mut cells = vec![Vec::new(); total];
        for j in 0..grid.len() {
            let p = grid.point(j);
            let mut idx = 0usize;
            for k in 0..dim {
                let c = (((p[k] - origin[k]) / cell_size[k]).floor() as isize)
                    .clamp(0, n_cells[k] as isize - 1) as usize;
                idx = idx * n_cells[k] + c;
            }
            cells[idx].push(j);
        }
        PlanarHash {
            cells,
            n_cells,
            cell_size,
            origin: origin.to_vec(),
            periodic,
        }
    }

    fn candidates(&self, y: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let dim = y.len();
        let mut center = vec![0isize; dim];
        for k in 0..dim {
            center[k] = ((y[k] - self.origin[k]) / self.cell_size[k]).floor() as isize;
        }
        // visit the 3^d neighborhood of the center cell
        let mut offs = vec![-1isize; dim];
        loop {
            let mut idx = 0usize;
            let mut ok = true;
            for k in 0..dim {
                let n = self.n_cells[k] as isize;
                let mut c = center[k] + offs[k];
                if self.periodic {
                    c = c.rem_euclid(n);
                } else if c < 0 || c >= n {
                    ok = false;
                    break;
                }
                idx = idx * self.n_cells[k] + c as usize;
            }
            if ok {
                out.extend_from_slice(&self.cells[idx]);
            }
            let mut k = dim;
            loop {
                if k == 0 {
                    out.sort_unstable();
                    out.dedup();
                    return;
                }
                k -= 1;
                offs[k] += 1;
                if offs[k] <= 1 {
                    break;
                }
                offs[k] = -1;
            }
        }
    }
}

/// Planar DISCO assembly. Offsets are `x_j - y_i`, taken in the minimal-image
/// metric on the torus. For 1D hat bases the offset is the forward modular
/// distance, so the cutoff may extend to the full extent; radial bases on a
/// torus require the cutoff to stay below half the smallest extent so the
/// minimal image is unique.
pub fn assemble_planar(
    grid_in: Arc<Grid>,
    grid_out: Arc<Grid>,
    basis: &KernelBasis,
) -> Result<AssembledKernel> {
    let (origin, extent, periodic) = planar_frame(&grid_in, &grid_out)?;
    let cutoff = basis.cutoff();
    match basis {
        KernelBasis::Radial(_) => {
            if grid_in.dim != 2 {
                return Err(Error::InvalidArgument(
                    "radial bases require 2-d planar grids".into(),
                ));
            }
            if periodic {
                let half_min = extent.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
                if cutoff >= half_min {
                    return Err(Error::InvalidArgument(format!(
                        "cutoff {cutoff} must be below half the smallest extent {half_min} on a torus"
                    )));
                }
            }
        }
        KernelBasis::Hat1D(_) => {
            if grid_in.dim != 1 {
                return Err(Error::InvalidArgument(
                    "1-d hat bases require 1-d grids".into(),
                ));
            }
            if cutoff > extent[0] {
                return Err(Error::InvalidArgument(
                    "cutoff must not exceed the extent".into(),
                ));
            }
        }
    }

    let l_count = basis.len();
    let m_out = grid_out.len();
    let hash = if grid_in.len() > BRUTE_FORCE_MAX {
        Some(PlanarHash::build(&grid_in, &origin, &extent, cutoff))
    } else {
        None
    };

    let mut row_ptr = Vec::with_capacity(m_out + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut cand = Vec::new();
    let all: Vec<usize> = (0..grid_in.len()).collect();

    for i in 0..m_out {
        let y = grid_out.point(i);
        let candidates: &[usize] = match &hash {
            Some(h) => {
                h.candidates(y, &mut cand);
                &cand
            }
            None => &all,
        };
        let row_start = col_idx.len();
        for &j in candidates {
            let x = grid_in.point(j);
            let vals = match basis {
                KernelBasis::Hat1D(b) => {
                    let mut off = x[0] - y[0];
                    if periodic {
                        off = off.rem_euclid(extent[0]);
                    }
                    if off >= cutoff || off < b.left {
                        continue;
                    }
                    b.eval(off)
                }
                KernelBasis::Radial(b) => {
                    let mut dx = x[0] - y[0];
                    let mut dy = x[1] - y[1];
                    if periodic {
                        dx -= extent[0] * (dx / extent[0]).round();
                        dy -= extent[1] * (dy / extent[1]).round();
                    }
                    let radial = dx.hypot(dy);
                    if radial >= cutoff {
                        continue;
                    }
                    let mut azimuthal = dy.atan2(dx);
                    if azimuthal < 0.0 {
                        azimuthal += 2.0 * std::f64::consts::PI;
                    }
                    b.eval(radial, azimuthal)
                }
            };
            if vals.iter().any(|&v| v != 0.0) {
                col_idx.push(j);
                values.extend_from_slice(&vals);
            }
        }
        if col_idx.len() == row_start {
            return Err(Error::AssemblyDegenerate {
                row: i,
                reason: "no input point within the cutoff".into(),
            });
        }
        row_ptr.push(col_idx.len());
    }

    Ok(AssembledKernel {
        row_ptr,
        col_idx,
        values,
        l_count,
        grid_in,
        grid_out,
        quad_folded: false,
    })
}

/// Spherical DISCO assembly: entry `(i, j, l)` is the l-th basis function
/// evaluated at the geodesic offset of input point `x_j` from output point
/// `g_i`.
pub fn assemble_spherical(
    grid_in: Arc<Grid>,
    grid_out: Arc<Grid>,
    basis: &RadialAnisotropicBasis,
) -> Result<AssembledKernel> {
    if grid_in.topology != Topology::Sphere || grid_out.topology != Topology::Sphere {
        return Err(Error::UnsupportedTopology(
            "spherical assembly requires sphere grids".into(),
        ));
    }
    let cutoff = basis.r_cutoff;
    let l_count = basis.len();
    let m_out = grid_out.len();

    // latitude-band pruning index: input indices sorted by colatitude
    let band = if grid_in.len() > BRUTE_FORCE_MAX {
        let mut by_theta: Vec<usize> = (0..grid_in.len()).collect();
        by_theta.sort_by(|&a, &b| {
            grid_in
                .point(a)[0]
                .partial_cmp(&grid_in.point(b)[0])
                .unwrap()
                .then(a.cmp(&b))
        });
        Some(by_theta)
    } else {
        None
    };

    let mut row_ptr = Vec::with_capacity(m_out + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut cand: Vec<usize> = Vec::new();
    let all: Vec<usize> = (0..grid_in.len()).collect();

    for i in 0..m_out {
        let g = grid_out.point(i);
        let center = SphereRotation {
            colatitude: g[0],
            longitude: g[1],
        };
        let candidates: &[usize] = match &band {
            Some(sorted) => {
                let lo = g[0] - cutoff;
                let hi = g[0] + cutoff;
                let start = sorted.partition_point(|&j| grid_in.point(j)[0] < lo);
                let end = sorted.partition_point(|&j| grid_in.point(j)[0] <= hi);
                cand.clear();
                cand.extend_from_slice(&sorted[start..end]);
                cand.sort_unstable();
                &cand
            }
            None => &all,
        };
        let row_start = col_idx.len();
        for &j in candidates {
            let p = grid_in.point(j);
            let (radial, azimuthal) = geodesic_offset(center, (p[0], p[1]));
            if radial >= cutoff {
                continue;
            }
            let vals = basis.eval(radial, azimuthal);
            if vals.iter().any(|&v| v != 0.0) {
                col_idx.push(j);
                values.extend_from_slice(&vals);
            }
        }
        if col_idx.len() == row_start {
            return Err(Error::AssemblyDegenerate {
                row: i,
                reason: "no input point within the geodesic cutoff".into(),
            });
        }
        row_ptr.push(col_idx.len());
    }

    Ok(AssembledKernel {
        row_ptr,
        col_idx,
        values,
        l_count,
        grid_in,
        grid_out,
        quad_folded: false,
    })
}

fn check_forward_shapes(kernel: &AssembledKernel, params: &DiscoParams, input: &Field) -> Result<()> {
    if input.grid.len() != kernel.grid_in.len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} points, kernel expects {}",
            input.grid.len(),
            kernel.grid_in.len()
        )));
    }
    if input.channels != params.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, params expect {}",
            input.channels, params.in_channels
        )));
    }
    if params.l_count != kernel.l_count {
        return Err(Error::ShapeMismatch(format!(
            "params have L={}, kernel has L={}",
            params.l_count, kernel.l_count
        )));
    }
    Ok(())
}

/// Point-major copy of one batch item, `vt[j*ci_count + ci]`, with the
/// quadrature weight folded in when the kernel still carries it; keeps the
/// per-entry inner loops of the basis sums contiguous.
fn transpose_item(kernel: &AssembledKernel, input: &Field, b: usize, vt: &mut [f64]) {
    let ci_count = input.channels;
    let m = input.grid.len();
    for ci in 0..ci_count {
        let src = input.channel(b, ci);
        for j in 0..m {
            vt[j * ci_count + ci] = src[j];
        }
    }
    if !kernel.quad_folded {
        for j in 0..m {
            let q = kernel.grid_in.quad_weights[j];
            for v in &mut vt[j * ci_count..(j + 1) * ci_count] {
                *v *= q;
            }
        }
    }
}

/// Per-row accumulation of `t[l][ci] = sum_j K^(l)_ij v[ci][j] q_j` from the
/// point-major copy; the (l, ci) layout keeps the inner loop contiguous.
#[inline]
fn row_basis_sums(kernel: &AssembledKernel, vt: &[f64], ci_count: usize, i: usize, t: &mut [f64]) {
    let l_count = kernel.l_count;
    t.fill(0.0);
    let (cols, vals) = kernel.row(i);
    for (e, &j) in cols.iter().enumerate() {
        let kv = &vals[e * l_count..(e + 1) * l_count];
        let vrow = &vt[j * ci_count..(j + 1) * ci_count];
        for (l, &kl) in kv.iter().enumerate() {
            let trow = &mut t[l * ci_count..(l + 1) * ci_count];
            for (tv, &x) in trow.iter_mut().zip(vrow) {
                *tv += kl * x;
            }
        }
    }
}

/// Theta reindexed to the (l, ci) slot order of [`row_basis_sums`].
fn theta_l_major(params: &DiscoParams) -> Vec<f64> {
    let (co, ci, l) = (params.out_channels, params.in_channels, params.l_count);
    let mut t = vec![0.0; params.theta.len()];
    for o in 0..co {
        for c in 0..ci {
            for lb in 0..l {
                t[(o * l + lb) * ci + c] = params.theta[(o * ci + c) * l + lb];
            }
        }
    }
    t
}

/// DISCO forward pass:
/// `out[i, co] = sum_ci sum_l theta[co,ci,l] sum_j K^(l)_ij v[j, ci] q_j`.
pub fn disco_forward(
    kernel: &AssembledKernel,
    params: &DiscoParams,
    input: &Field,
) -> Result<Field> {
    check_forward_shapes(kernel, params, input)?;
    let m_out = kernel.grid_out.len();
    let l_count = kernel.l_count;
    let (co_count, ci_count) = (params.out_channels, params.in_channels);
    let k_dim = ci_count * l_count;
    let mut out = Field::zeros(kernel.grid_out.clone(), input.batch, co_count);
    // basis sums for every output point, one k_dim row per point, so the
    // theta contraction becomes a single dense multiply per batch item
    let mut tbuf = vec![0.0; m_out * k_dim];
    let mut vt = vec![0.0; input.grid.len() * ci_count];
    let theta_t = theta_l_major(params);
    for b in 0..input.batch {
        transpose_item(kernel, input, b, &mut vt);
        for i in 0..m_out {
            row_basis_sums(kernel, &vt, ci_count, i, &mut tbuf[i * k_dim..][..k_dim]);
        }
        let dst = &mut out.data[b * co_count * m_out..][..co_count * m_out];
        unsafe {
            matrixmultiply::dgemm(
                co_count,
                k_dim,
                m_out,
                1.0,
                theta_t.as_ptr(),
                k_dim as isize,
                1,
                tbuf.as_ptr(),
                1,
                k_dim as isize,
                0.0,
                dst.as_mut_ptr(),
                m_out as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Exact adjoints of [`disco_forward`] with respect to `theta` and the input.
pub fn disco_vjp(
    kernel: &AssembledKernel,
    params: &DiscoParams,
    input: &Field,
    upstream: &Field,
) -> Result<(DiscoParams, Field)> {
    check_forward_shapes(kernel, params, input)?;
    if upstream.channels != params.out_channels || upstream.grid.len() != kernel.grid_out.len() {
        return Err(Error::ShapeMismatch("upstream shape mismatch".into()));
    }
    if upstream.batch != input.batch {
        return Err(Error::ShapeMismatch("upstream batch mismatch".into()));
    }
    let m_out = kernel.grid_out.len();
    let l_count = kernel.l_count;
    let (co_count, ci_count) = (params.out_channels, params.in_channels);

    let k_dim = ci_count * l_count;
    let mut grad_theta = DiscoParams::zeros(co_count, ci_count, l_count);
    let mut grad_input = Field::zeros(input.grid.clone(), input.batch, input.channels);
    let mut tbuf = vec![0.0; m_out * k_dim];
    let mut sbuf = vec![0.0; m_out * k_dim];
    let m_in = input.grid.len();
    let mut vt = vec![0.0; m_in * ci_count];
    let mut gt = vec![0.0; m_in * ci_count];
    let theta_t = theta_l_major(params);
    let mut grad_theta_t = vec![0.0; params.theta.len()];

    for b in 0..input.batch {
        transpose_item(kernel, input, b, &mut vt);
        for i in 0..m_out {
            row_basis_sums(kernel, &vt, ci_count, i, &mut tbuf[i * k_dim..][..k_dim]);
        }
        let up = &upstream.data[b * co_count * m_out..][..co_count * m_out];
        unsafe {
            // grad_theta (co x k) += up (co x m) . tbuf (m x k)
            matrixmultiply::dgemm(
                co_count,
                m_out,
                k_dim,
                1.0,
                up.as_ptr(),
                m_out as isize,
                1,
                tbuf.as_ptr(),
                k_dim as isize,
                1,
                1.0,
                grad_theta_t.as_mut_ptr(),
                k_dim as isize,
                1,
            );
            // s[i, l*ci] = sum_co theta[co, ci, l] * up[co, i]
            matrixmultiply::dgemm(
                k_dim,
                co_count,
                m_out,
                1.0,
                theta_t.as_ptr(),
                1,
                k_dim as isize,
                up.as_ptr(),
                m_out as isize,
                1,
                0.0,
                sbuf.as_mut_ptr(),
                1,
                k_dim as isize,
            );
        }
        // point-major scatter, then fold quadrature while transposing back
        gt.fill(0.0);
        for i in 0..m_out {
            let srow = &sbuf[i * k_dim..][..k_dim];
            let (cols, vals) = kernel.row(i);
            for (e, &j) in cols.iter().enumerate() {
                let kv = &vals[e * l_count..(e + 1) * l_count];
                let grow = &mut gt[j * ci_count..(j + 1) * ci_count];
                for (l, &kl) in kv.iter().enumerate() {
                    let sl = &srow[l * ci_count..(l + 1) * ci_count];
                    for (g, &sv) in grow.iter_mut().zip(sl) {
                        *g += kl * sv;
                    }
                }
            }
        }
        let gin = &mut grad_input.data[b * ci_count * m_in..][..ci_count * m_in];
        for j in 0..m_in {
            let q = if kernel.quad_folded {
                1.0
            } else {
                kernel.grid_in.quad_weights[j]
            };
            for ci in 0..ci_count {
                gin[ci * m_in + j] += q * gt[j * ci_count + ci];
            }
        }
    }
    // back to the canonical (co, ci, l) layout
    for o in 0..co_count {
        for c in 0..ci_count {
            for lb in 0..l_count {
                grad_theta.theta[(o * ci_count + c) * l_count + lb] =
                    grad_theta_t[(o * l_count + lb) * ci_count + c];
            }
        }
    }
    Ok((grad_theta, grad_input))
}

/// The translation-invariant stencil realized by a DISCO kernel on a regular
/// periodic grid, with quadrature folded into the taps.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilTaps {
    /// Per-tap grid offsets, reduced modulo the shape into `[0, n)`.
    pub offsets: Vec<Vec<usize>>,
    /// Tap values, layout `[tap][out_channel][in_channel]`.
    pub taps: Vec<f64>,
    pub out_channels: usize,
    pub in_channels: usize,
}

/// Extract the translation-invariant tap set reproduced by every row of a
/// kernel on a regular periodic grid. Errors when rows are not translates of
/// one another (tolerance 1e-12 on entries).
pub fn dense_equivalent(kernel: &AssembledKernel, params: &DiscoParams) -> Result<StencilTaps> {
    let grid = &kernel.grid_out;
    if !Arc::ptr_eq(&kernel.grid_in, &kernel.grid_out) && kernel.grid_in.as_ref() != grid.as_ref() {
        return Err(Error::InvalidArgument(
            "dense_equivalent requires grid_in == grid_out".into(),
        ));
    }
    if !grid.topology.is_periodic() {
        return Err(Error::UnsupportedTopology(
            "dense_equivalent requires a periodic grid".into(),
        ));
    }
    let shape = grid.require_shape()?.to_vec();
    let dim = shape.len();
    let l_count = kernel.l_count;

    // grid index of a flat point index, row-major, last axis fastest
    let unravel = |mut j: usize| -> Vec<usize> {
        let mut idx = vec![0usize; dim];
        for k in (0..dim).rev() {
            idx[k] = j % shape[k];
            j /= shape[k];
        }
        idx
    };

    let row_map = |i: usize| -> BTreeMap<Vec<usize>, Vec<f64>> {
        let gi = unravel(i);
        let (cols, vals) = kernel.row(i);
        let mut map = BTreeMap::new();
        for (e, &j) in cols.iter().enumerate() {
            let gj = unravel(j);
            let off: Vec<usize> = gj
                .iter()
                .zip(&gi)
                .zip(&shape)
                .map(|((&a, &b), &n)| (a + n - b) % n)
                .collect();
            map.insert(off, vals[e * l_count..(e + 1) * l_count].to_vec());
        }
        map
    };

    let reference = row_map(0);
    for i in 1..grid.len() {
        let row = row_map(i);
        if row.len() != reference.len() {
            return Err(Error::NotEquivariant {
                row_a: 0,
                row_b: i,
                max_diff: f64::INFINITY,
            });
        }
        let mut max_diff = 0.0f64;
        for (off, vals) in &reference {
            match row.get(off) {
                Some(v) => {
                    for (a, b) in vals.iter().zip(v) {
                        max_diff = max_diff.max((a - b).abs());
                    }
                }
                None => {
                    return Err(Error::NotEquivariant {
                        row_a: 0,
                        row_b: i,
                        max_diff: f64::INFINITY,
                    })
                }
            }
        }
        if max_diff > 1e-12 {
            return Err(Error::NotEquivariant {
                row_a: 0,
                row_b: i,
                max_diff,
            });
        }
    }

    let (co_count, ci_count) = (params.out_channels, params.in_channels);
    let q = if kernel.quad_folded {
        1.0
    } else {
        grid.quad_weights[0]
    };
    let mut offsets = Vec::with_capacity(reference.len());
    let mut taps = Vec::with_capacity(reference.len() * co_count * ci_count);
    for (off, vals) in &reference {
        offsets.push(off.clone());
        for co in 0..co_count {
            for ci in 0..ci_count {
                let th = &params.theta
                    [(co * ci_count + ci) * l_count..(co * ci_count + ci + 1) * l_count];
                let tap: f64 = th.iter().zip(vals).map(|(a, b)| a * b).sum();
                taps.push(q * tap);
            }
        }
    }
    Ok(StencilTaps {
        offsets,
        taps,
        out_channels: co_count,
        in_channels: ci_count,
    })
}

/// Grid summary stored in the header of an exported kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGridInfo {
    pub dim: usize,
    pub len: usize,
    pub topology: Topology,
    pub shape: Option<Vec<usize>>,
}

impl KernelGridInfo {
    fn of(grid: &Grid) -> Self {
        KernelGridInfo {
            dim: grid.dim,
            len: grid.len(),
            topology: grid.topology.clone(),
            shape: grid.shape.clone(),
        }
    }
}

/// JSON header of an exported kernel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHeader {
    pub l_count: usize,
    pub nnz: usize,
    pub rows: usize,
    pub quad_folded: bool,
    pub grid_in: KernelGridInfo,
    pub grid_out: KernelGridInfo,
}

/// Write an assembled kernel to `path`: a little-endian `u64` header length,
/// the JSON header, `row_ptr` (rows + 1) and `col_idx` (nnz) as little-endian
/// `u64`, then one little-endian `f64` value array of length nnz per basis
/// function, in basis order.
pub fn export_kernel(kernel: &AssembledKernel, path: &std::path::Path) -> Result<()> {
    let rows = kernel.grid_out.len();
    let nnz = kernel.nnz();
    let header = KernelHeader {
        l_count: kernel.l_count,
        nnz,
        rows,
        quad_folded: kernel.quad_folded,
        grid_in: KernelGridInfo::of(&kernel.grid_in),
        grid_out: KernelGridInfo::of(&kernel.grid_out),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(
        8 + header_bytes.len() + 8 * (rows + 1 + nnz) + 8 * nnz * kernel.l_count,
    );
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for &p in &kernel.row_ptr {
        buf.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for &j in &kernel.col_idx {
        buf.extend_from_slice(&(j as u64).to_le_bytes());
    }
    // de-interleave the entry-major storage into per-basis blocks
    for l in 0..kernel.l_count {
        for e in 0..nnz {
            buf.extend_from_slice(&kernel.values[e * kernel.l_count + l].to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}
