//! The local neural operator: lifting, N blocks of four summed branches
//! (spectral, differential, local integral, pointwise linear) with a GELU
//! nonlinearity after each block sum, then a two-layer projection.
//!
//! Backward passes mirror the forward structure with explicit per-layer
//! vector-Jacobian products; gradients are carried in a model-shaped
//! container so the flattened layouts always agree.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::RadialAnisotropicBasis;
use crate::differential::{
    diff_conv_forward, diff_conv_vjp, DifferentialKernel, PaddingMode,
};
use crate::disco::{
    assemble_planar, assemble_spherical, disco_forward, disco_vjp, AssembledKernel, DiscoParams,
    KernelBasis,
};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{Grid, Topology};
use crate::random::sample_standard_normal;
use crate::spectral::{spectral_conv_forward, spectral_conv_vjp, SpectralWeights};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_prime(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub spectral: bool,
    pub differential: bool,
    pub local_integral: bool,
    pub pointwise: bool,
    /// Total signed retained modes per dimension (spectral branch).
    #[serde(default)]
    pub modes: Vec<usize>,
    /// Stencil size S of the differential branch.
    #[serde(default = "default_diff_size")]
    pub diff_size: usize,
    #[serde(default = "default_padding")]
    pub padding: PaddingMode,
    /// Kernel basis of the local integral branch.
    #[serde(default)]
    pub basis: Option<KernelBasis>,
    /// Pin the branch-sum scale (default: n^{-1/2} over enabled branches).
    #[serde(default)]
    pub scale_override: Option<f64>,
}

fn default_diff_size() -> usize {
    3
}

fn default_padding() -> PaddingMode {
    PaddingMode::Reflective
}

impl BlockConfig {
    pub fn enabled_count(&self) -> usize {
        [self.spectral, self.differential, self.local_integral, self.pointwise]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn scale(&self) -> f64 {
        self.scale_override
            .unwrap_or_else(|| 1.0 / (self.enabled_count() as f64).sqrt())
    }

    fn validate(&self) -> Result<()> {
        if self.enabled_count() == 0 {
            return Err(Error::InvalidArgument(
                "block must enable at least one branch".into(),
            ));
        }
        if self.spectral && self.modes.is_empty() {
            return Err(Error::InvalidArgument(
                "spectral branch requires modes".into(),
            ));
        }
        if self.local_integral && self.basis.is_none() {
            return Err(Error::InvalidArgument(
                "local integral branch requires a kernel basis".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Data channels of the input field (coordinate channels are appended
    /// automatically when `append_coords` is set).
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    #[serde(default)]
    pub append_coords: bool,
    #[serde(default)]
    pub activation: Activation,
    pub blocks: Vec<BlockConfig>,
}

impl ModelConfig {
    pub fn lifting_inputs(&self, dim: usize) -> usize {
        self.in_channels + if self.append_coords { dim } else { 0 }
    }
}

/// A 1x1 channel-mixing layer with bias; `weight` is `(out, in)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseLinear {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PointwiseLinear {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        PointwiseLinear {
            in_channels,
            out_channels,
            weight: vec![0.0; in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn forward(&self, input: &Field) -> Result<Field> {
        if input.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "pointwise layer expects {} channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let n = input.grid.len();
        let mut out = Field::zeros(input.grid.clone(), input.batch, self.out_channels);
        for b in 0..input.batch {
            let dst = &mut out.data[b * self.out_channels * n..][..self.out_channels * n];
            for co in 0..self.out_channels {
                dst[co * n..(co + 1) * n].fill(self.bias[co]);
            }
            let src = &input.data[b * self.in_channels * n..][..self.in_channels * n];
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    self.in_channels,
                    n,
                    1.0,
                    self.weight.as_ptr(),
                    self.in_channels as isize,
                    1,
                    src.as_ptr(),
                    n as isize,
                    1,
                    1.0,
                    dst.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(out)
    }

    /// Returns (grad_weight, grad_bias, grad_input).
    pub fn vjp(&self, input: &Field, upstream: &Field) -> Result<(Vec<f64>, Vec<f64>, Field)> {
        let n = input.grid.len();
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        let mut gi = Field::zeros(input.grid.clone(), input.batch, self.in_channels);
        for b in 0..input.batch {
            let up = &upstream.data[b * self.out_channels * n..][..self.out_channels * n];
            for co in 0..self.out_channels {
                gb[co] += up[co * n..(co + 1) * n].iter().sum::<f64>();
            }
            let src = &input.data[b * self.in_channels * n..][..self.in_channels * n];
            let dst = &mut gi.data[b * self.in_channels * n..][..self.in_channels * n];
            unsafe {
                // grad_w (co x ci) += up (co x n) . src^T (n x ci)
                matrixmultiply::dgemm(
                    self.out_channels,
                    n,
                    self.in_channels,
                    1.0,
                    up.as_ptr(),
                    n as isize,
                    1,
                    src.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    self.in_channels as isize,
                    1,
                );
                // grad_in (ci x n) = w^T (ci x co) . up (co x n)
                matrixmultiply::dgemm(
                    self.in_channels,
                    self.out_channels,
                    n,
                    1.0,
                    self.weight.as_ptr(),
                    1,
                    self.in_channels as isize,
                    up.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    dst.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok((gw, gb, gi))
    }
}

/// Per-block learnable parameters; `None` where the branch is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub spectral: Option<SpectralWeights>,
    pub differential: Option<DifferentialKernel>,
    pub local_integral: Option<DiscoParams>,
    pub pointwise: Option<PointwiseLinear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalNOModel {
    pub config: ModelConfig,
    /// Grid dimensionality the model was built for.
    pub dim: usize,
    pub lifting: PointwiseLinear,
    pub blocks: Vec<BlockParams>,
    pub proj1: PointwiseLinear,
    pub proj2: PointwiseLinear,
}

impl LocalNOModel {
    /// All-zero parameters for the given config and spatial dimension.
    pub fn zeros(config: ModelConfig, dim: usize) -> Result<Self> {
        if config.width == 0 || config.blocks.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs positive width and at least one block".into(),
            ));
        }
        for b in &config.blocks {
            b.validate()?;
        }
        let w = config.width;
        let blocks = config
            .blocks
            .iter()
            .map(|bc| {
                Ok(BlockParams {
                    spectral: if bc.spectral {
                        Some(SpectralWeights::zeros(w, w, bc.modes.clone())?)
                    } else {
                        None
                    },
                    differential: if bc.differential {
                        Some(DifferentialKernel::zeros(w, w, dim, bc.diff_size, bc.padding))
                    } else {
                        None
                    },
                    local_integral: if bc.local_integral {
                        Some(DiscoParams::zeros(w, w, bc.basis.as_ref().unwrap().len()))
                    } else {
                        None
                    },
                    pointwise: if bc.pointwise {
                        Some(PointwiseLinear::zeros(w, w))
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalNOModel {
            lifting: PointwiseLinear::zeros(config.lifting_inputs(dim), w),
            proj1: PointwiseLinear::zeros(w, 2 * w),
            proj2: PointwiseLinear::zeros(2 * w, config.out_channels),
            blocks,
            config,
            dim,
        })
    }

    /// Random initialization with per-layer fan-in scaling.
    pub fn init(config: ModelConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut m = LocalNOModel::zeros(config, dim)?;
        let init_pointwise = |p: &mut PointwiseLinear, rng: &mut dyn rand::RngCore| {
            let bound = (1.0 / p.in_channels as f64).sqrt();
            for w in p.weight.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            for b in p.bias.iter_mut() {
                *b = rng.gen_range(-bound..bound);
            }
        };
        init_pointwise(&mut m.lifting, rng);
        for block in m.blocks.iter_mut() {
            if let Some(sw) = block.spectral.as_mut() {
                let std = (1.0 / (sw.in_channels * sw.out_channels) as f64).sqrt();
                for c in sw.weights.iter_mut() {
                    *c = Complex64::new(
                        std * sample_standard_normal(rng),
                        std * sample_standard_normal(rng),
                    );
                }
            }
            if let Some(dk) = block.differential.as_mut() {
                let bound = (1.0 / (dk.in_channels * dk.tap_count()) as f64).sqrt();
                for t in dk.taps.iter_mut() {
                    *t = rng.gen_range(-bound..bound);
                }
            }
            if let Some(dp) = block.local_integral.as_mut() {
                let bound = (1.0 / (dp.in_channels * dp.l_count) as f64).sqrt();
                for t in dp.theta.iter_mut() {
                    *t = rng.gen_range(-bound..bound);
                }
            }
            if let Some(pw) = block.pointwise.as_mut() {
                init_pointwise(pw, rng);
            }
        }
        init_pointwise(&mut m.proj1, rng);
        init_pointwise(&mut m.proj2, rng);
        Ok(m)
    }
}

/// Exact learnable scalar count; complex weights count as two.
pub fn count_params(model: &LocalNOModel) -> usize {
    params_to_vec(model).len()
}

/// Flatten every learnable scalar in a fixed order (complex weights as
/// re, im pairs). The inverse is `vec_to_params`.
pub fn params_to_vec(model: &LocalNOModel) -> Vec<f64> {
    let mut v = Vec::new();
    let push_pw = |v: &mut Vec<f64>, p: &PointwiseLinear| {
        v.extend_from_slice(&p.weight);
        v.extend_from_slice(&p.bias);
    };
    push_pw(&mut v, &model.lifting);
    for b in &model.blocks {
        if let Some(sw) = &b.spectral {
            for c in &sw.weights {
                v.push(c.re);
                v.push(c.im);
            }
        }
        if let Some(dk) = &b.differential {
            v.extend_from_slice(&dk.taps);
        }
        if let Some(dp) = &b.local_integral {
            v.extend_from_slice(&dp.theta);
        }
        if let Some(pw) = &b.pointwise {
            push_pw(&mut v, pw);
        }
    }
    push_pw(&mut v, &model.proj1);
    push_pw(&mut v, &model.proj2);
    v
}

pub fn vec_to_params(model: &mut LocalNOModel, v: &[f64]) -> Result<()> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *pos + n > v.len() {
            return Err(Error::ShapeMismatch("parameter vector too short".into()));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    let fill_pw = |pos: &mut usize, p: &mut PointwiseLinear| -> Result<()> {
        let wr = take(pos, p.weight.len())?;
        p.weight.copy_from_slice(&v[wr]);
        let br = take(pos, p.bias.len())?;
        p.bias.copy_from_slice(&v[br]);
        Ok(())
    };
    fill_pw(&mut pos, &mut model.lifting)?;
    for b in model.blocks.iter_mut() {
        if let Some(sw) = b.spectral.as_mut() {
            let r = take(&mut pos, 2 * sw.weights.len())?;
            for (c, pair) in sw.weights.iter_mut().zip(v[r].chunks(2)) {
                *c = Complex64::new(pair[0], pair[1]);
            }
        }
        if let Some(dk) = b.differential.as_mut() {
            let n = dk.taps.len();
            dk.taps.copy_from_slice(&v[take(&mut pos, n)?]);
        }
        if let Some(dp) = b.local_integral.as_mut() {
            let n = dp.theta.len();
            dp.theta.copy_from_slice(&v[take(&mut pos, n)?]);
        }
        if let Some(pw) = b.pointwise.as_mut() {
            fill_pw(&mut pos, pw)?;
        }
    }
    fill_pw(&mut pos, &mut model.proj1)?;
    fill_pw(&mut pos, &mut model.proj2)?;
    if pos != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector has {} extra entries",
            v.len() - pos
        )));
    }
    Ok(())
}

/// Assembled DISCO kernels for a concrete grid; rebuilt on resolution change
/// with the same basis and coefficients (same receptive field).
pub struct GridBinding {
    pub grid: Arc<Grid>,
    pub kernels: Vec<Option<Arc<AssembledKernel>>>,
}

pub fn bind_grid(model: &LocalNOModel, grid: Arc<Grid>) -> Result<GridBinding> {
    let kernels = model
        .config
        .blocks
        .iter()
        .map(|bc| {
            if !bc.local_integral {
                return Ok(None);
            }
            let basis = bc.basis.as_ref().unwrap();
            let kernel = match grid.topology {
                Topology::Sphere => {
                    let rb: &RadialAnisotropicBasis = match basis {
                        KernelBasis::Radial(rb) => rb,
                        _ => {
                            return Err(Error::UnsupportedTopology(
                                "spherical assembly needs a radial basis".into(),
                            ))
                        }
                    };
                    assemble_spherical(grid.clone(), grid.clone(), rb)?
                }
                Topology::PeriodicBox { .. } | Topology::BoundedBox { .. } => {
                    assemble_planar(grid.clone(), grid.clone(), basis)?
                }
                Topology::Unstructured => {
                    return Err(Error::UnsupportedTopology(
                        "model binding requires a structured grid".into(),
                    ))
                }
            };
            Ok(Some(Arc::new(kernel.fold_quadrature())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridBinding { grid, kernels })
}

/// Everything the backward pass needs from a forward evaluation.
pub struct ForwardCache {
    pub augmented: Field,
    /// Input of each block (activation output of the previous stage).
    pub block_inputs: Vec<Field>,
    /// Scaled branch sums, pre-activation.
    pub block_sums: Vec<Field>,
    pub proj1_in: Field,
    pub proj1_out: Field,
    pub proj2_in: Field,
    pub output: Field,
}

fn augment(model: &LocalNOModel, input: &Field) -> Result<Field> {
    if input.channels != model.config.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} input channels, got {}",
            model.config.in_channels, input.channels
        )));
    }
    if input.grid.dim != model.dim {
        return Err(Error::ShapeMismatch(format!(
            "model built for dimension {}, grid has {}",
            model.dim, input.grid.dim
        )));
    }
    if !model.config.append_coords {
        return Ok(input.clone());
    }
    let g = &input.grid;
    let m = g.len();
    let total = input.channels + g.dim;
    let mut out = Field::zeros(g.clone(), input.batch, total);
    for b in 0..input.batch {
        for c in 0..input.channels {
            out.channel_mut(b, c).copy_from_slice(input.channel(b, c));
        }
        for k in 0..g.dim {
            let dst = out.channel_mut(b, input.channels + k);
            for (j, v) in dst.iter_mut().enumerate() {
                *v = g.point(j)[k];
            }
        }
        let _ = m;
    }
    Ok(out)
}

fn activation(model: &LocalNOModel, x: f64) -> f64 {
    match model.config.activation {
        Activation::Gelu => gelu(x),
        Activation::Identity => x,
    }
}

fn activation_prime(model: &LocalNOModel, x: f64) -> f64 {
    match model.config.activation {
        Activation::Gelu => gelu_prime(x),
        Activation::Identity => 1.0,
    }
}

fn apply_activation(model: &LocalNOModel, f: &Field) -> Field {
    let mut out = f.clone();
    for v in out.data.iter_mut() {
        *v = activation(model, *v);
    }
    out
}

fn block_branch_sum(
    model: &LocalNOModel,
    binding: &GridBinding,
    i: usize,
    x: &Field,
) -> Result<Field> {
    let bp = &model.blocks[i];
    let bc = &model.config.blocks[i];
    let mut sum = Field::zeros(x.grid.clone(), x.batch, model.config.width);
    let mut add = |f: Field| {
        for (a, b) in sum.data.iter_mut().zip(&f.data) {
            *a += b;
        }
    };
    if let Some(sw) = &bp.spectral {
        add(spectral_conv_forward(sw, x)?);
    }
    if let Some(dk) = &bp.differential {
        add(diff_conv_forward(dk, x)?);
    }
    if let Some(dp) = &bp.local_integral {
        let kernel = binding.kernels[i].as_ref().ok_or_else(|| {
            Error::InvalidArgument("binding missing an assembled kernel".into())
        })?;
        add(disco_forward(kernel, dp, x)?);
    }
    if let Some(pw) = &bp.pointwise {
        add(pw.forward(x)?);
    }
    let scale = bc.scale();
    for v in sum.data.iter_mut() {
        *v *= scale;
    }
    Ok(sum)
}

pub fn model_forward_cached(
    model: &LocalNOModel,
    binding: &GridBinding,
    input: &Field,
) -> Result<ForwardCache> {
    if !Arc::ptr_eq(&binding.grid, &input.grid) && binding.grid.len() != input.grid.len() {
        return Err(Error::ShapeMismatch(
            "input grid does not match the bound grid".into(),
        ));
    }
    let augmented = augment(model, input)?;
    let mut x = model.lifting.forward(&augmented)?;
    let n_blocks = model.blocks.len();
    let mut block_inputs = Vec::with_capacity(n_blocks);
    let mut block_sums = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let sum = block_branch_sum(model, binding, i, &x)?;
        block_inputs.push(x);
        x = if i + 1 == n_blocks {
            sum.clone()
        } else {
            apply_activation(model, &sum)
        };
        block_sums.push(sum);
    }
    let proj1_in = x;
    let proj1_out = model.proj1.forward(&proj1_in)?;
    let proj2_in = apply_activation(model, &proj1_out);
    let output = model.proj2.forward(&proj2_in)?;
    Ok(ForwardCache {
        augmented,
        block_inputs,
        block_sums,
        proj1_in,
        proj1_out,
        proj2_in,
        output,
    })
}

pub fn model_forward_bound(
    model: &LocalNOModel,
    binding: &GridBinding,
    input: &Field,
) -> Result<Field> {
    Ok(model_forward_cached(model, binding, input)?.output)
}

/// Forward pass with per-call kernel assembly; prefer `bind_grid` +
/// `model_forward_bound` in loops.
pub fn model_forward(model: &LocalNOModel, input: &Field) -> Result<Field> {
    let binding = bind_grid(model, input.grid.clone())?;
    model_forward_bound(model, &binding, input)
}

/// Apply at a different resolution: the differential branch re-reads the
/// grid width, the integral branch reassembles its kernel with unchanged
/// basis and coefficients, the spectral branch keeps its truncation.
pub fn model_apply_at_resolution(model: &LocalNOModel, input: &Field) -> Result<Field> {
    model_forward(model, input)
}

fn gated(model: &LocalNOModel, upstream: &Field, pre: &Field) -> Field {
    let mut g = upstream.clone();
    for (gv, &s) in g.data.iter_mut().zip(&pre.data) {
        *gv *= activation_prime(model, s);
    }
    g
}

/// Backpropagate a loss gradient w.r.t. the model output. Returns a
/// model-shaped gradient container (flatten with `params_to_vec`).
pub fn model_backward(
    model: &LocalNOModel,
    binding: &GridBinding,
    cache: &ForwardCache,
    upstream: &Field,
) -> Result<LocalNOModel> {
    let mut grads = LocalNOModel::zeros(model.config.clone(), model.dim)?;

    // projection
    let (gw2, gb2, g_proj2_in) = model.proj2.vjp(&cache.proj2_in, upstream)?;
    grads.proj2.weight = gw2;
    grads.proj2.bias = gb2;
    let g_proj1_out = gated(model, &g_proj2_in, &cache.proj1_out);
    let (gw1, gb1, mut g_x) = model.proj1.vjp(&cache.proj1_in, &g_proj1_out)?;
    grads.proj1.weight = gw1;
    grads.proj1.bias = gb1;

    // blocks in reverse
    let n_blocks = model.blocks.len();
    for i in (0..n_blocks).rev() {
        let bc = &model.config.blocks[i];
        let bp = &model.blocks[i];
        let x = &cache.block_inputs[i];
        // gradient w.r.t. the pre-activation block sum
        let g_sum = if i + 1 == n_blocks {
            g_x
        } else {
            gated(model, &g_x, &cache.block_sums[i])
        };
        // scale applies to every branch upstream
        let mut g_branch = g_sum;
        let scale = bc.scale();
        for v in g_branch.data.iter_mut() {
            *v *= scale;
        }
        let mut g_input = Field::zeros(x.grid.clone(), x.batch, x.channels);
        let mut add_input = |f: Field| {
            for (a, b) in g_input.data.iter_mut().zip(&f.data) {
                *a += b;
            }
        };
        if let Some(sw) = &bp.spectral {
            let (gw, gi) = spectral_conv_vjp(sw, x, &g_branch)?;
            grads.blocks[i].spectral.as_mut().unwrap().weights = gw;
            add_input(gi);
        }
        if let Some(dk) = &bp.differential {
            let (gt, gi) = diff_conv_vjp(dk, x, &g_branch)?;
            grads.blocks[i].differential.as_mut().unwrap().taps = gt;
            add_input(gi);
        }
        if let Some(dp) = &bp.local_integral {
            let kernel = binding.kernels[i].as_ref().unwrap();
            let (gt, gi) = disco_vjp(kernel, dp, x, &g_branch)?;
            grads.blocks[i].local_integral.as_mut().unwrap().theta = gt.theta;
            add_input(gi);
        }
        if let Some(pw) = &bp.pointwise {
            let (gw, gb, gi) = pw.vjp(x, &g_branch)?;
            let gpw = grads.blocks[i].pointwise.as_mut().unwrap();
            gpw.weight = gw;
            gpw.bias = gb;
            add_input(gi);
        }
        g_x = g_input;
    }

    let (gw, gb, _) = model.lifting.vjp(&cache.augmented, &g_x)?;
    grads.lifting.weight = gw;
    grads.lifting.bias = gb;
    Ok(grads)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dim: usize,
    param_count: usize,
    config: ModelConfig,
}

/// Checkpoint layout: u64 little-endian header length, JSON header, then the
/// flattened parameters as little-endian f64.
pub fn save_checkpoint(model: &LocalNOModel, path: &Path) -> Result<()> {
    let params = params_to_vec(model);
    let header = serde_json::to_vec(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dim: model.dim,
        param_count: params.len(),
        config: model.config.clone(),
    })?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    let mut payload = Vec::with_capacity(params.len() * 8);
    for p in &params {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LocalNOModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::IncompatibleCheckpoint("file too short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::IncompatibleCheckpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| Error::IncompatibleCheckpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let payload = &bytes[8 + hlen..];
    if payload.len() != header.param_count * 8 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            header.param_count * 8
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::IncompatibleCheckpoint(
            "non-finite parameters".into(),
        ));
    }
    let mut model = LocalNOModel::zeros(header.config, header.dim)?;
    vec_to_params(&mut model, &params)
        .map_err(|_| Error::IncompatibleCheckpoint("parameter count mismatch".into()))?;
    Ok(model)
}
