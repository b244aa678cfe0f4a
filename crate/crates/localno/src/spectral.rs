//! Truncated-Fourier global convolution: the spectral branch directly
//! parametrizes the kernel transform on a retained set of low frequencies and
//! mixes channels per mode.
//!
//! Transform normalization is fixed: forward unnormalized, inverse divides by
//! the point count. The `modes` entry per dimension counts total retained
//! signed frequencies; the last dimension stores only the non-negative half
//! and the missing half is completed by conjugate symmetry.

use std::collections::HashMap;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::Grid;

/// Complex mixing weights of shape `(out_channels, in_channels, slots)`,
/// where `slots` is the product of per-dimension retained mode counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Total signed mode count per dimension.
    pub modes: Vec<usize>,
    pub weights: Vec<Complex64>,
}

impl SpectralWeights {
    /// Retained mode count per dimension: all `m` signed frequencies for the
    /// leading dimensions, the non-negative half `ceil(m/2)` for the last.
    pub fn retained_counts(&self) -> Vec<usize> {
        let d = self.modes.len();
        self.modes
            .iter()
            .enumerate()
            .map(|(k, &m)| if k + 1 == d { m.div_ceil(2) } else { m })
            .collect()
    }

    pub fn slot_count(&self) -> usize {
        self.retained_counts().iter().product()
    }

    pub fn zeros(out_channels: usize, in_channels: usize, modes: Vec<usize>) -> Result<Self> {
        if modes.is_empty() || modes.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument(
                "modes must be nonempty and positive".into(),
            ));
        }
        let mut w = SpectralWeights {
            out_channels,
            in_channels,
            modes,
            weights: Vec::new(),
        };
        w.weights = vec![Complex64::new(0.0, 0.0); out_channels * in_channels * w.slot_count()];
        Ok(w)
    }

    pub fn new(
        out_channels: usize,
        in_channels: usize,
        modes: Vec<usize>,
        weights: Vec<Complex64>,
    ) -> Result<Self> {
        let mut w = SpectralWeights::zeros(out_channels, in_channels, modes)?;
        if weights.len() != w.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} spectral weights, got {}",
                w.weights.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidArgument("spectral weights must be finite".into()));
        }
        w.weights = weights;
        Ok(w)
    }

    fn weight(&self, co: usize, ci: usize, slot: usize) -> Complex64 {
        self.weights[(co * self.in_channels + ci) * self.slot_count() + slot]
    }
}

/// Per-slot flat spectrum indices for a concrete grid shape: `(index, mirror
/// index, mirror_retained)` in slot order.
struct ModePlan {
    slots: Vec<(usize, usize, bool)>,
    shape: Vec<usize>,
    n_total: usize,
}

fn mode_plan(w: &SpectralWeights, grid: &Grid) -> Result<ModePlan> {
    let shape = grid.require_shape()?.to_vec();
    if shape.len() != w.modes.len() {
        return Err(Error::ShapeMismatch(format!(
            "weights cover {} dims, grid has {}",
            w.modes.len(),
            shape.len()
        )));
    }
    let d = shape.len();
    // per-dim retained frequency lists, slot order
    let mut freq_lists: Vec<Vec<usize>> = Vec::with_capacity(d);
    for (k, (&m, &n)) in w.modes.iter().zip(&shape).enumerate() {
        if k + 1 == d {
            let r = m.div_ceil(2);
            if r > n / 2 + 1 {
                return Err(Error::InvalidArgument(format!(
                    "modes {m} along the last dimension exceed grid extent {n}"
                )));
            }
            freq_lists.push((0..r).collect());
        } else {
            if m > n {
                return Err(Error::InvalidArgument(format!(
                    "modes {m} along dimension {k} exceed grid extent {n}"
                )));
            }
            let lo = m.div_ceil(2);
            let hi = m / 2;
            let mut f: Vec<usize> = (0..lo).collect();
            f.extend(n - hi..n);
            freq_lists.push(f);
        }
    }
    let mut strides = vec![1usize; d];
    for k in (0..d - 1).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let slot_total: usize = freq_lists.iter().map(|f| f.len()).product();
    // flat index per slot, then mirror membership via a set
    let mut flat = Vec::with_capacity(slot_total);
    let mut idx = vec![0usize; d];
    for _ in 0..slot_total {
        let f: usize = idx
            .iter()
            .zip(&freq_lists)
            .zip(&strides)
            .map(|((&i, list), &s)| list[i] * s)
            .sum();
        let mirror: usize = idx
            .iter()
            .zip(&freq_lists)
            .zip(&shape)
            .zip(&strides)
            .map(|(((&i, list), &n), &s)| ((n - list[i]) % n) * s)
            .sum();
        flat.push((f, mirror));
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < freq_lists[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    let retained: HashMap<usize, ()> = flat.iter().map(|&(f, _)| (f, ())).collect();
    let slots = flat
        .into_iter()
        .map(|(f, m)| (f, m, retained.contains_key(&m)))
        .collect();
    Ok(ModePlan {
        slots,
        n_total: shape.iter().product(),
        shape,
    })
}

thread_local! {
    static FFT_CACHE: std::cell::RefCell<HashMap<(usize, bool), std::sync::Arc<dyn rustfft::Fft<f64>>>> =
        std::cell::RefCell::new(HashMap::new());
}

fn cached_fft(n: usize, inverse: bool) -> std::sync::Arc<dyn rustfft::Fft<f64>> {
    FFT_CACHE.with(|c| {
        c.borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// In-place multidimensional FFT over a row-major complex buffer.
fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let d = shape.len();
    let total: usize = shape.iter().product();
    let mut strides = vec![1usize; d];
    for k in (0..d.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let mut scratch = Vec::new();
    let mut line_buf = Vec::new();
    for axis in 0..d {
        let n = shape[axis];
        let fft = cached_fft(n, inverse);
        scratch.resize(fft.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
        let stride = strides[axis];
        let lines = total / n;
        if stride == 1 {
            // contiguous lines: transform in place, no gather/scatter
            for chunk in data.chunks_exact_mut(n) {
                fft.process_with_scratch(chunk, &mut scratch);
            }
            continue;
        }
        line_buf.resize(n, Complex64::new(0.0, 0.0));
        for line in 0..lines {
            // base offset of this line: distribute `line` over the other axes
            let outer = line / stride;
            let inner = line % stride;
            let base = outer * stride * n + inner;
            for i in 0..n {
                line_buf[i] = data[base + i * stride];
            }
            fft.process_with_scratch(&mut line_buf, &mut scratch);
            for i in 0..n {
                data[base + i * stride] = line_buf[i];
            }
        }
    }
}

fn input_spectra(w: &SpectralWeights, input: &Field, shape: &[usize]) -> Vec<Vec<Complex64>> {
    let n_total: usize = shape.iter().product();
    let mut spectra = Vec::with_capacity(input.batch * w.in_channels);
    for b in 0..input.batch {
        for ci in 0..w.in_channels {
            let mut buf: Vec<Complex64> = input
                .channel(b, ci)
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            debug_assert_eq!(buf.len(), n_total);
            fft_nd(&mut buf, shape, false);
            spectra.push(buf);
        }
    }
    spectra
}

/// Real-input transform, per-mode complex channel mixing on the retained
/// modes, conjugate completion, inverse transform; output is the real part.
pub fn spectral_conv_forward(w: &SpectralWeights, input: &Field) -> Result<Field> {
    if input.channels != w.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, weights expect {}",
            input.channels, w.in_channels
        )));
    }
    let plan = mode_plan(w, &input.grid)?;
    let spectra = input_spectra(w, input, &plan.shape);
    let mut out = Field::zeros(input.grid.clone(), input.batch, w.out_channels);
    let mut u = vec![Complex64::new(0.0, 0.0); plan.n_total];
    for b in 0..input.batch {
        for co in 0..w.out_channels {
            u.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (slot, &(f, mirror, mirror_retained)) in plan.slots.iter().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for ci in 0..w.in_channels {
                    acc += w.weight(co, ci, slot) * spectra[b * w.in_channels + ci][f];
                }
                u[f] = acc;
                if !mirror_retained {
                    u[mirror] = acc.conj();
                }
            }
            fft_nd(&mut u, &plan.shape, true);
            let dst = out.channel_mut(b, co);
            let scale = 1.0 / plan.n_total as f64;
            for (o, c) in dst.iter_mut().zip(&u) {
                *o = c.re * scale;
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of `spectral_conv_forward`, honoring the conjugate
/// completion of unretained mirror modes.
pub fn spectral_conv_vjp(
    w: &SpectralWeights,
    input: &Field,
    upstream: &Field,
) -> Result<(Vec<Complex64>, Field)> {
    if input.channels != w.in_channels
        || upstream.channels != w.out_channels
        || upstream.batch != input.batch
        || upstream.points() != input.points()
    {
        return Err(Error::ShapeMismatch("upstream shape mismatch".into()));
    }
    let plan = mode_plan(w, &input.grid)?;
    let spectra = input_spectra(w, input, &plan.shape);
    let n_total = plan.n_total;
    let slot_count = plan.slots.len();

    let mut grad_w = vec![Complex64::new(0.0, 0.0); w.weights.len()];
    let mut grad_input = Field::zeros(input.grid.clone(), input.batch, w.in_channels);
    let mut g_v = vec![Complex64::new(0.0, 0.0); n_total];
    for b in 0..input.batch {
        // loss-gradient carriers for the full spectrum: (1/N) FFT(upstream)
        let g_f: Vec<Vec<Complex64>> = (0..w.out_channels)
            .map(|co| {
                let mut buf: Vec<Complex64> = upstream
                    .channel(b, co)
                    .iter()
                    .map(|&v| Complex64::new(v / n_total as f64, 0.0))
                    .collect();
                fft_nd(&mut buf, &plan.shape, false);
                buf
            })
            .collect();
        for ci in 0..w.in_channels {
            g_v.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let v = &spectra[b * w.in_channels + ci];
            for co in 0..w.out_channels {
                let gf = &g_f[co];
                let gw = &mut grad_w[(co * w.in_channels + ci) * slot_count..][..slot_count];
                for (slot, &(f, mirror, mirror_retained)) in plan.slots.iter().enumerate() {
                    let mut g_u = gf[f];
                    if !mirror_retained {
                        // the mirror slot was written as conj(U[f])
                        g_u += gf[mirror].conj();
                    }
                    gw[slot] += g_u * v[f].conj();
                    g_v[f] += w.weight(co, ci, slot).conj() * g_u;
                }
            }
            // grad_x = N * Re(IFFT(G_V)); rustfft's inverse is unnormalized,
            // which supplies exactly that factor N
            fft_nd(&mut g_v, &plan.shape, true);
            let dst = grad_input.channel_mut(b, ci);
            for (o, c) in dst.iter_mut().zip(&g_v) {
                *o += c.re;
            }
        }
    }
    Ok((grad_w, grad_input))
}

/// Identity weights on every retainable mode of `grid`: the layer becomes the
/// identity map on real fields.
pub fn identity_weights(channels: usize, grid: &Grid) -> Result<SpectralWeights> {
    let shape = grid.require_shape()?;
    let d = shape.len();
    let modes: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(k, &n)| if k + 1 == d { n + 2 } else { n })
        .collect();
    let mut w = SpectralWeights::zeros(channels, channels, modes)?;
    let slots = w.slot_count();
    for c in 0..channels {
        for s in 0..slots {
            w.weights[(c * channels + c) * slots + s] = Complex64::new(1.0, 0.0);
        }
    }
    Ok(w)
}
