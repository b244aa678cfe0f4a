//! Multi-channel function samples on a grid.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::Grid;

/// Real-valued samples of a (batch of) multi-channel functions on a grid,
/// stored as `batch x channels x points`, point index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Arc<Grid>,
    pub batch: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Arc<Grid>, batch: usize, channels: usize) -> Self {
        let data = vec![0.0; batch * channels * grid.len()];
        Field {
            grid,
            batch,
            channels,
            data,
        }
    }

    pub fn from_data(grid: Arc<Grid>, batch: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match {batch} x {channels} x {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Field {
            grid,
            batch,
            channels,
            data,
        })
    }

    /// Sample each channel function at every grid point.
    pub fn from_fn(grid: Arc<Grid>, funcs: &[&dyn Fn(&[f64]) -> f64]) -> Self {
        let m = grid.len();
        let mut data = Vec::with_capacity(funcs.len() * m);
        for f in funcs {
            for j in 0..m {
                data.push(f(grid.point(j)));
            }
        }
        Field {
            batch: 1,
            channels: funcs.len(),
            data,
            grid,
        }
    }

    pub fn points(&self) -> usize {
        self.grid.len()
    }

    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let m = self.grid.len();
        let start = (b * self.channels + c) * m;
        &self.data[start..start + m]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let m = self.grid.len();
        let start = (b * self.channels + c) * m;
        &mut self.data[start..start + m]
    }

    pub fn same_layout(&self, other: &Field) -> bool {
        self.batch == other.batch
            && self.channels == other.channels
            && self.grid.len() == other.grid.len()
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Circular shift of a field on a regular periodic grid by integer grid
/// steps per dimension.
pub fn translate_field(field: &Field, steps: &[isize]) -> Result<Field> {
    let grid = &field.grid;
    if !grid.topology.is_periodic() {
        return Err(Error::UnsupportedTopology(
            "translate_field requires a periodic regular grid".into(),
        ));
    }
    let shape = grid.require_shape()?;
    if steps.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "steps has {} entries for a {}-d grid",
            steps.len(),
            shape.len()
        )));
    }
    let m = grid.len();
    let dim = shape.len();
    // strides of the row-major point index, last axis fastest
    let mut strides = vec![1usize; dim];
    for k in (0..dim.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let wrapped: Vec<usize> = steps
        .iter()
        .zip(shape)
        .map(|(&s, &n)| s.rem_euclid(n as isize) as usize)
        .collect();

    // destination index for each source point
    let mut dest = vec![0usize; m];
    let mut index = vec![0usize; dim];
    for (j, d) in dest.iter_mut().enumerate() {
        let _ = j;
        *d = index
            .iter()
            .zip(&wrapped)
            .zip(shape)
            .zip(&strides)
            .map(|(((&i, &s), &n), &st)| ((i + s) % n) * st)
            .sum();
        for k in (0..dim).rev() {
            index[k] += 1;
            if index[k] < shape[k] {
                break;
            }
            index[k] = 0;
        }
    }

    let mut out = Field::zeros(field.grid.clone(), field.batch, field.channels);
    for b in 0..field.batch {
        for c in 0..field.channels {
            let src = field.channel(b, c);
            let dst = out.channel_mut(b, c);
            for j in 0..m {
                dst[dest[j]] = src[j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_regular_grid;
    use proptest::prelude::*;

    fn torus(shape: &[usize]) -> Arc<Grid> {
        Arc::new(make_regular_grid(shape, &vec![1.0; shape.len()], true).unwrap())
    }

    #[test]
    fn translate_1d_shifts_forward() {
        let g = torus(&[4]);
        let f = Field::from_data(g.clone(), 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = translate_field(&f, &[1]).unwrap();
        assert_eq!(t.data, vec![4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn translate_zero_and_full_wrap_are_identity() {
        let g = torus(&[3, 4]);
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let f = Field::from_data(g, 1, 1, data).unwrap();
        assert_eq!(translate_field(&f, &[0, 0]).unwrap(), f);
        assert_eq!(translate_field(&f, &[3, 4]).unwrap(), f);
    }

    #[test]
    fn translate_rejects_bounded_grid() {
        let g = Arc::new(make_regular_grid(&[4], &[1.0], false).unwrap());
        let f = Field::zeros(g, 1, 1);
        assert!(matches!(
            translate_field(&f, &[1]),
            Err(Error::UnsupportedTopology(_))
        ));
    }

    proptest! {
        #[test]
        fn translate_then_inverse_is_identity(
            s1 in -5isize..5,
            s2 in -5isize..5,
            values in proptest::collection::vec(-1e3f64..1e3, 12),
        ) {
            let g = torus(&[3, 4]);
            let f = Field::from_data(g, 1, 1, values).unwrap();
            let there = translate_field(&f, &[s1, s2]).unwrap();
            let back = translate_field(&there, &[-s1, -s2]).unwrap();
            prop_assert_eq!(back.data, f.data);
        }
    }
}
