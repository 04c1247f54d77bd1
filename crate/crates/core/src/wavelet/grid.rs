use super::{band_len, dwt1d, idwt1d, Boundary, Result, WaveletError, WaveletFilter};
use crate::tensor::{self, Real, Tensor, Var};
use std::sync::Arc;

struct AxisBank<T> {
    lo: Arc<Tensor<T>>,
    hi: Arc<Tensor<T>>,
    syn_lo: Arc<Tensor<T>>,
    syn_hi: Arc<Tensor<T>>,
}

impl<T: Real> AxisBank<T> {
    fn new(n: usize, filter: &WaveletFilter, mode: Boundary) -> Self {
        let m = band_len(n, filter.len(), mode);
        let mut lo = vec![0.0; m * n];
        let mut hi = vec![0.0; m * n];
        let mut unit = vec![0.0; n];
        for j in 0..n {
            unit[j] = 1.0;
            let (a, d) = dwt1d(&unit, filter, mode);
            for o in 0..m {
                lo[o * n + j] = a[o];
                hi[o * n + j] = d[o];
            }
            unit[j] = 0.0;
        }
        let mut syn_lo = vec![0.0; n * m];
        let mut syn_hi = vec![0.0; n * m];
        let zero = vec![0.0; m];
        let mut unit = vec![0.0; m];
        for o in 0..m {
            unit[o] = 1.0;
            let from_lo = idwt1d(&unit, &zero, n, filter, mode);
            let from_hi = idwt1d(&zero, &unit, n, filter, mode);
            for i in 0..n {
                syn_lo[i * m + o] = from_lo[i];
                syn_hi[i * m + o] = from_hi[i];
            }
            unit[o] = 0.0;
        }
        let mat = |rows, cols, v: Vec<f64>| Arc::new(Tensor::from_f64(&[rows, cols], &v).unwrap());
        Self {
            lo: mat(m, n, lo),
            hi: mat(m, n, hi),
            syn_lo: mat(n, m, syn_lo),
            syn_hi: mat(n, m, syn_hi),
        }
    }
}

/// Multi-level DWT over the leading spatial axes of a `[S₁, …, S_D, C]`
/// tape value, channel axis untouched.
///
/// Coefficients are packed as `[n_coeffs, C]`: the coarsest approximation
/// first, then the detail bands of each level from coarse to fine, each band
/// in row-major order and bands ordered by their high-pass mask.
pub struct GridWavelet<T> {
    shape: Vec<usize>,
    /// Per level, one bank per axis.
    banks: Vec<Vec<AxisBank<T>>>,
    /// Per level, band shape (all bands of a level share it).
    band_shapes: Vec<Vec<usize>>,
}

impl<T: Real> GridWavelet<T> {
    pub fn new(shape: &[usize], filter: &WaveletFilter, levels: usize, mode: Boundary) -> Result<Self> {
        if levels == 0 {
            return Err(WaveletError::NoLevels);
        }
        let mut cur = shape.to_vec();
        let mut banks = Vec::new();
        let mut band_shapes = Vec::new();
        for level in 1..=levels {
            for (axis, &len) in cur.iter().enumerate() {
                if len < filter.len() {
                    return Err(WaveletError::AxisTooShort {
                        level,
                        axis,
                        len,
                        filter_len: filter.len(),
                    });
                }
            }
            banks.push(cur.iter().map(|&n| AxisBank::new(n, filter, mode)).collect());
            cur = cur.iter().map(|&n| band_len(n, filter.len(), mode)).collect();
            band_shapes.push(cur.clone());
        }
        Ok(Self {
            shape: shape.to_vec(),
            banks,
            band_shapes,
        })
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn levels(&self) -> usize {
        self.banks.len()
    }

    /// Coefficient rows per channel.
    pub fn n_coeffs(&self) -> usize {
        let d = self.shape.len();
        let last: usize = self.band_shapes.last().unwrap().iter().product();
        last + self
            .band_shapes
            .iter()
            .map(|s| s.iter().product::<usize>() * ((1 << d) - 1))
            .sum::<usize>()
    }

    fn split<'t>(&self, x: Var<'t, T>, level: usize, depth: usize, out: &mut Vec<Var<'t, T>>) -> tensor::Result<()> {
        let d = self.shape.len();
        if depth == d {
            out.push(x);
            return Ok(());
        }
        let axis = d - 1 - depth;
        let bank = &self.banks[level][axis];
        self.split(x.apply_along_axis(bank.lo.clone(), axis)?, level, depth + 1, out)?;
        self.split(x.apply_along_axis(bank.hi.clone(), axis)?, level, depth + 1, out)
    }

    fn merge<'t>(&self, bands: &[Var<'t, T>], level: usize, depth: usize) -> tensor::Result<Var<'t, T>> {
        let d = self.shape.len();
        if depth == d {
            return Ok(bands[0]);
        }
        let axis = d - 1 - depth;
        let half = bands.len() / 2;
        let bank = &self.banks[level][axis];
        let lo = self.merge(&bands[..half], level, depth + 1)?;
        let hi = self.merge(&bands[half..], level, depth + 1)?;
        lo.apply_along_axis(bank.syn_lo.clone(), axis)?
            .add(hi.apply_along_axis(bank.syn_hi.clone(), axis)?)
    }

    fn check<'t>(&self, x: &Var<'t, T>, rows: Option<usize>) -> tensor::Result<usize> {
        let s = x.shape();
        let ok = match rows {
            None => s.len() == self.shape.len() + 1 && s[..self.shape.len()] == self.shape[..],
            Some(r) => s.len() == 2 && s[0] == r,
        };
        if !ok {
            let mut want = match rows {
                None => self.shape.clone(),
                Some(r) => vec![r],
            };
            want.push(*s.last().unwrap_or(&0));
            return Err(tensor::TensorError::ShapeMismatch {
                op: "grid_wavelet",
                lhs: s,
                rhs: want,
            });
        }
        Ok(*s.last().unwrap())
    }

    /// `[S₁, …, S_D, C]` to `[n_coeffs, C]`.
    pub fn forward<'t>(&self, x: Var<'t, T>) -> tensor::Result<Var<'t, T>> {
        let c = self.check(&x, None)?;
        let mut approx = x;
        let mut per_level = Vec::with_capacity(self.levels());
        for level in 0..self.levels() {
            let mut bands = Vec::with_capacity(1 << self.shape.len());
            self.split(approx, level, 0, &mut bands)?;
            approx = bands[0];
            let rows: usize = self.band_shapes[level].iter().product();
            let details = bands[1..]
                .iter()
                .map(|b| b.reshape(&[rows, c]))
                .collect::<tensor::Result<Vec<_>>>()?;
            per_level.push(details);
        }
        let rows: usize = self.band_shapes.last().unwrap().iter().product();
        let mut parts = vec![approx.reshape(&[rows, c])?];
        for details in per_level.into_iter().rev() {
            parts.extend(details);
        }
        Var::concat(&parts, 0)
    }

    /// `[n_coeffs, C]` back to `[S₁, …, S_D, C]`.
    pub fn inverse<'t>(&self, coeffs: Var<'t, T>) -> tensor::Result<Var<'t, T>> {
        let c = self.check(&coeffs, Some(self.n_coeffs()))?;
        let nb = 1usize << self.shape.len();
        let with_c = |s: &[usize]| {
            let mut v = s.to_vec();
            v.push(c);
            v
        };
        let last = self.band_shapes.last().unwrap();
        let mut offset: usize = last.iter().product();
        let mut approx = coeffs.narrow(0, 0, offset)?.reshape(&with_c(last))?;
        for level in (0..self.levels()).rev() {
            let bs = &self.band_shapes[level];
            let rows: usize = bs.iter().product();
            let mut bands = vec![approx];
            for _ in 1..nb {
                bands.push(coeffs.narrow(0, offset, rows)?.reshape(&with_c(bs))?);
                offset += rows;
            }
            approx = self.merge(&bands, level, 0)?;
        }
        Ok(approx)
    }
}
