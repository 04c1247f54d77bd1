//! Discrete Daubechies wavelet transforms.
//!
//! Conventions follow the common `pywt` layout: analysis computes
//! `a[o] = Σ_j dec_lo[j] · x̃[2o + 1 − j]` on the extended signal `x̃`, so a
//! length-`N` axis yields `⌊(N + L − 1) / 2⌋` coefficients per band under
//! symmetric extension and `⌈N / 2⌉` under periodization.
//!
//! [`dwt_forward`]/[`dwt_inverse`] work on plain `f64` arrays. [`GridWavelet`]
//! expresses the same transform as per-axis matrices applied on a [`Tape`],
//! which makes it differentiable with the transpose as its adjoint.
//!
//! [`Tape`]: crate::tensor::Tape

mod coefficients;
mod grid;

pub use grid::GridWavelet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveletError {
    #[error("unsupported wavelet db{0}, expected db1..db10")]
    UnsupportedOrder(usize),
    #[error("level {level}, axis {axis}: length {len} is shorter than the filter ({filter_len} taps)")]
    AxisTooShort {
        level: usize,
        axis: usize,
        len: usize,
        filter_len: usize,
    },
    #[error("at least one decomposition level is required")]
    NoLevels,
    #[error("coefficient mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, WaveletError>;

/// Signal extension at the axis ends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Half-sample symmetric: `x[-1] = x[0]`.
    #[default]
    Symmetric,
    /// Orthogonal periodization; odd lengths are padded by repeating the last sample.
    Periodic,
}

/// Orthonormal two-channel filter bank of the Daubechies family.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFilter {
    pub order: usize,
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

impl WaveletFilter {
    pub fn len(&self) -> usize {
        self.dec_lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dec_lo.is_empty()
    }

    pub fn name(&self) -> String {
        format!("db{}", self.order)
    }
}

/// Filter bank for `dbN`, `N` in 1..=10.
pub fn filter_bank(order: usize) -> Result<WaveletFilter> {
    let rec_lo = coefficients::scaling(order).ok_or(WaveletError::UnsupportedOrder(order))?;
    let rec_lo = rec_lo.to_vec();
    let dec_lo: Vec<f64> = rec_lo.iter().rev().copied().collect();
    let dec_hi: Vec<f64> = rec_lo
        .iter()
        .enumerate()
        .map(|(k, &h)| if k % 2 == 0 { -h } else { h })
        .collect();
    let rec_hi = dec_hi.iter().rev().copied().collect();
    Ok(WaveletFilter {
        order,
        dec_lo,
        dec_hi,
        rec_lo,
        rec_hi,
    })
}

/// Parses `"db4"` style names.
pub fn parse_family(name: &str) -> Result<WaveletFilter> {
    let order = name
        .strip_prefix("db")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| WaveletError::Mismatch(format!("unknown wavelet family {name:?}")))?;
    filter_bank(order)
}

/// Coefficients per band for an axis of length `n`.
pub fn band_len(n: usize, filter_len: usize, mode: Boundary) -> usize {
    match mode {
        Boundary::Symmetric => (n + filter_len - 1) / 2,
        Boundary::Periodic => n.div_ceil(2),
    }
}

fn symmetric_index(k: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = k.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Single-level analysis of one axis: `(approx, detail)`.
pub fn dwt1d(x: &[f64], filter: &WaveletFilter, mode: Boundary) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let l = filter.len();
    let out = band_len(n, l, mode);
    let mut a = vec![0.0; out];
    let mut d = vec![0.0; out];
    let padded = n + n % 2;
    let sample = |k: isize| -> f64 {
        match mode {
            Boundary::Symmetric => x[symmetric_index(k, n)],
            Boundary::Periodic => x[(k.rem_euclid(padded as isize) as usize).min(n - 1)],
        }
    };
    for o in 0..out {
        let (mut sa, mut sd) = (0.0, 0.0);
        for j in 0..l {
            let v = sample(2 * o as isize + 1 - j as isize);
            sa += filter.dec_lo[j] * v;
            sd += filter.dec_hi[j] * v;
        }
        a[o] = sa;
        d[o] = sd;
    }
    (a, d)
}

/// Single-level synthesis of one axis back to length `n`.
pub fn idwt1d(a: &[f64], d: &[f64], n: usize, filter: &WaveletFilter, mode: Boundary) -> Vec<f64> {
    let l = filter.len();
    let mut y = vec![0.0; n];
    match mode {
        Boundary::Symmetric => {
            for (i, yi) in y.iter_mut().enumerate() {
                let mut s = 0.0;
                for (o, (&ca, &cd)) in a.iter().zip(d).enumerate() {
                    let j = 2 * o as isize + 1 - i as isize;
                    if (0..l as isize).contains(&j) {
                        s += filter.dec_lo[j as usize] * ca + filter.dec_hi[j as usize] * cd;
                    }
                }
                *yi = s;
            }
        }
        Boundary::Periodic => {
            let padded = n + n % 2;
            let mut full = vec![0.0; padded];
            for (o, (&ca, &cd)) in a.iter().zip(d).enumerate() {
                for j in 0..l {
                    let k = (2 * o as isize + 1 - j as isize).rem_euclid(padded as isize) as usize;
                    full[k] += filter.dec_lo[j] * ca + filter.dec_hi[j] * cd;
                }
            }
            y.copy_from_slice(&full[..n]);
        }
    }
    y
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Field {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(WaveletError::Mismatch(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Applies `f` to every 1-D line along `axis`, producing lines of length `out`.
    fn map_axis(&self, axis: usize, out: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Field {
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = out;
        let mut res = Field::zeros(&shape);
        let mut line = vec![0.0; n];
        let mut line_out = vec![0.0; out];
        for o in 0..outer {
            for i in 0..inner {
                for (k, v) in line.iter_mut().enumerate() {
                    *v = self.data[(o * n + k) * inner + i];
                }
                f(&line, &mut line_out);
                for (k, &v) in line_out.iter().enumerate() {
                    res.data[(o * out + k) * inner + i] = v;
                }
            }
        }
        res
    }
}

/// Detail band; bit `a` of `mask` is set when the band is high-pass along axis `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub mask: usize,
    pub field: Field,
}

/// Output of [`dwt_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoeffs {
    pub order: usize,
    pub mode: Boundary,
    /// Input shape at each level, finest first.
    pub level_shapes: Vec<Vec<usize>>,
    pub approx: Field,
    /// `2^D − 1` detail bands per level, finest level first.
    pub details: Vec<Vec<Band>>,
}

impl WaveletCoeffs {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.level_shapes[0]
    }

    /// All coefficients, approximation first then levels coarsest to finest.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.approx.data.clone();
        for level in self.details.iter().rev() {
            for b in level {
                v.extend_from_slice(&b.field.data);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.approx.data.len()
            + self
                .details
                .iter()
                .flatten()
                .map(|b| b.field.data.len())
                .sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn energy(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum()
    }
}

/// Separable one-level split of `x` into `2^D` bands indexed by mask.
fn split(x: &Field, filter: &WaveletFilter, mode: Boundary) -> Vec<Field> {
    let mut bands = vec![x.clone()];
    for axis in (0..x.shape.len()).rev() {
        let out = band_len(x.shape[axis], filter.len(), mode);
        let mut next = Vec::with_capacity(bands.len() * 2);
        for b in &bands {
            next.push(b.map_axis(axis, out, |l, o| o.copy_from_slice(&dwt1d(l, filter, mode).0)));
            next.push(b.map_axis(axis, out, |l, o| o.copy_from_slice(&dwt1d(l, filter, mode).1)));
        }
        bands = next;
    }
    bands
}

fn synth_axis(lo: &Field, hi: &Field, axis: usize, n: usize, filter: &WaveletFilter, mode: Boundary) -> Field {
    let m = lo.shape[axis];
    let mut shape = lo.shape.clone();
    shape[axis] = n;
    let inner: usize = lo.shape[axis + 1..].iter().product();
    let outer: usize = lo.shape[..axis].iter().product();
    let mut res = Field::zeros(&shape);
    let (mut la, mut ld) = (vec![0.0; m], vec![0.0; m]);
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..m {
                la[k] = lo.data[(o * m + k) * inner + i];
                ld[k] = hi.data[(o * m + k) * inner + i];
            }
            for (k, v) in idwt1d(&la, &ld, n, filter, mode).into_iter().enumerate() {
                res.data[(o * n + k) * inner + i] = v;
            }
        }
    }
    res
}

fn merge(bands: &[&Field], shape: &[usize], filter: &WaveletFilter, mode: Boundary) -> Field {
    let mut cur: Vec<Field> = bands.iter().map(|&b| b.clone()).collect();
    for (axis, &n) in shape.iter().enumerate() {
        cur = cur
            .chunks(2)
            .map(|p| synth_axis(&p[0], &p[1], axis, n, filter, mode))
            .collect();
    }
    cur.pop().expect("one band remains")
}

/// Multi-level separable DWT over every axis of `x`.
pub fn dwt_forward(x: &Field, filter: &WaveletFilter, levels: usize, mode: Boundary) -> Result<WaveletCoeffs> {
    if levels == 0 {
        return Err(WaveletError::NoLevels);
    }
    let mut approx = x.clone();
    let mut level_shapes = Vec::with_capacity(levels);
    let mut details = Vec::with_capacity(levels);
    for level in 1..=levels {
        for (axis, &len) in approx.shape.iter().enumerate() {
            if len < filter.len() {
                return Err(WaveletError::AxisTooShort {
                    level,
                    axis,
                    len,
                    filter_len: filter.len(),
                });
            }
        }
        level_shapes.push(approx.shape.clone());
        let mut bands = split(&approx, filter, mode).into_iter();
        approx = bands.next().expect("approximation band");
        details.push(
            bands
                .enumerate()
                .map(|(i, field)| Band { mask: i + 1, field })
                .collect(),
        );
    }
    Ok(WaveletCoeffs {
        order: filter.order,
        mode,
        level_shapes,
        approx,
        details,
    })
}

/// Inverse of [`dwt_forward`].
pub fn dwt_inverse(coeffs: &WaveletCoeffs, filter: &WaveletFilter) -> Result<Field> {
    if coeffs.order != filter.order {
        return Err(WaveletError::Mismatch(format!(
            "coefficients are db{}, filter is db{}",
            coeffs.order, filter.order
        )));
    }
    if coeffs.levels() == 0 || coeffs.level_shapes.len() != coeffs.levels() {
        return Err(WaveletError::Mismatch("level count".into()));
    }
    let mut approx = coeffs.approx.clone();
    for (level, (shape, bands)) in coeffs.level_shapes.iter().zip(&coeffs.details).enumerate().rev() {
        let d = shape.len();
        let expect: Vec<usize> = shape
            .iter()
            .map(|&n| band_len(n, filter.len(), coeffs.mode))
            .collect();
        if bands.len() != (1 << d) - 1 {
            return Err(WaveletError::Mismatch(format!(
                "level {}: {} detail bands for {d} axes",
                level + 1,
                bands.len()
            )));
        }
        let mut all: Vec<&Field> = vec![&approx];
        for (i, b) in bands.iter().enumerate() {
            if b.mask != i + 1 {
                return Err(WaveletError::Mismatch(format!("level {}: band order", level + 1)));
            }
            all.push(&b.field);
        }
        if let Some(bad) = all.iter().find(|f| f.shape != expect) {
            return Err(WaveletError::Mismatch(format!(
                "level {}: band shape {:?}, expected {expect:?}",
                level + 1,
                bad.shape
            )));
        }
        approx = merge(&all, shape, filter, coeffs.mode);
    }
    Ok(approx)
}
