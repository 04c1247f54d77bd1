//! Single-sample 3-D convolution (no padding) and its transpose.

use super::tape::BackwardFn;
use super::{Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
struct Geom {
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: usize,
    stride: usize,
}

impl Geom {
    fn cols_rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    fn cols_len(&self) -> usize {
        self.output.iter().product()
    }
}

/// Gathers `x: [C, D, H, W]` into `[C·k³, D'·H'·W']` patch columns.
fn im2col<T: Real>(x: &[T], g: Geom) -> Vec<T> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s) = (g.kernel, g.stride);
    let p = g.cols_len();
    let mut cols = vec![T::zero(); g.cols_rows() * p];
    for c in 0..g.channels {
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let row = ((c * k + a) * k + b) * k + e;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut col = 0;
                    for i in 0..od {
                        for j in 0..oh {
                            let base = ((c * d + i * s + a) * h + j * s + b) * w + e;
                            for l in 0..ow {
                                dst[col] = x[base + l * s];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[C, D, H, W]`.
fn col2im<T: Real>(cols: &[T], g: Geom) -> Vec<T> {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s) = (g.kernel, g.stride);
    let p = g.cols_len();
    let mut x = vec![T::zero(); g.channels * d * h * w];
    for c in 0..g.channels {
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let row = ((c * k + a) * k + b) * k + e;
                    let src = &cols[row * p..(row + 1) * p];
                    let mut col = 0;
                    for i in 0..od {
                        for j in 0..oh {
                            let base = ((c * d + i * s + a) * h + j * s + b) * w + e;
                            for l in 0..ow {
                                x[base + l * s] += src[col];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_out(n: usize, k: usize, s: usize) -> Option<usize> {
    (n >= k && s >= 1).then(|| (n - k) / s + 1)
}

fn bad(op: &'static str, msg: String) -> TensorError {
    TensorError::Invalid { op, msg }
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], per_channel: usize) {
    for (chunk, &b) in y.chunks_mut(per_channel).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Real>(g: &[T], per_channel: usize) -> Vec<T> {
    g.chunks(per_channel).map(|c| c.iter().copied().sum()).collect()
}

impl<'t, T: Real> Var<'t, T> {
    /// `x: [C_in, D, H, W]`, `weight: [C_out, C_in, k, k, k]`, `bias: [C_out]`.
    pub fn conv3d(self, weight: Self, bias: Self, stride: usize) -> Result<Self> {
        let geom = self.tape.with_values(&[self.id, weight.id, bias.id], |v| {
            let (x, w, b) = (v[0].shape(), v[1].shape(), v[2].shape());
            if x.len() != 4 || w.len() != 5 || w[1] != x[0] || b != [w[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d",
                    lhs: x.to_vec(),
                    rhs: w.to_vec(),
                });
            }
            let k = w[2];
            if w[3] != k || w[4] != k {
                return Err(bad("conv3d", format!("kernel must be cubic, got {w:?}")));
            }
            let mut output = [0; 3];
            for i in 0..3 {
                output[i] = conv_out(x[i + 1], k, stride).ok_or_else(|| {
                    bad("conv3d", format!("axis {i} of extent {} shorter than kernel {k}", x[i + 1]))
                })?;
            }
            Ok((
                Geom {
                    channels: x[0],
                    input: [x[1], x[2], x[3]],
                    output,
                    kernel: k,
                    stride,
                },
                w[0],
            ))
        })?;
        let (g, c_out) = geom;
        let rows = g.cols_rows();
        let p = g.cols_len();
        let out = self.tape.with_values(&[self.id, weight.id, bias.id], |v| {
            let cols = im2col(v[0].data(), g);
            let mut y = T::gemm_new(c_out, rows, p, v[1].data(), (rows as isize, 1), &cols, (p as isize, 1));
            add_channel_bias(&mut y, v[2].data(), p);
            Tensor::new(&[c_out, g.output[0], g.output[1], g.output[2]], y)
        })?;
        let bw: BackwardFn<T> = Box::new(move |gy, ins, _| {
            let cols = im2col(ins[0].data(), g);
            let gw = T::gemm_new(c_out, p, rows, gy.data(), (p as isize, 1), &cols, (1, p as isize));
            let gcols = T::gemm_new(rows, c_out, p, ins[1].data(), (1, rows as isize), gy.data(), (p as isize, 1));
            let gx = col2im(&gcols, g);
            vec![
                Some(Tensor::new(ins[0].shape(), gx).unwrap()),
                Some(Tensor::new(ins[1].shape(), gw).unwrap()),
                Some(Tensor::new(ins[2].shape(), channel_sums(gy.data(), p)).unwrap()),
            ]
        });
        self.tape.record("conv3d", out, &[self.id, weight.id, bias.id], bw)
    }

    /// Transposed convolution: `x: [C_in, D, H, W]`,
    /// `weight: [C_in, C_out, k, k, k]`, output extent `(n - 1)·stride + k`.
    pub fn conv3d_transpose(self, weight: Self, bias: Self, stride: usize) -> Result<Self> {
        let (g, c_in) = self.tape.with_values(&[self.id, weight.id, bias.id], |v| {
            let (x, w, b) = (v[0].shape(), v[1].shape(), v[2].shape());
            if x.len() != 4 || w.len() != 5 || w[0] != x[0] || b != [w[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d_transpose",
                    lhs: x.to_vec(),
                    rhs: w.to_vec(),
                });
            }
            let k = w[2];
            if w[3] != k || w[4] != k || stride == 0 {
                return Err(bad("conv3d_transpose", format!("bad kernel {w:?} / stride {stride}")));
            }
            let input = [0, 1, 2].map(|i| (x[i + 1] - 1) * stride + k);
            // Geometry of the equivalent forward conv: output volume → x.
            Ok((
                Geom {
                    channels: w[1],
                    input,
                    output: [x[1], x[2], x[3]],
                    kernel: k,
                    stride,
                },
                x[0],
            ))
        })?;
        let rows = g.cols_rows();
        let p = g.cols_len();
        let vol: usize = g.input.iter().product();
        let out = self.tape.with_values(&[self.id, weight.id, bias.id], |v| {
            let cols = T::gemm_new(rows, c_in, p, v[1].data(), (1, rows as isize), v[0].data(), (p as isize, 1));
            let mut y = col2im(&cols, g);
            add_channel_bias(&mut y, v[2].data(), vol);
            Tensor::new(&[g.channels, g.input[0], g.input[1], g.input[2]], y)
        })?;
        let bw: BackwardFn<T> = Box::new(move |gy, ins, _| {
            let gcols = im2col(gy.data(), g);
            let gx = T::gemm_new(c_in, rows, p, ins[1].data(), (rows as isize, 1), &gcols, (p as isize, 1));
            let gw = T::gemm_new(c_in, p, rows, ins[0].data(), (p as isize, 1), &gcols, (1, p as isize));
            vec![
                Some(Tensor::new(ins[0].shape(), gx).unwrap()),
                Some(Tensor::new(ins[1].shape(), gw).unwrap()),
                Some(Tensor::new(ins[2].shape(), channel_sums(gy.data(), vol)).unwrap()),
            ]
        });
        self.tape
            .record("conv3d_transpose", out, &[self.id, weight.id, bias.id], bw)
    }
}
