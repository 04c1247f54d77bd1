use super::tape::BackwardFn;
use super::{Real, Result, Tensor, TensorError, Var};
use std::sync::Arc;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Sparse query←target connectivity in CSR layout with per-edge weights.
///
/// Edges of query `q` occupy `offsets[q]..offsets[q + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub n_targets: usize,
}

impl EdgeList {
    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }

    /// Query index of every edge.
    pub fn edge_queries(&self) -> Vec<usize> {
        let mut q = Vec::with_capacity(self.n_edges());
        for (i, w) in self.offsets.windows(2).enumerate() {
            q.extend(std::iter::repeat_n(i, w[1] - w[0]));
        }
        q
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.offsets.is_empty()
            && self.offsets[0] == 0
            && self.offsets.windows(2).all(|w| w[0] <= w[1])
            && *self.offsets.last().unwrap() == self.targets.len()
            && self.weights.len() == self.targets.len()
            && self.targets.iter().all(|&t| t < self.n_targets);
        if ok {
            Ok(())
        } else {
            Err(invalid("edge_list", "inconsistent CSR layout"))
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Self> {
        let out = self.with_value(|x| x.map(&f));
        let bw: BackwardFn<T> = Box::new(move |g, ins, out| {
            let x = ins[0];
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(x.shape(), data).unwrap())]
        });
        self.tape.record(op, out, &[self.id], bw)
    }

    fn binary_same(
        self,
        other: Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        bw: BackwardFn<T>,
    ) -> Result<Self> {
        let out = self.tape.with_values(&[self.id, other.id], |v| {
            if v[0].shape() != v[1].shape() {
                return Err(mismatch(op, v[0].shape(), v[1].shape()));
            }
            v[0].zip_map(v[1], f)
        })?;
        self.tape.record(op, out, &[self.id, other.id], bw)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary_same(
            other,
            "add",
            |a, b| a + b,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary_same(
            other,
            "sub",
            |a, b| a - b,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-T::one()))]),
        )
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary_same(
            other,
            "mul",
            |a, b| a * b,
            Box::new(|g, ins, _| {
                vec![
                    Some(g.zip_map(ins[1], |g, b| g * b).unwrap()),
                    Some(g.zip_map(ins[0], |g, a| g * a).unwrap()),
                ]
            }),
        )
    }

    pub fn scale(self, c: T) -> Result<Self> {
        let out = self.with_value(|x| x.scale(c));
        self.tape
            .record("scale", out, &[self.id], Box::new(move |g, _, _| vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(self, c: T) -> Result<Self> {
        let out = self.with_value(|x| x.map(|v| v + c));
        self.tape
            .record("add_scalar", out, &[self.id], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn exp(self) -> Result<Self> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Self> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn square(self) -> Result<Self> {
        self.unary("square", |x| x * x, |x, _| T::of(2.0) * x)
    }

    /// Broadcast-adds a vector over the last axis.
    pub fn add_row(self, row: Self) -> Result<Self> {
        let out = self.tape.with_values(&[self.id, row.id], |v| {
            let (x, b) = (v[0], v[1]);
            let n = *x.shape().last().unwrap();
            if b.len() != n {
                return Err(mismatch("add_row", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, &bb) in chunk.iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
            Ok(out)
        })?;
        let bw: BackwardFn<T> = Box::new(|g, ins, _| {
            let b = ins[1];
            let n = b.len();
            let mut gb = vec![T::zero(); n];
            for chunk in g.data().chunks(n) {
                for (a, &v) in gb.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(b.shape(), gb).unwrap())]
        });
        self.tape.record("add_row", out, &[self.id, row.id], bw)
    }

    /// Broadcast-multiplies a vector over the last axis.
    pub fn mul_row(self, row: Self) -> Result<Self> {
        let out = self.tape.with_values(&[self.id, row.id], |v| {
            let (x, b) = (v[0], v[1]);
            let n = *x.shape().last().unwrap();
            if b.len() != n {
                return Err(mismatch("mul_row", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, &bb) in chunk.iter_mut().zip(b.data()) {
                    *o *= bb;
                }
            }
            Ok(out)
        })?;
        let bw: BackwardFn<T> = Box::new(|g, ins, _| {
            let (x, b) = (ins[0], ins[1]);
            let n = b.len();
            let mut gx = g.clone();
            let mut gb = vec![T::zero(); n];
            for ((gc, xc), gxc) in g
                .data()
                .chunks(n)
                .zip(x.data().chunks(n))
                .zip(gx.data_mut().chunks_mut(n))
            {
                for j in 0..n {
                    gb[j] += gc[j] * xc[j];
                    gxc[j] = gc[j] * b.data()[j];
                }
            }
            vec![Some(gx), Some(Tensor::new(b.shape(), gb).unwrap())]
        });
        self.tape.record("mul_row", out, &[self.id, row.id], bw)
    }

    pub fn sum(self) -> Result<Self> {
        let out = self.with_value(|x| Tensor::scalar(x.sum()));
        let bw: BackwardFn<T> = Box::new(|g, ins, _| vec![Some(Tensor::full(ins[0].shape(), g.item()))]);
        self.tape.record("sum", out, &[self.id], bw)
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.with_value(|x| x.len());
        self.sum()?.scale(T::one() / T::of(n as f64))
    }

    pub fn sum_squares(self) -> Result<Self> {
        let out = self.with_value(|x| Tensor::scalar(x.sum_squares()));
        let bw: BackwardFn<T> =
            Box::new(|g, ins, _| vec![Some(ins[0].scale(T::of(2.0) * g.item()))]);
        self.tape.record("sum_squares", out, &[self.id], bw)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.with_value(|x| x.clone().reshape(shape))?;
        let bw: BackwardFn<T> =
            Box::new(|g, ins, _| vec![Some(g.clone().reshape(ins[0].shape()).unwrap())]);
        self.tape.record("reshape", out, &[self.id], bw)
    }

    pub fn flatten(self) -> Result<Self> {
        let n = self.with_value(|x| x.len());
        self.reshape(&[1, n])
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(self, other: Self) -> Result<Self> {
        let out = self.tape.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let c = T::gemm_new(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1));
            Tensor::new(&[m, n], c)
        })?;
        let bw: BackwardFn<T> = Box::new(|g, ins, _| {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = T::gemm_new(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize));
            let gb = T::gemm_new(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1));
            vec![
                Some(Tensor::new(&[m, k], ga).unwrap()),
                Some(Tensor::new(&[k, n], gb).unwrap()),
            ]
        });
        self.tape.record("matmul", out, &[self.id, other.id], bw)
    }

    /// `self · otherᵀ` for 2-D operands.
    pub fn matmul_nt(self, other: Self) -> Result<Self> {
        let out = self.tape.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(mismatch("matmul_nt", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let c = T::gemm_new(m, k, n, a.data(), (k as isize, 1), b.data(), (1, k as isize));
            Tensor::new(&[m, n], c)
        })?;
        let bw: BackwardFn<T> = Box::new(|g, ins, _| {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let ga = T::gemm_new(m, n, k, g.data(), (n as isize, 1), b.data(), (k as isize, 1));
            let gb = T::gemm_new(n, m, k, g.data(), (1, n as isize), a.data(), (k as isize, 1));
            vec![
                Some(Tensor::new(&[m, k], ga).unwrap()),
                Some(Tensor::new(&[n, k], gb).unwrap()),
            ]
        });
        self.tape.record("matmul_nt", out, &[self.id, other.id], bw)
    }

    pub fn transpose(self) -> Result<Self> {
        fn tr<T: Real>(x: &Tensor<T>) -> Tensor<T> {
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let d = x.data();
            Tensor::from_fn(&[n, m], |i| d[(i % m) * n + i / m])
        }
        let out = self.with_value(|x| {
            if x.rank() != 2 {
                return Err(invalid("transpose", format!("expected rank 2, got {:?}", x.shape())));
            }
            Ok(tr(x))
        })?;
        self.tape
            .record("transpose", out, &[self.id], Box::new(|g, _, _| vec![Some(tr(g))]))
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = self.with_value(|x| {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Tensor::new(&out_shape, data)
        })?;
        let bw: BackwardFn<T> = Box::new(move |g, ins, _| {
            let mut gx = Tensor::zeros(ins[0].shape());
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx.data_mut()[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        });
        self.tape.record("narrow", out, &[self.id], bw)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (out, sizes, outer, inner) = tape.with_values(&ids, |vals| {
            let base = vals[0].shape();
            if axis >= base.len() {
                return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
            }
            for v in vals {
                let s = v.shape();
                let same_rank = s.len() == base.len();
                if !same_rank || (0..s.len()).any(|d| d != axis && s[d] != base[d]) {
                    return Err(mismatch("concat", base, s));
                }
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
            let total: usize = sizes.iter().sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (v, &s) in vals.iter().zip(&sizes) {
                    data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
                }
            }
            let mut shape = base.to_vec();
            shape[axis] = total;
            Ok((Tensor::new(&shape, data)?, sizes, outer, inner))
        })?;
        let bw: BackwardFn<T> = Box::new(move |g, ins, _| {
            let total: usize = sizes.iter().sum();
            let mut grads: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
            for o in 0..outer {
                let mut off = (o * total) * inner;
                for (gv, &s) in grads.iter_mut().zip(&sizes) {
                    gv.extend_from_slice(&g.data()[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads
                .into_iter()
                .zip(ins)
                .map(|(d, x)| Some(Tensor::new(x.shape(), d).unwrap()))
                .collect()
        });
        tape.record("concat", out, &ids, bw)
    }

    /// Selects rows of a 2-D tensor; gradients scatter-add back.
    pub fn gather_rows(self, index: Arc<Vec<usize>>) -> Result<Self> {
        let out = self.with_value(|x| {
            if x.rank() != 2 {
                return Err(invalid("gather_rows", format!("expected rank 2, got {:?}", x.shape())));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            if let Some(&bad) = index.iter().find(|&&i| i >= n) {
                return Err(invalid("gather_rows", format!("row {bad} out of {n}")));
            }
            if index.is_empty() {
                return Err(invalid("gather_rows", "empty index"));
            }
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index.iter() {
                data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(&[index.len(), c], data)
        })?;
        let bw: BackwardFn<T> = Box::new(move |g, ins, _| {
            let c = ins[0].shape()[1];
            let mut gx = Tensor::zeros(ins[0].shape());
            for (r, &i) in index.iter().enumerate() {
                let dst = &mut gx.data_mut()[i * c..(i + 1) * c];
                for (d, &s) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *d += s;
                }
            }
            vec![Some(gx)]
        });
        self.tape.record("gather_rows", out, &[self.id], bw)
    }

    /// Row-wise softmax of a 2-D tensor. `mask[i*n + j] == false` forces
    /// weight zero; every row must keep at least one entry.
    pub fn softmax_rows(self, mask: Option<Arc<Vec<bool>>>) -> Result<Self> {
        let out = self.with_value(|x| {
            if x.rank() != 2 {
                return Err(invalid("softmax", format!("expected rank 2, got {:?}", x.shape())));
            }
            let n = x.shape()[1];
            if let Some(m) = &mask {
                if m.len() != x.len() {
                    return Err(invalid("softmax", "mask size differs from input"));
                }
            }
            let mut out = x.clone();
            for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
                let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[r * n + j]);
                let max = (0..n)
                    .filter(|&j| allowed(j))
                    .map(|j| row[j])
                    .fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    return Err(invalid("softmax", format!("row {r} fully masked")));
                }
                let mut total = T::zero();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if allowed(j) { (*v - max).exp() } else { T::zero() };
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Ok(out)
        })?;
        let bw: BackwardFn<T> = Box::new(|g, _, y| {
            let n = y.shape()[1];
            let mut gx = g.clone();
            for ((gr, yr), gxr) in g
                .data()
                .chunks(n)
                .zip(y.data().chunks(n))
                .zip(gx.data_mut().chunks_mut(n))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    gxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        });
        self.tape.record("softmax", out, &[self.id], bw)
    }

    /// Normalizes each row of a 2-D tensor, then applies `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: f64) -> Result<Self> {
        let eps = T::of(eps);
        let out = self.tape.with_values(&[self.id, gamma.id, beta.id], |v| {
            let (x, ga, be) = (v[0], v[1], v[2]);
            if x.rank() != 2 || ga.len() != x.shape()[1] || be.len() != x.shape()[1] {
                return Err(mismatch("layer_norm", x.shape(), ga.shape()));
            }
            let n = x.shape()[1];
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                let (mean, inv) = row_stats(row, eps);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * ga.data()[j] + be.data()[j];
                }
            }
            Ok(out)
        })?;
        let bw: BackwardFn<T> = Box::new(move |g, ins, _| {
            let (x, ga) = (ins[0], ins[1]);
            let n = x.shape()[1];
            let nf = T::of(n as f64);
            let mut gx = x.clone();
            let mut gg = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            for ((xr, gr), gxr) in x
                .data()
                .chunks(n)
                .zip(g.data().chunks(n))
                .zip(gx.data_mut().chunks_mut(n))
            {
                let (mean, inv) = row_stats(xr, eps);
                let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * inv).collect();
                let dxhat: Vec<T> = (0..n).map(|j| gr[j] * ga.data()[j]).collect();
                let m1 = dxhat.iter().copied().sum::<T>() / nf;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for j in 0..n {
                    gxr[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    gg[j] += gr[j] * xhat[j];
                    gb[j] += gr[j];
                }
            }
            vec![
                Some(gx),
                Some(Tensor::new(ins[1].shape(), gg).unwrap()),
                Some(Tensor::new(ins[2].shape(), gb).unwrap()),
            ]
        });
        self.tape
            .record("layer_norm", out, &[self.id, gamma.id, beta.id], bw)
    }

    /// Applies a constant `[out, len]` matrix along `axis` (a linear map on
    /// every lane of that axis). The backward pass applies its transpose.
    pub fn apply_along_axis(self, matrix: Arc<Tensor<T>>, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if matrix.rank() != 2 || axis >= shape.len() || matrix.shape()[1] != shape[axis] {
            return Err(mismatch("apply_along_axis", &shape, matrix.shape()));
        }
        let (rows, len) = (matrix.shape()[0], matrix.shape()[1]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = rows;
        let out = self.with_value(|x| {
            let mut y = vec![T::zero(); outer * rows * inner];
            for o in 0..outer {
                T::gemm(
                    rows,
                    len,
                    inner,
                    matrix.data(),
                    (len as isize, 1),
                    &x.data()[o * len * inner..(o + 1) * len * inner],
                    (inner as isize, 1),
                    T::zero(),
                    &mut y[o * rows * inner..(o + 1) * rows * inner],
                );
            }
            Tensor::new(&out_shape, y)
        })?;
        let bw: BackwardFn<T> = Box::new(move |g, ins, _| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                T::gemm(
                    len,
                    rows,
                    inner,
                    matrix.data(),
                    (1, len as isize),
                    &g.data()[o * rows * inner..(o + 1) * rows * inner],
                    (inner as isize, 1),
                    T::zero(),
                    &mut gx[o * len * inner..(o + 1) * len * inner],
                );
            }
            vec![Some(Tensor::new(ins[0].shape(), gx).unwrap())]
        });
        self.tape.record("apply_along_axis", out, &[self.id], bw)
    }

    /// Weighted kernel sum over a graph:
    /// `out[q] = Σ_{e ∈ q} w_e · K_e · v[target(e)]`
    /// with `kernels: [E, c_out, c_in]` (or `[1, c_out, c_in]` shared by all
    /// edges) and `values: [N_t, c_in]`. Output `[N_q, c_out]`.
    pub fn edge_contract(self, values: Self, edges: Arc<EdgeList>) -> Result<Self> {
        edges.validate()?;
        let (c_out, c_in, shared) = self.tape.with_values(&[self.id, values.id], |v| {
            let (k, x) = (v[0], v[1]);
            if k.rank() != 3 || x.rank() != 2 || k.shape()[2] != x.shape()[1] {
                return Err(mismatch("edge_contract", k.shape(), x.shape()));
            }
            if x.shape()[0] != edges.n_targets {
                return Err(mismatch("edge_contract", &[edges.n_targets], x.shape()));
            }
            let shared = k.shape()[0] == 1 && edges.n_edges() != 1;
            if !shared && k.shape()[0] != edges.n_edges() {
                return Err(mismatch("edge_contract", k.shape(), &[edges.n_edges()]));
            }
            Ok((k.shape()[1], k.shape()[2], shared))
        })?;
        let nq = edges.n_queries();
        let kk = c_out * c_in;
        let out = self.tape.with_values(&[self.id, values.id], |v| {
            let (k, x) = (v[0].data(), v[1].data());
            let mut y = vec![T::zero(); nq * c_out];
            for q in 0..nq {
                let yq = &mut y[q * c_out..(q + 1) * c_out];
                for e in edges.offsets[q]..edges.offsets[q + 1] {
                    let w = T::of(edges.weights[e]);
                    let t = edges.targets[e];
                    let ke = if shared { &k[..kk] } else { &k[e * kk..(e + 1) * kk] };
                    let xt = &x[t * c_in..(t + 1) * c_in];
                    for (o, yo) in yq.iter_mut().enumerate() {
                        let row = &ke[o * c_in..(o + 1) * c_in];
                        let s: T = row.iter().zip(xt).map(|(&a, &b)| a * b).sum();
                        *yo += w * s;
                    }
                }
            }
            Tensor::new(&[nq, c_out], y)
        })?;
        let bw: BackwardFn<T> = Box::new(move |g, ins, _| {
            let (k, x) = (ins[0], ins[1]);
            let (kd, xd, gd) = (k.data(), x.data(), g.data());
            let mut gx = vec![T::zero(); x.len()];
            let gk = if shared {
                let mut gk = vec![T::zero(); kk];
                for q in 0..nq {
                    let gq = &gd[q * c_out..(q + 1) * c_out];
                    for e in edges.offsets[q]..edges.offsets[q + 1] {
                        let w = T::of(edges.weights[e]);
                        let t = edges.targets[e];
                        let xt = &xd[t * c_in..(t + 1) * c_in];
                        let gxt = &mut gx[t * c_in..(t + 1) * c_in];
                        for (o, &go) in gq.iter().enumerate() {
                            let wg = w * go;
                            let row = &kd[o * c_in..(o + 1) * c_in];
                            for i in 0..c_in {
                                gk[o * c_in + i] += wg * xt[i];
                                gxt[i] += wg * row[i];
                            }
                        }
                    }
                }
                gk
            } else {
                let mut gk = Vec::with_capacity(k.len());
                for q in 0..nq {
                    let gq = &gd[q * c_out..(q + 1) * c_out];
                    for e in edges.offsets[q]..edges.offsets[q + 1] {
                        let w = T::of(edges.weights[e]);
                        let t = edges.targets[e];
                        let xt = &xd[t * c_in..(t + 1) * c_in];
                        let gxt = &mut gx[t * c_in..(t + 1) * c_in];
                        let ke = &kd[e * kk..(e + 1) * kk];
                        for (o, &go) in gq.iter().enumerate() {
                            let wg = w * go;
                            let row = &ke[o * c_in..(o + 1) * c_in];
                            gk.extend(xt.iter().map(|&xi| wg * xi));
                            for (gi, &ki) in gxt.iter_mut().zip(row) {
                                *gi += wg * ki;
                            }
                        }
                    }
                }
                gk
            };
            vec![
                Some(Tensor::new(k.shape(), gk).unwrap()),
                Some(Tensor::new(x.shape(), gx).unwrap()),
            ]
        });
        self.tape.record("edge_contract", out, &[self.id, values.id], bw)
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}
