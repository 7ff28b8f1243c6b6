use super::kernels::{self, split_at_axis};
use super::tape::{Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl<T: Element> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(dim_err(format!("{op}: shape {sa:?} vs {sb:?}")));
        }
        Ok((ia, ib))
    }

    fn zip_map(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, name)?;
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.record(out, op(ia, ib))
    }

    fn unary_map(&mut self, x: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect())?;
        self.record(out, op(ix))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul: {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.nodes[ia].value.data(), self.nodes[ib].value.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        self.record(out, Op::Matmul { a: ia, b: ib })
    }

    /// Per-group product `[g×m×k] · [g×k×n]`, or `[g×m×k] · [g×n×k]ᵀ` when
    /// `transpose_b` is set.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err(format!("batched_matmul(transpose_b={transpose_b}): {sa:?} · {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![T::zero(); g * m * n];
        for gi in 0..g {
            let a_g = &da[gi * m * k..(gi + 1) * m * k];
            let b_g = &db[gi * k * n..(gi + 1) * k * n];
            let o_g = &mut out[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                kernels::matmul_nt_acc(a_g, b_g, o_g, m, k, n);
            } else {
                kernels::matmul_acc(a_g, b_g, o_g, m, k, n);
            }
        }
        let out = Tensor::new(&[g, m, n], out)?;
        self.record(out, Op::BatchedMatmul { a: ia, b: ib, transpose_b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.reshaped(shape)?;
        self.record(out, Op::Reshape { x: ix })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(dim_err(format!("permute: axes {axes:?} for rank {}", v.ndim())));
        }
        let (data, shape) = kernels::permute(v.data(), v.shape(), axes);
        let out = Tensor::new(&shape, data)?;
        self.record(out, Op::Permute { x: ix, axes: axes.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let f = T::from_f64(factor);
        let v = &self.nodes[ix].value;
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e * f).collect())?;
        self.record(out, Op::Scale { x: ix, factor: f })
    }

    fn row_op(&mut self, x: Var, row: Var, name: &str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<Var> {
        let (ix, ir) = (self.check(x)?, self.check(row)?);
        let (vx, vr) = (&self.nodes[ix].value, &self.nodes[ir].value);
        if vr.ndim() != 1 || vr.numel() != vx.last_dim() {
            return Err(dim_err(format!("{name}: row {:?} for input {:?}", vr.shape(), vx.shape())));
        }
        let w = vr.numel();
        let mut data = Vec::with_capacity(vx.numel());
        for chunk in vx.data().chunks_exact(w) {
            data.extend(chunk.iter().zip(vr.data()).map(|(&a, &b)| f(a, b)));
        }
        let out = Tensor::new(vx.shape(), data)?;
        self.record(out, op(ix, ir))
    }

    /// Add a `[n]` vector to every last-axis row of `x [.., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, "add_row", |a, b| a + b, |x, row| Op::AddRow { x, row })
    }

    /// Multiply every last-axis row of `x [.., n]` by a `[n]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, "mul_row", |a, b| a * b, |x, row| Op::MulRow { x, row })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, |e| e * e, |x| Op::Square { x })
    }

    /// Errors with a domain error on negative inputs. The backward rule
    /// treats the derivative at exactly 0 as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        if let Some(bad) = self.nodes[ix].value.data().iter().find(|&&e| e < T::zero()) {
            return Err(Error::Domain(format!("sqrt of negative value {bad:?}")));
        }
        self.unary_map(x, |e| e.sqrt(), |x| Op::Sqrt { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, |e| e.abs(), |x| Op::Abs { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, kernels::gelu, |x| Op::Gelu { x })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let mean = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        self.record(Tensor::scalar(mean), Op::MeanAll { x: ix })
    }

    /// Mean over one axis; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.ndim() {
            return Err(dim_err(format!("mean_axis: axis {axis} for shape {:?}", v.shape())));
        }
        let (outer, len, inner) = split_at_axis(v.shape(), axis);
        let inv = T::one() / T::from_f64(len as f64);
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
            dst.iter_mut().for_each(|a| *a *= inv);
        }
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, out)?;
        self.record(out, Op::MeanAxis { x: ix, axis })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let w = v.last_dim();
        if w == 0 {
            return Err(dim_err("softmax over an empty axis".into()));
        }
        let out = Tensor::new(v.shape(), kernels::softmax_rows(v.data(), w))?;
        self.record(out, Op::Softmax { x: ix })
    }

    /// Inclusive prefix sum over the last axis.
    pub fn cumsum_lastdim(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let w = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(w) {
            let mut acc = T::zero();
            data.extend(row.iter().map(|&e| {
                acc += e;
                acc
            }));
        }
        let out = Tensor::new(v.shape(), data)?;
        self.record(out, Op::Cumsum { x: ix })
    }

    /// Zero-mean, unit-variance normalization of each last-axis row, with
    /// population variance and `eps` added under the root. No affine part.
    pub fn normalize_lastdim(&mut self, x: Var, eps: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let w = v.last_dim();
        let wt = T::from_f64(w as f64);
        let eps = T::from_f64(eps);
        let mut data = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(v.numel() / w);
        for row in v.data().chunks_exact(w) {
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / wt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            data.extend(row.iter().map(|&e| (e - mean) * inv));
        }
        let out = Tensor::new(v.shape(), data)?;
        self.record(out, Op::Normalize { x: ix, inv_std })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[*idx.first().ok_or_else(|| dim_err("concat of zero tensors".into()))?]
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err(format!("concat: axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(dim_err(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.record(out, Op::Concat { parts: idx, axis })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.ndim() || len == 0 || start + len > v.shape()[axis] {
            return Err(dim_err(format!(
                "narrow: {start}..{} on axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, extent, inner) = split_at_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        self.record(out, Op::Narrow { x: ix, axis, start })
    }

    /// Inverse of [`Tape::concat`]: consecutive slices with the given extents.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(dim_err(format!("split: sizes {sizes:?} on axis {axis} of {shape:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Tile `x` along a new leading axis of extent `times`.
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Result<Var> {
        let ix = self.check(x)?;
        if times == 0 {
            return Err(dim_err("repeat_leading: zero copies".into()));
        }
        let v = &self.nodes[ix].value;
        let mut data = Vec::with_capacity(v.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        let out = Tensor::new(&shape, data)?;
        self.record(out, Op::Repeat { x: ix, times })
    }
}
