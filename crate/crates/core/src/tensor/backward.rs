use super::kernels::{self, split_at_axis};
use super::tape::{Op, Tape};
use super::Element;
use crate::error::Result;

impl<T: Element> Tape<T> {
    /// Push the output gradient `g` of record `i` into its inputs.
    pub(super) fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        let kind = self.nodes[i].op.kind();
        let mut pending: Vec<(usize, Vec<T>)> = Vec::with_capacity(2);
        {
            let node = &self.nodes[i];
            let val = |j: usize| &self.nodes[j].value;
            let wants = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Reshape { x } => pending.push((*x, g.to_vec())),
                Op::Permute { x, axes } => {
                    let (back, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                    pending.push((*x, back));
                }
                Op::Matmul { a, b } => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if wants(*a) {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul_nt_acc(g, val(*b).data(), &mut da, m, n, k);
                        pending.push((*a, da));
                    }
                    if wants(*b) {
                        let mut db = vec![T::zero(); k * n];
                        kernels::matmul_tn_acc(val(*a).data(), g, &mut db, m, k, n);
                        pending.push((*b, db));
                    }
                }
                Op::BatchedMatmul { a, b, transpose_b } => {
                    let sa = val(*a).shape();
                    let (groups, m, k) = (sa[0], sa[1], sa[2]);
                    let n = node.value.shape()[2];
                    let (da_src, db_src) = (val(*a).data(), val(*b).data());
                    let mut da = wants(*a).then(|| vec![T::zero(); groups * m * k]);
                    let mut db = wants(*b).then(|| vec![T::zero(); groups * k * n]);
                    for gi in 0..groups {
                        let g_g = &g[gi * m * n..(gi + 1) * m * n];
                        let a_g = &da_src[gi * m * k..(gi + 1) * m * k];
                        let b_g = &db_src[gi * k * n..(gi + 1) * k * n];
                        if let Some(da) = da.as_mut() {
                            let out = &mut da[gi * m * k..(gi + 1) * m * k];
                            if *transpose_b {
                                // C = A·Bᵀ, B: [n×k]  ⇒  dA = dC·B
                                kernels::matmul_acc(g_g, b_g, out, m, n, k);
                            } else {
                                kernels::matmul_nt_acc(g_g, b_g, out, m, n, k);
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            let out = &mut db[gi * k * n..(gi + 1) * k * n];
                            if *transpose_b {
                                // dB = dCᵀ·A : [n×k]
                                kernels::matmul_tn_acc(g_g, a_g, out, m, n, k);
                            } else {
                                kernels::matmul_tn_acc(a_g, g_g, out, m, k, n);
                            }
                        }
                    }
                    if let Some(da) = da {
                        pending.push((*a, da));
                    }
                    if let Some(db) = db {
                        pending.push((*b, db));
                    }
                }
                Op::Add { a, b } => {
                    pending.push((*a, g.to_vec()));
                    pending.push((*b, g.to_vec()));
                }
                Op::Sub { a, b } => {
                    pending.push((*a, g.to_vec()));
                    pending.push((*b, g.iter().map(|&x| -x).collect()));
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    pending.push((*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect()));
                    pending.push((*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect()));
                }
                Op::Scale { x, factor } => pending.push((*x, g.iter().map(|&d| d * *factor).collect())),
                Op::AddRow { x, row } => {
                    let w = val(*row).numel();
                    let mut dr = vec![T::zero(); w];
                    for chunk in g.chunks_exact(w) {
                        dr.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                    pending.push((*x, g.to_vec()));
                    pending.push((*row, dr));
                }
                Op::MulRow { x, row } => {
                    let r = val(*row).data();
                    let w = r.len();
                    let xs = val(*x).data();
                    let mut dx = Vec::with_capacity(g.len());
                    let mut dr = vec![T::zero(); w];
                    for (gc, xc) in g.chunks_exact(w).zip(xs.chunks_exact(w)) {
                        dx.extend(gc.iter().zip(r).map(|(&d, &rv)| d * rv));
                        for ((acc, &d), &xv) in dr.iter_mut().zip(gc).zip(xc) {
                            *acc += d * xv;
                        }
                    }
                    pending.push((*x, dx));
                    pending.push((*row, dr));
                }
                Op::Square { x } => {
                    let two = T::from_f64(2.0);
                    pending.push((*x, g.iter().zip(val(*x).data()).map(|(&d, &v)| two * v * d).collect()));
                }
                Op::Sqrt { x } => {
                    let two = T::from_f64(2.0);
                    let y = node.value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&d, &yv)| if yv > T::zero() { d / (two * yv) } else { T::zero() })
                        .collect();
                    pending.push((*x, dx));
                }
                Op::Abs { x } => {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&d, &v)| {
                            if v > T::zero() {
                                d
                            } else if v < T::zero() {
                                -d
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    pending.push((*x, dx));
                }
                Op::MeanAll { x } => {
                    let n = val(*x).numel();
                    let each = g[0] / T::from_f64(n as f64);
                    pending.push((*x, vec![each; n]));
                }
                Op::MeanAxis { x, axis } => {
                    let (outer, len, inner) = split_at_axis(val(*x).shape(), *axis);
                    let inv = T::one() / T::from_f64(len as f64);
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for _ in 0..len {
                            dx.extend(src.iter().map(|&d| d * inv));
                        }
                    }
                    pending.push((*x, dx));
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let w = node.value.last_dim();
                    let mut dx = Vec::with_capacity(y.len());
                    for (yc, gc) in y.chunks_exact(w).zip(g.chunks_exact(w)) {
                        let dot: T = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
                        dx.extend(yc.iter().zip(gc).map(|(&yv, &d)| yv * (d - dot)));
                    }
                    pending.push((*x, dx));
                }
                Op::Cumsum { x } => {
                    let w = node.value.last_dim();
                    let mut dx = vec![T::zero(); g.len()];
                    for (gc, dc) in g.chunks_exact(w).zip(dx.chunks_exact_mut(w)) {
                        let mut acc = T::zero();
                        for j in (0..w).rev() {
                            acc += gc[j];
                            dc[j] = acc;
                        }
                    }
                    pending.push((*x, dx));
                }
                Op::Gelu { x } => {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&d, &v)| d * kernels::gelu_grad(v))
                        .collect();
                    pending.push((*x, dx));
                }
                Op::Normalize { x, inv_std } => {
                    let y = node.value.data();
                    let w = node.value.last_dim();
                    let wt = T::from_f64(w as f64);
                    let mut dx = Vec::with_capacity(y.len());
                    for ((yc, gc), &inv) in y.chunks_exact(w).zip(g.chunks_exact(w)).zip(inv_std) {
                        let mean_g = gc.iter().copied().sum::<T>() / wt;
                        let mean_gy = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum::<T>() / wt;
                        dx.extend(yc.iter().zip(gc).map(|(&yv, &d)| inv * (d - mean_g - yv * mean_gy)));
                    }
                    pending.push((*x, dx));
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let chunk = val(p).shape()[*axis] * inner;
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dp.extend_from_slice(&g[base..base + chunk]);
                        }
                        offset += chunk;
                        pending.push((p, dp));
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let src_shape = val(*x).shape();
                    let (outer, extent, inner) = split_at_axis(src_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![T::zero(); outer * extent * inner];
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    pending.push((*x, dx));
                }
                Op::Repeat { x, times } => {
                    let n = val(*x).numel();
                    let mut dx = vec![T::zero(); n];
                    for t in 0..*times {
                        dx.iter_mut().zip(&g[t * n..(t + 1) * n]).for_each(|(a, &b)| *a += b);
                    }
                    pending.push((*x, dx));
                }
            }
        }
        for (j, gj) in pending {
            self.accumulate(j, gj, kind);
        }
        Ok(())
    }
}
