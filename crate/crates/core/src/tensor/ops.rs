//! Tensor operations: elementwise arithmetic with trailing-axis
//! broadcasting, batched matmul, reductions, data movement, softmax,
//! and row-wise top-k filtering.
//!
//! Data movement is funneled through two adjoint primitives,
//! `gather_map` (out[i] = in[map[i]], backward scatter-adds) and
//! `scatter_map` (out[map[i]] += in[i], backward gathers). Reshape,
//! permute, slice, concat, padding, and pixel shuffle are all thin
//! index-map builders over those two, so one verified backward pair
//! covers every layout change.

use std::rc::Rc;

use super::{Scalar, Tensor};

// ---- broadcasting helpers ----

/// Broadcast result shape, numpy trailing-axis rules. Panics with the
/// op name on incompatible dims.
fn broadcast_shape(name: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("{name}: cannot broadcast {a:?} with {b:?}");
        };
    }
    out
}

/// Per-axis element strides of `shape` viewed inside `out_shape`
/// (right-aligned), with stride 0 on broadcast axes.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut contiguous = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        contiguous[i] = acc;
        acc *= shape[i];
    }
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = contiguous[i - offset];
        }
    }
    out
}

/// Odometer loop over `out_shape`, yielding linear offsets into the
/// output and both broadcast operands.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for oi in 0..numel {
        f(oi, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Generic broadcasting binary op. `dfa`/`dfb` give the local
    /// partial derivatives at each element pair.
    fn binary_op(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        fwd: impl Fn(T, T) -> T + Copy + 'static,
        dfa: impl Fn(T, T) -> T + Copy + 'static,
        dfb: impl Fn(T, T) -> T + Copy + 'static,
    ) -> Tensor<T> {
        let out_shape = broadcast_shape(name, self.shape(), other.shape());
        let sa = bcast_strides(self.shape(), &out_shape);
        let sb = bcast_strides(other.shape(), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; numel];
        {
            let a = self.data();
            let b = other.data();
            if self.shape() == other.shape() {
                for i in 0..numel {
                    out[i] = fwd(a[i], b[i]);
                }
            } else {
                for_each_bcast(&out_shape, &sa, &sb, |oi, ai, bi| {
                    out[oi] = fwd(a[ai], b[bi]);
                });
            }
        }
        let a_t = self.clone();
        let b_t = other.clone();
        let shape_c = out_shape.clone();
        Tensor::make_op(out_shape, out, vec![self.clone(), other.clone()], move |g| {
            let a = a_t.data();
            let b = b_t.data();
            if a_t.requires_grad_flag() {
                let mut ga = vec![T::ZERO; a.len()];
                for_each_bcast(&shape_c, &sa, &sb, |oi, ai, bi| {
                    ga[ai] += g[oi] * dfa(a[ai], b[bi]);
                });
                drop(a);
                drop(b);
                a_t.accum_grad(&ga);
                if b_t.requires_grad_flag() {
                    let a = a_t.data();
                    let b = b_t.data();
                    let mut gb = vec![T::ZERO; b.len()];
                    for_each_bcast(&shape_c, &sa, &sb, |oi, ai, bi| {
                        gb[bi] += g[oi] * dfb(a[ai], b[bi]);
                    });
                    drop(a);
                    drop(b);
                    b_t.accum_grad(&gb);
                }
            } else if b_t.requires_grad_flag() {
                let mut gb = vec![T::ZERO; b.len()];
                for_each_bcast(&shape_c, &sa, &sb, |oi, ai, bi| {
                    gb[bi] += g[oi] * dfb(a[ai], b[bi]);
                });
                drop(a);
                drop(b);
                b_t.accum_grad(&gb);
            }
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary_op(other, "add", |a, b| a + b, |_, _| T::ONE, |_, _| T::ONE)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary_op(other, "sub", |a, b| a - b, |_, _| T::ONE, |_, _| -T::ONE)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary_op(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary_op(
            other,
            "div",
            |a, b| a / b,
            |_, b| T::ONE / b,
            |a, b| -a / (b * b),
        )
    }

    /// Generic unary op; `df` receives (input, output) and returns the
    /// local derivative.
    pub(crate) fn unary_op(
        &self,
        _name: &'static str,
        fwd: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Copy + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| fwd(x)).collect();
        let a_t = self.clone();
        let y = out.clone();
        Tensor::make_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let a = a_t.data();
            let ga: Vec<T> = g
                .iter()
                .zip(a.iter().zip(&y))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            drop(a);
            a_t.accum_grad(&ga);
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary_op("neg", |x| -x, |_, _| -T::ONE)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary_op("add_scalar", |x| x + s, |_, _| T::ONE)
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.unary_op("mul_scalar", move |x| x * s, move |_, _| s)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary_op("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary_op("ln", |x| x.ln(), |x, _| T::ONE / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary_op("sqrt", |x| x.sqrt(), |_, y| T::ONE / (T::from_f64(2.0) * y))
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary_op("square", |x| x * x, |x, _| T::from_f64(2.0) * x)
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary_op("tanh", |x| x.tanh(), |_, y| T::ONE - y * y)
    }

    pub fn erf(&self) -> Tensor<T> {
        // d erf/dx = 2/sqrt(pi) * exp(-x^2)
        let c = T::from_f64(2.0 / std::f64::consts::PI.sqrt());
        self.unary_op("erf", |x| x.erf(), move |x, _| c * (-(x * x)).exp())
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary_op("sigmoid", |x| stable_sigmoid(x), |_, y| y * (T::ONE - y))
    }

    /// ln(1 + e^x), overflow-safe.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary_op(
            "softplus",
            |x| x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln(),
            |x, _| stable_sigmoid(x),
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary_op(
            "leaky_relu",
            move |x| if x > T::ZERO { x } else { slope * x },
            move |x, _| if x > T::ZERO { T::ONE } else { slope },
        )
    }

    /// Exact-erf form: 0.5 x (1 + erf(x / sqrt(2))).
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary_op(
            "gelu",
            move |x| half * x * (T::ONE + (x * inv_sqrt2).erf()),
            move |x, _| {
                half * (T::ONE + (x * inv_sqrt2).erf())
                    + x * inv_sqrt_2pi * (-(x * x) * half).exp()
            },
        )
    }

    pub fn clamp_min(&self, lo: T) -> Tensor<T> {
        self.unary_op(
            "clamp_min",
            move |x| x.max(lo),
            move |x, _| if x > lo { T::ONE } else { T::ZERO },
        )
    }

    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary_op(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::ONE } else { T::ZERO },
        )
    }

    /// Arbitrary differentiable pointwise function with caller-supplied
    /// derivative. Used by tests to inject deliberate gradient bugs.
    pub fn map_unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + Copy + 'static,
    ) -> Tensor<T> {
        self.unary_op("map_unary", f, move |x, _| df(x))
    }

    // ---- matmul ----

    /// Batched matrix product. Trailing two axes multiply as
    /// [m,k]x[k,n]; leading axes must match exactly, or one operand
    /// may be rank 2 and is then shared across the other's batches.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(
            sa.len() >= 2 && sb.len() >= 2,
            "matmul: both operands need rank >= 2, got {sa:?} x {sb:?}"
        );
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(ka, kb, "matmul: inner dims disagree, {sa:?} x {sb:?}");
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let (batch, lead): (usize, Vec<usize>) = if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (batch_a, sa[..sa.len() - 2].to_vec())
        } else if sa.len() == 2 {
            (batch_b, sb[..sb.len() - 2].to_vec())
        } else if sb.len() == 2 {
            (batch_a, sa[..sa.len() - 2].to_vec())
        } else {
            panic!("matmul: batch dims disagree, {sa:?} x {sb:?}");
        };
        let k = ka;
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let a = self.data();
            let b = other.data();
            for bt in 0..batch {
                let ab = if batch_a == 1 { 0 } else { bt * m * k };
                let bb = if batch_b == 1 { 0 } else { bt * k * n };
                let ob = bt * m * n;
                matmul_kernel(&a[ab..ab + m * k], &b[bb..bb + k * n], &mut out[ob..ob + m * n], m, k, n);
            }
        }
        let mut out_shape = lead;
        out_shape.push(m);
        out_shape.push(n);
        let a_t = self.clone();
        let b_t = other.clone();
        Tensor::make_op(out_shape, out, vec![self.clone(), other.clone()], move |g| {
            let a = a_t.data();
            let b = b_t.data();
            if a_t.requires_grad_flag() {
                // dA = dC @ B^T
                let mut ga = vec![T::ZERO; a.len()];
                for bt in 0..batch {
                    let ab = if batch_a == 1 { 0 } else { bt * m * k };
                    let bb = if batch_b == 1 { 0 } else { bt * k * n };
                    let ob = bt * m * n;
                    let gb_ = &g[ob..ob + m * n];
                    let bm = &b[bb..bb + k * n];
                    let gam = &mut ga[ab..ab + m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = T::ZERO;
                            let grow = &gb_[i * n..i * n + n];
                            let brow = &bm[l * n..l * n + n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            gam[i * k + l] += acc;
                        }
                    }
                }
                a_t.accum_grad(&ga);
            }
            if b_t.requires_grad_flag() {
                // dB = A^T @ dC
                let mut gb = vec![T::ZERO; b.len()];
                for bt in 0..batch {
                    let ab = if batch_a == 1 { 0 } else { bt * m * k };
                    let bb = if batch_b == 1 { 0 } else { bt * k * n };
                    let ob = bt * m * n;
                    let gm = &g[ob..ob + m * n];
                    let am = &a[ab..ab + m * k];
                    let gbm = &mut gb[bb..bb + k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let av = am[i * k + l];
                            if av == T::ZERO {
                                continue;
                            }
                            let grow = &gm[i * n..i * n + n];
                            let brow = &mut gbm[l * n..l * n + n];
                            for j in 0..n {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                }
                drop(a);
                drop(b);
                b_t.accum_grad(&gb);
            }
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &x in self.data().iter() {
            acc += x;
        }
        let a_t = self.clone();
        let numel = self.numel();
        Tensor::make_op(vec![1], vec![acc], vec![self.clone()], move |g| {
            a_t.accum_grad(&vec![g[0]; numel]);
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().mul_scalar(T::ONE / T::from_f64(n as f64))
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last(&self) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("sum_last on rank-0 tensor");
        let rows = self.numel() / n;
        let mut out = vec![T::ZERO; rows];
        {
            let d = self.data();
            for r in 0..rows {
                let mut acc = T::ZERO;
                for &x in &d[r * n..(r + 1) * n] {
                    acc += x;
                }
                out[r] = acc;
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        let a_t = self.clone();
        Tensor::make_op(out_shape, out, vec![self.clone()], move |g| {
            let mut ga = vec![T::ZERO; rows * n];
            for r in 0..rows {
                for c in 0..n {
                    ga[r * n + c] = g[r];
                }
            }
            a_t.accum_grad(&ga);
        })
    }

    pub fn mean_last(&self) -> Tensor<T> {
        let n = *self.shape().last().expect("mean_last on rank-0 tensor");
        self.sum_last().mul_scalar(T::ONE / T::from_f64(n as f64))
    }

    // ---- data movement ----

    /// out[i] = in[map[i]]. The adjoint scatter-adds, so duplicate
    /// source indices are fine (entries may be read many times).
    pub fn gather_map(&self, out_shape: &[usize], map: Rc<Vec<usize>>) -> Tensor<T> {
        let out_numel: usize = out_shape.iter().product();
        assert_eq!(map.len(), out_numel, "gather_map: map length vs out shape {out_shape:?}");
        let in_numel = self.numel();
        let mut out = vec![T::ZERO; out_numel];
        {
            let d = self.data();
            for (o, &src) in out.iter_mut().zip(map.iter()) {
                debug_assert!(src < in_numel, "gather_map: index {src} out of range {in_numel}");
                *o = d[src];
            }
        }
        let a_t = self.clone();
        let map_b = Rc::clone(&map);
        Tensor::make_op(out_shape.to_vec(), out, vec![self.clone()], move |g| {
            let mut ga = vec![T::ZERO; in_numel];
            for (gi, &src) in g.iter().zip(map_b.iter()) {
                ga[src] += *gi;
            }
            a_t.accum_grad(&ga);
        })
    }

    /// out[map[i]] += in[i] over a zero-initialized output. The
    /// adjoint gathers.
    pub fn scatter_map(&self, out_shape: &[usize], map: Rc<Vec<usize>>) -> Tensor<T> {
        let in_numel = self.numel();
        assert_eq!(map.len(), in_numel, "scatter_map: map length vs input numel {in_numel}");
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; out_numel];
        {
            let d = self.data();
            for (i, &dst) in map.iter().enumerate() {
                debug_assert!(dst < out_numel, "scatter_map: index {dst} out of range {out_numel}");
                out[dst] += d[i];
            }
        }
        let a_t = self.clone();
        let map_b = Rc::clone(&map);
        Tensor::make_op(out_shape.to_vec(), out, vec![self.clone()], move |g| {
            let ga: Vec<T> = map_b.iter().map(|&dst| g[dst]).collect();
            a_t.accum_grad(&ga);
        })
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Tensor<T> {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape: {:?} -> {:?} changes element count",
            self.shape(),
            new_shape
        );
        let a_t = self.clone();
        Tensor::make_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |g| a_t.accum_grad(g),
        )
    }

    /// Axis permutation as a contiguous copy.
    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        let shape = self.shape();
        let rank = shape.len();
        assert_eq!(perm.len(), rank, "permute: perm {perm:?} vs shape {shape:?}");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "permute: invalid perm {perm:?}");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        // in strides
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let numel = self.numel();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            let mut src = 0usize;
            for (ax, &i) in idx.iter().enumerate() {
                src += i * in_strides[perm[ax]];
            }
            map.push(src);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        self.gather_map(&out_shape, Rc::new(map))
    }

    /// Swap the trailing two axes.
    pub fn transpose_last2(&self) -> Tensor<T> {
        let rank = self.shape().len();
        assert!(rank >= 2, "transpose_last2 on shape {:?}", self.shape());
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let shape = self.shape();
        assert!(axis < shape.len(), "slice: axis {axis} vs shape {shape:?}");
        assert!(
            start + len <= shape[axis],
            "slice: range {start}..{} exceeds axis {axis} of shape {shape:?}",
            start + len
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * full + a) * inner;
                for i in 0..inner {
                    map.push(base + i);
                }
            }
        }
        self.gather_map(&out_shape, Rc::new(map))
    }

    /// Concatenate along one axis. All other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape().to_vec();
        assert!(axis < first.len(), "concat: axis {axis} vs shape {first:?}");
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch {s:?} vs {first:?}");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(
                    i == axis || a == b,
                    "concat: shapes {s:?} vs {first:?} differ off-axis"
                );
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; numel];
        let mut offsets = Vec::with_capacity(parts.len());
        {
            let mut off = 0usize;
            for p in parts {
                offsets.push(off);
                let alen = p.shape()[axis];
                let d = p.data();
                for o in 0..outer {
                    let dst = (o * axis_total + off) * inner;
                    let src = o * alen * inner;
                    out[dst..dst + alen * inner].copy_from_slice(&d[src..src + alen * inner]);
                }
                off += alen;
            }
        }
        let parent_handles: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let parents = parent_handles.clone();
        let axis_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::make_op(out_shape, out, parents, move |g| {
            for (pi, p) in parent_handles.iter().enumerate() {
                if !p.requires_grad_flag() {
                    continue;
                }
                let alen = axis_lens[pi];
                let off = offsets[pi];
                let mut gp = vec![T::ZERO; outer * alen * inner];
                for o in 0..outer {
                    let src = (o * axis_total + off) * inner;
                    let dst = o * alen * inner;
                    gp[dst..dst + alen * inner].copy_from_slice(&g[src..src + alen * inner]);
                }
                p.accum_grad(&gp);
            }
        })
    }

    // ---- structured ops ----

    /// Softmax over the last axis. `NEG_INFINITY` entries get exactly
    /// zero weight. Panics on a fully masked row: every query must be
    /// allowed at least one key.
    pub fn softmax_last(&self) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("softmax_last on rank-0 tensor");
        let rows = self.numel() / n;
        let mut out = vec![T::ZERO; rows * n];
        {
            let d = self.data();
            for r in 0..rows {
                let row = &d[r * n..(r + 1) * n];
                let mut mx = T::NEG_INFINITY;
                for &x in row {
                    mx = mx.max(x);
                }
                assert!(
                    mx > T::NEG_INFINITY,
                    "softmax over fully masked row (all entries -inf)"
                );
                let orow = &mut out[r * n..(r + 1) * n];
                let mut sum = T::ZERO;
                for (o, &x) in orow.iter_mut().zip(row) {
                    if x == T::NEG_INFINITY {
                        *o = T::ZERO;
                    } else {
                        *o = (x - mx).exp();
                        sum += *o;
                    }
                }
                for o in orow.iter_mut() {
                    *o = *o / sum;
                }
            }
        }
        let y = out.clone();
        let a_t = self.clone();
        Tensor::make_op(shape, out, vec![self.clone()], move |g| {
            let mut ga = vec![T::ZERO; rows * n];
            for r in 0..rows {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let mut dot = T::ZERO;
                for (yi, gi) in yr.iter().zip(gr) {
                    dot += *yi * *gi;
                }
                let gar = &mut ga[r * n..(r + 1) * n];
                for ((a, &yi), &gi) in gar.iter_mut().zip(yr).zip(gr) {
                    *a = yi * (gi - dot);
                }
            }
            a_t.accum_grad(&ga);
        })
    }

    /// Keeps the k largest entries of each last-axis row and sets the
    /// rest to -inf (they then take zero softmax weight). Ties keep
    /// the lowest index so encoder and decoder always select the same
    /// set. Rows shorter than k pass through unchanged. Gradient flows
    /// only through kept entries.
    pub fn topk_filter_rows(&self, k: usize) -> Tensor<T> {
        assert!(k > 0, "topk_filter_rows: k must be positive");
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("topk_filter_rows on rank-0 tensor");
        let rows = self.numel() / n;
        let mut out = vec![T::NEG_INFINITY; rows * n];
        let mut kept = vec![false; rows * n];
        {
            let d = self.data();
            if k >= n {
                out.copy_from_slice(&d);
                kept.iter_mut().for_each(|b| *b = true);
            } else {
                let mut order: Vec<usize> = Vec::with_capacity(n);
                for r in 0..rows {
                    let row = &d[r * n..(r + 1) * n];
                    order.clear();
                    order.extend(0..n);
                    order.sort_by(|&i, &j| {
                        row[j]
                            .partial_cmp(&row[i])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(i.cmp(&j))
                    });
                    for &i in order.iter().take(k) {
                        out[r * n + i] = row[i];
                        kept[r * n + i] = true;
                    }
                }
            }
        }
        let a_t = self.clone();
        Tensor::make_op(shape, out, vec![self.clone()], move |g| {
            let ga: Vec<T> = g
                .iter()
                .zip(&kept)
                .map(|(&gi, &keep)| if keep { gi } else { T::ZERO })
                .collect();
            a_t.accum_grad(&ga);
        })
    }
}

/// C[m,n] += A[m,k] @ B[k,n], ikj order for contiguous inner loops.
fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Numerically stable logistic function.
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Layer normalization over the last axis with learnable gain and
/// bias, built from primitive ops so the gradient is automatic.
pub fn layer_norm_last<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let n = *x.shape().last().expect("layer_norm_last on rank-0 tensor");
    assert_eq!(gamma.shape(), &[n], "layer_norm_last: gamma shape");
    assert_eq!(beta.shape(), &[n], "layer_norm_last: beta shape");
    let mean = x.mean_last();
    let centered = x.sub(&mean);
    let var = centered.square().mean_last();
    let normed = centered.div(&var.add_scalar(eps).sqrt());
    normed.mul(gamma).add(beta)
}
