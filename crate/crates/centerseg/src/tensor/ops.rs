//! Tensor operations: elementwise arithmetic with trailing-dimension
//! broadcasting, reductions, matmul, structural ops, and the custom
//! kernels (softmax, straight-through one-hot) used by the classifier.

use std::rc::Rc;

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

/// Sums a full-size gradient buffer down to a broadcast operand.
fn reduce_to<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (i, &v) in g.iter().enumerate() {
        out[i % n] = out[i % n] + v;
    }
    out
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinKind) -> Result<Tensor<T>> {
        let (big, a_is_big) = if self.shape() == other.shape() {
            (self, true)
        } else if other.numel() == 1 || is_suffix(other.shape(), self.shape()) {
            (self, true)
        } else if self.numel() == 1 || is_suffix(self.shape(), other.shape()) {
            (other, false)
        } else {
            return Err(Error::Dimension(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                self.shape(),
                other.shape()
            )));
        };
        let out_shape = big.shape().to_vec();
        let n = numel(&out_shape);
        let (na, nb) = (self.numel(), other.numel());
        let ad = self.data();
        let bd = other.data();

        if matches!(kind, BinKind::Div) && bd.iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain("division by zero".into()));
        }

        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let a = ad[if a_is_big { i } else { i % na }];
            let b = bd[if a_is_big { i % nb } else { i }];
            out.push(match kind {
                BinKind::Add => a + b,
                BinKind::Sub => a - b,
                BinKind::Mul => a * b,
                BinKind::Div => a / b,
                BinKind::Maximum => {
                    if a >= b {
                        a
                    } else {
                        b
                    }
                }
            });
        }

        let (sa, sb) = (self.clone(), other.clone());
        let vjp = Box::new(move |g: &[T], _out: &[T]| {
            let ad = sa.data();
            let bd = sb.data();
            let mut ga = vec![T::zero(); g.len()];
            let mut gb = vec![T::zero(); g.len()];
            for i in 0..g.len() {
                let a = ad[if a_is_big { i } else { i % na }];
                let b = bd[if a_is_big { i % nb } else { i }];
                match kind {
                    BinKind::Add => {
                        ga[i] = g[i];
                        gb[i] = g[i];
                    }
                    BinKind::Sub => {
                        ga[i] = g[i];
                        gb[i] = -g[i];
                    }
                    BinKind::Mul => {
                        ga[i] = g[i] * b;
                        gb[i] = g[i] * a;
                    }
                    BinKind::Div => {
                        ga[i] = g[i] / b;
                        gb[i] = -g[i] * a / (b * b);
                    }
                    BinKind::Maximum => {
                        // Ties route to the first argument.
                        if a >= b {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                }
            }
            let ga = if na == g.len() { ga } else { reduce_to(&ga, na) };
            let gb = if nb == g.len() { gb } else { reduce_to(&gb, nb) };
            vec![ga, gb]
        });
        Ok(Tensor::from_op(out, out_shape, vec![self.clone(), other.clone()], vjp))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Add)
    }
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Sub)
    }
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Mul)
    }
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Div)
    }
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Maximum)
    }

    fn unary(
        &self,
        f: impl Fn(T) -> T,
        // dx = g * dfdx(x, y)
        dfdx: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let parent = self.clone();
        let vjp = Box::new(move |g: &[T], y: &[T]| {
            let xd = parent.data();
            vec![(0..g.len()).map(|i| g[i] * dfdx(xd[i], y[i])).collect()]
        });
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], vjp)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        Ok(self.unary(|x| x.ln(), |x, _| T::one() / x))
    }

    pub fn reciprocal(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain("reciprocal of zero".into()));
        }
        Ok(self.unary(|x| T::one() / x, |x, _| -T::one() / (x * x)))
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        let half = T::from_f64(0.5);
        Ok(self.unary(|x| x.sqrt(), move |_, y| half / y))
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::from_f64(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x * c, move |_, _| c)
    }

    /// 2-D matrix product `[M,K]·[K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (m, k) = (a_shape[0], a_shape[1]);
        let (k2, n) = (b_shape[0], b_shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                a_shape, b_shape
            )));
        }
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        let vjp = Box::new(move |g: &[T], _y: &[T]| {
            // dA = G·Bᵀ, dB = Aᵀ·G
            let a = pa.data();
            let b = pb.data();
            let mut da = vec![T::zero(); m * k];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    for t in 0..k {
                        da[i * k + t] = da[i * k + t] + gij * b[t * n + j];
                    }
                }
            }
            let mut db = vec![T::zero(); k * n];
            for i in 0..m {
                for t in 0..k {
                    let ait = a[i * k + t];
                    for j in 0..n {
                        db[t * n + j] = db[t * n + j] + ait * g[i * n + j];
                    }
                }
            }
            vec![da, db]
        });
        Ok(Tensor::from_op(out, vec![m, n], vec![self.clone(), other.clone()], vjp))
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose2d expects 2-D, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let vjp = Box::new(move |g: &[T], _y: &[T]| {
            let mut gi = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gi[i * c + j] = g[j * r + i];
                }
            }
            vec![gi]
        });
        Ok(Tensor::from_op(out, vec![c, r], vec![self.clone()], vjp))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let vjp = Box::new(move |g: &[T], _y: &[T]| vec![g.to_vec()]);
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            vjp,
        ))
    }

    /// `out[i] = self[indices[i]]`; backward scatter-adds. Covers
    /// slicing, row selection and patch rearrangement.
    pub fn gather(&self, indices: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<T>> {
        if indices.len() != numel(out_shape) {
            return Err(Error::Dimension("gather index count != output size".into()));
        }
        let n_in = self.numel();
        if indices.iter().any(|&i| i >= n_in) {
            return Err(Error::Dimension("gather index out of range".into()));
        }
        let d = self.data();
        let out: Vec<T> = indices.iter().map(|&i| d[i]).collect();
        let idx = Rc::clone(&indices);
        let vjp = Box::new(move |g: &[T], _y: &[T]| {
            let mut gi = vec![T::zero(); n_in];
            for (o, &i) in idx.iter().enumerate() {
                gi[i] = gi[i] + g[o];
            }
            vec![gi]
        });
        Ok(Tensor::from_op(out, out_shape.to_vec(), vec![self.clone()], vjp))
    }

    /// Selects whole slices along axis 0, concatenated in the given order.
    pub fn select_axis0(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::Dimension("select_axis0 on scalar".into()));
        }
        let inner = numel(&s[1..]);
        let mut idx = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Dimension(format!("row {} out of range {}", r, s[0])));
            }
            idx.extend((r * inner)..((r + 1) * inner));
        }
        let mut out_shape = s.to_vec();
        out_shape[0] = rows.len();
        self.gather(Rc::new(idx), &out_shape)
    }

    /// Drops axis 0 at the given index.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor<T>> {
        let t = self.select_axis0(&[i])?;
        let shape = self.shape()[1..].to_vec();
        t.reshape(&shape)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        let vjp = Box::new(move |g: &[T], _y: &[T]| vec![vec![g[0]; n]]);
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], vjp)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let inv = T::one() / T::from_f64(self.numel() as f64);
        self.sum_all().mul_scalar(inv)
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "axis {} out of range for shape {:?}",
                axis, s
            )));
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        Ok((outer, len, inner))
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape().to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let d = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        let vjp = Box::new(move |g: &[T], _y: &[T]| {
            let mut gi = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        gi[base + i] = g[o * inner + i];
                    }
                }
            }
            vec![gi]
        });
        Ok(Tensor::from_op(out, self.reduced_shape(axis), vec![self.clone()], vjp))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = self.shape()[axis];
        Ok(self
            .sum_axis(axis)?
            .mul_scalar(T::one() / T::from_f64(len as f64)))
    }

    fn extremum_axis(&self, axis: usize, take_max: bool) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let d = self.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                let mut best_j = 0usize;
                for j in 1..len {
                    let v = d[(o * len + j) * inner + i];
                    // First attaining index wins on ties.
                    if (take_max && v > best) || (!take_max && v < best) {
                        best = v;
                        best_j = j;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_j;
            }
        }
        let vjp = Box::new(move |g: &[T], _y: &[T]| {
            let mut gi = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let j = arg[o * inner + i];
                    gi[(o * len + j) * inner + i] = g[o * inner + i];
                }
            }
            vec![gi]
        });
        Ok(Tensor::from_op(out, self.reduced_shape(axis), vec![self.clone()], vjp))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.extremum_axis(axis, true)
    }

    pub fn min_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.extremum_axis(axis, false)
    }

    pub fn max_all(&self) -> Result<Tensor<T>> {
        self.reshape(&[self.numel()])?.max_axis(0)
    }

    pub fn min_all(&self) -> Result<Tensor<T>> {
        self.reshape(&[self.numel()])?.min_axis(0)
    }

    /// Index of the largest element along `axis`; ties resolve to the
    /// lowest index. Not differentiable.
    pub fn argmax_axis(&self, axis: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let d = self.data();
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                let mut best_j = 0usize;
                for j in 1..len {
                    let v = d[(o * len + j) * inner + i];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                arg[o * inner + i] = best_j;
            }
        }
        Ok((arg, self.reduced_shape(axis)))
    }

    pub fn frobenius_norm(&self) -> Tensor<T> {
        let sq: T = self.data().iter().map(|&x| x * x).sum();
        let norm = sq.sqrt();
        let parent = self.clone();
        let vjp = Box::new(move |g: &[T], y: &[T]| {
            let denom = if y[0] > T::from_f64(1e-30) { y[0] } else { T::from_f64(1e-30) };
            vec![parent.data().iter().map(|&x| g[0] * x / denom).collect()]
        });
        Tensor::from_op(vec![norm], vec![1], vec![self.clone()], vjp)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let d = self.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = d[o * len * inner + i];
                for j in 1..len {
                    let v = d[(o * len + j) * inner + i];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (d[(o * len + j) * inner + i] - mx).exp();
                    out[(o * len + j) * inner + i] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    let idx = (o * len + j) * inner + i;
                    out[idx] = out[idx] / sum;
                }
            }
        }
        let vjp = Box::new(move |g: &[T], y: &[T]| {
            let mut gi = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = T::zero();
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        dot = dot + g[idx] * y[idx];
                    }
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        gi[idx] = (g[idx] - dot) * y[idx];
                    }
                }
            }
            vec![gi]
        });
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], vjp))
    }

    /// Straight-through hard assignment over the last axis of a 2-D
    /// tensor of soft weights: forward emits the rowwise one-hot of the
    /// argmax, backward passes the output gradient through unchanged.
    pub fn straight_through_onehot(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "straight_through_onehot expects 2-D, got {:?}",
                s
            )));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite assignment weights".into()));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let mut best = d[r * cols];
            let mut best_j = 0usize;
            for j in 1..cols {
                if d[r * cols + j] > best {
                    best = d[r * cols + j];
                    best_j = j;
                }
            }
            out[r * cols + best_j] = T::one();
        }
        let vjp = Box::new(move |g: &[T], _y: &[T]| vec![g.to_vec()]);
        Ok(Tensor::from_op(out, s.to_vec(), vec![self.clone()], vjp))
    }

    /// Multiplies each axis-0 slice by a constant scale factor.
    pub fn scale_rows(&self, scales: &[T]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.is_empty() || s[0] != scales.len() {
            return Err(Error::Dimension(format!(
                "scale_rows: {} scales for shape {:?}",
                scales.len(),
                s
            )));
        }
        let inner = numel(&s[1..]);
        let d = self.data();
        let mut out = vec![T::zero(); d.len()];
        for r in 0..s[0] {
            for i in 0..inner {
                out[r * inner + i] = d[r * inner + i] * scales[r];
            }
        }
        let sc = scales.to_vec();
        let vjp = Box::new(move |g: &[T], _y: &[T]| {
            let mut gi = vec![T::zero(); g.len()];
            for (r, &s) in sc.iter().enumerate() {
                for i in 0..inner {
                    gi[r * inner + i] = g[r * inner + i] * s;
                }
            }
            vec![gi]
        });
        Ok(Tensor::from_op(out, s.to_vec(), vec![self.clone()], vjp))
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for t in 0..k {
            let ait = a[i * k + t];
            if ait == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + ait * brow[j];
            }
        }
    }
    out
}

/// Stacks same-shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Contract("stack of zero tensors".into()));
    }
    let shape = parts[0].shape().to_vec();
    let inner = numel(&shape);
    let mut data = Vec::with_capacity(parts.len() * inner);
    for p in parts {
        if p.shape() != shape.as_slice() {
            return Err(Error::Dimension("stack requires identical shapes".into()));
        }
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&shape);
    let n = parts.len();
    let vjp = Box::new(move |g: &[T], _y: &[T]| {
        (0..n).map(|i| g[i * inner..(i + 1) * inner].to_vec()).collect()
    });
    Ok(Tensor::from_op(data, out_shape, parts.to_vec(), vjp))
}
