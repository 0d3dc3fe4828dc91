//! Differentiable tensor operations: elementwise arithmetic, matrix product,
//! reductions, reshape, per-sample Gram products and the two broadcast helpers
//! the layer stack needs.
//!
//! Binary elementwise ops accept equal shapes or a single-element scalar on
//! either side; no other implicit broadcasting exists.

use super::{gemm_nn, gemm_nt, gemm_tn, BackwardOp, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub enum UnKind<S> {
    Neg,
    Abs,
    Square,
    Sqrt,
    Exp,
    Ln,
    ClampMin(S),
}

struct BinOp<S: Scalar> {
    kind: BinKind,
    a: Tensor<S>,
    b: Tensor<S>,
}

impl<S: Scalar> BackwardOp<S> for BinOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn backward(&self, out_data: &[S], out_grad: &[S]) {
        let a = self.a.data();
        let b = self.b.data();
        let a_scalar = a.len() == 1 && out_grad.len() > 1;
        let b_scalar = b.len() == 1 && out_grad.len() > 1;

        if self.a.requires_grad() {
            let mut da = vec![S::ZERO; a.len()];
            match self.kind {
                BinKind::Add => {
                    if a_scalar {
                        da[0] = out_grad.iter().copied().sum();
                    } else {
                        da.copy_from_slice(out_grad);
                    }
                }
                BinKind::Sub => {
                    if a_scalar {
                        da[0] = out_grad.iter().copied().sum();
                    } else {
                        da.copy_from_slice(out_grad);
                    }
                }
                BinKind::Mul => {
                    if a_scalar {
                        da[0] = out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * b[if b_scalar { 0 } else { i }])
                            .sum();
                    } else {
                        for i in 0..da.len() {
                            da[i] = out_grad[i] * b[if b_scalar { 0 } else { i }];
                        }
                    }
                }
                BinKind::Div => {
                    if a_scalar {
                        da[0] = out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g / b[if b_scalar { 0 } else { i }])
                            .sum();
                    } else {
                        for i in 0..da.len() {
                            da[i] = out_grad[i] / b[if b_scalar { 0 } else { i }];
                        }
                    }
                }
            }
            self.a.accumulate_grad(&da);
        }

        if self.b.requires_grad() {
            let mut db = vec![S::ZERO; b.len()];
            match self.kind {
                BinKind::Add => {
                    if b_scalar {
                        db[0] = out_grad.iter().copied().sum();
                    } else {
                        db.copy_from_slice(out_grad);
                    }
                }
                BinKind::Sub => {
                    if b_scalar {
                        db[0] = -out_grad.iter().copied().sum::<S>();
                    } else {
                        for i in 0..db.len() {
                            db[i] = -out_grad[i];
                        }
                    }
                }
                BinKind::Mul => {
                    if b_scalar {
                        db[0] = out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * a[if a_scalar { 0 } else { i }])
                            .sum();
                    } else {
                        for i in 0..db.len() {
                            db[i] = out_grad[i] * a[if a_scalar { 0 } else { i }];
                        }
                    }
                }
                BinKind::Div => {
                    // d(a/b)/db = -a/b² = -out/b
                    if b_scalar {
                        db[0] = out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| -g * out_data[i] / b[0])
                            .sum();
                    } else {
                        for i in 0..db.len() {
                            db[i] = -out_grad[i] * out_data[i] / b[i];
                        }
                    }
                }
            }
            self.b.accumulate_grad(&db);
        }
    }
}

struct UnOp<S: Scalar> {
    kind: UnKind<S>,
    x: Tensor<S>,
}

impl<S: Scalar> BackwardOp<S> for UnOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone()]
    }

    fn backward(&self, out_data: &[S], out_grad: &[S]) {
        if !self.x.requires_grad() {
            return;
        }
        let x = self.x.data();
        let two = S::from_f64(2.0);
        let mut dx = vec![S::ZERO; x.len()];
        for i in 0..dx.len() {
            let g = out_grad[i];
            dx[i] = match self.kind {
                UnKind::Neg => -g,
                // Subgradient 0 at exactly 0.
                UnKind::Abs => {
                    if x[i] > S::ZERO {
                        g
                    } else if x[i] < S::ZERO {
                        -g
                    } else {
                        S::ZERO
                    }
                }
                UnKind::Square => two * x[i] * g,
                UnKind::Sqrt => g / (two * out_data[i]),
                UnKind::Exp => g * out_data[i],
                UnKind::Ln => g / x[i],
                UnKind::ClampMin(lo) => {
                    if x[i] >= lo {
                        g
                    } else {
                        S::ZERO
                    }
                }
            };
        }
        self.x.accumulate_grad(&dx);
    }
}

struct MatmulOp<S: Scalar> {
    a: Tensor<S>,
    b: Tensor<S>,
    m: usize,
    k: usize,
    n: usize,
}

impl<S: Scalar> BackwardOp<S> for MatmulOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.a.requires_grad() {
            let b = self.b.data();
            let mut da = vec![S::ZERO; m * k];
            gemm_nt(out_grad, &b, m, n, k, &mut da);
            drop(b);
            self.a.accumulate_grad(&da);
        }
        if self.b.requires_grad() {
            let a = self.a.data();
            let mut db = vec![S::ZERO; k * n];
            gemm_tn(&a, out_grad, k, m, n, &mut db);
            drop(a);
            self.b.accumulate_grad(&db);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

struct ReduceOp<S: Scalar> {
    x: Tensor<S>,
    kind: ReduceKind,
    axes: Vec<usize>,
}

impl<S: Scalar> BackwardOp<S> for ReduceOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        if !self.x.requires_grad() {
            return;
        }
        let shape = self.x.shape().to_vec();
        let count: usize = self.axes.iter().map(|&a| shape[a]).product();
        let scale = match self.kind {
            ReduceKind::Sum => S::ONE,
            ReduceKind::Mean => S::ONE / S::from_f64(count as f64),
        };
        let mut dx = vec![S::ZERO; self.x.numel()];
        for_each_reduced_index(&shape, &self.axes, |in_idx, out_idx| {
            dx[in_idx] = out_grad[out_idx] * scale;
        });
        self.x.accumulate_grad(&dx);
    }
}

struct ReshapeOp<S: Scalar> {
    x: Tensor<S>,
}

impl<S: Scalar> BackwardOp<S> for ReshapeOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        self.x.accumulate_grad(out_grad);
    }
}

struct GramOp<S: Scalar> {
    x: Tensor<S>,
    rows: usize,
    cols: usize,
    scale: S,
}

impl<S: Scalar> BackwardOp<S> for GramOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        if !self.x.requires_grad() {
            return;
        }
        let (h, w) = (self.rows, self.cols);
        let x = self.x.data();
        let batch = x.len() / (h * w);
        let mut dx = vec![S::ZERO; x.len()];
        let mut gsym = vec![S::ZERO; h * h];
        for img in 0..batch {
            let g = &out_grad[img * h * h..(img + 1) * h * h];
            // dA = s · (G + Gᵀ) · A
            for i in 0..h {
                for j in 0..h {
                    gsym[i * h + j] = (g[i * h + j] + g[j * h + i]) * self.scale;
                }
            }
            let a = &x[img * h * w..(img + 1) * h * w];
            let d = &mut dx[img * h * w..(img + 1) * h * w];
            gemm_nn(&gsym, a, h, h, w, d);
        }
        drop(x);
        self.x.accumulate_grad(&dx);
    }
}

struct BroadcastChannelOp<S: Scalar> {
    t: Tensor<S>,
    n: usize,
    c: usize,
    hw: usize,
}

impl<S: Scalar> BackwardOp<S> for BroadcastChannelOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.t.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        if !self.t.requires_grad() {
            return;
        }
        let mut dt = vec![S::ZERO; self.c];
        for img in 0..self.n {
            for ch in 0..self.c {
                let base = (img * self.c + ch) * self.hw;
                let mut acc = S::ZERO;
                for &g in &out_grad[base..base + self.hw] {
                    acc += g;
                }
                dt[ch] += acc;
            }
        }
        self.t.accumulate_grad(&dt);
    }
}

struct AddRowBiasOp<S: Scalar> {
    x: Tensor<S>,
    b: Tensor<S>,
    rows: usize,
    cols: usize,
}

impl<S: Scalar> BackwardOp<S> for AddRowBiasOp<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone(), self.b.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        if self.x.requires_grad() {
            self.x.accumulate_grad(out_grad);
        }
        if self.b.requires_grad() {
            let mut db = vec![S::ZERO; self.cols];
            for r in 0..self.rows {
                for (dbk, &g) in db.iter_mut().zip(&out_grad[r * self.cols..(r + 1) * self.cols]) {
                    *dbk += g;
                }
            }
            self.b.accumulate_grad(&db);
        }
    }
}

/// Walks every element of `shape`, yielding (input linear index, reduced
/// linear index) pairs where the reduced index drops `axes`.
fn for_each_reduced_index(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let ndim = shape.len();
    let keep: Vec<usize> = (0..ndim).filter(|d| !axes.contains(d)).collect();
    let mut out_strides = vec![0usize; ndim];
    let mut stride = 1;
    for &d in keep.iter().rev() {
        out_strides[d] = stride;
        stride *= shape[d];
    }
    let numel: usize = shape.iter().product();
    let mut idx = vec![0usize; ndim];
    let mut out_idx = 0usize;
    for lin in 0..numel {
        f(lin, out_idx);
        // Increment the multi-index from the last dimension.
        for d in (0..ndim).rev() {
            idx[d] += 1;
            out_idx += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            out_idx -= out_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn binary<S: Scalar>(kind: BinKind, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let a_scalar = a.numel() == 1;
    let b_scalar = b.numel() == 1;
    if a.shape() != b.shape() && !a_scalar && !b_scalar {
        return Err(Error::ShapeMismatch {
            op: "elementwise",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (out_shape, n) = if a_scalar && !b_scalar {
        (b.shape().to_vec(), b.numel())
    } else {
        (a.shape().to_vec(), a.numel())
    };
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![S::ZERO; n];
    for (i, o) in out.iter_mut().enumerate() {
        let av = ad[if a_scalar { 0 } else { i }];
        let bv = bd[if b_scalar { 0 } else { i }];
        *o = match kind {
            BinKind::Add => av + bv,
            BinKind::Sub => av - bv,
            BinKind::Mul => av * bv,
            BinKind::Div => av / bv,
        };
    }
    drop(ad);
    drop(bd);
    Ok(Tensor::from_op(
        out,
        out_shape,
        Box::new(BinOp {
            kind,
            a: a.clone(),
            b: b.clone(),
        }),
    ))
}

fn unary<S: Scalar>(kind: UnKind<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let xd = x.data();
    let mut out = vec![S::ZERO; xd.len()];
    for (o, &v) in out.iter_mut().zip(xd.iter()) {
        *o = match kind {
            UnKind::Neg => -v,
            UnKind::Abs => v.abs(),
            UnKind::Square => v * v,
            UnKind::Sqrt => {
                if v < S::ZERO {
                    return Err(Error::DomainError {
                        op: "sqrt",
                        value: v.to_f64(),
                    });
                }
                v.sqrt()
            }
            UnKind::Exp => v.exp(),
            UnKind::Ln => {
                if v < S::ZERO {
                    return Err(Error::DomainError {
                        op: "log",
                        value: v.to_f64(),
                    });
                }
                v.ln()
            }
            UnKind::ClampMin(lo) => v.maxs(lo),
        };
    }
    drop(xd);
    let shape = x.shape().to_vec();
    Ok(Tensor::from_op(out, shape, Box::new(UnOp { kind, x: x.clone() })))
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary(BinKind::Add, self, rhs)
    }
    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary(BinKind::Sub, self, rhs)
    }
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary(BinKind::Mul, self, rhs)
    }
    pub fn div(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary(BinKind::Div, self, rhs)
    }
    pub fn neg(&self) -> Result<Tensor<S>> {
        unary(UnKind::Neg, self)
    }
    pub fn abs(&self) -> Result<Tensor<S>> {
        unary(UnKind::Abs, self)
    }
    pub fn square(&self) -> Result<Tensor<S>> {
        unary(UnKind::Square, self)
    }
    pub fn sqrt(&self) -> Result<Tensor<S>> {
        unary(UnKind::Sqrt, self)
    }
    pub fn exp(&self) -> Result<Tensor<S>> {
        unary(UnKind::Exp, self)
    }
    pub fn ln(&self) -> Result<Tensor<S>> {
        unary(UnKind::Ln, self)
    }
    pub fn clamp_min(&self, lo: S) -> Result<Tensor<S>> {
        unary(UnKind::ClampMin(lo), self)
    }

    pub fn add_scalar(&self, v: S) -> Result<Tensor<S>> {
        self.add(&Tensor::scalar(v))
    }
    pub fn mul_scalar(&self, v: S) -> Result<Tensor<S>> {
        self.mul(&Tensor::scalar(v))
    }

    /// Standard matrix product of two 2-d tensors.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut out = vec![S::ZERO; m * n];
        gemm_nn(&self.data(), &rhs.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Box::new(MatmulOp {
                a: self.clone(),
                b: rhs.clone(),
                m,
                k,
                n,
            }),
        ))
    }

    fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Tensor<S>> {
        let shape = self.shape().to_vec();
        let mut axes: Vec<usize> = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &a in &axes {
            if a >= shape.len() {
                return Err(Error::InvalidArgument {
                    op: "reduce",
                    msg: format!("axis {a} out of range for shape {shape:?}"),
                });
            }
        }
        let out_shape: Vec<usize> = (0..shape.len())
            .filter(|d| !axes.contains(d))
            .map(|d| shape[d])
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let out_numel: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&a| shape[a]).product();

        let xd = self.data();
        let mut out = vec![S::ZERO; out_numel];
        for_each_reduced_index(&shape, &axes, |in_idx, out_idx| {
            out[out_idx] += xd[in_idx];
        });
        if kind == ReduceKind::Mean {
            let inv = S::ONE / S::from_f64(count as f64);
            for o in &mut out {
                *o *= inv;
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            out_shape,
            Box::new(ReduceOp {
                x: self.clone(),
                kind,
                axes,
            }),
        ))
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<S>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<S>> {
        self.reduce(ReduceKind::Mean, axes)
    }

    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &all)
    }

    pub fn mean_all(&self) -> Result<Tensor<S>> {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &all)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::InvalidArgument {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(), shape),
            });
        }
        Ok(Tensor::from_op(
            self.data().clone(),
            shape.to_vec(),
            Box::new(ReshapeOp { x: self.clone() }),
        ))
    }

    /// Per-sample product of each H×W image matrix with its own transpose;
    /// the row-correlation texture statistic. Input N×1×H×W, output N×H×H.
    /// With `normalize`, entries are divided by the column count W.
    pub fn gram(&self, normalize: bool) -> Result<Tensor<S>> {
        let (n, c, h, w) = self.dims4()?;
        if c != 1 {
            return Err(Error::InvalidArgument {
                op: "gram",
                msg: format!("expected single-channel input, got {c} channels"),
            });
        }
        let scale = if normalize {
            S::ONE / S::from_f64(w as f64)
        } else {
            S::ONE
        };
        let xd = self.data();
        let mut out = vec![S::ZERO; n * h * h];
        for img in 0..n {
            let a = &xd[img * h * w..(img + 1) * h * w];
            let g = &mut out[img * h * h..(img + 1) * h * h];
            gemm_nt(a, a, h, w, h, g);
            if normalize {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            vec![n, h, h],
            Box::new(GramOp {
                x: self.clone(),
                rows: h,
                cols: w,
                scale,
            }),
        ))
    }

    /// Expands a per-channel vector [C] to [n, C, h, w].
    pub fn broadcast_channel(&self, n: usize, h: usize, w: usize) -> Result<Tensor<S>> {
        let c = match self.shape() {
            [c] => *c,
            other => {
                return Err(Error::InvalidArgument {
                    op: "broadcast_channel",
                    msg: format!("expected 1-d per-channel tensor, got {other:?}"),
                })
            }
        };
        let hw = h * w;
        let td = self.data();
        let mut out = vec![S::ZERO; n * c * hw];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                out[base..base + hw].fill(td[ch]);
            }
        }
        drop(td);
        Ok(Tensor::from_op(
            out,
            vec![n, c, h, w],
            Box::new(BroadcastChannelOp {
                t: self.clone(),
                n,
                c,
                hw,
            }),
        ))
    }

    /// Adds a [K] bias vector to every row of an [N, K] tensor.
    pub fn add_row_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (rows, cols) = self.dims2()?;
        if bias.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let xd = self.data();
        let bd = bias.data();
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] + bd[c];
            }
        }
        drop(xd);
        drop(bd);
        Ok(Tensor::from_op(
            out,
            vec![rows, cols],
            Box::new(AddRowBiasOp {
                x: self.clone(),
                b: bias.clone(),
                rows,
                cols,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::{StreamId, StreamRng};

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn add_direct() {
        let out = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
        assert_eq!(*out.data(), vec![4.0, 6.0]);
    }

    #[test]
    fn sum_of_square_gradient() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = x.square().unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_broadcastable_shapes_error() {
        let err = t(&[1.0, 2.0], &[2]).add(&t(&[1.0, 2.0, 3.0], &[3]));
        assert!(err.is_err());
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let x = t(&[1.0, 2.0], &[2]);
        let s = Tensor::scalar(10.0);
        assert_eq!(*x.add(&s).unwrap().data(), vec![11.0, 12.0]);
        assert_eq!(*s.sub(&x).unwrap().data(), vec![9.0, 8.0]);
    }

    #[test]
    fn strict_domain_errors() {
        assert!(t(&[-1.0], &[1]).sqrt().is_err());
        assert!(t(&[-0.5], &[1]).ln().is_err());
    }

    #[test]
    fn matmul_identity_and_direct() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let got = eye.matmul(&eye).unwrap();
        assert_eq!(*got.data(), vec![1.0, 0.0, 0.0, 1.0]);

        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let ones = t(&[1.0, 1.0], &[2, 1]);
        assert_eq!(*a.matmul(&ones).unwrap().data(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_against_triple_loop_oracle() {
        let mut rng = StreamRng::new(11, StreamId::Data);
        let a: Vec<f64> = (0..35).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..21).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let got = t(&a, &[5, 7]).matmul(&t(&b, &[7, 3])).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..7 {
                    want += a[i * 7 + k] * b[k * 3 + j];
                }
                assert!((got.data()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_inner_extent_mismatch_errors() {
        assert!(t(&[1.0; 6], &[2, 3]).matmul(&t(&[1.0; 8], &[2, 4])).is_err());
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let c = Tensor::full(&[3, 4], 2.5f64);
        assert_eq!(c.mean_all().unwrap().item().unwrap(), 2.5);
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let x = Tensor::param(vec![0.3; 6], &[2, 3]).unwrap();
        x.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn mean_over_axis_against_loop_oracle() {
        let mut rng = StreamRng::new(13, StreamId::Data);
        let data: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let got = t(&data, &[4, 6]).mean_axes(&[1]).unwrap();
        for r in 0..4 {
            let want: f64 = data[r * 6..(r + 1) * 6].iter().sum::<f64>() / 6.0;
            assert!((got.data()[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_axis_errors() {
        assert!(t(&[1.0; 4], &[2, 2]).sum_axes(&[2]).is_err());
    }

    #[test]
    fn backward_of_leaf_loss_is_one() {
        let x = Tensor::param(vec![5.0], &[1]).unwrap();
        x.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn shared_parent_accumulates_across_branches() {
        let w = Tensor::param(vec![1.5], &[1]).unwrap();
        let loss = w.add(&w).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0]);

        // Three branches through distinct subgraphs.
        let p = Tensor::param(vec![0.7], &[1]).unwrap();
        let a = p.square().unwrap();
        let b = p.mul_scalar(3.0).unwrap();
        let c = p.neg().unwrap();
        let loss = a.add(&b).unwrap().add(&c).unwrap();
        loss.backward().unwrap();
        let want = 2.0 * 0.7 + 3.0 - 1.0;
        assert!((p.grad().unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_without_zeroing_accumulates() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        for _ in 0..3 {
            let loss = x.square().unwrap().sum_all().unwrap();
            loss.backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn gram_identity_and_zero() {
        // 3×3 identity image, normalization off: I·Iᵀ = I.
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let g = t(&eye, &[1, 1, 3, 3]).gram(false).unwrap();
        assert_eq!(*g.data(), eye);

        let z = Tensor::<f64>::zeros(&[2, 1, 3, 5]).gram(true).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_against_loop_oracle() {
        let mut rng = StreamRng::new(17, StreamId::Data);
        let (h, w) = (8, 16);
        let data: Vec<f64> = (0..h * w).map(|_| rng.uniform(0.0, 1.0)).collect();
        let g = t(&data, &[1, 1, h, w]).gram(false).unwrap();
        for i in 0..h {
            for j in 0..h {
                let mut want = 0.0;
                for k in 0..w {
                    want += data[i * w + k] * data[j * w + k];
                }
                assert!((g.data()[i * h + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = StreamRng::new(23, StreamId::Data);
        for _ in 0..20 {
            let shape = gradcheck::rand_shape(2, 4, &mut rng);
            let a = gradcheck::rand_away_from_zero(&shape, &mut rng);
            let b = gradcheck::rand_away_from_zero(&shape, &mut rng);
            let err = gradcheck::max_rel_err(&[a, b], gradcheck::DEFAULT_EPS, |ts| {
                let s = ts[0].mul(&ts[1])?.add(&ts[0].sub(&ts[1])?)?;
                let d = ts[0].div(&ts[1])?;
                s.add(&d)?.abs()?.sum_all()
            })
            .unwrap();
            assert!(err < gradcheck::DEFAULT_TOL, "rel err {err}");
        }
    }

    #[test]
    fn reshape_round_trips_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let y = x.reshape(&[3, 2]).unwrap().square().unwrap().sum_all().unwrap();
        y.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }
}
