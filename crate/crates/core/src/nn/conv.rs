//! Convolution, transposed convolution and average pooling.
//!
//! Convolution is cross-correlation (no kernel flip) lowered to GEMM through
//! im2col; the transposed variant is its exact adjoint, built from the same
//! two index maps. Work is split across images: each output slice is written
//! by exactly one task with a fixed reduction order, so results are identical
//! for any worker count.

use rayon::prelude::*;

use super::ConvSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn spatial_out(&self) -> usize {
        self.oh * self.ow
    }
}

/// Lowers one image [C, H, W] into columns [C·kh·kw, OH·OW].
fn im2col<S: Scalar>(img: &[S], g: &Geometry, cols: &mut [S]) {
    debug_assert_eq!(cols.len(), g.k() * g.spatial_out());
    let ow = g.ow;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * g.spatial_out();
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy as usize >= g.h {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.sw == 1 {
                        // Contiguous copy with zero-padded edges.
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox + kj) as isize - g.pw as isize;
                            *d = if ix < 0 || ix as usize >= g.w {
                                S::ZERO
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            *d = if ix < 0 || ix as usize >= g.w {
                                S::ZERO
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image buffer.
fn col2im<S: Scalar>(cols: &[S], g: &Geometry, img: &mut [S]) {
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    img.fill(S::ZERO);
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * g.spatial_out();
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_weight_bias<S: Scalar>(
    spec: &ConvSpec,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<()> {
    let (kh, kw) = spec.kernel;
    let want = if spec.transposed {
        vec![spec.in_channels, spec.out_channels, kh, kw]
    } else {
        vec![spec.out_channels, spec.in_channels, kh, kw]
    };
    if weight.shape() != want.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv_weight",
            lhs: weight.shape().to_vec(),
            rhs: want,
        });
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::ShapeMismatch {
            op: "conv_bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![spec.out_channels],
        });
    }
    Ok(())
}

struct ConvBackward<S: Scalar> {
    x: Tensor<S>,
    weight: Tensor<S>,
    bias: Tensor<S>,
    spec: ConvSpec,
}

impl<S: Scalar> crate::tensor::BackwardOp<S> for ConvBackward<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone(), self.weight.clone(), self.bias.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        let (n, _, h, w) = self.x.dims4().expect("validated in forward");
        let spec = &self.spec;
        let (oh, ow) = spec.out_extent(h, w).expect("validated in forward");
        let g = Geometry {
            c: spec.in_channels,
            h,
            w,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            oh,
            ow,
        };
        let k = g.k();
        let sp = g.spatial_out();
        let cout = spec.out_channels;
        let xd_ref = self.x.data();
        let xd: &[S] = xd_ref.as_slice();
        let wd_ref = self.weight.data();
        let wd: &[S] = wd_ref.as_slice();

        if self.x.requires_grad() {
            let mut dx = vec![S::ZERO; xd.len()];
            dx.par_chunks_mut(g.c * h * w)
                .enumerate()
                .for_each(|(img, dxi)| {
                    let gy = &out_grad[img * cout * sp..(img + 1) * cout * sp];
                    let mut dcols = vec![S::ZERO; k * sp];
                    gemm_tn(wd, gy, k, cout, sp, &mut dcols);
                    col2im(&dcols, &g, dxi);
                });
            self.x.accumulate_grad(&dx);
        }

        if self.weight.requires_grad() {
            // Per-image partials reduced in index order keeps the sum
            // independent of scheduling.
            let partials: Vec<Vec<S>> = (0..n)
                .into_par_iter()
                .map(|img| {
                    let xi = &xd[img * g.c * h * w..(img + 1) * g.c * h * w];
                    let gy = &out_grad[img * cout * sp..(img + 1) * cout * sp];
                    let mut cols = vec![S::ZERO; k * sp];
                    im2col(xi, &g, &mut cols);
                    let mut dw = vec![S::ZERO; cout * k];
                    gemm_nt(gy, &cols, cout, sp, k, &mut dw);
                    dw
                })
                .collect();
            let mut dw = vec![S::ZERO; cout * k];
            for part in &partials {
                for (d, &p) in dw.iter_mut().zip(part) {
                    *d += p;
                }
            }
            self.weight.accumulate_grad(&dw);
        }

        if self.bias.requires_grad() {
            let mut db = vec![S::ZERO; cout];
            for img in 0..n {
                for co in 0..cout {
                    let base = (img * cout + co) * sp;
                    let mut acc = S::ZERO;
                    for &gv in &out_grad[base..base + sp] {
                        acc += gv;
                    }
                    db[co] += acc;
                }
            }
            self.bias.accumulate_grad(&db);
        }
    }
}

/// Cross-correlation with per-output-channel bias.
///
/// `x` is N×Cin×H×W, `weight` Cout×Cin×kh×kw, `bias` [Cout].
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    if spec.transposed {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            msg: "spec is transposed; use conv_transpose2d".into(),
        });
    }
    check_weight_bias(spec, weight, bias)?;
    let (n, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input",
            lhs: vec![c],
            rhs: vec![spec.in_channels],
        });
    }
    let (oh, ow) = spec.out_extent(h, w)?;
    let g = Geometry {
        c,
        h,
        w,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
        oh,
        ow,
    };
    let k = g.k();
    let sp = g.spatial_out();
    let cout = spec.out_channels;

    let xd_ref = x.data();
    let xd: &[S] = xd_ref.as_slice();
    let wd_ref = weight.data();
    let wd: &[S] = wd_ref.as_slice();
    let bd_ref = bias.data();
    let bd: &[S] = bd_ref.as_slice();
    let mut out = vec![S::ZERO; n * cout * sp];
    out.par_chunks_mut(cout * sp).enumerate().for_each(|(img, oi)| {
        let xi = &xd[img * c * h * w..(img + 1) * c * h * w];
        let mut cols = vec![S::ZERO; k * sp];
        im2col(xi, &g, &mut cols);
        gemm_nn(wd, &cols, cout, k, sp, oi);
        for co in 0..cout {
            let b = bd[co];
            for v in &mut oi[co * sp..(co + 1) * sp] {
                *v += b;
            }
        }
    });
    drop(xd_ref);
    drop(wd_ref);
    drop(bd_ref);

    Ok(Tensor::from_op(
        out,
        vec![n, cout, oh, ow],
        Box::new(ConvBackward {
            x: x.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            spec: *spec,
        }),
    ))
}

struct ConvTransposeBackward<S: Scalar> {
    x: Tensor<S>,
    weight: Tensor<S>,
    bias: Tensor<S>,
    spec: ConvSpec,
}

impl<S: Scalar> crate::tensor::BackwardOp<S> for ConvTransposeBackward<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone(), self.weight.clone(), self.bias.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        let (n, cin, hin, win) = self.x.dims4().expect("validated in forward");
        let spec = &self.spec;
        let (oh, ow) = spec.out_extent(hin, win).expect("validated in forward");
        let cout = spec.out_channels;
        // Geometry of the adjoint convolution: image side is the output.
        let g = Geometry {
            c: cout,
            h: oh,
            w: ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            oh: hin,
            ow: win,
        };
        let kc = g.k();
        let sp_in = hin * win;
        let xd_ref = self.x.data();
        let xd: &[S] = xd_ref.as_slice();
        let wd_ref = self.weight.data(); // [Cin, Cout·kh·kw]
        let wd: &[S] = wd_ref.as_slice();

        if self.x.requires_grad() {
            let mut dx = vec![S::ZERO; xd.len()];
            dx.par_chunks_mut(cin * sp_in).enumerate().for_each(|(img, dxi)| {
                let gy = &out_grad[img * cout * oh * ow..(img + 1) * cout * oh * ow];
                let mut cols = vec![S::ZERO; kc * sp_in];
                im2col(gy, &g, &mut cols);
                gemm_nn(wd, &cols, cin, kc, sp_in, dxi);
            });
            self.x.accumulate_grad(&dx);
        }

        if self.weight.requires_grad() {
            let partials: Vec<Vec<S>> = (0..n)
                .into_par_iter()
                .map(|img| {
                    let xi = &xd[img * cin * sp_in..(img + 1) * cin * sp_in];
                    let gy = &out_grad[img * cout * oh * ow..(img + 1) * cout * oh * ow];
                    let mut cols = vec![S::ZERO; kc * sp_in];
                    im2col(gy, &g, &mut cols);
                    let mut dw = vec![S::ZERO; cin * kc];
                    gemm_nt(xi, &cols, cin, sp_in, kc, &mut dw);
                    dw
                })
                .collect();
            let mut dw = vec![S::ZERO; cin * kc];
            for part in &partials {
                for (d, &p) in dw.iter_mut().zip(part) {
                    *d += p;
                }
            }
            self.weight.accumulate_grad(&dw);
        }

        if self.bias.requires_grad() {
            let sp_out = oh * ow;
            let mut db = vec![S::ZERO; cout];
            for img in 0..n {
                for co in 0..cout {
                    let base = (img * cout + co) * sp_out;
                    let mut acc = S::ZERO;
                    for &gv in &out_grad[base..base + sp_out] {
                        acc += gv;
                    }
                    db[co] += acc;
                }
            }
            self.bias.accumulate_grad(&db);
        }
    }
}

/// Transposed convolution: the adjoint of [`conv2d`] as a forward map.
///
/// `x` is N×Cin×H×W, `weight` Cin×Cout×kh×kw, `bias` [Cout].
pub fn conv_transpose2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    if !spec.transposed {
        return Err(Error::InvalidArgument {
            op: "conv_transpose2d",
            msg: "spec is not transposed".into(),
        });
    }
    check_weight_bias(spec, weight, bias)?;
    let (n, cin, hin, win) = x.dims4()?;
    if cin != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d_input",
            lhs: vec![cin],
            rhs: vec![spec.in_channels],
        });
    }
    let (oh, ow) = spec.out_extent(hin, win)?;
    let cout = spec.out_channels;
    let g = Geometry {
        c: cout,
        h: oh,
        w: ow,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
        oh: hin,
        ow: win,
    };
    let kc = g.k();
    let sp_in = hin * win;

    let xd_ref = x.data();
    let xd: &[S] = xd_ref.as_slice();
    let wd_ref = weight.data();
    let wd: &[S] = wd_ref.as_slice();
    let bd_ref = bias.data();
    let bd: &[S] = bd_ref.as_slice();
    let mut out = vec![S::ZERO; n * cout * oh * ow];
    out.par_chunks_mut(cout * oh * ow)
        .enumerate()
        .for_each(|(img, oi)| {
            let xi = &xd[img * cin * sp_in..(img + 1) * cin * sp_in];
            let mut cols = vec![S::ZERO; kc * sp_in];
            gemm_tn(wd, xi, kc, cin, sp_in, &mut cols);
            col2im(&cols, &g, oi);
            for co in 0..cout {
                let b = bd[co];
                for v in &mut oi[co * oh * ow..(co + 1) * oh * ow] {
                    *v += b;
                }
            }
        });
    drop(xd_ref);
    drop(wd_ref);
    drop(bd_ref);

    Ok(Tensor::from_op(
        out,
        vec![n, cout, oh, ow],
        Box::new(ConvTransposeBackward {
            x: x.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            spec: *spec,
        }),
    ))
}

struct AvgPoolBackward<S: Scalar> {
    x: Tensor<S>,
    window: (usize, usize),
}

impl<S: Scalar> crate::tensor::BackwardOp<S> for AvgPoolBackward<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        if !self.x.requires_grad() {
            return;
        }
        let (n, c, h, w) = self.x.dims4().expect("validated in forward");
        let (wh, ww) = self.window;
        let (oh, ow) = (h / wh, w / ww);
        let inv = S::ONE / S::from_f64((wh * ww) as f64);
        let mut dx = vec![S::ZERO; n * c * h * w];
        for plane in 0..n * c {
            let gp = &out_grad[plane * oh * ow..(plane + 1) * oh * ow];
            let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gp[oy * ow + ox] * inv;
                    for dy in 0..wh {
                        let row = (oy * wh + dy) * w + ox * ww;
                        for d in &mut dp[row..row + ww] {
                            *d += gv;
                        }
                    }
                }
            }
        }
        self.x.accumulate_grad(&dx);
    }
}

/// Non-overlapping mean pooling; spatial extents must divide by the window.
pub fn avgpool2d<S: Scalar>(x: &Tensor<S>, window: (usize, usize)) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::InvalidArgument {
            op: "avgpool2d",
            msg: format!("window {wh}×{ww} does not divide {h}×{w}"),
        });
    }
    let (oh, ow) = (h / wh, w / ww);
    let inv = S::ONE / S::from_f64((wh * ww) as f64);
    let xd = x.data();
    let mut out = vec![S::ZERO; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::ZERO;
                for dy in 0..wh {
                    let row = (oy * wh + dy) * w + ox * ww;
                    for &v in &xp[row..row + ww] {
                        acc += v;
                    }
                }
                op[oy * ow + ox] = acc * inv;
            }
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        Box::new(AvgPoolBackward {
            x: x.clone(),
            window,
        }),
    ))
}
