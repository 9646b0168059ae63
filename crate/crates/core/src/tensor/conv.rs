//! 3D convolution and its adjoint, lowered to GEMM through im2col.
//!
//! Kernel layout is `[Cout, Cin, kh, kw, kd]` for both directions: a transposed
//! convolution with kernel `k` is the exact adjoint of the forward convolution
//! with the same kernel, mapping `Cout` channels back to `Cin`.

use super::tape::Ctx;
use super::{gemm, Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Spatial bookkeeping of one forward convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let output = conv3d_output_extents(input, kernel, stride, pad)?;
        Ok(Self { cin, cout, input, kernel, stride, pad, output })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    /// 1×1×1, stride 1, no padding: im2col is the identity.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

pub fn conv3d_output_extents(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if stride[a] == 0 {
            return Err(Error::Shape(format!("conv3d: stride must be ≥ 1 on axis {a}")));
        }
        let padded = input[a] + 2 * pad[a];
        if kernel[a] == 0 || kernel[a] > padded {
            return Err(Error::Shape(format!(
                "conv3d: kernel extent {} larger than padded input extent {} on axis {a}",
                kernel[a], padded
            )));
        }
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Ok(out)
}

pub fn conv_transpose3d_output_extents(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let full = (input[a].max(1) - 1) * stride[a] + kernel[a];
        if full < 2 * pad[a] + 1 {
            return Err(Error::Shape(format!("conv_transpose3d: padding too large on axis {a}")));
        }
        out[a] = full - 2 * pad[a];
    }
    Ok(out)
}

/// Output positions `lo..hi` along a unit-stride axis whose source index
/// `k + c − pad` lies inside `0..d`.
#[inline]
fn unit_stride_range(c: usize, pad: usize, d: usize, od: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(c).min(od);
    let hi = (d + pad).saturating_sub(c).min(od).max(lo);
    (lo, hi)
}

/// Unfold one sample `[Cin, H, W, D]` into `[Cin·kh·kw·kd, H'·W'·D']`.
fn im2col<F: Element>(x: &[F], g: &Conv3dGeometry, col: &mut [F]) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.pad;
    let [oh, ow, od] = g.output;
    let l = oh * ow * od;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * h * w * d..(ci + 1) * h * w * d];
        for a in 0..kh {
            for b in 0..kw {
                for c in 0..kd {
                    let dst = &mut col[row * l..(row + 1) * l];
                    row += 1;
                    let mut o = 0;
                    for i in 0..oh {
                        let ii = (i * sh + a) as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            dst[o..o + ow * od].fill(F::zero());
                            o += ow * od;
                            continue;
                        }
                        for j in 0..ow {
                            let jj = (j * sw + b) as isize - pw as isize;
                            if jj < 0 || jj >= w as isize {
                                dst[o..o + od].fill(F::zero());
                                o += od;
                                continue;
                            }
                            let base = (ii as usize * w + jj as usize) * d;
                            let row = &mut dst[o..o + od];
                            if sd == 1 {
                                let (lo, hi) = unit_stride_range(c, pd, d, od);
                                row[..lo].fill(F::zero());
                                row[hi..].fill(F::zero());
                                if lo < hi {
                                    let s0 = base + lo + c - pd;
                                    row[lo..hi].copy_from_slice(&xc[s0..s0 + hi - lo]);
                                }
                            } else {
                                for (k, r) in row.iter_mut().enumerate() {
                                    let kk = (k * sd + c) as isize - pd as isize;
                                    *r = if kk < 0 || kk >= d as isize { F::zero() } else { xc[base + kk as usize] };
                                }
                            }
                            o += od;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[Cin, H, W, D]`.
fn col2im<F: Element>(col: &[F], g: &Conv3dGeometry, x: &mut [F]) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.pad;
    let [oh, ow, od] = g.output;
    let l = oh * ow * od;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * h * w * d..(ci + 1) * h * w * d];
        for a in 0..kh {
            for b in 0..kw {
                for c in 0..kd {
                    let src = &col[row * l..(row + 1) * l];
                    row += 1;
                    let mut o = 0;
                    for i in 0..oh {
                        let ii = (i * sh + a) as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            o += ow * od;
                            continue;
                        }
                        for j in 0..ow {
                            let jj = (j * sw + b) as isize - pw as isize;
                            if jj < 0 || jj >= w as isize {
                                o += od;
                                continue;
                            }
                            let base = (ii as usize * w + jj as usize) * d;
                            let row = &src[o..o + od];
                            if sd == 1 {
                                let (lo, hi) = unit_stride_range(c, pd, d, od);
                                if lo < hi {
                                    let s0 = base + lo + c - pd;
                                    for (t, &v) in xc[s0..s0 + hi - lo].iter_mut().zip(&row[lo..hi]) {
                                        *t += v;
                                    }
                                }
                            } else {
                                for (k, &v) in row.iter().enumerate() {
                                    let kk = (k * sd + c) as isize - pd as isize;
                                    if kk >= 0 && kk < d as isize {
                                        xc[base + kk as usize] += v;
                                    }
                                }
                            }
                            o += od;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W · im2col(x[b])` for every sample.
fn conv_forward<F: Element>(x: &[F], w: &[F], g: &Conv3dGeometry, batch: usize) -> Vec<F> {
    let (pl, lin, lout) = (g.patch_len(), g.in_voxels(), g.out_voxels());
    let mut y = vec![F::zero(); batch * g.cout * lout];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); pl * lout] };
    for b in 0..batch {
        let xb = &x[b * g.cin * lin..(b + 1) * g.cin * lin];
        let src: &[F] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(
            false,
            false,
            g.cout,
            lout,
            pl,
            F::one(),
            w,
            src,
            F::zero(),
            &mut y[b * g.cout * lout..(b + 1) * g.cout * lout],
        );
    }
    y
}

/// `x[b] = col2im(Wᵀ · y[b])`: the adjoint of [`conv_forward`] in its input.
fn conv_adjoint_input<F: Element>(y: &[F], w: &[F], g: &Conv3dGeometry, batch: usize) -> Vec<F> {
    let (pl, lin, lout) = (g.patch_len(), g.in_voxels(), g.out_voxels());
    let mut x = vec![F::zero(); batch * g.cin * lin];
    let mut col = vec![F::zero(); pl * lout];
    for b in 0..batch {
        let xb = &mut x[b * g.cin * lin..(b + 1) * g.cin * lin];
        let yb = &y[b * g.cout * lout..(b + 1) * g.cout * lout];
        if g.is_pointwise() {
            gemm(true, false, pl, lout, g.cout, F::one(), w, yb, F::zero(), xb);
        } else {
            gemm(true, false, pl, lout, g.cout, F::one(), w, yb, F::zero(), &mut col);
            col2im(&col, g, xb);
        }
    }
    x
}

/// `dW = Σ_b y[b] · im2col(x[b])ᵀ`.
fn conv_weight_grad<F: Element>(x: &[F], y: &[F], g: &Conv3dGeometry, batch: usize) -> Vec<F> {
    let (pl, lin, lout) = (g.patch_len(), g.in_voxels(), g.out_voxels());
    let mut gw = vec![F::zero(); g.cout * pl];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); pl * lout] };
    for b in 0..batch {
        let xb = &x[b * g.cin * lin..(b + 1) * g.cin * lin];
        let yb = &y[b * g.cout * lout..(b + 1) * g.cout * lout];
        let src: &[F] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(false, true, g.cout, pl, lout, F::one(), yb, src, F::one(), &mut gw);
    }
    gw
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn check_kernel(ks: &[usize], op: &str) -> Result<()> {
    if ks.len() != 5 {
        return Err(Error::Shape(format!("{op}: kernel must be 5-d, got {ks:?}")));
    }
    Ok(())
}

impl<F: Element> Tape<F> {
    /// Cross-correlation of `x: [B, Cin, H, W, D]` with `w: [Cout, Cin, kh, kw, kd]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        check_kernel(&ws, "conv3d")?;
        if xs.len() != 5 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv3d: input {xs:?} incompatible with kernel {ws:?}")));
        }
        let g = Conv3dGeometry::new(ws[1], ws[0], spatial(&xs), spatial(&ws), stride, pad)?;
        let batch = xs[0];
        let y = conv_forward(self.value(x).data(), self.value(w).data(), &g, batch);
        let out_shape = vec![batch, g.cout, g.output[0], g.output[1], g.output[2]];
        let out = Tensor::new(out_shape, y)?;
        Ok(self.push(out, &[x, w], move |c: &Ctx<'_, F>| {
            let (xv, wv, gy) = (c.inputs[0], c.inputs[1], c.grad.data());
            let gx = c.needs[0].then(|| Tensor::new(xs.clone(), conv_adjoint_input(gy, wv.data(), &g, batch)).unwrap());
            let gw = c.needs[1].then(|| Tensor::new(ws.clone(), conv_weight_grad(xv.data(), gy, &g, batch)).unwrap());
            vec![gx, gw]
        }))
    }

    /// Adjoint of [`Tape::conv3d`] in its input: `x: [B, Cout, ...]` and
    /// `w: [Cout, Cin, kh, kw, kd]` give `[B, Cin, ...]`. `output` selects the
    /// spatial extents (defaults to `(in−1)·stride − 2·pad + k`); the forward
    /// convolution of that extent must reproduce the input extent.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        output: Option<[usize; 3]>,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        check_kernel(&ws, "conv_transpose3d")?;
        if xs.len() != 5 || xs[1] != ws[0] {
            return Err(Error::Shape(format!("conv_transpose3d: input {xs:?} incompatible with kernel {ws:?}")));
        }
        let out_ext = match output {
            Some(o) => o,
            None => conv_transpose3d_output_extents(spatial(&xs), spatial(&ws), stride, pad)?,
        };
        let g = Conv3dGeometry::new(ws[1], ws[0], out_ext, spatial(&ws), stride, pad)?;
        if g.output != spatial(&xs) {
            return Err(Error::Shape(format!(
                "conv_transpose3d: output extents {out_ext:?} do not map back onto input {:?}",
                spatial(&xs)
            )));
        }
        let batch = xs[0];
        let y = conv_adjoint_input(self.value(x).data(), self.value(w).data(), &g, batch);
        let out_shape = vec![batch, g.cin, out_ext[0], out_ext[1], out_ext[2]];
        let out = Tensor::new(out_shape, y)?;
        Ok(self.push(out, &[x, w], move |c: &Ctx<'_, F>| {
            let (xv, wv, gy) = (c.inputs[0], c.inputs[1], c.grad.data());
            let gx = c.needs[0].then(|| Tensor::new(xs.clone(), conv_forward(gy, wv.data(), &g, batch)).unwrap());
            let gw = c.needs[1].then(|| Tensor::new(ws.clone(), conv_weight_grad(gy, xv.data(), &g, batch)).unwrap());
            vec![gx, gw]
        }))
    }
}
