use super::tape::Ctx;
use super::{
    broadcast_shapes, broadcast_strides, gemm, numel, sum_to_shape, validate_perm, Element, Tape, Tensor, Var,
};
use crate::error::{Error, Result};

/// Visit the broadcast pair of offsets for every element of `shape`.
fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let nd = shape.len();
    let (last, la, lb) = (shape[nd - 1], sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let (mut ba, mut bb) = (0usize, 0usize);
    loop {
        let (mut oa, mut ob) = (ba, bb);
        for _ in 0..last {
            f(oa, ob);
            oa += la;
            ob += lb;
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ba += sa[d];
            bb += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ba -= sa[d] * shape[d];
            bb -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn zip_broadcast<F: Element>(a: &Tensor<F>, b: &Tensor<F>, op: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())
        .ok_or_else(|| Error::Shape(format!("{op}: cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = Vec::with_capacity(numel(&out_shape));
    let (ad, bd) = (a.data(), b.data());
    for_each_offset2(&out_shape, &sa, &sb, |i, j| data.push(f(ad[i], bd[j])));
    Tensor::new(out_shape, data)
}

/// Gradient of a broadcast binary op with respect to one operand:
/// `sum_to_shape(g * partial)` where `partial(x_a, x_b)` is evaluated on the
/// broadcast grid.
fn binary_grad<F: Element>(
    g: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    target: &[usize],
    partial: impl Fn(F, F) -> F,
) -> Tensor<F> {
    let out_shape = g.shape();
    let mut full = Vec::with_capacity(g.len());
    if a.shape() == b.shape() {
        for ((&gv, &x), &y) in g.data().iter().zip(a.data()).zip(b.data()) {
            full.push(gv * partial(x, y));
        }
    } else {
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let mut k = 0;
        for_each_offset2(out_shape, &sa, &sb, |i, j| {
            full.push(gd[k] * partial(ad[i], bd[j]));
            k += 1;
        });
    }
    let reduced = sum_to_shape(&full, out_shape, target);
    Tensor::new(target.to_vec(), reduced).expect("reduced gradient shape")
}

/// `(outer, n, inner)` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<F: Element> Tape<F> {
    // ----- broadcasting binary ops -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_broadcast(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |c: &Ctx<'_, F>| {
            let ga = c.needs[0].then(|| {
                let s = c.inputs[0].shape();
                Tensor::new(s.to_vec(), sum_to_shape(c.grad.data(), c.grad.shape(), s)).unwrap()
            });
            let gb = c.needs[1].then(|| {
                let s = c.inputs[1].shape();
                Tensor::new(s.to_vec(), sum_to_shape(c.grad.data(), c.grad.shape(), s)).unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_broadcast(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, &[a, b], |c: &Ctx<'_, F>| {
            let ga = c.needs[0].then(|| {
                let s = c.inputs[0].shape();
                Tensor::new(s.to_vec(), sum_to_shape(c.grad.data(), c.grad.shape(), s)).unwrap()
            });
            let gb = c.needs[1].then(|| {
                let s = c.inputs[1].shape();
                let neg: Vec<F> = c.grad.data().iter().map(|&v| -v).collect();
                Tensor::new(s.to_vec(), sum_to_shape(&neg, c.grad.shape(), s)).unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_broadcast(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, &[a, b], |c: &Ctx<'_, F>| {
            let (x, y) = (c.inputs[0], c.inputs[1]);
            vec![
                c.needs[0].then(|| binary_grad(c.grad, x, y, x.shape(), |_, yv| yv)),
                c.needs[1].then(|| binary_grad(c.grad, x, y, y.shape(), |xv, _| xv)),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_broadcast(self.value(a), self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(out, &[a, b], |c: &Ctx<'_, F>| {
            let (x, y) = (c.inputs[0], c.inputs[1]);
            vec![
                c.needs[0].then(|| binary_grad(c.grad, x, y, x.shape(), |_, yv| F::one() / yv)),
                c.needs[1].then(|| binary_grad(c.grad, x, y, y.shape(), |xv, yv| -xv / (yv * yv))),
            ]
        }))
    }

    // ----- scalar and unary ops -----------------------------------------------------

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], |c: &Ctx<'_, F>| vec![Some(c.grad.clone())])
    }

    pub fn mul_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, &[a], move |c: &Ctx<'_, F>| vec![Some(c.grad.map(|g| g * s))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -F::one())
    }

    /// Elementwise map with derivative `df(x, y)` expressed through the input
    /// `x` and output `y`.
    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, df: impl Fn(F, F) -> F + 'static) -> Var {
        let out = self.value(a).map(f);
        self.push(out, &[a], move |c: &Ctx<'_, F>| {
            let data = c
                .grad
                .data()
                .iter()
                .zip(c.inputs[0].data())
                .zip(c.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(c.grad.shape().to_vec(), data).unwrap())]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, F::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, F::ln, |x, _| F::one() / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, F::sqrt, |_, y| F::from_f64_lossy(0.5) / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, F::abs, |x, _| {
            if x > F::zero() {
                F::one()
            } else if x < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (F::one() + x * (F::one() - s))
            },
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.unary(
            a,
            move |x| if x > F::zero() { x } else { x * slope },
            move |x, _| if x > F::zero() { F::one() } else { slope },
        )
    }

    // ----- reductions ----------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |c: &Ctx<'_, F>| vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.mul_scalar(s, F::one() / n)
    }

    /// Sum over one axis; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "sum_axis")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, &[a], move |c: &Ctx<'_, F>| {
            let g = c.grad.data();
            let mut gx = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx).unwrap())]
        }))
    }

    // ----- shape ops -----------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(out, &[a], |c: &Ctx<'_, F>| vec![Some(c.grad.reshape(c.inputs[0].shape().to_vec()).unwrap())]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.push(out, &[a], move |c: &Ctx<'_, F>| vec![Some(c.grad.permute(&inv).unwrap())]))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.value(a).ndim();
        let mut perm: Vec<usize> = (0..nd).collect();
        validate_perm(&perm, nd)?;
        if d0 >= nd || d1 >= nd {
            return Err(Error::Shape(format!("transpose axes ({d0},{d1}) out of range for {nd}-d")));
        }
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first =
            self.value(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).shape().to_vec();
        check_axis(&first, axis, "concat")?;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, parts, move |c: &Ctx<'_, F>| {
            let g = c.grad.data();
            let mut grads: Vec<Vec<F>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&extents) {
                    gi.extend_from_slice(&g[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(&c.inputs)
                .zip(&c.needs)
                .map(|((gi, x), &need)| need.then(|| Tensor::new(x.shape().to_vec(), gi).unwrap()))
                .collect()
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "narrow")?;
        if start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow: range {start}..{} exceeds extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, &[a], move |c: &Ctx<'_, F>| {
            let g = c.grad.data();
            let mut gx = vec![F::zero(); outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), gx).unwrap())]
        }))
    }

    /// Select rows of a `[K, D]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows expects a 2-d table, got {shape:?}")));
        }
        let (k, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(Error::Shape(format!("gather_rows: row {bad} out of range for {k} rows")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let rows = rows.to_vec();
        Ok(self.push(out, &[table], move |c: &Ctx<'_, F>| {
            let g = c.grad.data();
            let mut gt = vec![F::zero(); k * d];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    gt[r * d + j] += g[i * d + j];
                }
            }
            vec![Some(Tensor::new(vec![k, d], gt).unwrap())]
        }))
    }

    // ----- matmul --------------------------------------------------------------------

    /// Batched matrix product `[.., M, K] × [.., K, N] → [.., M, N]` with
    /// broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![F::zero(); plan.pairs.len() * m * n];
        for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
            gemm(
                false,
                false,
                m,
                n,
                k,
                F::one(),
                &av[ia * m * k..(ia + 1) * m * k],
                &bv[ib * k * n..(ib + 1) * k * n],
                F::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(out, &[a, b], move |c: &Ctx<'_, F>| {
            let g = c.grad.data();
            let (av, bv) = (c.inputs[0].data(), c.inputs[1].data());
            let ga = c.needs[0].then(|| {
                let mut ga = vec![F::zero(); av.len()];
                for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm(
                        false,
                        true,
                        m,
                        k,
                        n,
                        F::one(),
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[ib * k * n..(ib + 1) * k * n],
                        F::one(),
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                    );
                }
                Tensor::new(c.inputs[0].shape().to_vec(), ga).unwrap()
            });
            let gb = c.needs[1].then(|| {
                let mut gb = vec![F::zero(); bv.len()];
                for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm(
                        true,
                        false,
                        k,
                        n,
                        m,
                        F::one(),
                        &av[ia * m * k..(ia + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        F::one(),
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                    );
                }
                Tensor::new(c.inputs[1].shape().to_vec(), gb).unwrap()
            });
            vec![ga, gb]
        }))
    }

    // ----- softmax family ------------------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "softmax")?;
        let dims = split_axis(&shape, axis);
        let out = Tensor::new(shape, softmax_along(self.value(a).data(), dims, false))?;
        Ok(self.push(out, &[a], move |c: &Ctx<'_, F>| {
            let (outer, n, inner) = dims;
            let (g, y) = (c.grad.data(), c.output.data());
            let mut gx = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = F::zero();
                    for k in 0..n {
                        dot += g[base + k * inner] * y[base + k * inner];
                    }
                    for k in 0..n {
                        let idx = base + k * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(c.grad.shape().to_vec(), gx).unwrap())]
        }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "log_softmax")?;
        let dims = split_axis(&shape, axis);
        let out = Tensor::new(shape, softmax_along(self.value(a).data(), dims, true))?;
        Ok(self.push(out, &[a], move |c: &Ctx<'_, F>| {
            let (outer, n, inner) = dims;
            let (g, y) = (c.grad.data(), c.output.data());
            let mut gx = vec![F::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut gs = F::zero();
                    for k in 0..n {
                        gs += g[base + k * inner];
                    }
                    for k in 0..n {
                        let idx = base + k * inner;
                        gx[idx] = g[idx] - y[idx].exp() * gs;
                    }
                }
            }
            vec![Some(Tensor::new(c.grad.shape().to_vec(), gx).unwrap())]
        }))
    }

    // ----- normalization -------------------------------------------------------------

    /// Zero-mean, unit-population-variance normalization over the trailing
    /// `n_axes` axes. No affine parameters.
    pub fn normalize(&mut self, a: Var, n_axes: usize, eps: F) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if n_axes == 0 || n_axes > shape.len() {
            return Err(Error::Shape(format!("normalize over {n_axes} axes of {shape:?}")));
        }
        if eps <= F::zero() {
            return Err(Error::Config("normalization eps must be positive".into()));
        }
        let group: usize = shape[shape.len() - n_axes..].iter().product();
        let x = self.value(a).data();
        let groups = x.len().checked_div(group).unwrap_or(0);
        let gf = F::from_usize(group.max(1)).unwrap();
        let mut out = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); groups];
        for gi in 0..groups {
            let xs = &x[gi * group..(gi + 1) * group];
            let mean = xs.iter().copied().sum::<F>() / gf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / gf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, &v) in out[gi * group..(gi + 1) * group].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, &[a], move |c: &Ctx<'_, F>| {
            let (g, y) = (c.grad.data(), c.output.data());
            let mut gx = vec![F::zero(); g.len()];
            for (gi, &is) in inv_std.iter().enumerate() {
                let r = gi * group..(gi + 1) * group;
                let (gs, ys) = (&g[r.clone()], &y[r.clone()]);
                let mg = gs.iter().copied().sum::<F>() / gf;
                let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<F>() / gf;
                for ((o, &gv), &yv) in gx[r].iter_mut().zip(gs).zip(ys) {
                    *o = is * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::new(c.grad.shape().to_vec(), gx).unwrap())]
        }))
    }
}

pub(crate) fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Element>(x: F) -> F {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable (log-)softmax over the middle extent of
/// `(outer, n, inner)`.
pub(crate) fn softmax_along<F: Element>(x: &[F], (outer, n, inner): (usize, usize, usize), log: bool) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = F::neg_infinity();
            for k in 0..n {
                mx = mx.max(x[base + k * inner]);
            }
            let mut s = F::zero();
            for k in 0..n {
                s += (x[base + k * inner] - mx).exp();
            }
            if log {
                let ls = s.ln();
                for k in 0..n {
                    out[base + k * inner] = x[base + k * inner] - mx - ls;
                }
            } else {
                for k in 0..n {
                    out[base + k * inner] = (x[base + k * inner] - mx).exp() / s;
                }
            }
        }
    }
    out
}

/// Batch pairing for a broadcast matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (matrix index into a, matrix index into b) per output matrix.
    pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let mismatch = || Error::Shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(ba, bb).ok_or_else(mismatch)?;
        let sta = broadcast_strides(ba, &batch);
        let stb = broadcast_strides(bb, &batch);
        let mut pairs = Vec::with_capacity(numel(&batch));
        for_each_offset2(&batch, &sta, &stb, |i, j| pairs.push((i, j)));
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Self { m, k, n, out_shape, pairs })
    }
}
