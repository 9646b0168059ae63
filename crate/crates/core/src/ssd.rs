//! Structured state-space duality (SSD) kernels.
//!
//! Per head, with scalar decays `a_t`, input projections `B_t ∈ R^N`,
//! output projections `C_t ∈ R^N` and values `x_t ∈ R^P`:
//!
//! ```text
//!   S_0 = 0
//!   S_t = a_t · S_{t-1} + B_t ⊗ x_t          (N × P)
//!   y_t = C_tᵀ · S_t                          (P)
//! ```
//!
//! The same map is a masked matrix product `Y = (L ∘ C·Bᵀ) · X`, where `L` is
//! the lower-triangular decay mask `L[t][s] = a_{s+1} ⋯ a_t`. Three
//! evaluations are provided:
//!
//! * [`ssd_recurrent`]: the sequential scan above, `O(T·N·P)`; ground truth.
//! * [`ssd_quadratic`]: the masked matrix form, `O(T²·(N+P))`.
//! * [`ssd_chunked`]: masked matrix form inside chunks of length `Q`, with
//!   the state carried between chunks; `O(T·Q·(N+P) + T·N·P)`.
//!
//! [`Tape::ssd`] exposes the chunked form as a differentiable operation whose
//! backward pass runs the adjoint recurrence.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tape, Tensor, Var};

/// Hyperparameters of the Mamba2 mixer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsdConfig {
    /// N
    pub state_dim: usize,
    /// H
    pub num_heads: usize,
    /// Q
    pub chunk_len: usize,
    /// Width of the short causal depthwise convolution; 0 disables it.
    pub conv_width: usize,
    /// Inner width = expansion × model channels.
    pub expansion: usize,
    /// Multiply the SSD output by `silu(z)` before the output projection.
    pub gated: bool,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self { state_dim: 16, num_heads: 4, chunk_len: 32, conv_width: 4, expansion: 2, gated: true }
    }
}

impl SsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.num_heads == 0 || self.expansion == 0 {
            return Err(Error::Config("ssd: state_dim, num_heads and expansion must be ≥ 1".into()));
        }
        if self.chunk_len == 0 {
            return Err(Error::Config("ssd: chunk_len must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Per-head value width P for a given model width.
    pub fn head_dim(&self, model_channels: usize) -> Result<usize> {
        let inner = model_channels * self.expansion;
        if !inner.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("ssd: inner width {inner} not divisible into {} heads", self.num_heads)));
        }
        Ok(inner / self.num_heads)
    }
}

/// One SSD evaluation over `H` independent heads.
#[derive(Clone, Debug)]
pub struct SsdInputs<F> {
    /// `[H, T, P]`
    pub x: Tensor<F>,
    /// `[H, T]`, decays in (0, 1]
    pub a: Tensor<F>,
    /// `[H, T, N]`
    pub b: Tensor<F>,
    /// `[H, T, N]`
    pub c: Tensor<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dims {
    heads: usize,
    t: usize,
    n: usize,
    p: usize,
}

impl<F: Element> SsdInputs<F> {
    fn dims(&self) -> Result<Dims> {
        let (xs, as_, bs, cs) = (self.x.shape(), self.a.shape(), self.b.shape(), self.c.shape());
        if xs.len() != 3 || as_.len() != 2 || bs.len() != 3 || cs != bs {
            return Err(Error::Shape(format!("ssd inputs: x {xs:?}, a {as_:?}, b {bs:?}, c {cs:?}")));
        }
        let d = Dims { heads: xs[0], t: xs[1], n: bs[2], p: xs[2] };
        if as_ != [d.heads, d.t] || bs[..2] != [d.heads, d.t] {
            return Err(Error::Shape(format!("ssd inputs disagree on heads/length: x {xs:?}, a {as_:?}, b {bs:?}")));
        }
        if d.t == 0 || d.n == 0 || d.p == 0 {
            return Err(Error::Shape("ssd inputs need T, N, P ≥ 1".into()));
        }
        Ok(d)
    }

    fn validate(&self, allow_zero_decay: bool) -> Result<Dims> {
        let d = self.dims()?;
        for (name, t) in [("x", &self.x), ("a", &self.a), ("b", &self.b), ("c", &self.c)] {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("ssd input {name} contains non-finite values")));
            }
        }
        check_decays(self.a.data(), allow_zero_decay)?;
        Ok(d)
    }

    fn log_decays(&self) -> Vec<F> {
        self.a.data().iter().map(|v| v.ln()).collect()
    }
}

fn check_decays<F: Element>(a: &[F], allow_zero: bool) -> Result<()> {
    for (i, &v) in a.iter().enumerate() {
        let ok = if allow_zero { v >= F::zero() } else { v > F::zero() };
        if !ok || v > F::one() {
            return Err(Error::Validation(format!(
                "decay a[{i}] = {v} outside {}",
                if allow_zero { "[0, 1]" } else { "(0, 1]" }
            )));
        }
    }
    Ok(())
}

/// The lower-triangular decay mask of one head.
#[derive(Clone, Debug)]
pub struct DecayMask<F> {
    /// `[T, T]`, row `t`, column `s`.
    pub l: Tensor<F>,
}

/// `L[t][s] = ∏_{r=s+1..t} a_r` for `t ≥ s`, zero above the diagonal,
/// computed from cumulative log-decays with an exact unit diagonal.
pub fn decay_mask<F: Element>(a: &[F]) -> Result<DecayMask<F>> {
    check_decays(a, false)?;
    let log_a: Vec<F> = a.iter().map(|v| v.ln()).collect();
    let t = a.len();
    let mut l = vec![F::zero(); t * t];
    fill_mask(&cumsum(&log_a), &mut l);
    Ok(DecayMask { l: Tensor::new(vec![t, t], l)? })
}

fn cumsum<F: Element>(v: &[F]) -> Vec<F> {
    let mut acc = F::zero();
    v.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}

fn fill_mask<F: Element>(cum: &[F], l: &mut [F]) {
    let t = cum.len();
    for i in 0..t {
        for j in 0..i {
            l[i * t + j] = (cum[i] - cum[j]).exp();
        }
        l[i * t + i] = F::one();
    }
}

// ----- per-head kernels ---------------------------------------------------------------

/// Sequential scan. `a` may contain zeros.
fn recurrent_head<F: Element>(a: &[F], b: &[F], c: &[F], x: &[F], d: Dims, y: &mut [F]) {
    let (n, p) = (d.n, d.p);
    let mut s = vec![F::zero(); n * p];
    for t in 0..d.t {
        let (bt, ct, xt) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n], &x[t * p..(t + 1) * p]);
        for i in 0..n {
            let row = &mut s[i * p..(i + 1) * p];
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[t] * *v + bt[i] * xt[j];
            }
        }
        let yt = &mut y[t * p..(t + 1) * p];
        yt.fill(F::zero());
        for i in 0..n {
            let row = &s[i * p..(i + 1) * p];
            for (o, &v) in yt.iter_mut().zip(row) {
                *o += ct[i] * v;
            }
        }
    }
}

/// Masked-matrix evaluation of rows `[start, start+q)` with a zero initial
/// state: `y += (L ∘ C·Bᵀ) · X`, where `cum` holds the chunk-local inclusive
/// cumulative log-decays. `scratch` needs `q·q` entries.
#[allow(clippy::too_many_arguments)]
fn intra_chunk<F: Element>(cum: &[F], b: &[F], c: &[F], x: &[F], n: usize, p: usize, scratch: &mut [F], y: &mut [F]) {
    let q = cum.len();
    let g = &mut scratch[..q * q];
    gemm(false, true, q, q, n, F::one(), c, b, F::zero(), g);
    for i in 0..q {
        for j in 0..i {
            g[i * q + j] *= (cum[i] - cum[j]).exp();
        }
        for j in i + 1..q {
            g[i * q + j] = F::zero();
        }
    }
    gemm(false, false, q, p, q, F::one(), g, x, F::one(), y);
}

fn quadratic_head<F: Element>(log_a: &[F], b: &[F], c: &[F], x: &[F], d: Dims, y: &mut [F]) {
    let mut scratch = vec![F::zero(); d.t * d.t];
    y.fill(F::zero());
    intra_chunk(&cumsum(log_a), b, c, x, d.n, d.p, &mut scratch, y);
}

fn chunked_head<F: Element>(log_a: &[F], b: &[F], c: &[F], x: &[F], d: Dims, chunk: usize, y: &mut [F]) {
    let (n, p) = (d.n, d.p);
    let q_max = chunk.min(d.t);
    let mut state = vec![F::zero(); n * p];
    let mut scratch = vec![F::zero(); q_max * q_max];
    let mut cs = vec![F::zero(); q_max * p];
    let mut bw = vec![F::zero(); q_max * n];
    y.fill(F::zero());
    let mut start = 0;
    let mut first = true;
    while start < d.t {
        let q = chunk.min(d.t - start);
        let cum = cumsum(&log_a[start..start + q]);
        let (bc, cc) = (&b[start * n..(start + q) * n], &c[start * n..(start + q) * n]);
        let xc = &x[start * p..(start + q) * p];
        let yc = &mut y[start * p..(start + q) * p];
        intra_chunk(&cum, bc, cc, xc, n, p, &mut scratch, yc);
        if !first {
            // carried state, decayed to each row of the chunk
            gemm(false, false, q, p, n, F::one(), cc, &state, F::zero(), &mut cs[..q * p]);
            for t in 0..q {
                let w = cum[t].exp();
                for j in 0..p {
                    yc[t * p + j] += w * cs[t * p + j];
                }
            }
        }
        // state at the chunk end
        let total = cum[q - 1];
        let decay_all = total.exp();
        for v in state.iter_mut() {
            *v *= decay_all;
        }
        for s in 0..q {
            let w = (total - cum[s]).exp();
            for i in 0..n {
                bw[s * n + i] = w * bc[s * n + i];
            }
        }
        gemm(true, false, n, p, q, F::one(), &bw[..q * n], xc, F::one(), &mut state);
        first = false;
        start += q;
    }
}

fn run_heads<F: Element>(
    inp: &SsdInputs<F>,
    d: Dims,
    mut kernel: impl FnMut(usize, &[F], &[F], &[F], &mut [F]),
) -> Result<Tensor<F>> {
    let mut y = vec![F::zero(); d.heads * d.t * d.p];
    for h in 0..d.heads {
        let b = &inp.b.data()[h * d.t * d.n..(h + 1) * d.t * d.n];
        let c = &inp.c.data()[h * d.t * d.n..(h + 1) * d.t * d.n];
        let x = &inp.x.data()[h * d.t * d.p..(h + 1) * d.t * d.p];
        kernel(h, b, c, x, &mut y[h * d.t * d.p..(h + 1) * d.t * d.p]);
    }
    Tensor::new(vec![d.heads, d.t, d.p], y)
}

/// Reference recurrence. Accepts decays in `[0, 1]`.
pub fn ssd_recurrent<F: Element>(inp: &SsdInputs<F>) -> Result<Tensor<F>> {
    let d = inp.validate(true)?;
    run_heads(inp, d, |h, b, c, x, y| recurrent_head(&inp.a.data()[h * d.t..(h + 1) * d.t], b, c, x, d, y))
}

/// `Y = (L ∘ C·Bᵀ) · X` over the whole sequence.
pub fn ssd_quadratic<F: Element>(inp: &SsdInputs<F>) -> Result<Tensor<F>> {
    let d = inp.validate(false)?;
    let la = inp.log_decays();
    run_heads(inp, d, |h, b, c, x, y| quadratic_head(&la[h * d.t..(h + 1) * d.t], b, c, x, d, y))
}

/// Chunked evaluation with chunk length `chunk` (any value ≥ 1).
pub fn ssd_chunked<F: Element>(inp: &SsdInputs<F>, chunk: usize) -> Result<Tensor<F>> {
    if chunk == 0 {
        return Err(Error::Config("ssd_chunked: chunk length must be ≥ 1".into()));
    }
    let d = inp.validate(false)?;
    let la = inp.log_decays();
    run_heads(inp, d, |h, b, c, x, y| chunked_head(&la[h * d.t..(h + 1) * d.t], b, c, x, d, chunk, y))
}

/// Adjoint of the recurrence for one head. Returns gradients with respect to
/// (log-decays, B, C, x).
fn backward_head<F: Element>(
    log_a: &[F],
    b: &[F],
    c: &[F],
    x: &[F],
    gy: &[F],
    d: Dims,
) -> (Vec<F>, Vec<F>, Vec<F>, Vec<F>) {
    let (t_len, n, p) = (d.t, d.n, d.p);
    let np = n * p;
    let a: Vec<F> = log_a.iter().map(|v| v.exp()).collect();
    // states[t] = S_t for t = 0..=T, with states[0] the zero initial state
    let mut states = vec![F::zero(); (t_len + 1) * np];
    for t in 0..t_len {
        let (prev, cur) = states.split_at_mut((t + 1) * np);
        let prev = &prev[t * np..];
        let cur = &mut cur[..np];
        for i in 0..n {
            for j in 0..p {
                cur[i * p + j] = a[t] * prev[i * p + j] + b[t * n + i] * x[t * p + j];
            }
        }
    }
    let mut g_la = vec![F::zero(); t_len];
    let mut g_b = vec![F::zero(); t_len * n];
    let mut g_c = vec![F::zero(); t_len * n];
    let mut g_x = vec![F::zero(); t_len * p];
    let mut ds = vec![F::zero(); np];
    for t in (0..t_len).rev() {
        let gyt = &gy[t * p..(t + 1) * p];
        let st = &states[(t + 1) * np..(t + 2) * np];
        let sp = &states[t * np..(t + 1) * np];
        for i in 0..n {
            let ci = c[t * n + i];
            let mut gc = F::zero();
            for j in 0..p {
                ds[i * p + j] += ci * gyt[j];
                gc += st[i * p + j] * gyt[j];
            }
            g_c[t * n + i] = gc;
        }
        let mut dot = F::zero();
        for i in 0..n {
            let bi = b[t * n + i];
            let mut gb = F::zero();
            for j in 0..p {
                let v = ds[i * p + j];
                g_x[t * p + j] += v * bi;
                gb += v * x[t * p + j];
                dot += v * sp[i * p + j];
            }
            g_b[t * n + i] = gb;
        }
        g_la[t] = a[t] * dot;
        for v in ds.iter_mut() {
            *v *= a[t];
        }
    }
    (g_la, g_b, g_c, g_x)
}

/// Gather `[B, T, H, D]` into head-major `[B, H, T, D]` (and back).
fn to_head_major<F: Element>(v: &[F], batch: usize, t: usize, h: usize, d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); v.len()];
    for bi in 0..batch {
        for ti in 0..t {
            for hi in 0..h {
                let src = ((bi * t + ti) * h + hi) * d;
                let dst = ((bi * h + hi) * t + ti) * d;
                out[dst..dst + d].copy_from_slice(&v[src..src + d]);
            }
        }
    }
    out
}

fn from_head_major<F: Element>(v: &[F], batch: usize, t: usize, h: usize, d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); v.len()];
    for bi in 0..batch {
        for ti in 0..t {
            for hi in 0..h {
                let dst = ((bi * t + ti) * h + hi) * d;
                let src = ((bi * h + hi) * t + ti) * d;
                out[dst..dst + d].copy_from_slice(&v[src..src + d]);
            }
        }
    }
    out
}

impl<F: Element> Tape<F> {
    /// Differentiable chunked SSD over a batch.
    ///
    /// Shapes: `x: [B, T, H, P]`, `log_a: [B, T, H]` (log-decays, ≤ 0),
    /// `b, c: [B, T, H, N]`; output `[B, T, H, P]`.
    pub fn ssd(&mut self, x: Var, log_a: Var, b: Var, c: Var, chunk: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (las, bs, cs) = (self.shape(log_a).to_vec(), self.shape(b).to_vec(), self.shape(c).to_vec());
        if xs.len() != 4 || bs.len() != 4 || cs != bs || las != xs[..3] || bs[..3] != xs[..3] {
            return Err(Error::Shape(format!("ssd: x {xs:?}, log_a {las:?}, b {bs:?}, c {cs:?}")));
        }
        if chunk == 0 {
            return Err(Error::Config("ssd: chunk length must be ≥ 1".into()));
        }
        let (batch, t, h, p, n) = (xs[0], xs[1], xs[2], xs[3], bs[3]);
        let d = Dims { heads: h, t, n, p };
        let la_v = self.value(log_a);
        if la_v.data().iter().any(|v| !v.is_finite() || *v > F::zero()) {
            return Err(Error::NonFinite("ssd: log-decays must be finite and ≤ 0".into()));
        }
        let xh = to_head_major(self.value(x).data(), batch, t, h, p);
        let bh = to_head_major(self.value(b).data(), batch, t, h, n);
        let ch = to_head_major(self.value(c).data(), batch, t, h, n);
        let lah = to_head_major(la_v.data(), batch, t, h, 1);
        let mut yh = vec![F::zero(); xh.len()];
        for bh_i in 0..batch * h {
            chunked_head(
                &lah[bh_i * t..(bh_i + 1) * t],
                &bh[bh_i * t * n..(bh_i + 1) * t * n],
                &ch[bh_i * t * n..(bh_i + 1) * t * n],
                &xh[bh_i * t * p..(bh_i + 1) * t * p],
                d,
                chunk,
                &mut yh[bh_i * t * p..(bh_i + 1) * t * p],
            );
        }
        let out = Tensor::new(xs.clone(), from_head_major(&yh, batch, t, h, p))?;
        Ok(self.push(out, &[x, log_a, b, c], move |ctx| {
            let gyh = to_head_major(ctx.grad.data(), batch, t, h, p);
            let xh = to_head_major(ctx.inputs[0].data(), batch, t, h, p);
            let lah = to_head_major(ctx.inputs[1].data(), batch, t, h, 1);
            let bh = to_head_major(ctx.inputs[2].data(), batch, t, h, n);
            let ch = to_head_major(ctx.inputs[3].data(), batch, t, h, n);
            let mut g_la = vec![F::zero(); lah.len()];
            let mut g_b = vec![F::zero(); bh.len()];
            let mut g_c = vec![F::zero(); ch.len()];
            let mut g_x = vec![F::zero(); xh.len()];
            for i in 0..batch * h {
                let (la, gb, gc, gx) = backward_head(
                    &lah[i * t..(i + 1) * t],
                    &bh[i * t * n..(i + 1) * t * n],
                    &ch[i * t * n..(i + 1) * t * n],
                    &xh[i * t * p..(i + 1) * t * p],
                    &gyh[i * t * p..(i + 1) * t * p],
                    d,
                );
                g_la[i * t..(i + 1) * t].copy_from_slice(&la);
                g_b[i * t * n..(i + 1) * t * n].copy_from_slice(&gb);
                g_c[i * t * n..(i + 1) * t * n].copy_from_slice(&gc);
                g_x[i * t * p..(i + 1) * t * p].copy_from_slice(&gx);
            }
            let wrap = |v: Vec<F>, dd: usize, shape: &[usize]| {
                Tensor::new(shape.to_vec(), from_head_major(&v, batch, t, h, dd)).unwrap()
            };
            vec![
                ctx.needs[0].then(|| wrap(g_x, p, ctx.inputs[0].shape())),
                ctx.needs[1].then(|| wrap(g_la, 1, ctx.inputs[1].shape())),
                ctx.needs[2].then(|| wrap(g_b, n, ctx.inputs[2].shape())),
                ctx.needs[3].then(|| wrap(g_c, n, ctx.inputs[3].shape())),
            ]
        }))
    }
}

// ----- benchmark -----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsdForm {
    Recurrent,
    Quadratic,
    Chunked,
}

impl std::str::FromStr for SsdForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(SsdForm::Recurrent),
            "quadratic" => Ok(SsdForm::Quadratic),
            "chunked" => Ok(SsdForm::Chunked),
            other => Err(Error::Config(format!("unknown ssd form {other:?}"))),
        }
    }
}

/// One row of the timing report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRecord {
    pub form: SsdForm,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub forms: Vec<SsdForm>,
    pub state_dim: usize,
    pub head_dim: usize,
    pub chunk_len: usize,
    /// Repetitions per measurement; the minimum is reported.
    pub repeats: usize,
    pub seed: u64,
}

/// Random single-head instance with decays in `[0.5, 1)`.
pub fn random_inputs<R: rand::Rng + ?Sized>(heads: usize, t: usize, n: usize, p: usize, rng: &mut R) -> SsdInputs<f64> {
    SsdInputs {
        x: Tensor::randn(vec![heads, t, p], 1.0, rng),
        a: Tensor::rand_uniform(vec![heads, t], 0.5, 1.0, rng),
        b: Tensor::randn(vec![heads, t, n], 1.0 / (n as f64).sqrt(), rng),
        c: Tensor::randn(vec![heads, t, n], 1.0 / (n as f64).sqrt(), rng),
    }
}

/// Time each form on each length. All requested forms are first checked to
/// agree on the instance.
pub fn benchmark_ssd(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for &t in &spec.lengths {
        let inp = random_inputs(1, t, spec.state_dim, spec.head_dim, &mut rng);
        let reference = ssd_recurrent(&inp)?;
        let run = |form: SsdForm| -> Result<Tensor<f64>> {
            match form {
                SsdForm::Recurrent => ssd_recurrent(&inp),
                SsdForm::Quadratic => ssd_quadratic(&inp),
                SsdForm::Chunked => ssd_chunked(&inp, spec.chunk_len),
            }
        };
        for &form in &spec.forms {
            let y = run(form)?;
            let diff = y.max_abs_diff(&reference);
            let scale = reference.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            if diff > 1e-8 * scale {
                return Err(Error::Validation(format!(
                    "benchmark guard: {form:?} deviates from the recurrence by {diff:e} at T={t}"
                )));
            }
            let mut best = f64::INFINITY;
            for _ in 0..spec.repeats.max(1) {
                let start = Instant::now();
                let y = run(form)?;
                best = best.min(start.elapsed().as_secs_f64());
                std::hint::black_box(y);
            }
            records.push(BenchRecord {
                form,
                t,
                n: spec.state_dim,
                p: spec.head_dim,
                q: spec.chunk_len,
                seconds: best,
            });
        }
    }
    Ok(records)
}
