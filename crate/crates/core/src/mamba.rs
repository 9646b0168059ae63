//! Mamba2 mixer operating on `(B, T, C)` sequences.
//!
//! in_proj → (z, x, B, C, Δ) → short causal depthwise conv on (x, B, C) →
//! SiLU → decays `a = exp(−softplus(Δ + dt_bias)·A_h)` → chunked SSD →
//! optional `silu(z)` gate → out_proj.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamId};
use crate::ssd::SsdConfig;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Mamba2Block {
    pub cfg: SsdConfig,
    pub d_model: usize,
    pub d_inner: usize,
    pub head_dim: usize,
    pub in_proj: Linear,
    pub conv_weight: Option<ParamId>,
    pub conv_bias: Option<ParamId>,
    pub dt_bias: ParamId,
    /// log A_h, A_h > 0
    pub a_log: ParamId,
    pub out_proj: Linear,
}

impl Mamba2Block {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, d_model: usize, cfg: &SsdConfig) -> Result<Self> {
        cfg.validate()?;
        let head_dim = cfg.head_dim(d_model)?;
        let d_inner = head_dim * cfg.num_heads;
        let (h, n) = (cfg.num_heads, cfg.state_dim);
        let proj_out = 2 * d_inner + 2 * h * n + h;
        let in_proj = Linear::new(init, &format!("{name}.in_proj"), d_model, proj_out, false, None);
        let conv_dim = d_inner + 2 * h * n;
        let (conv_weight, conv_bias) = if cfg.conv_width > 0 {
            let bound = 1.0 / (cfg.conv_width as f64).sqrt();
            (
                Some(init.uniform(&format!("{name}.conv.weight"), vec![conv_dim, cfg.conv_width], bound)),
                Some(init.zeros(&format!("{name}.conv.bias"), vec![conv_dim])),
            )
        } else {
            (None, None)
        };
        // softplus(dt_bias) log-uniform in [1e-3, 1e-1]; A_h log-uniform in [1, 16]
        let mut dt = Vec::with_capacity(h);
        let mut a_log = Vec::with_capacity(h);
        for _ in 0..h {
            let step: f64 = (init.rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            dt.push(step + (-(-step).exp_m1()).ln()); // inverse softplus
            a_log.push(init.rng.random_range(0.0..16f64.ln()));
        }
        let dt_bias = init.constant(&format!("{name}.dt_bias"), Tensor::from_f64(vec![h], &dt)?);
        let a_log = init.constant(&format!("{name}.a_log"), Tensor::from_f64(vec![h], &a_log)?);
        let out_proj = Linear::new(init, &format!("{name}.out_proj"), d_inner, d_model, false, None);
        Ok(Self {
            cfg: cfg.clone(),
            d_model,
            d_inner,
            head_dim,
            in_proj,
            conv_weight,
            conv_bias,
            dt_bias,
            a_log,
            out_proj,
        })
    }

    /// `features: [B, T, d_model] → [B, T, d_model]`.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::Shape(format!("mamba2 block expects [B, T, {}], got {shape:?}", self.d_model)));
        }
        let (batch, t) = (shape[0], shape[1]);
        let (h, n, pd, di) = (self.cfg.num_heads, self.cfg.state_dim, self.head_dim, self.d_inner);
        let proj = self.in_proj.forward(tape, p, features)?;
        let z = tape.narrow(proj, 2, 0, di)?;
        let xbc = tape.narrow(proj, 2, di, di + 2 * h * n)?;
        let dt = tape.narrow(proj, 2, 2 * di + 2 * h * n, h)?;

        let xbc = match (self.conv_weight, self.conv_bias) {
            (Some(w), Some(b)) => {
                let y = tape.causal_depthwise_conv1d(xbc, p.var(w))?;
                tape.add(y, p.var(b))?
            }
            _ => xbc,
        };
        let xbc = tape.silu(xbc);
        let x = tape.narrow(xbc, 2, 0, di)?;
        let bm = tape.narrow(xbc, 2, di, h * n)?;
        let cm = tape.narrow(xbc, 2, di + h * n, h * n)?;
        let x = tape.reshape(x, &[batch, t, h, pd])?;
        let bm = tape.reshape(bm, &[batch, t, h, n])?;
        let cm = tape.reshape(cm, &[batch, t, h, n])?;

        let dt = tape.add(dt, p.var(self.dt_bias))?;
        let dt = tape.softplus(dt);
        let a = tape.exp(p.var(self.a_log));
        let log_a = tape.mul(dt, a)?;
        let log_a = tape.neg(log_a);

        let y = tape.ssd(x, log_a, bm, cm, self.cfg.chunk_len)?;
        let y = tape.reshape(y, &[batch, t, di])?;
        let y = if self.cfg.gated {
            let g = tape.silu(z);
            tape.mul(y, g)?
        } else {
            y
        };
        self.out_proj.forward(tape, p, y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.in_proj.weight];
        v.extend(self.conv_weight);
        v.extend(self.conv_bias);
        v.extend([self.dt_bias, self.a_log, self.out_proj.weight]);
        v
    }
}

impl<F: Element> Tape<F> {
    /// Causal depthwise convolution along time: `x: [B, T, C]`, `w: [C, K]`,
    /// `y[b,t,c] = Σ_j w[c,j] · x[b, t−K+1+j, c]` with zeros before `t = 0`.
    pub fn causal_depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || ws[1] == 0 {
            return Err(Error::Shape(format!("causal conv: x {xs:?}, w {ws:?}")));
        }
        let (batch, t, c, k) = (xs[0], xs[1], xs[2], ws[1]);
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut y = vec![F::zero(); xv.len()];
        for b in 0..batch {
            for ti in 0..t {
                for j in 0..k {
                    let Some(src_t) = (ti + j + 1).checked_sub(k) else { continue };
                    let src = &xv[(b * t + src_t) * c..(b * t + src_t + 1) * c];
                    let dst = &mut y[(b * t + ti) * c..(b * t + ti + 1) * c];
                    for ch in 0..c {
                        dst[ch] += wv[ch * k + j] * src[ch];
                    }
                }
            }
        }
        let out = Tensor::new(xs.clone(), y)?;
        Ok(self.push(out, &[x, w], move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = vec![F::zero(); xv.len()];
            let mut gw = vec![F::zero(); wv.len()];
            for b in 0..batch {
                for ti in 0..t {
                    for j in 0..k {
                        let Some(src_t) = (ti + j + 1).checked_sub(k) else { continue };
                        for ch in 0..c {
                            let gy = g[(b * t + ti) * c + ch];
                            gx[(b * t + src_t) * c + ch] += wv[ch * k + j] * gy;
                            gw[ch * k + j] += xv[(b * t + src_t) * c + ch] * gy;
                        }
                    }
                }
            }
            vec![
                ctx.needs[0].then(|| Tensor::new(xs.clone(), gx).unwrap()),
                ctx.needs[1].then(|| Tensor::new(ws.clone(), gw).unwrap()),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn shape_contract_and_zero_weights() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 1);
        let cfg = SsdConfig::default();
        let block = Mamba2Block::new(&mut init, "m", 32, &cfg).unwrap();
        let mut rng = rand::rng();
        let x = Tensor::randn(vec![1, 64, 32], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, vx).unwrap();
        assert_eq!(tape.shape(y), &[1, 64, 32]);

        for id in [block.in_proj.weight, block.out_proj.weight] {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(s)).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x);
        let y = block.forward(&mut tape, &p, vx).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_conv_ignores_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(vec![1, 2], &[0.5, 1.0]).unwrap());
        let y = tape.causal_depthwise_conv1d(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.5, 4.0, 5.5]);
    }
}
