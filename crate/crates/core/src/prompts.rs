//! Interactive click prompts: encoding and two-way cross-attention fusion
//! with bottleneck image tokens.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamId};
use crate::schema::LabelSchema;
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::volume::LabelVolume;

/// A voxel-index click: `x`, `y`, `z` index axes 0, 1, 2 of the volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickPrompt {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub class_id: usize,
}

impl ClickPrompt {
    pub fn coord(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn validate(&self, extents: [usize; 3], num_classes: usize) -> Result<()> {
        if self.coord().iter().zip(extents).any(|(&c, e)| c >= e) {
            return Err(Error::Validation(format!("click {:?} outside volume {extents:?}", self.coord())));
        }
        if self.class_id >= num_classes {
            return Err(Error::Validation(format!("click class {} not in schema", self.class_id)));
        }
        Ok(())
    }

    /// The same click after flipping `axes`; mirroring left/right also moves
    /// the label to the laterality partner.
    pub fn mirrored(&self, axes: &[usize], extents: [usize; 3], schema: &LabelSchema) -> Self {
        let mut c = self.coord();
        for &a in axes {
            c[a] = extents[a] - 1 - c[a];
        }
        let class_id = if axes.contains(&crate::volume::LR_AXIS) {
            schema.partner(self.class_id).unwrap_or(self.class_id)
        } else {
            self.class_id
        };
        Self { x: c[0], y: c[1], z: c[2], class_id }
    }

    /// Position in the coarser grid of a tensor with `to` extents.
    pub fn rescaled(&self, from: [usize; 3], to: [usize; 3]) -> Self {
        let c = self.coord();
        let s: Vec<usize> = (0..3).map(|a| c[a] * to[a] / from[a]).collect();
        Self { x: s[0], y: s[1], z: s[2], class_id: self.class_id }
    }
}

pub fn load_clicks(path: &Path) -> Result<Vec<ClickPrompt>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_clicks(path: &Path, clicks: &[ClickPrompt]) -> Result<()> {
    let text = serde_json::to_string_pretty(clicks)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Draw `n` distinct voxels of each requested class from the ground truth.
pub fn sample_clicks(gt: &LabelVolume, classes: &[usize], n: usize, seed: u64) -> Result<Vec<ClickPrompt>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes.len() * n);
    if n == 0 {
        return Ok(out);
    }
    for &c in classes {
        let voxels: Vec<usize> = (0..gt.len()).filter(|&i| gt.data[i] as usize == c).collect();
        if voxels.len() < n {
            return Err(Error::Validation(format!(
                "class {c} has {} ground-truth voxels, {n} clicks requested",
                voxels.len()
            )));
        }
        let mut picked: Vec<usize> = sample(&mut rng, voxels.len(), n).into_iter().map(|i| voxels[i]).collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| {
            let [x, y, z] = gt.coord(i);
            ClickPrompt { x, y, z, class_id: c }
        }));
    }
    Ok(out)
}

/// Fixed random-Fourier map of normalized coordinates, followed by a learned
/// projection, plus a learned per-class vector.
#[derive(Clone, Debug)]
pub struct ClickEncoder {
    pub d_embed: usize,
    /// `[3, d_embed/2]`, drawn once from the seed and never trained.
    pub frequencies: Vec<f64>,
    pub pos_proj: Linear,
    pub class_embed: ParamId,
}

impl ClickEncoder {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, d_embed: usize, num_classes: usize) -> Result<Self> {
        if !d_embed.is_multiple_of(2) || d_embed == 0 {
            return Err(Error::Config(format!("click embedding width must be even, got {d_embed}")));
        }
        let freq = Tensor::<f64>::randn(vec![3, d_embed / 2], 1.0, &mut init.rng);
        let pos_proj = Linear::new(init, &format!("{name}.pos_proj"), d_embed, d_embed, true, None);
        let class_embed = init.normal(&format!("{name}.class_embed"), vec![num_classes, d_embed], 1.0);
        Ok(Self { d_embed, frequencies: freq.into_data(), pos_proj, class_embed })
    }

    /// Fourier features `[sin 2πuB, cos 2πuB]` with `u = 2(c+½)/e − 1`.
    pub fn fourier(&self, clicks: &[ClickPrompt], extents: [usize; 3]) -> Vec<f64> {
        let half = self.d_embed / 2;
        let mut out = Vec::with_capacity(clicks.len() * self.d_embed);
        for c in clicks {
            let u: Vec<f64> = (0..3).map(|a| 2.0 * (c.coord()[a] as f64 + 0.5) / extents[a] as f64 - 1.0).collect();
            let proj: Vec<f64> = (0..half)
                .map(|j| std::f64::consts::TAU * (0..3).map(|a| u[a] * self.frequencies[a * half + j]).sum::<f64>())
                .collect();
            out.extend(proj.iter().map(|p| p.sin()));
            out.extend(proj.iter().map(|p| p.cos()));
        }
        out
    }

    /// `[N, d_embed]` prompt embedding.
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        clicks: &[ClickPrompt],
        extents: [usize; 3],
    ) -> Result<Var> {
        let n = clicks.len();
        if n == 0 {
            return Ok(tape.constant(Tensor::zeros(vec![0, self.d_embed])));
        }
        let num_classes = tape.shape(p.var(self.class_embed))[0];
        for c in clicks {
            c.validate(extents, num_classes)?;
        }
        let feats = tape.constant(Tensor::from_f64(vec![n, self.d_embed], &self.fourier(clicks, extents))?);
        let pos = self.pos_proj.forward(tape, p, feats)?;
        let ids: Vec<usize> = clicks.iter().map(|c| c.class_id).collect();
        let cls = tape.gather_rows(p.var(self.class_embed), &ids)?;
        tape.add(pos, cls)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.pos_proj.weight];
        v.extend(self.pos_proj.bias);
        v.push(self.class_embed);
        v
    }
}

/// Multi-head scaled dot-product cross-attention.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("attention width {dim} not divisible into {heads} heads")));
        }
        let mk = |init: &mut Init<'_, F>, s: &str| Linear::new(init, &format!("{name}.{s}"), dim, dim, true, None);
        Ok(Self { heads, q: mk(init, "q"), k: mk(init, "k"), v: mk(init, "v"), o: mk(init, "o") })
    }

    /// Attention probabilities `[B, heads, Nq, Nk]` and output `[B, Nq, dim]`.
    pub fn forward_with_weights<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        queries: Var,
        keys: Var,
    ) -> Result<(Var, Var)> {
        let (qs, ks) = (tape.shape(queries).to_vec(), tape.shape(keys).to_vec());
        let (b, nq, d, nk) = (qs[0], qs[1], qs[2], ks[1]);
        let dh = d / self.heads;
        let split = |tape: &mut Tape<F>, x: Var, n: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, n, self.heads, dh])?;
            tape.permute(x, &[0, 2, 1, 3])
        };
        let q = self.q.forward(tape, p, queries)?;
        let q = split(tape, q, nq)?;
        let k = self.k.forward(tape, p, keys)?;
        let k = split(tape, k, nk)?;
        let v = self.v.forward(tape, p, keys)?;
        let v = split(tape, v, nk)?;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, F::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax(scores, 3)?;
        let y = tape.matmul(attn, v)?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &[b, nq, d])?;
        Ok((self.o.forward(tape, p, y)?, attn))
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, queries: Var, keys: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, queries, keys)?.0)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| [Some(l.weight), l.bias]).flatten().collect()
    }
}

/// One repetition: prompts attend to the image, prompt MLP, image attends
/// to the prompts. Every sub-layer is residual and followed by LayerNorm.
#[derive(Clone, Debug)]
pub struct TwoWayLayer {
    pub prompt_to_image: CrossAttention,
    pub norm1: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub norm2: LayerNorm,
    pub image_to_prompt: CrossAttention,
    pub norm3: LayerNorm,
}

impl TwoWayLayer {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            prompt_to_image: CrossAttention::new(init, &format!("{name}.p2i"), dim, heads)?,
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            mlp_in: Linear::new(init, &format!("{name}.mlp_in"), dim, 2 * dim, true, None),
            mlp_out: Linear::new(init, &format!("{name}.mlp_out"), 2 * dim, dim, true, None),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            image_to_prompt: CrossAttention::new(init, &format!("{name}.i2p"), dim, heads)?,
            norm3: LayerNorm::new(init, &format!("{name}.norm3"), dim),
        })
    }

    /// `(image [B,T,C], prompts [B,N,C]) → (image', prompts')`.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, image: Var, prompts: Var) -> Result<(Var, Var)> {
        let a = self.prompt_to_image.forward(tape, p, prompts, image)?;
        let prompts = tape.add(prompts, a)?;
        let prompts = self.norm1.forward(tape, p, prompts)?;
        let h = self.mlp_in.forward(tape, p, prompts)?;
        let h = tape.silu(h);
        let h = self.mlp_out.forward(tape, p, h)?;
        let prompts = tape.add(prompts, h)?;
        let prompts = self.norm2.forward(tape, p, prompts)?;
        let a = self.image_to_prompt.forward(tape, p, image, prompts)?;
        let image = tape.add(image, a)?;
        let image = self.norm3.forward(tape, p, image)?;
        Ok((image, prompts))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.prompt_to_image.params();
        v.extend([self.norm1.gamma, self.norm1.beta]);
        for l in [&self.mlp_in, &self.mlp_out] {
            v.push(l.weight);
            v.extend(l.bias);
        }
        v.extend([self.norm2.gamma, self.norm2.beta]);
        v.extend(self.image_to_prompt.params());
        v.extend([self.norm3.gamma, self.norm3.beta]);
        v
    }
}

/// Number of fusion repetitions.
pub const FUSION_DEPTH: usize = 2;

/// The dashed path: click encoder plus two-way fusion layers.
#[derive(Clone, Debug)]
pub struct PromptBranch {
    pub encoder: ClickEncoder,
    pub layers: Vec<TwoWayLayer>,
}

impl PromptBranch {
    pub fn new<F: Element>(init: &mut Init<'_, F>, dim: usize, heads: usize, num_classes: usize) -> Result<Self> {
        let encoder = ClickEncoder::new(init, "prompt.encoder", dim, num_classes)?;
        let layers = (0..FUSION_DEPTH)
            .map(|i| TwoWayLayer::new(init, &format!("prompt.fusion{i}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self { encoder, layers })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.encoder.params();
        for l in &self.layers {
            v.extend(l.params());
        }
        v
    }
}

/// Fuse `prompts [N, C]` into `image [B, T, C]`; zero prompts leave the image
/// tokens untouched.
pub fn two_way_fusion<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    layers: &[TwoWayLayer],
    image: Var,
    prompts: Var,
) -> Result<Var> {
    let ps = tape.shape(prompts).to_vec();
    let is = tape.shape(image).to_vec();
    if ps.len() != 2 || is.len() != 3 || ps[1] != is[2] {
        return Err(Error::Shape(format!("fusion: image {is:?}, prompts {ps:?}")));
    }
    if ps[0] == 0 {
        return Ok(image);
    }
    let one = tape.reshape(prompts, &[1, ps[0], ps[1]])?;
    let mut prompts = if is[0] == 1 { one } else { tape.concat(&vec![one; is[0]], 0)? };
    let mut image = image;
    for layer in layers {
        (image, prompts) = layer.forward(tape, p, image, prompts)?;
    }
    Ok(image)
}
