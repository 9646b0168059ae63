//! The U-Mamba2 network: residual encoder, Mamba2 bottleneck with an
//! optional click-fusion path, skip-connected decoder and a 1×1×1 head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::Mamba2Block;
use crate::nn::{Bound, Conv3d, ConvTranspose3d, Init, LayerNorm, ParamId, ParamStore, ResidualBlock};
use crate::prompts::{two_way_fusion, ClickPrompt, PromptBranch};
use crate::ssd::SsdConfig;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub num_stages: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_extents: [usize; 3],
    /// Convolution kernel per stage; empty means 3×3×3 everywhere.
    pub kernel_sizes: Vec<[usize; 3]>,
    /// Downsampling stride into stages `1..num_stages`; empty means 2×2×2.
    pub strides: Vec<[usize; 3]>,
    /// Residual blocks per encoder stage (the bottleneck stage included).
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ssd: SsdConfig,
    /// Add the block input to the U-Mamba2 block output.
    pub bottleneck_residual: bool,
    pub click_branch: bool,
    pub fusion_heads: usize,
    pub deep_supervision: bool,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            base_channels: 8,
            channel_cap: 64,
            in_channels: 1,
            num_classes: 12,
            patch_extents: [32, 32, 32],
            kernel_sizes: Vec::new(),
            strides: Vec::new(),
            encoder_blocks: 2,
            decoder_blocks: 1,
            ssd: SsdConfig::default(),
            bottleneck_residual: true,
            click_branch: false,
            fusion_heads: 4,
            deep_supervision: false,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(40)).min(self.channel_cap)
    }

    pub fn kernel(&self, stage: usize) -> [usize; 3] {
        self.kernel_sizes.get(stage).copied().unwrap_or([3; 3])
    }

    /// Stride of the convolution entering `stage` (`stage ≥ 1`).
    pub fn stride(&self, stage: usize) -> [usize; 3] {
        self.strides.get(stage - 1).copied().unwrap_or([2; 3])
    }

    /// Spatial extents seen by each stage for the configured patch.
    pub fn stage_extents(&self) -> Result<Vec<[usize; 3]>> {
        stage_extents(self, self.patch_extents)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::Config(format!("num_stages must be ≥ 2, got {}", self.num_stages)));
        }
        if self.base_channels == 0 || self.channel_cap == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channel counts and num_classes must be ≥ 1".into()));
        }
        if !self.kernel_sizes.is_empty() && self.kernel_sizes.len() != self.num_stages {
            return Err(Error::Config(format!(
                "kernel_sizes has {} entries for {} stages",
                self.kernel_sizes.len(),
                self.num_stages
            )));
        }
        if !self.strides.is_empty() && self.strides.len() != self.num_stages - 1 {
            return Err(Error::Config(format!(
                "strides has {} entries; expected one per downsampling ({})",
                self.strides.len(),
                self.num_stages - 1
            )));
        }
        for s in 0..self.num_stages {
            if self.kernel(s).iter().any(|&k| k == 0 || k % 2 == 0) {
                return Err(Error::Config(format!("stage {s}: kernel {:?} must be odd", self.kernel(s))));
            }
        }
        if self.encoder_blocks == 0 {
            return Err(Error::Config("encoder_blocks must be ≥ 1".into()));
        }
        self.ssd.validate()?;
        let deepest = self.channels(self.num_stages - 1);
        self.ssd.head_dim(deepest)?;
        if self.click_branch
            && (self.fusion_heads == 0 || !deepest.is_multiple_of(self.fusion_heads) || !deepest.is_multiple_of(2))
        {
            return Err(Error::Config(format!(
                "click branch: bottleneck width {deepest} must be even and divisible by {} heads",
                self.fusion_heads
            )));
        }
        self.stage_extents()?;
        Ok(())
    }
}

fn stage_extents(cfg: &ArchConfig, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let mut out = vec![input];
    for s in 1..cfg.num_stages {
        let prev = out[s - 1];
        let st = cfg.stride(s);
        let mut next = [0; 3];
        for a in 0..3 {
            if st[a] == 0 || prev[a] % st[a] != 0 || prev[a] / st[a] == 0 {
                return Err(Error::Config(format!(
                    "stage {s}: stride {st:?} does not divide incoming extents {prev:?}"
                )));
            }
            next[a] = prev[a] / st[a];
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<ResidualBlock>,
    /// Strided convolution into the next stage; absent at the bottleneck.
    pub down: Option<Conv3d>,
}

impl EncoderStage {
    /// `x → (skip, down)`; `down` is `None` at the deepest stage.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<(Var, Option<Var>)> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        let down = match &self.down {
            Some(conv) => Some(conv.forward(tape, p, h)?),
            None => None,
        };
        Ok((h, down))
    }
}

/// LayerNorm → Mamba2 → optional click fusion, over flattened tokens.
#[derive(Clone, Debug)]
pub struct UMamba2Block {
    pub norm: LayerNorm,
    pub mamba: Mamba2Block,
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose3d,
    pub fuse: Conv3d,
    pub blocks: Vec<ResidualBlock>,
}

/// `[B, C, H, W, D] → [B, T, C]` with `T = H·W·D` in row-major order.
pub fn flatten_tokens<F: Element>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3] * s[4]])?;
    tape.transpose(flat, 1, 2)
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<F: Element>(tape: &mut Tape<F>, x: Var, spatial: [usize; 3]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.transpose(x, 1, 2)?;
    tape.reshape(t, &[s[0], s[2], spatial[0], spatial[1], spatial[2]])
}

/// Network outputs: full-resolution logits and, with deep supervision,
/// auxiliary logits from coarser decoder stages (finest first).
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Var,
    pub aux: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct UMamba2Network {
    pub cfg: ArchConfig,
    pub stem: Conv3d,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: UMamba2Block,
    /// `decoder[s]` upsamples from stage `s+1` to stage `s`.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv3d,
    pub aux_heads: Vec<Conv3d>,
    pub prompt: Option<PromptBranch>,
}

/// Prefixes of parameters that are never transferred from a pretrained model.
pub const TASK_SPECIFIC_PREFIXES: [&str; 3] = ["head.", "aux", "prompt."];

/// Seed offset for the prompt branch, so toggling the branch leaves the
/// other parameters unchanged.
const PROMPT_SEED_SALT: u64 = 0x5EED_C11C;

pub fn build_network<F: Element>(cfg: &ArchConfig) -> Result<(UMamba2Network, ParamStore<F>)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, cfg.seed);
    let s_n = cfg.num_stages;
    let stem = Conv3d::new(&mut init, "stem", cfg.in_channels, cfg.channels(0), cfg.kernel(0), [1; 3], false);
    let mut encoder = Vec::with_capacity(s_n);
    for s in 0..s_n {
        let c = cfg.channels(s);
        let prefix = if s + 1 == s_n { "bottleneck".to_string() } else { format!("enc{s}") };
        let blocks = (0..cfg.encoder_blocks)
            .map(|b| ResidualBlock::new(&mut init, &format!("{prefix}.block{b}"), c, cfg.kernel(s)))
            .collect();
        let down = (s + 1 < s_n).then(|| {
            Conv3d::new(
                &mut init,
                &format!("enc{s}.down"),
                c,
                cfg.channels(s + 1),
                cfg.kernel(s + 1),
                cfg.stride(s + 1),
                false,
            )
        });
        encoder.push(EncoderStage { blocks, down });
    }
    let deep = cfg.channels(s_n - 1);
    let bottleneck = UMamba2Block {
        norm: LayerNorm::new(&mut init, "bottleneck.norm", deep),
        mamba: Mamba2Block::new(&mut init, "bottleneck.mamba", deep, &cfg.ssd)?,
        residual: cfg.bottleneck_residual,
    };
    let mut decoder = Vec::with_capacity(s_n - 1);
    for s in 0..s_n - 1 {
        let (c, c_in) = (cfg.channels(s), cfg.channels(s + 1));
        decoder.push(DecoderStage {
            up: ConvTranspose3d::new(&mut init, &format!("dec{s}.up"), c_in, c, cfg.stride(s + 1), false),
            fuse: Conv3d::new(&mut init, &format!("dec{s}.fuse"), 2 * c, c, [1; 3], [1; 3], false),
            blocks: (0..cfg.decoder_blocks)
                .map(|b| ResidualBlock::new(&mut init, &format!("dec{s}.block{b}"), c, cfg.kernel(s)))
                .collect(),
        });
    }
    let head = Conv3d::new(&mut init, "head", cfg.channels(0), cfg.num_classes, [1; 3], [1; 3], true);
    let aux_heads = if cfg.deep_supervision {
        (1..s_n - 1)
            .map(|s| Conv3d::new(&mut init, &format!("aux{s}"), cfg.channels(s), cfg.num_classes, [1; 3], [1; 3], true))
            .collect()
    } else {
        Vec::new()
    };
    let prompt = if cfg.click_branch {
        let mut pinit = Init::new(&mut store, cfg.seed ^ PROMPT_SEED_SALT);
        Some(PromptBranch::new(&mut pinit, deep, cfg.fusion_heads, cfg.num_classes)?)
    } else {
        None
    };
    let net = UMamba2Network { cfg: cfg.clone(), stem, encoder, bottleneck, decoder, head, aux_heads, prompt };
    Ok((net, store))
}

impl UMamba2Network {
    /// The bottleneck: tokens → LayerNorm → Mamba2 → (click fusion) →
    /// unflatten, plus the block input when the residual is enabled.
    pub fn umamba2_bottleneck<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        clicks: Option<&[ClickPrompt]>,
        input_extents: [usize; 3],
    ) -> Result<Var> {
        let clicks = clicks.filter(|c| !c.is_empty());
        if clicks.is_some() && self.prompt.is_none() {
            return Err(Error::Config("clicks supplied but the click branch is disabled".into()));
        }
        let s = tape.shape(x).to_vec();
        let spatial = [s[2], s[3], s[4]];
        let tokens = flatten_tokens(tape, x)?;
        let h = self.bottleneck.norm.forward(tape, p, tokens)?;
        let mut h = self.bottleneck.mamba.forward(tape, p, h)?;
        if let (Some(clicks), Some(branch)) = (clicks, &self.prompt) {
            let emb = branch.encoder.forward(tape, p, clicks, input_extents)?;
            h = two_way_fusion(tape, p, &branch.layers, h, emb)?;
        }
        let h = unflatten_tokens(tape, h, spatial)?;
        if self.bottleneck.residual {
            tape.add(x, h)
        } else {
            Ok(h)
        }
    }

    /// `[B, in, H, W, D] → logits [B, K, H, W, D]`.
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        clicks: Option<&[ClickPrompt]>,
    ) -> Result<NetOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!("network expects [B, {}, H, W, D], got {s:?}", self.cfg.in_channels)));
        }
        let extents = [s[2], s[3], s[4]];
        stage_extents(&self.cfg, extents)
            .map_err(|e| Error::Shape(format!("patch extents {extents:?} incompatible: {e}")))?;
        let mut h = self.stem.forward(tape, p, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let (skip, down) = stage.forward(tape, p, h)?;
            skips.push(skip);
            h = down.unwrap_or(skip);
        }
        h = self.umamba2_bottleneck(tape, p, h, clicks, extents)?;
        let mut aux = Vec::new();
        for s in (0..self.decoder.len()).rev() {
            let d = &self.decoder[s];
            let up = d.up.forward(tape, p, h)?;
            let cat = tape.concat(&[up, skips[s]], 1)?;
            h = d.fuse.forward(tape, p, cat)?;
            for b in &d.blocks {
                h = b.forward(tape, p, h)?;
            }
            if s >= 1 {
                if let Some(head) = self.aux_heads.get(s - 1) {
                    aux.push(head.forward(tape, p, h)?);
                }
            }
        }
        aux.reverse();
        let logits = self.head.forward(tape, p, h)?;
        Ok(NetOutput { logits, aux })
    }

    pub fn prompt_params(&self) -> Vec<ParamId> {
        self.prompt.as_ref().map(|b| b.params()).unwrap_or_default()
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub net: UMamba2Network,
    pub params: ParamStore<F>,
}

impl<F: Element> Model<F> {
    pub fn build(cfg: &ArchConfig) -> Result<Self> {
        let (net, params) = build_network(cfg)?;
        Ok(Self { net, params })
    }

    pub fn cfg(&self) -> &ArchConfig {
        &self.net.cfg
    }

    /// Inference-only forward pass returning logits.
    pub fn logits(&self, x: &Tensor<F>, clicks: Option<&[ClickPrompt]>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.net.forward(&mut tape, &p, xv, clicks)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax over the class axis of [`Model::logits`].
    pub fn probabilities(&self, x: &Tensor<F>, clicks: Option<&[ClickPrompt]>) -> Result<Tensor<F>> {
        let logits = self.logits(x, clicks)?;
        let mut tape = Tape::new();
        let v = tape.constant(logits);
        let s = tape.softmax(v, 1)?;
        Ok(tape.value(s).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig {
            num_stages: 2,
            base_channels: 4,
            channel_cap: 8,
            num_classes: 3,
            patch_extents: [8, 8, 8],
            encoder_blocks: 1,
            ssd: SsdConfig { state_dim: 2, num_heads: 2, chunk_len: 4, conv_width: 2, expansion: 1, gated: true },
            ..Default::default()
        }
    }

    #[test]
    fn channel_formula() {
        let cfg = ArchConfig { base_channels: 8, channel_cap: 320, ..Default::default() };
        assert_eq!((0..3).map(|s| cfg.channels(s)).collect::<Vec<_>>(), vec![8, 16, 32]);
        let cfg = ArchConfig { base_channels: 32, channel_cap: 40, ..Default::default() };
        assert_eq!(cfg.channels(2), 40);
    }

    #[test]
    fn indivisible_stage_named() {
        let cfg = ArchConfig { patch_extents: [32, 32, 6], ..Default::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stage 2"), "{err}");
    }

    #[test]
    fn shape_ledger_matches_parameter_count() {
        let cfg = small();
        let (_, store) = build_network::<f64>(&cfg).unwrap();
        // stem 1→4 k3
        let stem = 4 * 27;
        // residual block at c channels: two c×c×27 convs + two norms (2c each)
        let rb = |c: usize| 2 * c * c * 27 + 4 * c;
        let down = 8 * 4 * 27;
        // mamba at d=8, H=2, N=2, P=4: in_proj 8×(2·8+2·2·2+2), conv (8+8)×2 + 16, dt/a 2+2, out 8×8
        let mamba = 8 * (16 + 8 + 2) + 16 * 2 + 16 + 4 + 64;
        let ln = 16;
        let up = 8 * 4 * 8;
        let fuse = 8 * 4;
        let head = 4 * 3 + 3;
        let want = stem + rb(4) + down + rb(8) + ln + mamba + up + fuse + rb(4) + head;
        assert_eq!(store.count(), want);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build_network::<f32>(&small()).unwrap();
        let (_, b) = build_network::<f32>(&small()).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.data(), y.value.data());
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::randn(vec![2, 3, 2, 3, 4], 1.0, &mut rand::rng());
        let v = tape.constant(x.clone());
        let t = flatten_tokens(&mut tape, v).unwrap();
        assert_eq!(tape.shape(t), &[2, 24, 3]);
        // token order is row-major over (H, W, D)
        assert_eq!(tape.value(t).data()[3 * 5 + 1], x.data()[24 + 5]);
        let back = unflatten_tokens(&mut tape, t, [2, 3, 4]).unwrap();
        assert_eq!(tape.value(back), &x);
    }
}
