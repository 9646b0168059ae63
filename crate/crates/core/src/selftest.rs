//! Quick internal consistency checks run by the `selftest` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::mamba::Mamba2Block;
use crate::network::{ArchConfig, Model};
use crate::nn::{Bound, Init, ParamStore};
use crate::phantom::{class_volumes, generate_phantom, PhantomConfig};
use crate::schema::{ClassInfo, LabelSchema};
use crate::ssd::{random_inputs, ssd_chunked, ssd_quadratic, ssd_recurrent, SsdConfig};
use crate::tensor::gradcheck::{gradcheck, GradcheckOptions};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{dice_ce_loss, LossConfig, LossTargets};
use crate::volume::LabelVolume;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Contract a tensor with fixed random weights so every entry of `y`
/// contributes to the scalar under test.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(t.shape(y).to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

type OpGraph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One central-difference check per differentiable tape operation, in 64-bit.
pub fn op_gradchecks(tol: f64) -> Vec<Check> {
    let opts = GradcheckOptions { h: 1e-5, tol, max_entries: Some(64) };
    let unary = |f: fn(&mut Tape<f64>, Var) -> Var| -> OpGraph {
        Box::new(move |t, v| {
            let y = f(t, v[0]);
            project(t, y, 1)
        })
    };
    let x = randn(&[2, 3, 4], 10);
    // leaky_relu and abs are checked away from their kink at zero
    let off_kink = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpGraph)> = vec![
        (
            "add",
            vec![x.clone(), randn(&[3, 1], 11)],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "sub",
            vec![x.clone(), randn(&[4], 12)],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "mul",
            vec![x.clone(), randn(&[2, 1, 4], 13)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "div",
            vec![x.clone(), positive(&[3, 4], 14)],
            Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        ("add_scalar", vec![x.clone()], unary(|t, a| t.add_scalar(a, 0.7))),
        ("mul_scalar", vec![x.clone()], unary(|t, a| t.mul_scalar(a, -1.3))),
        ("neg", vec![x.clone()], unary(|t, a| t.neg(a))),
        ("exp", vec![x.clone()], unary(|t, a| t.exp(a))),
        ("log", vec![positive(&[2, 3, 4], 15)], unary(|t, a| t.log(a))),
        ("sqrt", vec![positive(&[2, 3, 4], 16)], unary(|t, a| t.sqrt(a))),
        ("square", vec![x.clone()], unary(|t, a| t.square(a))),
        ("abs", vec![off_kink.clone()], unary(|t, a| t.abs(a))),
        ("sigmoid", vec![x.clone()], unary(|t, a| t.sigmoid(a))),
        ("silu", vec![x.clone()], unary(|t, a| t.silu(a))),
        ("softplus", vec![x.clone()], unary(|t, a| t.softplus(a))),
        ("leaky_relu", vec![off_kink], unary(|t, a| t.leaky_relu(a, 0.01))),
        (
            "sum",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.square(v[0]);
                Ok(t.sum(y))
            }),
        ),
        (
            "mean",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.square(v[0]);
                Ok(t.mean(y))
            }),
        ),
        (
            "sum_axis",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.sum_axis(v[0], 1, false)?;
                project(t, y, 1)
            }),
        ),
        (
            "reshape",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[6, 4])?;
                project(t, y, 1)
            }),
        ),
        (
            "permute",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                project(t, y, 1)
            }),
        ),
        (
            "transpose",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.transpose(v[0], 0, 2)?;
                project(t, y, 1)
            }),
        ),
        (
            "concat",
            vec![x.clone(), randn(&[2, 1, 4], 17)],
            Box::new(|t, v| {
                let y = t.concat(&[v[1], v[0]], 1)?;
                project(t, y, 1)
            }),
        ),
        (
            "narrow",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.narrow(v[0], 2, 1, 2)?;
                project(t, y, 1)
            }),
        ),
        (
            "gather_rows",
            vec![randn(&[5, 3], 18)],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
                project(t, y, 1)
            }),
        ),
        (
            "matmul",
            vec![x.clone(), randn(&[4, 5], 19)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "softmax",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 1)?;
                project(t, y, 1)
            }),
        ),
        (
            "log_softmax",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.log_softmax(v[0], 2)?;
                project(t, y, 1)
            }),
        ),
        (
            "normalize",
            vec![x.clone()],
            Box::new(|t, v| {
                let y = t.normalize(v[0], 2, 1e-5)?;
                project(t, y, 1)
            }),
        ),
        (
            "conv3d",
            vec![randn(&[1, 2, 4, 4, 4], 20), randn(&[3, 2, 3, 3, 3], 21)],
            Box::new(|t, v| {
                let y = t.conv3d(v[0], v[1], [2, 1, 1], [1, 1, 1])?;
                project(t, y, 1)
            }),
        ),
        (
            "conv_transpose3d",
            vec![randn(&[1, 3, 2, 3, 2], 22), randn(&[3, 2, 2, 2, 2], 23)],
            Box::new(|t, v| {
                let y = t.conv_transpose3d(v[0], v[1], [2, 2, 2], [0, 0, 0], None)?;
                project(t, y, 1)
            }),
        ),
        (
            "causal_depthwise_conv1d",
            vec![randn(&[2, 6, 3], 24), randn(&[3, 4], 25)],
            Box::new(|t, v| {
                let y = t.causal_depthwise_conv1d(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "ssd",
            vec![
                randn(&[1, 9, 2, 2], 26),
                Tensor::rand_uniform(vec![1, 9, 2], -0.7, -0.05, &mut ChaCha8Rng::seed_from_u64(27)),
                randn(&[1, 9, 2, 3], 28),
                randn(&[1, 9, 2, 3], 29),
            ],
            Box::new(|t, v| {
                let y = t.ssd(v[0], v[1], v[2], v[3], 4)?;
                project(t, y, 1)
            }),
        ),
    ];

    // the Mamba2 mixer as a whole, weights included
    let mut store = ParamStore::<f64>::new();
    let cfg = SsdConfig { state_dim: 4, num_heads: 2, chunk_len: 3, conv_width: 4, expansion: 2, gated: true };
    if let Ok(block) = Mamba2Block::new(&mut Init::new(&mut store, 5), "m", 8, &cfg) {
        let mut inputs = vec![randn(&[1, 8, 8], 30)];
        inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
        cases.push((
            "mamba2_block",
            inputs,
            Box::new(move |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = block.forward(t, &p, v[0])?;
                project(t, y, 1)
            }),
        ));
    }

    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            check(name, || {
                let r = gradcheck(|t, v| f(t, v), &inputs, opts)?;
                Ok((r.passed(), format!("max relative error {:.1e}", r.max_rel_error)))
            })
        })
        .collect()
}

/// Dice + cross-entropy through a whole small network on one
/// `(1, 1, 8, 8, 8)` input with three classes.
pub fn network_loss_gradcheck(tol: f64) -> Check {
    check("dice_ce_through_network", || {
        let cfg = ArchConfig {
            num_stages: 2,
            base_channels: 2,
            channel_cap: 4,
            num_classes: 3,
            patch_extents: [8, 8, 8],
            encoder_blocks: 1,
            ssd: SsdConfig { state_dim: 2, num_heads: 1, chunk_len: 4, conv_width: 2, expansion: 1, gated: true },
            ..Default::default()
        };
        let model = Model::<f64>::build(&cfg)?;
        let schema = three_class_schema()?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = LabelVolume::new([8, 8, 8], [1.0; 3], (0..512).map(|i| ((i * 5 + i / 7) % 3) as u8).collect())?;
        let loss_cfg = LossConfig::default();
        let targets = LossTargets::<f64>::new(&[&labels], &schema, &loss_cfg)?;
        let mut inputs = vec![Tensor::randn(vec![1, 1, 8, 8, 8], 1.0, &mut rng)];
        inputs.extend(model.params.iter().map(|(_, p)| p.value.clone()));
        let r = gradcheck(
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let out = model.net.forward(t, &p, v[0], None)?;
                Ok(dice_ce_loss(t, out.logits, &targets, &loss_cfg)?.total)
            },
            &inputs,
            GradcheckOptions { h: 1e-5, tol, max_entries: Some(8) },
        )?;
        Ok((r.passed(), format!("max relative error {:.1e} over {} inputs", r.max_rel_error, inputs.len())))
    })
}

fn three_class_schema() -> Result<LabelSchema> {
    LabelSchema::new(
        vec![
            ClassInfo { id: 0, name: "background".into(), laterality_partner: None, related: vec![], tiny: false },
            ClassInfo { id: 1, name: "left".into(), laterality_partner: Some(2), related: vec![2], tiny: false },
            ClassInfo { id: 2, name: "right".into(), laterality_partner: Some(1), related: vec![1], tiny: false },
        ],
        None,
    )
}

pub fn run_selftest() -> SelftestReport {
    let mut checks = Vec::new();

    checks.push(check("ssd_forms_agree", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inp = random_inputs(2, 37, 4, 3, &mut rng);
        let r = ssd_recurrent(&inp)?;
        let q = ssd_quadratic(&inp)?.max_abs_diff(&r);
        let c = ssd_chunked(&inp, 8)?.max_abs_diff(&r);
        Ok((q < 1e-10 && c < 1e-10, format!("quadratic {q:.1e}, chunked {c:.1e}")))
    }));

    checks.extend(op_gradchecks(1e-4));

    checks.push(check("gradcheck_dice_ce", || {
        let schema = three_class_schema()?;
        let labels = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 0, 1, 1, 2, 0])?;
        let cfg = LossConfig::default();
        let targets = LossTargets::<f64>::new(&[&labels], &schema, &cfg)?;
        let logits = Tensor::randn(vec![1, 3, 2, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let r = gradcheck(
            |t, v| Ok(dice_ce_loss(t, v[0], &targets, &cfg)?.total),
            &[logits],
            GradcheckOptions { tol: 1e-6, ..Default::default() },
        )?;
        Ok((r.passed(), format!("max relative error {:.1e}", r.max_rel_error)))
    }));

    checks.push(check("phantom_all_classes", || {
        let schema = LabelSchema::dental();
        let (_, labels) = generate_phantom(&PhantomConfig::default(), &schema)?;
        let v = class_volumes(&labels, schema.num_classes());
        Ok((v.iter().all(|&n| n > 0), format!("class volumes {v:?}")))
    }));

    checks.push(check("network_deterministic", || {
        let cfg = ArchConfig {
            num_stages: 2,
            base_channels: 4,
            num_classes: 3,
            patch_extents: [8, 8, 8],
            encoder_blocks: 1,
            ssd: SsdConfig { state_dim: 4, num_heads: 2, chunk_len: 4, ..Default::default() },
            ..Default::default()
        };
        let x = Tensor::<f64>::randn(vec![1, 1, 8, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let a = Model::<f64>::build(&cfg)?.logits(&x, None)?;
        let b = Model::<f64>::build(&cfg)?.logits(&x, None)?;
        Ok((a == b && a.all_finite(), format!("{} logits", a.len())))
    }));

    SelftestReport { checks }
}
