//! Gradient checks through composite graphs and pieces of the network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use umamba2::network::{build_network, ArchConfig};
use umamba2::nn::Bound;
use umamba2::prompts::{ClickEncoder, ClickPrompt};
use umamba2::schema::{ClassInfo, LabelSchema};
use umamba2::ssd::SsdConfig;
use umamba2::tensor::gradcheck::{gradcheck, GradcheckOptions};
use umamba2::tensor::{Tape, Tensor};
use umamba2::training::{dice_ce_loss, LossConfig, LossTargets};
use umamba2::volume::LabelVolume;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn composite_graph_gradcheck() {
    // conv3d → tokens → matmul → layer norm → softmax
    let x = Tensor::randn(vec![1, 2, 4, 4, 4], 1.0, &mut rng(1));
    let w = Tensor::randn(vec![3, 2, 3, 3, 3], 0.3, &mut rng(2));
    let m = Tensor::randn(vec![3, 5], 1.0, &mut rng(3));
    let proj = Tensor::randn(vec![1, 64, 5], 1.0, &mut rng(4));
    let r = gradcheck(
        |t, v| {
            let y = t.conv3d(v[0], v[1], [1; 3], [1; 3])?;
            let y = t.reshape(y, &[1, 3, 64])?;
            let y = t.transpose(y, 1, 2)?;
            let y = t.matmul(y, v[2])?;
            let y = t.normalize(y, 1, 1e-5)?;
            let y = t.softmax(y, 2)?;
            let p = t.constant(proj.clone());
            let s = t.mul(y, p)?;
            Ok(t.sum(s))
        },
        &[x, w, m],
        GradcheckOptions { h: 1e-5, tol: 1e-4, max_entries: Some(120) },
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

fn two_class_schema() -> LabelSchema {
    LabelSchema::new(
        vec![
            ClassInfo { id: 0, name: "background".into(), laterality_partner: None, related: vec![], tiny: false },
            ClassInfo { id: 1, name: "object".into(), laterality_partner: None, related: vec![], tiny: false },
        ],
        None,
    )
    .unwrap()
}

#[test]
fn dice_ce_gradcheck_on_two_classes() {
    let schema = two_class_schema();
    let mut g = rng(5);
    let labels = LabelVolume::new([4, 4, 4], [1.0; 3], (0..64).map(|i| ((i * 7) % 3 == 0) as u8).collect()).unwrap();
    let cfg = LossConfig::default();
    let targets = LossTargets::<f64>::new(&[&labels], &schema, &cfg).unwrap();
    let logits = Tensor::randn(vec![1, 2, 4, 4, 4], 1.0, &mut g);
    let r = gradcheck(
        |t, v| Ok(dice_ce_loss(t, v[0], &targets, &cfg)?.total),
        &[logits],
        GradcheckOptions { h: 1e-5, tol: 1e-4, max_entries: None },
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn encoder_stage_gradcheck() {
    let cfg = ArchConfig {
        num_stages: 2,
        base_channels: 2,
        channel_cap: 4,
        patch_extents: [4, 4, 4],
        encoder_blocks: 1,
        ssd: SsdConfig { state_dim: 2, num_heads: 1, chunk_len: 4, conv_width: 2, expansion: 1, gated: true },
        ..Default::default()
    };
    let (net, store) = build_network::<f64>(&cfg).unwrap();
    let x = Tensor::randn(vec![1, cfg.channels(0), 4, 4, 4], 1.0, &mut rng(6));
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    let w_skip = Tensor::randn(vec![1, cfg.channels(0), 4, 4, 4], 1.0, &mut rng(7));
    let w_down = Tensor::randn(vec![1, cfg.channels(1), 2, 2, 2], 1.0, &mut rng(8));
    let stage = net.encoder[0].clone();
    let r = gradcheck(
        |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let (skip, down) = stage.forward(t, &p, v[0])?;
            let (a, b) = (t.constant(w_skip.clone()), t.constant(w_down.clone()));
            let s1 = t.mul(skip, a)?;
            let s2 = t.mul(down.expect("stage 0 downsamples"), b)?;
            let (s1, s2) = (t.sum(s1), t.sum(s2));
            t.add(s1, s2)
        },
        &inputs,
        GradcheckOptions { h: 1e-5, tol: 1e-4, max_entries: Some(40) },
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn class_only_difference_is_the_class_embedding_difference() {
    let mut store = umamba2::nn::ParamStore::<f64>::new();
    let enc = ClickEncoder::new(&mut umamba2::nn::Init::new(&mut store, 3), "enc", 8, 5).unwrap();
    let extents = [10, 12, 14];
    let clicks = [ClickPrompt { x: 3, y: 7, z: 2, class_id: 1 }, ClickPrompt { x: 3, y: 7, z: 2, class_id: 4 }];
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let e = enc.forward(&mut t, &p, &clicks, extents).unwrap();
    let rows = t.value(e).data().to_vec();

    // oracle: the position path alone, then the two class rows added by hand
    let feats = t.constant(Tensor::from_f64(vec![1, 8], &enc.fourier(&clicks[..1], extents)).unwrap());
    let pos = enc.pos_proj.forward(&mut t, &p, feats).unwrap();
    let pos = t.value(pos).data().to_vec();
    let table = store.get(enc.class_embed).data();
    for j in 0..8 {
        assert_eq!(rows[j], pos[j] + table[8 + j]);
        assert_eq!(rows[8 + j], pos[j] + table[4 * 8 + j]);
        let diff = rows[j] - rows[8 + j];
        assert!((diff - (table[8 + j] - table[4 * 8 + j])).abs() < 1e-12);
    }
}
