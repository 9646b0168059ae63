//! Finite-difference checks for every differentiable operation (64-bit).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umamba2::mamba::Mamba2Block;
use umamba2::nn::{Bound, Init, ParamStore};
use umamba2::ssd::SsdConfig;
use umamba2::tensor::gradcheck::{gradcheck, GradcheckOptions};
use umamba2::tensor::{Tape, Tensor, Var};
use umamba2::Result;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random projection onto a scalar so every output entry carries gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(t.shape(y).to_vec(), 1.0, &mut rng(seed));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let r = gradcheck(f, inputs, GradcheckOptions { h: 1e-5, tol: TOL, max_entries: Some(200) }).unwrap();
    assert!(r.passed(), "{name}: max rel err {:.3e} at {:?}", r.max_rel_error, r.worst);
}

const SHAPES: [&[usize]; 3] = [&[3, 4], &[2, 3, 5], &[1, 2, 3, 2, 2]];

#[test]
fn elementwise_ops() {
    for (i, shape) in SHAPES.iter().enumerate() {
        let s = i as u64;
        let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng(s));
        let pos = Tensor::rand_uniform(shape.to_vec(), 0.5, 2.0, &mut rng(s + 10));
        check("silu", std::slice::from_ref(&x), |t, v| {
            let y = t.silu(v[0]);
            project(t, y, s)
        });
        check("sigmoid", std::slice::from_ref(&x), |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, s)
        });
        check("softplus", std::slice::from_ref(&x), |t, v| {
            let y = t.softplus(v[0]);
            project(t, y, s)
        });
        check("exp", std::slice::from_ref(&x), |t, v| {
            let y = t.exp(v[0]);
            project(t, y, s)
        });
        check("log/sqrt", std::slice::from_ref(&pos), |t, v| {
            let y = t.log(v[0]);
            let z = t.sqrt(v[0]);
            let w = t.add(y, z)?;
            project(t, w, s)
        });
        check("square", std::slice::from_ref(&x), |t, v| {
            let y = t.square(v[0]);
            project(t, y, s)
        });
        // keep inputs away from the kink
        let away = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        check("leaky_relu/abs", &[away], |t, v| {
            let y = t.leaky_relu(v[0], 0.01);
            let z = t.abs(v[0]);
            let w = t.add(y, z)?;
            project(t, w, s)
        });
        check("mul/div broadcast", &[x.clone(), pos.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            let z = t.div(v[0], v[1])?;
            let w = t.sub(y, z)?;
            project(t, w, s)
        });
    }
}

#[test]
fn broadcasting_binary_ops() {
    let a = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng(1));
    let b = Tensor::rand_uniform(vec![3, 1], 0.5, 1.5, &mut rng(2));
    check("broadcast", &[a, b], |t, v| {
        let x = t.add(v[0], v[1])?;
        let y = t.mul(x, v[1])?;
        let z = t.div(y, v[1])?;
        let w = t.sub(z, v[1])?;
        project(t, w, 3)
    });
}

#[test]
fn reductions_and_shapes() {
    for (i, shape) in SHAPES.iter().enumerate() {
        let s = i as u64 + 20;
        let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng(s));
        let nd = shape.len();
        check("sum_axis", std::slice::from_ref(&x), |t, v| {
            let y = t.sum_axis(v[0], nd - 1, true)?;
            let z = t.sum_axis(v[0], 0, false)?;
            let a = project(t, y, s)?;
            let b = project(t, z, s + 1)?;
            t.add(a, b)
        });
        check("permute/reshape", std::slice::from_ref(&x), |t, v| {
            let perm: Vec<usize> = (0..nd).rev().collect();
            let y = t.permute(v[0], &perm)?;
            let n: usize = shape.iter().product();
            let y = t.reshape(y, &[n])?;
            project(t, y, s)
        });
        check("narrow/concat", std::slice::from_ref(&x), |t, v| {
            let e = shape[nd - 1];
            let a = t.narrow(v[0], nd - 1, 0, 1)?;
            let b = t.narrow(v[0], nd - 1, 1, e - 1)?;
            let c = t.concat(&[b, a, v[0]], nd - 1)?;
            project(t, c, s)
        });
        check("mean", std::slice::from_ref(&x), |t, v| {
            let y = t.square(v[0]);
            Ok(t.mean(y))
        });
    }
}

#[test]
fn matmul_batched() {
    for (i, (sa, sb)) in [(vec![3, 4], vec![4, 2]), (vec![2, 3, 4], vec![4, 5]), (vec![2, 1, 3, 2], vec![3, 2, 4])]
        .into_iter()
        .enumerate()
    {
        let a = Tensor::randn(sa, 1.0, &mut rng(40 + i as u64));
        let b = Tensor::randn(sb, 1.0, &mut rng(50 + i as u64));
        check("matmul", &[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, i as u64)
        });
    }
}

#[test]
fn softmax_family_and_normalize() {
    for (i, shape) in SHAPES.iter().enumerate() {
        let s = i as u64 + 60;
        let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng(s));
        check("softmax", std::slice::from_ref(&x), |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, s)
        });
        check("log_softmax", std::slice::from_ref(&x), |t, v| {
            let y = t.log_softmax(v[0], 0)?;
            project(t, y, s)
        });
        check("layer norm", std::slice::from_ref(&x), |t, v| {
            let y = t.normalize(v[0], 1, 1e-5)?;
            project(t, y, s)
        });
        check("instance-style norm", std::slice::from_ref(&x), |t, v| {
            let y = t.normalize(v[0], 2, 1e-5)?;
            project(t, y, s)
        });
    }
}

#[test]
fn layer_norm_moments() {
    let x = Tensor::<f64>::randn(vec![2, 5, 8], 3.0, &mut rng(70));
    let mut t = Tape::new();
    let v = t.constant(x);
    let y = t.normalize(v, 1, 1e-12).unwrap();
    for row in t.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gather_rows() {
    let table = Tensor::randn(vec![4, 3], 1.0, &mut rng(80));
    check("gather_rows", &[table], |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2])?;
        project(t, y, 81)
    });
}

#[test]
fn conv3d_and_transpose() {
    for (i, (xs, stride, pad)) in [
        (vec![1, 2, 4, 4, 4], [1, 1, 1], [1, 1, 1]),
        (vec![2, 1, 5, 4, 3], [2, 1, 2], [1, 0, 1]),
        (vec![1, 2, 3, 3, 3], [1, 1, 1], [0, 0, 0]),
    ]
    .into_iter()
    .enumerate()
    {
        let s = 90 + i as u64;
        let x = Tensor::randn(xs.clone(), 1.0, &mut rng(s));
        let w = Tensor::randn(vec![3, xs[1], 3, 3, 3], 0.5, &mut rng(s + 1));
        check("conv3d", &[x, w], |t, v| {
            let y = t.conv3d(v[0], v[1], stride, pad)?;
            project(t, y, s)
        });
        let y = Tensor::randn(vec![1, 3, 2, 3, 2], 1.0, &mut rng(s + 2));
        let w = Tensor::randn(vec![3, 2, 2, 2, 2], 0.5, &mut rng(s + 3));
        check("conv_transpose3d", &[y, w], |t, v| {
            let z = t.conv_transpose3d(v[0], v[1], [2, 2, 2], [0, 0, 0], None)?;
            project(t, z, s)
        });
    }
}

#[test]
fn ssd_op() {
    for (i, (b, t_len, h, n, p, q)) in
        [(1, 8, 2, 3, 2, 3), (2, 5, 1, 2, 3, 8), (1, 13, 2, 4, 2, 4)].into_iter().enumerate()
    {
        let s = 100 + i as u64;
        let x = Tensor::randn(vec![b, t_len, h, p], 1.0, &mut rng(s));
        let la = Tensor::rand_uniform(vec![b, t_len, h], -0.7, -0.05, &mut rng(s + 1));
        let bm = Tensor::randn(vec![b, t_len, h, n], 1.0, &mut rng(s + 2));
        let cm = Tensor::randn(vec![b, t_len, h, n], 1.0, &mut rng(s + 3));
        check("ssd", &[x, la, bm, cm], |t, v| {
            let y = t.ssd(v[0], v[1], v[2], v[3], q)?;
            project(t, y, s)
        });
    }
}

#[test]
fn causal_conv1d() {
    let x = Tensor::randn(vec![2, 6, 3], 1.0, &mut rng(110));
    let w = Tensor::randn(vec![3, 4], 1.0, &mut rng(111));
    check("causal conv", &[x, w], |t, v| {
        let y = t.causal_depthwise_conv1d(v[0], v[1])?;
        project(t, y, 112)
    });
}

#[test]
fn mamba2_block_end_to_end() {
    for (gated, conv) in [(true, 4), (false, 0)] {
        let cfg = SsdConfig { state_dim: 4, num_heads: 2, chunk_len: 3, conv_width: conv, expansion: 2, gated };
        let mut store = ParamStore::<f64>::new();
        let block = Mamba2Block::new(&mut Init::new(&mut store, 5), "m", 8, &cfg).unwrap();
        let x = Tensor::randn(vec![1, 8, 8], 1.0, &mut rng(120));
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
        check("mamba2 block", &inputs, |t, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let y = block.forward(t, &bound, v[0])?;
            project(t, y, 121)
        });
    }
}
