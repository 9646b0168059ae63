//! Named parameters and the small layers the network is assembled from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Leaky ReLU slope used in every residual block.
pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Ordered, named parameter arrays. Order is creation order, which is a pure
/// function of the architecture config.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let cur = &mut self.params[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        cur.value = value;
        Ok(())
    }

    /// Register every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect() }
    }
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap variables already on a tape, in parameter-store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded parameter initializer.
pub struct Init<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub rng: ChaCha8Rng,
}

impl<'a, F: Element> Init<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He/Kaiming normal scaled by fan-in (leaky-ReLU gain).
    pub fn he(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        self.store.add(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

/// `y = x · W (+ b)` over the last axis; `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Element>(
        init: &mut Init<'_, F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        bound: Option<f64>,
    ) -> Self {
        let bound = bound.unwrap_or(1.0 / (d_in.max(1) as f64).sqrt());
        let weight = init.uniform(&format!("{name}.weight"), vec![d_in, d_out], bound);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), vec![d_out]));
        Self { weight, bias }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = init.he(&format!("{name}.weight"), vec![cout, cin, kernel[0], kernel[1], kernel[2]], fan_in);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), vec![cout]));
        let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        Self { weight, bias, stride, pad }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv3d(x, p.var(self.weight), self.stride, self.pad)?;
        add_channel_bias(tape, p, self.bias, y)
    }
}

/// Transposed convolution with kernel = stride (non-overlapping upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: [usize; 3],
}

impl ConvTranspose3d {
    pub fn new<F: Element>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        bias: bool,
    ) -> Self {
        // kernel layout [Cout_of_adjoint = cin, Cin_of_adjoint = cout, ...]
        let weight = init.he(&format!("{name}.weight"), vec![cin, cout, stride[0], stride[1], stride[2]], cin);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), vec![cout]));
        Self { weight, bias, stride }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv_transpose3d(x, p.var(self.weight), self.stride, [0; 3], None)?;
        add_channel_bias(tape, p, self.bias, y)
    }
}

fn add_channel_bias<F: Element>(tape: &mut Tape<F>, p: &Bound, bias: Option<ParamId>, y: Var) -> Result<Var> {
    match bias {
        Some(b) => {
            let c = tape.shape(p.var(b))[0];
            let bb = tape.reshape(p.var(b), &[1, c, 1, 1, 1])?;
            tape.add(y, bb)
        }
        None => Ok(y),
    }
}

/// Per-sample, per-channel normalization over the spatial axes of
/// `[B, C, H, W, D]`, with a per-channel affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, channels: usize) -> Self {
        let gamma = init.ones(&format!("{name}.gamma"), vec![channels]);
        let beta = init.zeros(&format!("{name}.beta"), vec![channels]);
        Self { gamma, beta }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.normalize(x, 3, F::from_f64_lossy(NORM_EPS))?;
        let c = tape.shape(p.var(self.gamma))[0];
        let g = tape.reshape(p.var(self.gamma), &[1, c, 1, 1, 1])?;
        let b = tape.reshape(p.var(self.beta), &[1, c, 1, 1, 1])?;
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }
}

/// Normalization over the last axis with affine scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        let gamma = init.ones(&format!("{name}.gamma"), vec![dim]);
        let beta = init.zeros(&format!("{name}.beta"), vec![dim]);
        Self { gamma, beta }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.normalize(x, 1, F::from_f64_lossy(NORM_EPS))?;
        let y = tape.mul(y, p.var(self.gamma))?;
        tape.add(y, p.var(self.beta))
    }
}

/// `x + branch(x)`, branch = conv → IN → leaky ReLU → conv → IN.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub norm1: InstanceNorm,
    pub conv2: Conv3d,
    pub norm2: InstanceNorm,
}

impl ResidualBlock {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            conv1: Conv3d::new(init, &format!("{name}.conv1"), channels, channels, kernel, [1; 3], false),
            norm1: InstanceNorm::new(init, &format!("{name}.norm1"), channels),
            conv2: Conv3d::new(init, &format!("{name}.conv2"), channels, channels, kernel, [1; 3], false),
            norm2: InstanceNorm::new(init, &format!("{name}.norm2"), channels),
        }
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = self.norm1.forward(tape, p, h)?;
        let h = tape.leaky_relu(h, F::from_f64_lossy(LEAKY_SLOPE));
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.norm2.forward(tape, p, h)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.conv1.weight, self.norm1.gamma, self.norm1.beta, self.conv2.weight, self.norm2.gamma, self.norm2.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 3);
        let block = ResidualBlock::new(&mut init, "rb", 2, [3; 3]);
        for id in block.params() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let mut rng = rand::rng();
        let x = Tensor::randn(vec![1, 2, 4, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, vx).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn same_seed_same_params() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut init = Init::new(&mut store, 11);
            Conv3d::new(&mut init, "c", 2, 4, [3; 3], [1; 3], true);
            Linear::new(&mut init, "l", 4, 5, false, None);
            store
        };
        let (a, b) = (build(), build());
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}
