//! Parameterized building blocks. Each block owns only [`ParamId`]s; values live in a
//! [`ParamStore`] so that several networks can share one optimizer.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain * sqrt(3 / fan_in)` (unit-variance preserving for gain 1).
    Scaled(f64),
    Zeros,
}

fn init_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Scaled(gain) => {
            let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
            Tensor::new(shape, data).expect("sized from shape")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Elu => g.elu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), init_tensor(&[fan_in, fan_out], fan_in, init, rng))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Fully connected stack with an activation between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output. The output layer uses `out_init`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let gain = match activation {
            Activation::Relu | Activation::Elu => 2f64.sqrt(),
            Activation::Tanh => 1.0,
        };
        let mut layers = Vec::with_capacity(sizes.len().saturating_sub(1));
        for (i, pair) in sizes.windows(2).enumerate() {
            let last = i + 2 == sizes.len();
            let init = if last { out_init } else { Init::Scaled(gain) };
            layers.push(Linear::new(store, &format!("{name}.{i}"), pair[0], pair[1], init, rng)?);
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < n {
                x = self.activation.apply(g, x);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, Init::Scaled(2f64.sqrt()), rng),
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Single-layer GRU run over a `[B, L, I]` sequence.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_in: ParamId,
    pub w_hid: ParamId,
    pub b_in: ParamId,
    pub b_hid: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_in = store.add(
            &format!("{name}.w_in"),
            init_tensor(&[input, 3 * hidden], input, Init::Scaled(1.0), rng),
        )?;
        let w_hid = store.add(
            &format!("{name}.w_hid"),
            init_tensor(&[hidden, 3 * hidden], hidden, Init::Scaled(1.0), rng),
        )?;
        let b_in = store.add(&format!("{name}.b_in"), Tensor::zeros(&[3 * hidden]))?;
        let b_hid = store.add(&format!("{name}.b_hid"), Tensor::zeros(&[3 * hidden]))?;
        Ok(Self {
            w_in,
            w_hid,
            b_in,
            b_hid,
            hidden,
        })
    }

    /// Runs from a zero state and returns the final hidden state `[B, H]`.
    pub fn forward_seq<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        let (batch, len, input) = (shape[0], shape[1], shape[2]);
        let w_in = g.param(store, self.w_in);
        let w_hid = g.param(store, self.w_hid);
        let b_in = g.param(store, self.b_in);
        let b_hid = g.param(store, self.b_hid);
        let mut h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        for t in 0..len {
            let x = g.slice(seq, 1, t, t + 1)?;
            let x = g.reshape(x, &[batch, input])?;
            h = g.gru_cell(x, h, w_in, w_hid, b_in, b_hid)?;
        }
        Ok(h)
    }
}

/// Multi-head self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, Init::Scaled(1.0), rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, Init::Scaled(1.0), rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, Init::Scaled(1.0), rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, Init::Scaled(1.0), rng)?,
            heads,
        })
    }

    /// `x: [B, L, D] -> [B, L, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let a = g.scaled_dot_attention(q, k, v, self.heads)?;
        let o = self.out.forward(g, store, a)?;
        g.add(x, o)
    }
}
