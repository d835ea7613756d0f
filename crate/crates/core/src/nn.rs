//! Parameterised layers. Each layer is a name prefix plus hyper-parameters;
//! values live in a [`ParamStore`] under `<prefix>.weight`, `<prefix>.bias`, ...

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding.
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self { prefix: prefix.into(), in_ch, out_ch, kernel, stride, pad: kernel / 2, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.he(&self.weight_name(), &self.weight_shape(), fan_in, rng);
        if self.bias {
            store.zeros(&self.bias_name(), &[self.out_ch, 1, 1]);
        }
    }

    pub fn init_normal(&self, store: &mut ParamStore, std: f64, bias: f64, rng: &mut impl Rng) {
        store.normal(&self.weight_name(), &self.weight_shape(), std, rng);
        if self.bias {
            store.constant(&self.bias_name(), &[self.out_ch, 1, 1], bias);
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(&self.weight_name());
        let y = g.conv2d(x, w, self.stride, self.pad);
        if self.bias {
            let b = g.param(&self.bias_name());
            g.add(y, b)
        } else {
            y
        }
    }
}

/// `y = x W + b` on `[K, in]` rows; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, inp: usize, out: usize) -> Self {
        Self { prefix: prefix.into(), inp, out }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.he(&self.weight_name(), &[self.inp, self.out], self.inp, rng);
        store.zeros(&self.bias_name(), &[1, self.out]);
    }

    pub fn init_normal(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) {
        store.normal(&self.weight_name(), &[self.inp, self.out], std, rng);
        store.zeros(&self.bias_name(), &[1, self.out]);
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(&self.weight_name());
        let b = g.param(&self.bias_name());
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

/// Group normalisation with per-channel affine terms.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub prefix: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(prefix: impl Into<String>, channels: usize, groups: usize) -> Self {
        Self { prefix: prefix.into(), channels, groups }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.constant(&format!("{}.gamma", self.prefix), &[self.channels, 1, 1], 1.0);
        store.zeros(&format!("{}.beta", self.prefix), &[self.channels, 1, 1]);
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.group_norm(x, self.groups, Self::EPS);
        let gamma = g.param(&format!("{}.gamma", self.prefix));
        let beta = g.param(&format!("{}.beta", self.prefix));
        let y = g.mul(n, gamma);
        g.add(y, beta)
    }
}

/// Single-direction GRU cell over `[K, input]` rows.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self { prefix: prefix.into(), input, hidden }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h3 = 3 * self.hidden;
        store.uniform(&format!("{}.w_ih", self.prefix), &[self.input, h3], bound, rng);
        store.uniform(&format!("{}.w_hh", self.prefix), &[self.hidden, h3], bound, rng);
        store.uniform(&format!("{}.b_ih", self.prefix), &[1, h3], bound, rng);
        store.uniform(&format!("{}.b_hh", self.prefix), &[1, h3], bound, rng);
    }

    /// One step: gates ordered (reset, update, candidate).
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let w_ih = g.param(&format!("{}.w_ih", self.prefix));
        let w_hh = g.param(&format!("{}.w_hh", self.prefix));
        let b_ih = g.param(&format!("{}.b_ih", self.prefix));
        let b_hh = g.param(&format!("{}.b_hh", self.prefix));
        let gi = g.matmul(x, w_ih);
        let gi = g.add(gi, b_ih);
        let gh = g.matmul(h, w_hh);
        let gh = g.add(gh, b_hh);

        let (ir, iz, inn) = (g.slice(gi, 1, 0, hd), g.slice(gi, 1, hd, hd), g.slice(gi, 1, 2 * hd, hd));
        let (hr, hz, hn) = (g.slice(gh, 1, 0, hd), g.slice(gh, 1, hd, hd), g.slice(gh, 1, 2 * hd, hd));
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(inn, rn);
        let n = g.tanh(n);
        // h' = (1 - z) * n + z * h
        let one_minus_z = g.one_minus(z);
        let a = g.mul(one_minus_z, n);
        let b = g.mul(z, h);
        g.add(a, b)
    }

    /// Run over a sequence, returning the final hidden state.
    pub fn run<'a>(&self, g: &mut Graph<'_>, seq: impl Iterator<Item = &'a Var>, rows: usize) -> Var {
        let mut h = g.input(crate::tensor::Tensor::zeros(&[rows, self.hidden]));
        for &x in seq {
            h = self.step(g, x, h);
        }
        h
    }
}
