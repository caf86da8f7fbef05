//! Parameterised building blocks. Each layer owns only parameter ids; values
//! live in a shared [`ParamStore`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::ops::ConvCfg;
use crate::params::{init_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        gain: f32,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init_uniform(rng, &[output, input], input, gain),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cfg: ConvCfg,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        cfg: ConvCfg,
        gain: f32,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            init_uniform(rng, &[output, input, kernel, kernel], fan_in, gain),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self { w, b, cfg }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.cfg)
    }
}

/// Single-layer LSTM with fused gate weights (gate order i, f, g, o).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub hidden: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wx = store.add(
            format!("{name}.wx"),
            init_uniform(rng, &[4 * hidden, input], input, 0.5),
        );
        let wh = store.add(
            format!("{name}.wh"),
            init_uniform(rng, &[4 * hidden, hidden], hidden, 0.5),
        );
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), bias);
        Self { hidden, wx, wh, b }
    }

    /// Runs the sequence `xs` (each `[N, input]`) from a zero state and returns
    /// the final hidden state `[N, hidden]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "empty LSTM sequence");
        let n = g.value(xs[0]).dim(0);
        let hd = self.hidden;
        let wx = g.param(store, self.wx);
        let wh = g.param(store, self.wh);
        let b = g.param(store, self.b);
        let zero = g.constant(Tensor::zeros(&[4 * hd]));
        let mut h = g.constant(Tensor::zeros(&[n, hd]));
        let mut c = g.constant(Tensor::zeros(&[n, hd]));
        for &x in xs {
            let gx = g.linear(x, wx, b);
            let gh = g.linear(h, wh, zero);
            let gates = g.add(gx, gh);
            let i = g.slice(gates, 1, 0, hd);
            let f = g.slice(gates, 1, hd, hd);
            let cand = g.slice(gates, 1, 2 * hd, hd);
            let o = g.slice(gates, 1, 3 * hd, hd);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let fc = g.mul(f, c);
            let ic = g.mul(i, cand);
            c = g.add(fc, ic);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
        }
        h
    }
}
