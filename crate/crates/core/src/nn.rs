//! Small layer building blocks over the tape.

use rand_chacha::ChaCha8Rng;

use crate::params::{xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, inp, out));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(1, out)));
        Self { weight, bias }
    }

    pub fn without_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, inp, out));
        Self { weight, bias: None }
    }

    /// Random weight with every bias entry set to `bias`.
    pub fn with_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        out: usize,
        bias: T,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, inp, out));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::filled(1, out, bias)));
        Self { weight, bias }
    }

    /// Zero weight and a constant bias, used for heads that must start at a fixed output.
    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        bias: Vec<T>,
    ) -> Self {
        let out = bias.len();
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(inp, out));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::from_vec(1, out, bias)));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Fixed sinusoidal table for integer positions `0..len`.
pub fn sinusoid_table<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let f = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let a = pos as f64 * f;
            t.data[pos * dim + 2 * i] = T::lit(a.sin());
            t.data[pos * dim + 2 * i + 1] = T::lit(a.cos());
        }
    }
    t
}
