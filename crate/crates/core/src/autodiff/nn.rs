use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Glorot-uniform `[fan_in, fan_out]` weight.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -a, a, rng)
}

/// Affine map `x W + b` over rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add(format!("{name}.w1"), xavier(d_in, d_hidden, rng)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[d_hidden])),
            w2: store.add(format!("{name}.w2"), xavier(d_hidden, d_out, rng)),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        mlp2(tape, x, w1, b1, w2, b2)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Sets every weight and bias to zero, making the map identically zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.ids() {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// `relu(x W1 + b1) W2 + b2`, row-wise.
pub fn mlp2(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var, TensorError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_bias(o, b2)
}

/// Layer-norm gain (ones) and bias (zeros).
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}
