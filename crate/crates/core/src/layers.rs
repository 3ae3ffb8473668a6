//! Parameterised building blocks shared by the network modules.

use rand::Rng;

use crate::error::Result;
use crate::numcore::{xavier, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// `x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_init(store, name, xavier(rng, fan_in, fan_out, &[fan_in, fan_out]), Tensor::zeros(&[fan_out]))
    }

    pub fn with_init(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.weight"), w)?,
            b: store.add(format!("{name}.bias"), b)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let n = tape.layer_norm(x, axis, NORM_EPS)?;
        let n = tape.mul(n, p[self.gamma])?;
        tape.add(n, p[self.beta])
    }
}

/// Two-layer perceptron `Linear → relu → Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, p, h)
    }
}
