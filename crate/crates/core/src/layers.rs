//! Reusable parameterised building blocks: affine maps, layer norm, GRU cell,
//! two-layer perceptron.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[fan_in, fan_out], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gain), p.get(self.bias))
    }
}

/// Gate weights of a GRU cell. Input maps `w_*` and recurrent maps `u_*` are
/// `D×D`, biases are `D`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let mut w = |s: &str, store: &mut ParamStore| {
            store.add(format!("{name}.{s}"), fan_in_uniform(&[dim, dim], dim, rng))
        };
        let w_z = w("w_z", store);
        let w_r = w("w_r", store);
        let w_n = w("w_n", store);
        let u_z = w("u_z", store);
        let u_r = w("u_r", store);
        let u_n = w("u_n", store);
        Self {
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z: store.add(format!("{name}.b_z"), Tensor::zeros(&[dim])),
            b_r: store.add(format!("{name}.b_r"), Tensor::zeros(&[dim])),
            b_n: store.add(format!("{name}.b_n"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var, state: Var) -> Result<Var> {
        gru_cell(
            g,
            input,
            state,
            &GruVars {
                w_z: p.get(self.w_z),
                w_r: p.get(self.w_r),
                w_n: p.get(self.w_n),
                u_z: p.get(self.u_z),
                u_r: p.get(self.u_r),
                u_n: p.get(self.u_n),
                b_z: p.get(self.b_z),
                b_r: p.get(self.b_r),
                b_n: p.get(self.b_n),
            },
        )
    }
}

/// GRU weights already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_n: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_n: Var,
}

/// Row-wise GRU update with the reset gate applied to the recurrent
/// projection before the candidate nonlinearity:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// n  = tanh(x W_n + r ⊙ (h U_n) + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell(g: &mut Graph, input: Var, state: Var, w: &GruVars) -> Result<Var> {
    if g.shape(input) != g.shape(state) {
        return Err(Error::shape("gru_cell", g.shape(input), g.shape(state)));
    }
    let d = *g.shape(input).last().ok_or(Error::EmptyDim("gru_cell"))?;
    for v in [w.w_z, w.w_r, w.w_n, w.u_z, w.u_r, w.u_n] {
        if g.shape(v) != [d, d] {
            return Err(Error::shape("gru_cell", &[d, d], g.shape(v)));
        }
    }
    for v in [w.b_z, w.b_r, w.b_n] {
        if g.shape(v) != [d] {
            return Err(Error::shape("gru_cell", &[d], g.shape(v)));
        }
    }
    let gate = |g: &mut Graph, wx: Var, uh: Var, b: Var| -> Result<Var> {
        let a = g.matmul(input, wx)?;
        let c = g.matmul(state, uh)?;
        let s = g.add(a, c)?;
        let s = g.add(s, b)?;
        Ok(g.sigmoid(s))
    };
    let z = gate(g, w.w_z, w.u_z, w.b_z)?;
    let r = gate(g, w.w_r, w.u_r, w.b_r)?;
    let xn = g.matmul(input, w.w_n)?;
    let hn = g.matmul(state, w.u_n)?;
    let rhn = g.mul(r, hn)?;
    let pre = g.add(xn, rhn)?;
    let pre = g.add(pre, w.b_n)?;
    let n = g.tanh(pre);
    // h' = n + z ⊙ (h - n)
    let diff = g.sub(state, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

/// `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}
