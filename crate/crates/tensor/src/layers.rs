//! Parameterized layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its computation on a [`Tape`].

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `k x k` kernel with "same" padding for odd `k` at stride 1.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.insert_uniform(format!("{name}.weight"), vec![cout, cin, k, k], fan_in, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), vec![cout], fan_in, rng);
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert_uniform(format!("{name}.weight"), vec![outputs, inputs], inputs, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), vec![outputs], inputs, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Largest of 8, 4, 2, 1 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        Self { gamma, beta, groups: default_groups(channels) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups, GROUP_NORM_EPS)
    }
}

/// Sinusoidal timestep features followed by a two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, out: usize, rng: &mut R) -> Self {
        Self {
            dim,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, out, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), out, out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, steps: &[f64]) -> Result<Var> {
        let e = tape.input(crate::tensor::timestep_embedding(steps, self.dim))?;
        let h = self.fc1.forward(tape, store, e)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// GroupNorm-SiLU-Conv residual block with an additive time projection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time: Linear::new(store, &format!("{name}.time"), temb, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(h)?;
        let h = self.conv1.forward(tape, store, h)?;
        let t = tape.silu(temb)?;
        let t = self.time.forward(tape, store, t)?;
        let h = tape.add_channel(h, t)?;
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, store, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}
