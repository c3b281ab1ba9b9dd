//! Parameter containers shared by the backbone and the top-down module.

use rand::Rng;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Epsilon in layernorm and cosine-similarity denominators.
pub const NORM_EPS: f64 = 1e-8;

/// Named traversal over every tensor a structure owns.
///
/// Names are dotted paths (`blocks.0.attn.wq.weight`); `prefix` is prepended
/// verbatim, so callers pass `"topdown."` and the like.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn set_requires_grad(&mut self, flag: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(flag));
    }
}

/// Places named parameters on a tape and remembers which leaf each name
/// became, so gradients can be routed back after `backward`.
pub struct Binder<'t, T> {
    tape: &'t Tape<T>,
    preset: HashMap<String, Var<'t, T>>,
    bound: Vec<(String, Var<'t, T>)>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>) -> Self {
        Binder {
            tape,
            preset: HashMap::new(),
            bound: Vec::new(),
        }
    }

    /// Uses the given leaves instead of copying the named tensors.
    pub fn with_preset(
        tape: &'t Tape<T>,
        preset: impl IntoIterator<Item = (String, Var<'t, T>)>,
    ) -> Self {
        Binder {
            tape,
            preset: preset.into_iter().collect(),
            bound: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn leaf(&mut self, name: String, t: &Tensor<T>) -> Var<'t, T> {
        let v = match self.preset.get(&name) {
            Some(&v) => v,
            None => self.tape.leaf(t),
        };
        self.bound.push((name, v));
        v
    }

    /// Every `(name, leaf)` pair bound so far, in binding order.
    pub fn bound(&self) -> &[(String, Var<'t, T>)] {
        &self.bound
    }

    pub fn into_bound(self) -> Vec<(String, Var<'t, T>)> {
        self.bound
    }
}

/// Affine map `x · weight + bias` with `weight` stored `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Weights ~ N(0, std²), zero bias.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: Tensor::randn(&[d_in, d_out], std, rng),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn identity(d: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::eye(d),
            bias: bias.then(|| Tensor::zeros(&[d])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t, T>, prefix: &str) -> LinearVars<'t, T> {
        LinearVars {
            weight: b.leaf(format!("{prefix}weight"), &self.weight),
            bias: self
                .bias
                .as_ref()
                .map(|t| b.leaf(format!("{prefix}bias"), t)),
        }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}bias"), b);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars<'t, T> {
    pub weight: Var<'t, T>,
    pub bias: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> LinearVars<'t, T> {
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(self.weight, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t, T>, prefix: &str) -> LayerNormVars<'t, T> {
        LayerNormVars {
            gain: b.leaf(format!("{prefix}gain"), &self.gain),
            bias: b.leaf(format!("{prefix}bias"), &self.bias),
        }
    }
}

impl<T: Scalar> Parameters<T> for LayerNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}gain"), &self.gain);
        f(format!("{prefix}bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}gain"), &mut self.gain);
        f(format!("{prefix}bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars<'t, T> {
    pub gain: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Scalar> LayerNormVars<'t, T> {
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(self.gain, self.bias, T::of(NORM_EPS))
    }
}

/// Trainable low-rank update `up · down` added to a frozen base matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDelta<T> {
    /// `[r × d_out]`
    pub down: Tensor<T>,
    /// `[d_in × r]`
    pub up: Tensor<T>,
}

impl<T: Scalar> LowRankDelta<T> {
    /// `down` ~ N(0, 1/d_out), `up` = 0, so the delta starts at exactly zero.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "low-rank delta rank {rank} outside 1..={}",
                d_in.min(d_out)
            )));
        }
        Ok(LowRankDelta {
            down: Tensor::randn(&[rank, d_out], (1.0 / d_out as f64).sqrt(), rng),
            up: Tensor::zeros(&[d_in, rank]),
        })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    /// Dense `up · down`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        self.up.matmul(&self.down)
    }

    /// `base + up · down` on the tape.
    pub fn apply<'t>(
        &self,
        b: &mut Binder<'t, T>,
        prefix: &str,
        base: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let down = b.leaf(format!("{prefix}down"), &self.down);
        let up = b.leaf(format!("{prefix}up"), &self.up);
        base.add(up.matmul(down)?)
    }
}

impl<T: Scalar> Parameters<T> for LowRankDelta<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}down"), &self.down);
        f(format!("{prefix}up"), &self.up);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}down"), &mut self.down);
        f(format!("{prefix}up"), &mut self.up);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn low_rank_rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LowRankDelta::<f32>::init(4, 4, 0, &mut rng).is_err());
        assert!(LowRankDelta::<f32>::init(4, 4, 5, &mut rng).is_err());
        let d = LowRankDelta::<f32>::init(4, 4, 4, &mut rng).unwrap();
        assert_eq!(d.num_params(), 2 * 4 * 4);
        assert!(d.delta().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_names() {
        let l = Linear::<f32>::zeros(2, 3, true);
        let mut names = vec![];
        l.visit("fc.", &mut |n, _| names.push(n));
        assert_eq!(names, ["fc.weight", "fc.bias"]);
        assert_eq!(l.num_params(), 9);
    }
}
