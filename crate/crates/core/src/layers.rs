//! Parameterised building blocks shared by the network modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub(crate) fn uniform<R: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::lit(rng.gen_range(-bound..bound)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// He-uniform initialised `k`x`k` convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform(rng, &[cout, cin, k, k], bound))?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom })
    }

    pub fn pointwise<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(store, rng, name, cin, cout, 1, ConvGeom::same(1, 1), bias)
    }

    /// Multiplies the initial kernel by `factor`.
    pub fn rescale<R: Real>(self, store: &mut ParamStore<R>, factor: f64) -> Self {
        let w = store.tensor(self.weight).map(|v| v * R::lit(factor));
        store.get_mut(self.weight).tensor = w;
        self
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let y = tape.conv2d(x, w, self.geom)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.channel_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Row-vector affine map `x[M,in] -> x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = (3.0 / input as f64).sqrt();
        Ok(Self {
            weight: store.register(format!("{name}.weight"), uniform(rng, &[input, output], bound))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[output]))?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.row_bias(y, b)
    }
}

/// Bias-free projection `x[M,in] -> x W`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub weight: ParamId,
}

impl Projection {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = (3.0 / input as f64).sqrt();
        Ok(Self {
            weight: store.register(format!("{name}.weight"), uniform(rng, &[input, output], bound))?,
        })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        tape.matmul(x, w)
    }
}

/// Flattens `[C,H,W]` to the token matrix `[H*W, C]`.
pub fn to_tokens<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).chw()?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<R: Real>(tape: &mut Tape<R>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let t = tape.transpose(tokens)?;
    let c = tape.value(t).shape()[0];
    tape.reshape(t, &[c, h, w])
}
