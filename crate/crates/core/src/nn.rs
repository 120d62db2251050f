//! Parameter storage and the small layer vocabulary the model is built from.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named parameter tensors. Order is registration order and is
/// stable across runs, which the checkpoint format relies on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Which parameters become differentiable leaves on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable parameters only.
    Train,
    /// Every parameter, frozen ones included (gradient checks).
    All,
    /// No gradients (inference).
    Inference,
}

/// Parameters bound as leaves on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param { name: name.into(), tensor, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, mode: BindMode) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let grad = match mode {
                    BindMode::Train => p.trainable,
                    BindMode::All => true,
                    BindMode::Inference => false,
                };
                let t = p.tensor.clone();
                if grad {
                    tape.leaf(t.requiring_grad())
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                .collect(),
        }
    }

    /// Flat copy of every parameter value.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }
}

/// Weight initializers. Values are drawn in `f64` so that both precision
/// modes start from the same numbers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    /// `N(0, 2/fan_in)`.
    He { fan_in: usize },
    Const(f64),
}

impl Init {
    pub fn tensor<T: Real>(self, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match self {
            Init::Uniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::He { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        Tensor::from_f64(shape.to_vec(), &data).expect("shape matches generated data")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        he: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let init = if he { Init::He { fan_in } } else { Init::Uniform { fan_in } };
        let w = store.add(format!("{name}.weight"), init.tensor(&[c_out, c_in, k, k], rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([c_out]), true));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, self.pad)
    }

    /// Same geometry as [`Conv2d::forward`] with mirrored instead of zero borders.
    pub fn forward_reflect<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let x = if self.pad > 0 { tape.pad_reflect(x, self.pad)? } else { x };
        tape.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, 0)
    }
}

/// `[L,in] -> [L,out]` with weight stored as `[in,out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), Init::Uniform { fan_in: d_in }.tensor(&[d_in, d_out], rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([d_out]), true));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// `[C,H,W] -> [H*W, C]`.
pub fn grid_to_seq<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, h, w) = match *tape.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("grid-to-seq", format!("{s:?}"))),
    };
    let flat = tape.reshape(x, [c, h * w])?;
    tape.transpose(flat)
}

/// `[H*W, C] -> [C,H,W]`.
pub fn seq_to_grid<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = tape.transpose(x)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, [c, h, w])
}
