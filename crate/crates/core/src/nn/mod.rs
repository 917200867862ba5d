//! Layer-wise differentiable building blocks.
//!
//! Every layer exposes a `forward` that returns its output together with a
//! cache, and a `backward` that consumes the cache, accumulates parameter
//! gradients into [`Param::grad`] and returns the gradient with respect to
//! the layer input. Layers are generic over [`Real`] so that the same code
//! runs in `f32` for training and in `f64` for gradient checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub mod activation;
pub mod attention;
pub mod conv;
pub mod embedding;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod norm;

pub use activation::Dropout;
pub use attention::MultiHeadAttention;
pub use conv::{Conv2d, MaxPool2, TemporalConv1d};
pub use embedding::Embedding;
pub use linear::{Linear, Mlp, MlpCache};
pub use loss::{label_smoothed_ce, log_softmax_rows, smoothed_ce_with_logits, smoothed_target_entropy};
pub use norm::{BatchNorm, LayerNorm};

/// Element type of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self;

    fn f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// A tensor owned by a layer: either a trainable weight or a buffer
/// (normalization running statistics) that never receives gradients.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: ArrayD<S>,
    pub grad: Option<ArrayD<S>>,
    pub frozen: bool,
    pub buffer: bool,
}

impl<S: Real> Param<S> {
    pub fn new(value: ArrayD<S>) -> Self {
        Param {
            value,
            grad: None,
            frozen: false,
            buffer: false,
        }
    }

    pub fn buffer(value: ArrayD<S>) -> Self {
        Param {
            value,
            grad: None,
            frozen: false,
            buffer: true,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn trainable(&self) -> bool {
        !self.frozen && !self.buffer
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    /// Frozen parameters and buffers never allocate one.
    pub fn accumulate<D: ndarray::Dimension>(&mut self, g: ndarray::ArrayView<S, D>) {
        if !self.trainable() {
            return;
        }
        let g = g.into_dyn();
        debug_assert_eq!(g.shape(), self.value.shape());
        match &mut self.grad {
            Some(buf) => *buf += &g,
            None => self.grad = Some(g.to_owned()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Visitor over the named tensors of a model.
pub trait Module<S: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, p| p.frozen = frozen);
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if !p.buffer {
                n += p.len()
            }
        });
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Forward-pass context: training flag plus the generator that drives
/// dropout masks.
pub struct Ctx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(rng: ChaCha8Rng) -> Self {
        Ctx { train: true, rng }
    }

    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

/// Normal(0, std) initialization from a seeded generator.
pub fn randn<S: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

/// Uniform(-bound, bound) initialization.
pub fn uniform<S: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::lit(rng.random_range(-bound..=bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}
