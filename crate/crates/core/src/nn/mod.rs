//! Minimal layer toolkit: every layer owns its parameters and the activations it
//! needs for the backward pass, which is run explicitly in reverse order.

mod conv;
mod norm;
mod optim;

pub use conv::{Conv2d, ConvGeometry};
pub use norm::BatchNorm2d;
pub use optim::{Adam, AdamState};

use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Forward-pass behaviour switch for batch-norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable (or buffered) tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    /// Running statistics are stored as non-trainable params so checkpoints carry them.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            value,
            grad,
            shape,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(shape, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named parameter references in a stable traversal order.
pub type ParamRefs<'a, T> = Vec<(String, &'a Param<T>)>;
pub type ParamRefsMut<'a, T> = Vec<(String, &'a mut Param<T>)>;

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-style fan-in normal initialisation.
pub fn he_normal<T: Scalar>(len: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

/// Elementwise ReLU; remembers which units were active.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>) -> Tensor<T> {
        self.active.clear();
        self.active.reserve(x.data().len());
        for v in x.data_mut() {
            let on = *v > T::zero();
            if !on {
                *v = T::zero();
            }
            self.active.push(on);
        }
        x
    }

    pub fn backward<T: Scalar>(&self, mut dy: Tensor<T>) -> Tensor<T> {
        assert_eq!(dy.data().len(), self.active.len(), "relu backward before forward");
        for (g, &on) in dy.data_mut().iter_mut().zip(&self.active) {
            if !on {
                *g = T::zero();
            }
        }
        dy
    }
}

/// Inverted dropout. Identity in eval mode.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self {
            rate,
            rng,
            mask: None,
        }
    }

    pub fn forward(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = None;
            return x;
        }
        let scale = T::lit(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.data().len())
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        x.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, &m)| *v = *v * m);
        self.mask = Some(mask);
        x
    }

    pub fn backward(&self, mut dy: Tensor<T>) -> Tensor<T> {
        if let Some(mask) = &self.mask {
            dy.data_mut()
                .iter_mut()
                .zip(mask)
                .for_each(|(g, &m)| *g = *g * m);
        }
        dy
    }
}

/// Nearest-neighbour upscaling by an integer factor in both spatial axes.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, v) in out_row.iter_mut().enumerate() {
                    *v = row[ox / factor];
                }
            }
        }
    }
    out
}

/// Gradient of [`upsample_nearest`]: sums each `factor×factor` block.
pub fn upsample_nearest_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    assert!(oh % factor == 0 && ow % factor == 0);
    let (h, w) = (oh / factor, ow / factor);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = dy.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = (oy / factor) * w + ox / factor;
                    dst[i] = dst[i] + src[oy * ow + ox];
                }
            }
        }
    }
    out
}

/// conv → batch-norm → ReLU, the building block of the local extractor and toy backbone.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(geom, rng),
            bn: BatchNorm2d::new(geom.out_channels),
            relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.conv.forward(x);
        let y = self.bn.forward(y, mode);
        self.relu.forward(y)
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let g = self.relu.backward(dy);
        let g = self.bn.backward(g);
        self.conv.backward(g)
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.bn.params(&join(prefix, "bn"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }
}
