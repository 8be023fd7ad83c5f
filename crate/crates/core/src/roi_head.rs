//! ROI weight prediction: a pointwise regression head over local (and optionally
//! context) features, followed by linear or softmax normalisation over the image.

use crate::maps::{DimMismatch, RoiLogits, ScalarMap};
use crate::nn::{join, Conv2d, ConvGeometry, Module, ParamRefs, ParamRefsMut, Relu};
use crate::tensor::{concat_channels, split_channels, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Below this logit mass the linear normaliser returns the uniform map.
pub const LINEAR_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RoiError {
    #[error("negative ROI logit {value} at ({x}, {y}); linear normalisation needs x >= 0")]
    NegativeLogit { x: usize, y: usize, value: f64 },
    #[error(transparent)]
    Dims(#[from] DimMismatch),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiNormalizer {
    #[default]
    Linear,
    Softmax,
}

impl FromStr for RoiNormalizer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "softmax" => Ok(Self::Softmax),
            other => Err(format!("unknown ROI normalizer `{other}` (expected linear|softmax)")),
        }
    }
}

impl fmt::Display for RoiNormalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Softmax => "softmax",
        })
    }
}

impl RoiNormalizer {
    pub fn apply<T: Scalar>(self, x: &[T]) -> Vec<T> {
        match self {
            Self::Linear => linear_weights(x),
            Self::Softmax => softmax_weights(x),
        }
    }

    /// Gradient w.r.t. the logits given the forward output `r` and upstream `dr`.
    pub fn backward<T: Scalar>(self, x: &[T], r: &[T], dr: &[T]) -> Vec<T> {
        match self {
            Self::Linear => linear_backward(x, r, dr),
            Self::Softmax => softmax_backward(r, dr),
        }
    }
}

/// Non-negative weights summing to one, on the same grid as the image.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMap<T>(ScalarMap<T>);

impl<T: Scalar> RoiMap<T> {
    /// Uniform weights `1 / (M·N)`.
    pub fn uniform(width: usize, height: usize) -> Self {
        Self(ScalarMap::filled(
            width,
            height,
            T::one() / T::from_usize(width * height).unwrap(),
        ))
    }

    /// Wraps weights that are already normalised (e.g. read back from disk).
    pub fn from_weights(map: ScalarMap<T>) -> Self {
        Self(map)
    }

    /// Crops to the top-left window and rescales so the weights sum to one again.
    pub fn crop_renormalized(&self, width: usize, height: usize) -> Self {
        let cropped = self.0.crop(width, height);
        Self(ScalarMap::new(width, height, linear_weights(cropped.values())))
    }

    pub fn map(&self) -> &ScalarMap<T> {
        &self.0
    }
    pub fn into_map(self) -> ScalarMap<T> {
        self.0
    }
    pub fn values(&self) -> &[T] {
        self.0.values()
    }
    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

fn linear_weights<T: Scalar>(x: &[T]) -> Vec<T> {
    let total: T = x.iter().copied().sum();
    if total <= T::lit(LINEAR_NORM_EPS) {
        let u = T::one() / T::from_usize(x.len()).unwrap();
        return vec![u; x.len()];
    }
    x.iter().map(|&v| v / total).collect()
}

fn linear_backward<T: Scalar>(x: &[T], r: &[T], dr: &[T]) -> Vec<T> {
    let total: T = x.iter().copied().sum();
    if total <= T::lit(LINEAR_NORM_EPS) {
        return vec![T::zero(); x.len()];
    }
    let dot: T = r.iter().zip(dr).map(|(a, b)| *a * *b).sum();
    dr.iter().map(|&g| (g - dot) / total).collect()
}

fn softmax_weights<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_backward<T: Scalar>(s: &[T], ds: &[T]) -> Vec<T> {
    let dot: T = s.iter().zip(ds).map(|(a, b)| *a * *b).sum();
    s.iter().zip(ds).map(|(&si, &g)| si * (g - dot)).collect()
}

/// r = x / Σx, with the uniform map when Σx ≤ 1e-6.
pub fn linear_normalize<T: Scalar>(x: &RoiLogits<T>) -> Result<RoiMap<T>, RoiError> {
    if let Some(i) = x.values().iter().position(|v| *v < T::zero()) {
        return Err(RoiError::NegativeLogit {
            x: i % x.width(),
            y: i / x.width(),
            value: x.values()[i].to_f64().unwrap(),
        });
    }
    Ok(RoiMap(ScalarMap::new(
        x.width(),
        x.height(),
        linear_weights(x.values()),
    )))
}

/// s = exp(x) / Σexp(x), evaluated with the maximum subtracted.
pub fn softmax_normalize<T: Scalar>(x: &RoiLogits<T>) -> RoiMap<T> {
    RoiMap(ScalarMap::new(
        x.width(),
        x.height(),
        softmax_weights(x.values()),
    ))
}

/// Layer widths of a three-layer pointwise regression head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadWidths {
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for HeadWidths {
    fn default() -> Self {
        Self {
            hidden1: 64,
            hidden2: 32,
        }
    }
}

/// 1×1 conv → ReLU → 1×1 conv → ReLU → 1×1 conv → ReLU.
///
/// Same layout as the MOS head minus dropout; the final ReLU keeps logits
/// non-negative for the linear normaliser.
#[derive(Clone, Debug)]
pub struct RoiHead<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
    relus: [Relu; 3],
    local_channels: usize,
}

impl<T: Scalar> RoiHead<T> {
    pub fn new(
        local_channels: usize,
        context_channels: usize,
        widths: HeadWidths,
        rng: &mut impl Rng,
    ) -> Self {
        let cin = local_channels + context_channels;
        Self {
            conv1: Conv2d::new(ConvGeometry::new(cin, widths.hidden1, 1), rng),
            conv2: Conv2d::new(ConvGeometry::new(widths.hidden1, widths.hidden2, 1), rng),
            conv3: Conv2d::new(ConvGeometry::new(widths.hidden2, 1, 1), rng),
            relus: Default::default(),
            local_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.geometry().in_channels
    }

    /// Unnormalised logits `[B, 1, H, W]` from local features and optional context.
    pub fn forward(
        &mut self,
        local: &Tensor<T>,
        context: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, DimMismatch> {
        let input = match context {
            Some(ctx) => {
                if ctx.spatial() != local.spatial() || ctx.batch() != local.batch() {
                    return Err(DimMismatch {
                        expected: (local.width(), local.height()),
                        actual: (ctx.width(), ctx.height()),
                    });
                }
                concat_channels(local, ctx)
            }
            None => local.clone(),
        };
        assert_eq!(input.channels(), self.in_channels(), "ROI head input channels");
        let h = self.relus[0].forward(self.conv1.forward(input));
        let h = self.relus[1].forward(self.conv2.forward(h));
        Ok(self.relus[2].forward(self.conv3.forward(h)))
    }

    /// Returns gradients for (local, context).
    pub fn backward(&mut self, dlogits: Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
        let g = self.conv3.backward(self.relus[2].backward(dlogits));
        let g = self.conv2.backward(self.relus[1].backward(g));
        let g = self.conv1.backward(self.relus[0].backward(g));
        if g.channels() == self.local_channels {
            (g, None)
        } else {
            let (a, b) = split_channels(&g, self.local_channels);
            (a, Some(b))
        }
    }

    /// Logits for a single image as a map.
    pub fn regress_roi(
        &mut self,
        local: &Tensor<T>,
        context: Option<&Tensor<T>>,
    ) -> Result<RoiLogits<T>, DimMismatch> {
        let logits = self.forward(local, context)?;
        Ok(ScalarMap::from_plane(&logits, 0, 0))
    }
}

impl<T: Scalar> Module<T> for RoiHead<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.conv1.params(&join(prefix, "conv1"), out);
        self.conv2.params(&join(prefix, "conv2"), out);
        self.conv3.params(&join(prefix, "conv3"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.conv1.params_mut(&join(prefix, "conv1"), out);
        self.conv2.params_mut(&join(prefix, "conv2"), out);
        self.conv3.params_mut(&join(prefix, "conv3"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(values: &[f64], width: usize) -> RoiLogits<f64> {
        ScalarMap::new(width, values.len() / width, values.to_vec())
    }

    #[test]
    fn linear_two_element_example() {
        let r = linear_normalize(&map(&[1.0, 3.0], 2)).unwrap();
        assert_eq!(r.values(), &[0.25, 0.75]);
    }

    #[test]
    fn linear_equal_logits_give_uniform() {
        let r = linear_normalize(&ScalarMap::filled(4, 3, 2.5f64)).unwrap();
        for v in r.values() {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_zero_logits_fall_back_to_uniform() {
        let r = linear_normalize(&ScalarMap::filled(5, 2, 0.0f64)).unwrap();
        assert_eq!(r, RoiMap::uniform(5, 2));
        let tiny = linear_normalize(&map(&[1e-8, 0.0, 0.0, 0.0], 2)).unwrap();
        assert_eq!(tiny.values(), &[0.25; 4]);
    }

    #[test]
    fn linear_rejects_negative_logits() {
        let err = linear_normalize(&map(&[1.0, -0.5, 2.0, 0.0], 2)).unwrap_err();
        assert_eq!(err, RoiError::NegativeLogit { x: 1, y: 0, value: -0.5 });
    }

    #[test]
    fn linear_is_scale_invariant() {
        let x = map(&[0.2, 1.5, 3.0, 0.7], 2);
        let x2 = map(&[0.4, 3.0, 6.0, 1.4], 2);
        assert_eq!(linear_normalize(&x).unwrap(), linear_normalize(&x2).unwrap());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_normalize(&map(&[0.0, 0.0], 2)).values(), &[0.5, 0.5]);
        let s = softmax_normalize(&map(&[2f64.ln(), 0.0], 2));
        // exp(ln 2) / (exp(ln 2) + exp(0)) = 2 / 3
        assert!((s.values()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.values()[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = softmax_normalize(&map(&[2f64.ln() + 7.5, 7.5], 2));
        for (a, b) in s.values().iter().zip(shifted.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let s = softmax_normalize(&map(&[1000.0, 1000.0, -1000.0, 999.0], 2));
        assert!(s.values().iter().all(|v| v.is_finite()));
        assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crop_renormalized_sums_to_one() {
        let r = linear_normalize(&ScalarMap::from_fn(8, 8, |x, y| (x * y) as f64 + 1.0)).unwrap();
        let c = r.crop_renormalized(5, 3);
        assert_eq!(c.dims(), (5, 3));
        assert!((c.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_outputs_nonnegative_logits_and_zero_for_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = RoiHead::<f64>::new(4, 2, HeadWidths::default(), &mut rng);
        let local = Tensor::from_vec([1, 4, 8, 8], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let ctx = Tensor::from_vec([1, 2, 8, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let logits = head.regress_roi(&local, Some(&ctx)).unwrap();
        assert_eq!(logits.dims(), (8, 8));
        assert!(logits.values().iter().all(|v| *v >= 0.0));

        let mut params = Vec::new();
        head.params_mut("", &mut params);
        for (_, p) in params {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let zero = head.regress_roi(&local, Some(&ctx)).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_rejects_mismatched_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = RoiHead::<f64>::new(2, 2, HeadWidths::default(), &mut rng);
        let local = Tensor::zeros([1, 2, 8, 8]);
        let ctx = Tensor::zeros([1, 2, 4, 8]);
        assert!(head.forward(&local, Some(&ctx)).is_err());
    }
}
