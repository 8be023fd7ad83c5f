//! Full-resolution local quality network: seven 3×3 conv/BN/ReLU layers followed
//! by a three-layer 1×1 regression head that emits one pMOS value per pixel.
//!
//! Nothing in here strides or pools, so output maps share the input's grid.

use crate::image::ImageTensor;
use crate::maps::{DimMismatch, PmosMap, ScalarMap};
use crate::nn::{
    join, Conv2d, ConvBnRelu, ConvGeometry, Dropout, Mode, Module, ParamRefs, ParamRefsMut, Relu,
};
use crate::roi_head::HeadWidths;
use crate::tensor::{concat_channels, split_channels, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of stacked 3×3 layers in the extractor.
pub const EXTRACTOR_LAYERS: usize = 7;
/// Chebyshev radius of the extractor's receptive field (one pixel per 3×3 layer).
pub const RECEPTIVE_RADIUS: usize = EXTRACTOR_LAYERS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalIqaConfig {
    pub channels: usize,
    pub head: HeadWidths,
    pub dropout: f64,
}

impl Default for LocalIqaConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            head: HeadWidths::default(),
            dropout: 0.25,
        }
    }
}

/// `[B, C_local, H, W]` features at input resolution.
pub type LocalFeatureMap<T> = Tensor<T>;

#[derive(Clone, Debug)]
pub struct LocalFeatureExtractor<T> {
    pub layers: Vec<ConvBnRelu<T>>,
}

impl<T: Scalar> LocalFeatureExtractor<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..EXTRACTOR_LAYERS)
            .map(|i| {
                let cin = if i == 0 { ImageTensor::CHANNELS } else { channels };
                ConvBnRelu::new(ConvGeometry::same(cin, channels, 3, 1), rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> LocalFeatureMap<T> {
        self.layers.iter_mut().fold(x, |h, layer| layer.forward(h, mode))
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        self.layers.iter_mut().rev().fold(dy, |g, layer| layer.backward(g))
    }
}

impl<T: Scalar> Module<T> for LocalFeatureExtractor<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&join(prefix, &i.to_string()), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// 1×1 conv → ReLU → dropout → 1×1 conv → ReLU → 1×1 conv (linear output).
#[derive(Clone, Debug)]
pub struct MosHead<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
    relu1: Relu,
    relu2: Relu,
    dropout: Dropout<T>,
    local_channels: usize,
}

impl<T: Scalar> MosHead<T> {
    pub fn new(
        local_channels: usize,
        embed_channels: usize,
        widths: HeadWidths,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cin = local_channels + embed_channels;
        let conv1 = Conv2d::new(ConvGeometry::new(cin, widths.hidden1, 1), rng);
        let conv2 = Conv2d::new(ConvGeometry::new(widths.hidden1, widths.hidden2, 1), rng);
        let conv3 = Conv2d::new(ConvGeometry::new(widths.hidden2, 1, 1), rng);
        let dropout_rng = ChaCha8Rng::from_rng(rng);
        Self {
            conv1,
            conv2,
            conv3,
            relu1: Relu::default(),
            relu2: Relu::default(),
            dropout: Dropout::new(dropout, dropout_rng),
            local_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.geometry().in_channels
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout.rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) {
        assert!((0.0..1.0).contains(&rate));
        self.dropout.rate = rate;
    }

    /// pMOS `[B, 1, H, W]`; `embedded` is concatenated after the local channels.
    pub fn forward(
        &mut self,
        local: &LocalFeatureMap<T>,
        embedded: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Tensor<T>, DimMismatch> {
        let input = match embedded {
            Some(e) => {
                if e.spatial() != local.spatial() || e.batch() != local.batch() {
                    return Err(DimMismatch {
                        expected: (local.width(), local.height()),
                        actual: (e.width(), e.height()),
                    });
                }
                concat_channels(local, e)
            }
            None => local.clone(),
        };
        assert_eq!(input.channels(), self.in_channels(), "MOS head input channels");
        let h = self.relu1.forward(self.conv1.forward(input));
        let h = self.dropout.forward(h, mode);
        let h = self.relu2.forward(self.conv2.forward(h));
        Ok(self.conv3.forward(h))
    }

    pub fn backward(&mut self, dp: Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
        let g = self.conv3.backward(dp);
        let g = self.conv2.backward(self.relu2.backward(g));
        let g = self.dropout.backward(g);
        let g = self.conv1.backward(self.relu1.backward(g));
        if g.channels() == self.local_channels {
            (g, None)
        } else {
            let (a, b) = split_channels(&g, self.local_channels);
            (a, Some(b))
        }
    }
}

impl<T: Scalar> Module<T> for MosHead<T> {
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

/// Extractor plus MOS regression head.
#[derive(Clone, Debug)]
pub struct LocalIqa<T> {
    pub extractor: LocalFeatureExtractor<T>,
    pub head: MosHead<T>,
}

impl<T: Scalar> LocalIqa<T> {
    pub fn new(cfg: &LocalIqaConfig, embed_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            extractor: LocalFeatureExtractor::new(cfg.channels, rng),
            head: MosHead::new(cfg.channels, embed_channels, cfg.head, cfg.dropout, rng),
        }
    }

    pub fn local_channels(&self) -> usize {
        self.head.local_channels
    }

    /// Total convolution layers in extractor and head.
    pub fn conv_layer_count(&self) -> usize {
        self.extractor.layers.len() + 3
    }

    pub fn extract_local_features(&mut self, img: &ImageTensor, mode: Mode) -> LocalFeatureMap<T> {
        self.extractor.forward(img.to_tensor(), mode)
    }

    pub fn regress_pmos(
        &mut self,
        local: &LocalFeatureMap<T>,
        embedded: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<PmosMap<T>, DimMismatch> {
        let p = self.head.forward(local, embedded, mode)?;
        Ok(ScalarMap::from_plane(&p, 0, 0))
    }
}

impl<T: Scalar> Module<T> for LocalIqa<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.extractor.params(&join(prefix, "extractor"), out);
        self.head.params(&join(prefix, "head"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.extractor.params_mut(&join(prefix, "extractor"), out);
        self.head.params_mut(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> LocalIqaConfig {
        LocalIqaConfig {
            channels: 8,
            head: HeadWidths {
                hidden1: 8,
                hidden2: 4,
            },
            dropout: 0.25,
        }
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(w, h, data).unwrap()
    }

    #[test]
    fn has_ten_conv_layers() {
        let net = LocalIqa::<f32>::new(&small_cfg(), 0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.conv_layer_count(), 10);
    }

    #[test]
    fn shapes_follow_input() {
        let mut net = LocalIqa::<f32>::new(&small_cfg(), 0, &mut ChaCha8Rng::seed_from_u64(0));
        for (w, h) in [(64, 64), (1, 1), (13, 7)] {
            let f = net.extract_local_features(&noise_image(w, h, 1), Mode::Eval);
            assert_eq!(f.shape(), [1, 8, h, w]);
            let p = net.regress_pmos(&f, None, Mode::Eval).unwrap();
            assert_eq!(p.dims(), (w, h));
            assert!(p.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut net = LocalIqa::<f32>::new(&small_cfg(), 0, &mut ChaCha8Rng::seed_from_u64(2));
        let img = noise_image(16, 16, 3);
        let f = net.extract_local_features(&img, Mode::Eval);
        let a = net.regress_pmos(&f, None, Mode::Eval).unwrap();
        let b = net.regress_pmos(&f, None, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = LocalIqa::<f64>::new(&small_cfg(), 3, &mut rng);
        net.head.set_dropout_rate(0.0);
        for trial in 0..5 {
            let local = Tensor::from_vec(
                [2, 8, 5, 6],
                (0..480).map(|_| rng.random_range(-1.0..2.0)).collect(),
            );
            let emb = Tensor::from_vec([2, 3, 5, 6], (0..180).map(|_| rng.random_range(-1.0..1.0)).collect());
            let train = net.head.forward(&local, Some(&emb), Mode::Train).unwrap();
            let eval = net.head.forward(&local, Some(&emb), Mode::Eval).unwrap();
            assert_eq!(train, eval, "trial {trial}");
        }
    }

    #[test]
    fn mismatched_embedding_is_an_error() {
        let mut net = LocalIqa::<f32>::new(&small_cfg(), 4, &mut ChaCha8Rng::seed_from_u64(0));
        let local = Tensor::zeros([1, 8, 8, 8]);
        let emb = Tensor::zeros([1, 4, 8, 4]);
        assert!(net.regress_pmos(&local, Some(&emb), Mode::Eval).is_err());
    }
}
