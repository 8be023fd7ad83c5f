//! Context features at 1/32 resolution: a stride-32 backbone whose every
//! down-sampling stage is padded so the grid stays aligned with the image,
//! 1×1 channel compression, ×32 nearest-neighbour upscaling, and the dilated
//! inception module (DIM) feeding the ROI head.

use crate::nn::{
    join, upsample_nearest, upsample_nearest_backward, Conv2d, ConvBnRelu, ConvGeometry, Mode,
    Module, ParamRefs, ParamRefsMut, Relu,
};
use crate::tensor::{concat_channels, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Total down-sampling factor of the backbone.
pub const STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackboneError {
    #[error("input {width}x{height} is not a multiple of {STRIDE}; pad it first")]
    Unaligned { width: usize, height: usize },
    #[error("invalid DIM rates {0:?}: need 0 < alpha < beta < gamma")]
    DimRates([usize; 3]),
    #[error("backbone needs exactly 5 stride-2 stages, got {0}")]
    StageCount(usize),
}

/// Which weights back the stride-32 feature extractor.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum BackboneVariant {
    /// Randomly initialised conv stack trained jointly with the rest.
    #[default]
    Toy,
    /// External weights in the checkpoint parameter format under `backbone.*`.
    Pretrained { weights_path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Output channels of the five stride-2 stages.
    pub stages: Vec<usize>,
    /// Keep backbone weights fixed during training.
    pub freeze: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Toy,
            stages: vec![16, 32, 64, 128, 256],
            freeze: false,
        }
    }
}

/// Five 3×3 stride-2 conv/BN/ReLU stages with padding 1: output grid is exactly (M/32, N/32).
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub stages: Vec<ConvBnRelu<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(stage_channels: &[usize], rng: &mut impl Rng) -> Result<Self, BackboneError> {
        if stage_channels.len() != 5 {
            return Err(BackboneError::StageCount(stage_channels.len()));
        }
        let mut cin = 3;
        let stages = stage_channels
            .iter()
            .map(|&cout| {
                let g = ConvGeometry::new(cin, cout, 3).with_stride(2).with_padding(1);
                cin = cout;
                ConvBnRelu::new(g, rng)
            })
            .collect();
        Ok(Self { stages })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.conv.geometry().out_channels)
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>, BackboneError> {
        let (h, w) = x.spatial();
        if h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
            return Err(BackboneError::Unaligned { width: w, height: h });
        }
        Ok(self.stages.iter_mut().fold(x, |f, s| s.forward(f, mode)))
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        self.stages.iter_mut().rev().fold(dy, |g, s| s.backward(g))
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.params(&join(prefix, &format!("stages.{i}")), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.params_mut(&join(prefix, &format!("stages.{i}")), out);
        }
    }
}

/// ×32 nearest-neighbour upscaling: `out[y][x] = f[y / 32][x / 32]`.
pub fn upscale_x32<T: Scalar>(f: &Tensor<T>) -> Tensor<T> {
    upsample_nearest(f, STRIDE)
}

pub fn upscale_x32_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    upsample_nearest_backward(dy, STRIDE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimConfig {
    /// Dilation rates (α, β, γ) of the three 3×3 branches.
    pub rates: [usize; 3],
    /// When false the 3×3 branches use rate 1 (same parameter count).
    pub dilated: bool,
    pub branch_channels: usize,
    pub out_channels: usize,
}

impl Default for DimConfig {
    fn default() -> Self {
        Self {
            rates: [2, 4, 8],
            dilated: true,
            branch_channels: 32,
            out_channels: 64,
        }
    }
}

impl DimConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let [a, b, c] = self.rates;
        if !(0 < a && a < b && b < c) {
            return Err(BackboneError::DimRates(self.rates));
        }
        Ok(())
    }

    pub fn effective_rates(&self) -> [usize; 3] {
        if self.dilated {
            self.rates
        } else {
            [1, 1, 1]
        }
    }
}

/// Parallel 1×1 and dilated 3×3 branches, each followed by ReLU, concatenated
/// and fused by a 1×1 conv + ReLU. Spatial dims are preserved.
#[derive(Clone, Debug)]
pub struct Dim<T> {
    pub branches: Vec<Conv2d<T>>,
    pub fuse: Conv2d<T>,
    branch_relus: Vec<Relu>,
    fuse_relu: Relu,
}

impl<T: Scalar> Dim<T> {
    pub fn new(in_channels: usize, cfg: &DimConfig, rng: &mut impl Rng) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let cb = cfg.branch_channels;
        let mut branches = vec![Conv2d::new(ConvGeometry::new(in_channels, cb, 1), rng)];
        for rate in cfg.effective_rates() {
            branches.push(Conv2d::new(ConvGeometry::same(in_channels, cb, 3, rate), rng));
        }
        Ok(Self {
            fuse: Conv2d::new(ConvGeometry::new(4 * cb, cfg.out_channels, 1), rng),
            branch_relus: vec![Relu::default(); branches.len()],
            branches,
            fuse_relu: Relu::default(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.geometry().out_channels
    }

    pub fn forward(&mut self, f: &Tensor<T>) -> Tensor<T> {
        let mut outs = self
            .branches
            .iter_mut()
            .zip(self.branch_relus.iter_mut())
            .map(|(conv, relu)| relu.forward(conv.forward(f.clone())));
        let first = outs.next().expect("DIM has branches");
        let cat = outs.fold(first, |acc, o| concat_channels(&acc, &o));
        self.fuse_relu.forward(self.fuse.forward(cat))
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let g = self.fuse.backward(self.fuse_relu.backward(dy));
        let cb = self.branches[0].geometry().out_channels;
        let [n, _, h, w] = g.shape();
        let mut dx: Option<Tensor<T>> = None;
        for (i, (conv, relu)) in self
            .branches
            .iter_mut()
            .zip(self.branch_relus.iter())
            .enumerate()
        {
            let mut part = Tensor::zeros([n, cb, h, w]);
            for b in 0..n {
                let src = &g.sample(b)[i * cb * h * w..(i + 1) * cb * h * w];
                part.sample_mut(b).copy_from_slice(src);
            }
            let gx = conv.backward(relu.backward(part));
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&gx),
                None => dx = Some(gx),
            }
        }
        dx.expect("DIM has branches")
    }
}

impl<T: Scalar> Module<T> for Dim<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.params(&join(prefix, &format!("branch{i}")), out);
        }
        self.fuse.params(&join(prefix, "fuse"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("branch{i}")), out);
        }
        self.fuse.params_mut(&join(prefix, "fuse"), out);
    }
}

/// Upscaled context features for one forward pass.
#[derive(Clone, Debug)]
pub struct ContextOutput<T> {
    /// Compressed backbone features, ×32 upscaled, for the MOS head.
    pub embedding: Tensor<T>,
    /// DIM output, ×32 upscaled, for the ROI head (absent without ROI).
    pub roi_context: Option<Tensor<T>>,
}

/// Backbone → {compress → upscale, DIM → upscale}; one backbone pass feeds both paths.
#[derive(Clone, Debug)]
pub struct ContextBranch<T> {
    pub backbone: Backbone<T>,
    pub compress: Conv2d<T>,
    pub dim: Option<Dim<T>>,
    freeze_backbone: bool,
}

impl<T: Scalar> ContextBranch<T> {
    pub fn new(
        backbone: Backbone<T>,
        embed_channels: usize,
        dim: Option<&DimConfig>,
        freeze_backbone: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, BackboneError> {
        let ch = backbone.out_channels();
        Ok(Self {
            compress: Conv2d::new(ConvGeometry::new(ch, embed_channels, 1), rng),
            dim: dim.map(|cfg| Dim::new(ch, cfg, rng)).transpose()?,
            backbone,
            freeze_backbone,
        })
    }

    pub fn embed_channels(&self) -> usize {
        self.compress.geometry().out_channels
    }

    pub fn roi_channels(&self) -> usize {
        self.dim.as_ref().map_or(0, Dim::out_channels)
    }

    pub fn backbone_frozen(&self) -> bool {
        self.freeze_backbone
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<ContextOutput<T>, BackboneError> {
        let bb_mode = if self.freeze_backbone { Mode::Eval } else { mode };
        let f = self.backbone.forward(x, bb_mode)?;
        let roi_context = self.dim.as_mut().map(|d| upscale_x32(&d.forward(&f)));
        let embedding = upscale_x32(&self.compress.forward(f));
        Ok(ContextOutput {
            embedding,
            roi_context,
        })
    }

    /// Accumulates parameter gradients from the two upscaled outputs.
    pub fn backward(&mut self, d_embedding: Option<Tensor<T>>, d_roi_context: Option<Tensor<T>>) {
        let mut df: Option<Tensor<T>> = None;
        let mut add = |g: Tensor<T>| match df.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => df = Some(g),
        };
        if let Some(d) = d_embedding {
            add(self.compress.backward(upscale_x32_backward(&d)));
        }
        if let (Some(d), Some(dim)) = (d_roi_context, self.dim.as_mut()) {
            add(dim.backward(upscale_x32_backward(&d)));
        }
        if let Some(g) = df {
            if !self.freeze_backbone {
                self.backbone.backward(g);
            }
        }
    }
}

impl<T: Scalar> Module<T> for ContextBranch<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.backbone.params(&join(prefix, "backbone"), out);
        self.compress.params(&join(prefix, "compress"), out);
        if let Some(d) = &self.dim {
            d.params(&join(prefix, "dim"), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.backbone.params_mut(&join(prefix, "backbone"), out);
        self.compress.params_mut(&join(prefix, "compress"), out);
        if let Some(d) = &mut self.dim {
            d.params_mut(&join(prefix, "dim"), out);
        }
    }
}
