//! The assembled network: local IQA, optional context branch, optional ROI head,
//! and the per-image aggregation on top.

use crate::aggregation::{reflect_pad_tensor, CropRecord, QualityScore, ScoreForm};
use crate::backbone::{
    Backbone, BackboneConfig, BackboneError, BackboneVariant, ContextBranch, DimConfig,
};
use crate::checkpoint::{read_param_bundle, CheckpointError, NamedTensor};
use crate::image::ImageTensor;
use crate::local_iqa::{LocalIqa, LocalIqaConfig};
use crate::maps::{DimMismatch, PmosMap, RoiLogits, ScalarMap};
use crate::nn::{Mode, Module, ParamRefs, ParamRefsMut};
use crate::roi_head::{HeadWidths, RoiHead, RoiMap, RoiNormalizer};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Dims(#[from] DimMismatch),
    #[error("pretrained backbone weights: {0}")]
    Weights(#[from] CheckpointError),
    #[error("pretrained backbone weights: {0}")]
    WeightLayout(String),
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("backward called without a matching forward pass")]
    NoForward,
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub local: LocalIqaConfig,
    pub use_highlevel: bool,
    pub use_roi: bool,
    pub backbone: BackboneConfig,
    pub embed_channels: usize,
    /// `dim.dilated = false` is the undilated ablation; rates still validated.
    pub dim: DimConfig,
    pub roi_head: HeadWidths,
    pub roi_normalize: RoiNormalizer,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            local: LocalIqaConfig::default(),
            use_highlevel: true,
            use_roi: true,
            backbone: BackboneConfig::default(),
            embed_channels: 64,
            dim: DimConfig::default(),
            roi_head: HeadWidths::default(),
            roi_normalize: RoiNormalizer::Linear,
            seed: 0,
        }
    }
}

/// Inference-time switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace both upscaled context tensors with zeros ("local only" pathway).
    pub zero_highlevel: bool,
}

/// Everything one forward pass produces, cropped to the input's true dims.
#[derive(Clone, Debug)]
pub struct BatchOutput<T> {
    /// `[B, 1, H, W]`
    pub pmos: Tensor<T>,
    /// `[B, 1, H, W]` ROI logits (absent without ROI head).
    pub logits: Option<Tensor<T>>,
    /// `[B, 1, H, W]` normalised weights (uniform without ROI head).
    pub roi: Tensor<T>,
}

impl<T: Scalar> BatchOutput<T> {
    pub fn batch(&self) -> usize {
        self.pmos.batch()
    }

    pub fn pmos_map(&self, n: usize) -> PmosMap<T> {
        ScalarMap::from_plane(&self.pmos, n, 0)
    }

    pub fn roi_map(&self, n: usize) -> RoiMap<T> {
        RoiMap::from_weights(ScalarMap::from_plane(&self.roi, n, 0))
    }

    pub fn logits_map(&self, n: usize) -> Option<RoiLogits<T>> {
        self.logits.as_ref().map(|l| ScalarMap::from_plane(l, n, 0))
    }

    pub fn scores(&self, form: ScoreForm) -> Vec<T> {
        (0..self.batch())
            .map(|n| form.score(self.pmos.plane(n, 0), self.roi.plane(n, 0)))
            .collect()
    }
}

/// Per-image result of [`PiqaNet::predict`].
#[derive(Clone, Debug)]
pub struct ImagePrediction {
    pub score: QualityScore,
    pub pmos: PmosMap<f32>,
    pub roi: RoiMap<f32>,
    pub logits: Option<RoiLogits<f32>>,
}

#[derive(Clone, Debug)]
struct ForwardCache<T> {
    crop: CropRecord,
    logits: Option<Tensor<T>>,
    roi: Tensor<T>,
    context_used: bool,
}

#[derive(Clone, Debug)]
pub struct PiqaNet<T> {
    cfg: NetConfig,
    pub local: LocalIqa<T>,
    pub context: Option<ContextBranch<T>>,
    pub roi: Option<RoiHead<T>>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> PiqaNet<T> {
    pub fn new(cfg: NetConfig) -> Result<Self, ModelError> {
        cfg.dim.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let local_channels = cfg.local.channels;
        let context = if cfg.use_highlevel {
            let backbone = match &cfg.backbone.variant {
                BackboneVariant::Toy => Backbone::new(&cfg.backbone.stages, &mut rng)?,
                BackboneVariant::Pretrained { weights_path } => {
                    load_pretrained_backbone(weights_path, &cfg.backbone.stages, &mut rng)?
                }
            };
            let dim = cfg.use_roi.then_some(&cfg.dim);
            Some(ContextBranch::new(
                backbone,
                cfg.embed_channels,
                dim,
                cfg.backbone.freeze,
                &mut rng,
            )?)
        } else {
            None
        };
        let embed = context.as_ref().map_or(0, ContextBranch::embed_channels);
        let local = LocalIqa::new(&cfg.local, embed, &mut rng);
        let roi = if cfg.use_roi {
            let ctx = context.as_ref().map_or(0, ContextBranch::roi_channels);
            Some(RoiHead::new(local_channels, ctx, cfg.roi_head, &mut rng))
        } else {
            None
        };
        Ok(Self {
            cfg,
            local,
            context,
            roi,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        let mut refs = Vec::new();
        self.params("", &mut refs);
        refs.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum()
    }

    /// Names of parameters the optimizer may update.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.cfg.backbone.freeze && name.starts_with("backbone."))
    }

    /// Runs the network on a batch of equally sized images `[B, 3, H, W]`.
    pub fn forward(
        &mut self,
        images: &Tensor<T>,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<BatchOutput<T>, ModelError> {
        let (h, w) = images.spatial();
        let crop = if self.context.is_some() {
            CropRecord::for_dims(w, h)
        } else {
            CropRecord {
                width: w,
                height: h,
                padded_width: w,
                padded_height: h,
            }
        };
        let x = reflect_pad_tensor(images, crop.padded_height, crop.padded_width);
        let ctx = match self.context.as_mut() {
            Some(c) => Some(c.forward(x.clone(), mode)?),
            None => None,
        };
        let local = self.local.extractor.forward(x, mode);
        let (embedding, roi_context) = match ctx {
            Some(c) if opts.zero_highlevel => (
                Some(Tensor::zeros(c.embedding.shape())),
                c.roi_context.map(|t| Tensor::zeros(t.shape())),
            ),
            Some(c) => (Some(c.embedding), c.roi_context),
            None => (None, None),
        };
        let pmos_padded = self.local.head.forward(&local, embedding.as_ref(), mode)?;
        let logits_padded = match self.roi.as_mut() {
            Some(head) => Some(head.forward(&local, roi_context.as_ref())?),
            None => None,
        };
        let pmos = pmos_padded.crop(0, 0, h, w);
        let logits = logits_padded.map(|l| l.crop(0, 0, h, w));
        let mut roi = Tensor::zeros([images.batch(), 1, h, w]);
        for n in 0..images.batch() {
            let weights = match &logits {
                Some(l) => self.cfg.roi_normalize.apply(l.plane(n, 0)),
                None => RoiMap::<T>::uniform(w, h).into_map().into_values(),
            };
            roi.plane_mut(n, 0).copy_from_slice(&weights);
        }
        self.cache = Some(ForwardCache {
            crop,
            logits: logits.clone(),
            roi: roi.clone(),
            context_used: !opts.zero_highlevel,
        });
        Ok(BatchOutput { pmos, logits, roi })
    }

    /// Back-propagates gradients w.r.t. the cropped pMOS maps and normalised ROI
    /// weights of the last forward pass. Returns the gradient w.r.t. the (padded) input.
    pub fn backward(&mut self, dpmos: Tensor<T>, droi: Option<Tensor<T>>) -> Result<Tensor<T>, ModelError> {
        let cache = self.cache.take().ok_or(ModelError::NoForward)?;
        let (ph, pw) = (cache.crop.padded_height, cache.crop.padded_width);
        let dp = dpmos.uncrop(ph, pw);
        let (mut dlocal, d_embed) = self.local.head.backward(dp);
        let mut d_roi_ctx = None;
        if let (Some(head), Some(logits), Some(droi)) = (self.roi.as_mut(), &cache.logits, droi) {
            let mut dlogits = Tensor::zeros(logits.shape());
            for n in 0..logits.batch() {
                let g = self.cfg.roi_normalize.backward(
                    logits.plane(n, 0),
                    cache.roi.plane(n, 0),
                    droi.plane(n, 0),
                );
                dlogits.plane_mut(n, 0).copy_from_slice(&g);
            }
            let (dl, dc) = head.backward(dlogits.uncrop(ph, pw));
            dlocal.add_assign(&dl);
            d_roi_ctx = dc;
        }
        if let Some(ctx) = self.context.as_mut() {
            if cache.context_used {
                ctx.backward(d_embed, d_roi_ctx);
            }
        }
        Ok(self.local.extractor.backward(dlocal))
    }

    /// Mean L1 between image scores and targets; accumulates parameter gradients.
    /// Returns `(loss, per-image predictions)`.
    pub fn loss_backward(
        &mut self,
        out: &BatchOutput<T>,
        targets: &[f64],
        form: ScoreForm,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let b = out.batch();
        assert_eq!(b, targets.len(), "one target per image");
        let scale = T::one() / T::from_usize(b).unwrap();
        let mut dpmos = Tensor::zeros(out.pmos.shape());
        let mut droi = Tensor::zeros(out.roi.shape());
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(b);
        for (n, &g) in targets.iter().enumerate() {
            let (p, r) = (out.pmos.plane(n, 0), out.roi.plane(n, 0));
            let pred = form.score(p, r);
            let pred64 = pred.to_f64().unwrap();
            preds.push(pred64);
            loss += (pred64 - g).abs();
            let upstream = crate::aggregation::l1_grad(pred, T::lit(g)) * scale;
            let (dp, dr) = form.backward(p, r, upstream);
            dpmos.plane_mut(n, 0).copy_from_slice(&dp);
            droi.plane_mut(n, 0).copy_from_slice(&dr);
        }
        let droi = self.roi.is_some().then_some(droi);
        self.backward(dpmos, droi)?;
        Ok((loss / b as f64, preds))
    }

    /// Eval-mode prediction for one image.
    pub fn predict(
        &mut self,
        img: &ImageTensor,
        form: ScoreForm,
        opts: ForwardOptions,
    ) -> Result<ImagePrediction, ModelError> {
        let out = self.forward(&img.to_tensor(), Mode::Eval, opts)?;
        self.cache = None;
        let value = out.scores(form)[0].to_f64().unwrap();
        let cast = |m: ScalarMap<T>| {
            ScalarMap::new(
                m.width(),
                m.height(),
                m.values().iter().map(|v| v.to_f32().unwrap()).collect(),
            )
        };
        Ok(ImagePrediction {
            score: QualityScore { value, form },
            pmos: cast(out.pmos_map(0)),
            roi: RoiMap::from_weights(cast(out.roi_map(0).into_map())),
            logits: out.logits_map(0).map(cast),
        })
    }

    pub fn zero_grad(&mut self) {
        let mut refs = Vec::new();
        self.params_mut("", &mut refs);
        for (_, p) in refs {
            p.zero_grad();
        }
    }

    /// Copies parameter values (and buffers) from another network with the same layout.
    pub fn load_values_from(&mut self, values: &[NamedTensor]) -> Result<(), ModelError> {
        let mut refs = Vec::new();
        self.params_mut("", &mut refs);
        if refs.len() != values.len() {
            return Err(ModelError::WeightLayout(format!(
                "expected {} tensors, found {}",
                refs.len(),
                values.len()
            )));
        }
        for ((name, p), t) in refs.into_iter().zip(values) {
            if name != t.name || p.shape != t.shape {
                return Err(ModelError::WeightLayout(format!(
                    "tensor {} {:?} does not match {name} {:?}",
                    t.name, t.shape, p.shape
                )));
            }
            p.value = t.data.iter().map(|&v| T::lit(v as f64)).collect();
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for PiqaNet<T> {
    fn params<'a>(&'a self, _prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.local.params("local_iqa", out);
        if let Some(c) = &self.context {
            c.params("", out);
        }
        if let Some(r) = &self.roi {
            r.params("roi_head", out);
        }
    }
    fn params_mut<'a>(&'a mut self, _prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        self.local.params_mut("local_iqa", out);
        if let Some(c) = &mut self.context {
            c.params_mut("", out);
        }
        if let Some(r) = &mut self.roi {
            r.params_mut("roi_head", out);
        }
    }
}

fn load_pretrained_backbone<T: Scalar>(
    path: &std::path::Path,
    stages: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Backbone<T>, ModelError> {
    let tensors = read_param_bundle(path)?;
    let backbone_tensors: Vec<_> = tensors
        .into_iter()
        .filter(|t| t.name.starts_with("backbone."))
        .collect();
    // stage widths come from the file when present
    let widths: Vec<usize> = backbone_tensors
        .iter()
        .filter(|t| t.name.ends_with(".conv.weight"))
        .map(|t| t.shape[0])
        .collect();
    let widths = if widths.is_empty() { stages.to_vec() } else { widths };
    let mut backbone = Backbone::<T>::new(&widths, rng)?;
    let mut refs = Vec::new();
    backbone.params_mut("backbone", &mut refs);
    if refs.len() != backbone_tensors.len() {
        return Err(ModelError::WeightLayout(format!(
            "expected {} backbone tensors, found {}",
            refs.len(),
            backbone_tensors.len()
        )));
    }
    for ((name, p), t) in refs.into_iter().zip(backbone_tensors) {
        if name != t.name || p.shape != t.shape {
            return Err(ModelError::WeightLayout(format!(
                "tensor {} {:?} does not match {name} {:?}",
                t.name, t.shape, p.shape
            )));
        }
        p.value = t.data.iter().map(|&v| T::lit(v as f64)).collect();
    }
    Ok(backbone)
}
