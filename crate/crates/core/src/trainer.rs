//! Staged Adam training, per-epoch evaluation, checkpointing and ablations.

use crate::aggregation::ScoreForm;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::{augment, AugmentCoins, DatasetError, DatasetRecord};
use crate::image::ImageTensor;
use crate::metrics::{rmse, EvalReport};
use crate::model::{ForwardOptions, ModelError, NetConfig, PiqaNet};
use crate::nn::{Adam, Mode, Module};
use crate::roi_head::{HeadWidths, RoiNormalizer};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("batch size {batch} exceeds the {len} training images")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("images in one batch must share dims: {first:?} vs {other:?}")]
    MixedDims {
        first: (usize, usize),
        other: (usize, usize),
    },
    #[error(
        "non-finite loss {loss} at epoch {epoch}, batch {batch}; recent losses: {trace:?}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        trace: Vec<f64>,
    },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
}

/// Optimisation recipe plus ablation switches. The switches here win over the
/// corresponding fields of `arch`, which only supplies widths and init seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub loss_form: ScoreForm,
    pub roi_normalize: RoiNormalizer,
    pub use_dim: bool,
    pub use_highlevel: bool,
    pub use_roi: bool,
    pub seed: u64,
    pub augment: bool,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Stop after the epoch whose mean training loss falls below this.
    pub stop_below_loss: Option<f64>,
    pub arch: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage { epochs: 30, lr: 1e-4 },
                Stage { epochs: 30, lr: 5e-4 },
                Stage { epochs: 30, lr: 1e-5 },
            ],
            batch_size: 48,
            loss_form: ScoreForm::MeanShifted,
            roi_normalize: RoiNormalizer::Linear,
            use_dim: true,
            use_highlevel: true,
            use_roi: true,
            seed: 0,
            augment: true,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            stop_below_loss: None,
            arch: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small widths and a short schedule for CPU runs on 32×32 to 64×64 images.
    pub fn desk() -> Self {
        let mut arch = NetConfig::default();
        arch.local.channels = 16;
        arch.local.head = HeadWidths { hidden1: 32, hidden2: 16 };
        arch.roi_head = HeadWidths { hidden1: 32, hidden2: 16 };
        // a trainable context path memorises small training sets through the
        // global features; a frozen random backbone and a thin embedding do not
        arch.embed_channels = 4;
        arch.backbone.freeze = true;
        arch.dim.branch_channels = 8;
        arch.dim.out_channels = 16;
        Self {
            stages: vec![
                Stage { epochs: 8, lr: 1e-3 },
                Stage { epochs: 8, lr: 5e-4 },
                Stage { epochs: 4, lr: 1e-4 },
            ],
            batch_size: 16,
            arch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 || !(s.lr > 0.0 && s.lr.is_finite()) {
                return bad(format!("stage {i}: epochs must be > 0 and lr > 0"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if self.use_dim && !self.use_highlevel {
            return bad("use_dim requires use_highlevel".into());
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Without an ROI head the weights are uniform and the mean-shifted score
    /// is identically zero, so such runs train on the plain form.
    pub fn effective_loss_form(&self) -> ScoreForm {
        if self.use_roi {
            self.loss_form
        } else {
            ScoreForm::Plain
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let mut net = self.arch.clone();
        net.use_highlevel = self.use_highlevel;
        net.use_roi = self.use_roi;
        net.roi_normalize = self.roi_normalize;
        net.dim.dilated = self.use_dim;
        net.seed = self.seed;
        net
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for s in &self.stages {
            end += s.epochs;
            if epoch <= end {
                return s.lr;
            }
        }
        self.stages.last().map_or(0.0, |s| s.lr)
    }

    /// Learning rate at a 0-based optimizer step.
    pub fn lr_at_step(&self, step: usize, steps_per_epoch: usize) -> f64 {
        self.lr_for_epoch(step / steps_per_epoch.max(1) + 1)
    }

    /// Epochs (1-based) that close a stage.
    pub fn stage_ends(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(0, |acc, s| {
                *acc += s.epochs;
                Some(*acc)
            })
            .collect()
    }
}

/// Named variants spanning the ablation surface of `base`.
pub fn ablation_matrix(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let full = TrainConfig {
        use_highlevel: true,
        use_roi: true,
        use_dim: true,
        ..base.clone()
    };
    vec![
        (
            "local-only".into(),
            TrainConfig {
                use_highlevel: false,
                use_roi: false,
                use_dim: false,
                loss_form: ScoreForm::Plain,
                ..full.clone()
            },
        ),
        (
            "local+roi".into(),
            TrainConfig {
                use_highlevel: false,
                use_dim: false,
                ..full.clone()
            },
        ),
        ("full".into(), full.clone()),
        (
            "plain-loss".into(),
            TrainConfig {
                loss_form: ScoreForm::Plain,
                ..full.clone()
            },
        ),
        (
            "softmax".into(),
            TrainConfig {
                roi_normalize: RoiNormalizer::Softmax,
                ..full.clone()
            },
        ),
        (
            "no-dim".into(),
            TrainConfig {
                use_dim: false,
                ..full
            },
        ),
    ]
}

/// Random access to labelled images.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<(ImageTensor, f64), DatasetError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [(ImageTensor, f64)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }
    fn get(&self, index: usize) -> Result<(ImageTensor, f64), DatasetError> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<(ImageTensor, f64)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, index: usize) -> Result<(ImageTensor, f64), DatasetError> {
        Ok(self[index].clone())
    }
}

/// Decodes images from disk on demand.
pub struct DiskSource {
    pub records: Vec<DatasetRecord>,
}

impl SampleSource for DiskSource {
    fn len(&self) -> usize {
        self.records.len()
    }
    fn get(&self, index: usize) -> Result<(ImageTensor, f64), DatasetError> {
        let r = &self.records[index];
        Ok((ImageTensor::load(&r.image_path)?, r.mos))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
}

/// Renders `epoch,loss,plcc,srcc,rmse`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,plcc,srcc,rmse\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.loss, r.plcc, r.srcc, r.rmse);
    }
    s
}

/// Predictions and metrics on a test set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    /// `None` when a correlation is undefined (e.g. constant predictions).
    pub report: Option<EvalReport>,
    pub rmse: f64,
}

/// Owns the network, optimizer and schedule state of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: PiqaNet<f32>,
    pub adam: Adam<f32>,
    rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step so far.
    pub lr_trace: Vec<f64>,
    /// Directory for checkpoints and the metric history, if any.
    pub run_dir: Option<PathBuf>,
}

const LOSS_TRACE_LEN: usize = 16;

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = PiqaNet::new(cfg.net_config())?;
        let adam = Adam::new(cfg.adam_betas.0, cfg.adam_betas.1, cfg.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        Ok(Self {
            cfg,
            net,
            adam,
            rng,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            lr_trace: Vec::new(),
            run_dir: None,
        })
    }

    /// Resumes from a checkpoint that carries its training config.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let cfg = ckpt
            .train
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint has no training config".into()))?;
        let mut t = Self::new(cfg)?;
        t.net = ckpt.build_net()?;
        if let Some(adam) = ckpt.build_optimizer() {
            t.adam = adam;
        }
        t.epoch = ckpt.epoch;
        t.history = ckpt.history.clone();
        // Reseed so a resumed run does not replay epoch 1's batch order.
        t.rng = ChaCha8Rng::seed_from_u64(t.cfg.seed ^ 0x5eed_da7a ^ ((ckpt.epoch as u64) << 32));
        Ok(t)
    }

    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn score_form(&self) -> ScoreForm {
        self.cfg.effective_loss_form()
    }

    /// One optimizer update on a batch; returns the batch mean L1 loss.
    pub fn train_step(
        &mut self,
        images: &[&ImageTensor],
        targets: &[f64],
        lr: f64,
    ) -> Result<f64, TrainError> {
        let batch = stack_batch(images)?;
        self.net.zero_grad();
        let out = self.net.forward(&batch, Mode::Train, ForwardOptions::default())?;
        let (loss, _) = self.net.loss_backward(&out, targets, self.score_form())?;
        if loss.is_finite() {
            let net = &mut self.net;
            let mut refs = Vec::new();
            net.params_mut("", &mut refs);
            let frozen = self.cfg.arch.backbone.freeze;
            self.adam
                .step(&mut refs, lr, |name| !(frozen && name.starts_with("backbone.")));
        }
        self.lr_trace.push(lr);
        self.step += 1;
        Ok(loss)
    }

    /// Runs the next epoch; returns the mean training loss.
    pub fn run_epoch<S: SampleSource + ?Sized>(&mut self, train: &S) -> Result<f64, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit("training"));
        }
        let bs = self.cfg.batch_size;
        if bs > train.len() {
            return Err(TrainError::BatchTooLarge {
                batch: bs,
                len: train.len(),
            });
        }
        self.epoch += 1;
        let lr = self.cfg.lr_for_epoch(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut trace: Vec<f64> = Vec::new();
        let mut total = 0.0;
        let batches = order.len() / bs;
        for (b, chunk) in order.chunks_exact(bs).enumerate() {
            let mut images = Vec::with_capacity(bs);
            let mut targets = Vec::with_capacity(bs);
            for &i in chunk {
                let (img, mos) = train.get(i)?;
                let img = if self.cfg.augment {
                    augment(&img, AugmentCoins::random(&mut self.rng))
                } else {
                    img
                };
                images.push(img);
                targets.push(mos);
            }
            let refs: Vec<&ImageTensor> = images.iter().collect();
            let loss = self.train_step(&refs, &targets, lr)?;
            trace.push(loss);
            if trace.len() > LOSS_TRACE_LEN {
                trace.remove(0);
            }
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                    loss,
                    trace,
                });
            }
            total += loss;
        }
        Ok(total / batches as f64)
    }

    /// Eval-mode predictions in the trained score form.
    pub fn evaluate<S: SampleSource + ?Sized>(&mut self, test: &S) -> Result<Evaluation, TrainError> {
        let form = self.score_form();
        evaluate_net(&mut self.net, test, form, ForwardOptions::default())
    }

    /// Runs every remaining epoch, evaluating after each and checkpointing at
    /// stage boundaries and at the end.
    pub fn fit<A, B>(&mut self, train: &A, test: &B) -> Result<Evaluation, TrainError>
    where
        A: SampleSource + ?Sized,
        B: SampleSource + ?Sized,
    {
        if test.is_empty() {
            return Err(TrainError::EmptySplit("test"));
        }
        let total = self.cfg.total_epochs();
        let ends = self.cfg.stage_ends();
        let mut last = None;
        while self.epoch < total {
            let loss = self.run_epoch(train)?;
            let eval = self.evaluate(test)?;
            let (plcc, srcc) = eval
                .report
                .as_ref()
                .map_or((f64::NAN, f64::NAN), |r| (r.plcc, r.srcc));
            self.history.push(EpochRecord {
                epoch: self.epoch,
                lr: self.cfg.lr_for_epoch(self.epoch),
                loss,
                plcc,
                srcc,
                rmse: eval.rmse,
            });
            log::info!(
                "epoch {}/{} loss {:.4} plcc {:.4} srcc {:.4} rmse {:.4}",
                self.epoch,
                total,
                loss,
                plcc,
                srcc,
                eval.rmse
            );
            let stop = self.cfg.stop_below_loss.is_some_and(|t| loss < t);
            if ends.contains(&self.epoch) || self.epoch == total || stop {
                self.save_checkpoint()?;
            }
            last = Some(eval);
            if stop {
                break;
            }
        }
        match last {
            Some(e) => Ok(e),
            None => self.evaluate(test),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.net,
            Some(&self.adam),
            self.epoch,
            Some(self.cfg.clone()),
            self.history.clone(),
        )
    }

    /// Writes `ckpt_<epoch>` and `history.csv` into the run directory, if set.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>, TrainError> {
        let Some(dir) = &self.run_dir else {
            return Ok(None);
        };
        let ckpt_dir = dir.join(format!("ckpt_{}", self.epoch));
        self.checkpoint().save(&ckpt_dir)?;
        let hpath = dir.join("history.csv");
        std::fs::write(&hpath, history_csv(&self.history))
            .map_err(|source| TrainError::Io { path: hpath, source })?;
        Ok(Some(ckpt_dir))
    }
}

/// Full training run from scratch: returns the final checkpoint and report.
pub fn train<A, B>(
    cfg: TrainConfig,
    train_set: &A,
    test_set: &B,
    run_dir: Option<&Path>,
) -> Result<(Checkpoint, Evaluation), TrainError>
where
    A: SampleSource + ?Sized,
    B: SampleSource + ?Sized,
{
    let mut t = Trainer::new(cfg)?;
    if let Some(d) = run_dir {
        t.run_dir = Some(d.to_path_buf());
    }
    let eval = t.fit(train_set, test_set)?;
    Ok((t.checkpoint(), eval))
}

pub fn evaluate_net<S: SampleSource + ?Sized>(
    net: &mut PiqaNet<f32>,
    test: &S,
    form: ScoreForm,
    opts: ForwardOptions,
) -> Result<Evaluation, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let mut predictions = Vec::with_capacity(test.len());
    let mut targets = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let (img, mos) = test.get(i)?;
        predictions.push(net.predict(&img, form, opts)?.score.value);
        targets.push(mos);
    }
    let report = EvalReport::compute(&predictions, &targets).ok();
    let rmse = rmse(&predictions, &targets).unwrap_or(f64::NAN);
    Ok(Evaluation {
        predictions,
        targets,
        report,
        rmse,
    })
}

fn stack_batch(images: &[&ImageTensor]) -> Result<Tensor<f32>, TrainError> {
    let first = (images[0].width(), images[0].height());
    if let Some(other) = images
        .iter()
        .map(|i| (i.width(), i.height()))
        .find(|d| *d != first)
    {
        return Err(TrainError::MixedDims { first, other });
    }
    Ok(ImageTensor::batch(images))
}
