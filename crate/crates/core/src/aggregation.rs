//! Image-level scores from pMOS and ROI maps, the L1 objective, and the
//! multiple-of-32 padding bookkeeping the context branch needs.

use crate::image::ImageTensor;
use crate::maps::{DimMismatch, PmosMap};
use crate::roi_head::RoiMap;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which weighted sum produced (or should produce) a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreForm {
    /// P = Σ p·r
    #[serde(rename = "plain")]
    Plain,
    /// P_ms = Σ (p − p̄)·r
    #[default]
    #[serde(rename = "ms")]
    MeanShifted,
}

impl FromStr for ScoreForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(Self::Plain),
            "ms" | "mean_shifted" | "mean-shifted" => Ok(Self::MeanShifted),
            other => Err(format!("unknown score form `{other}` (expected ms|plain)")),
        }
    }
}

impl fmt::Display for ScoreForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::MeanShifted => "ms",
        })
    }
}

impl ScoreForm {
    pub fn score<T: Scalar>(self, p: &[T], r: &[T]) -> T {
        match self {
            Self::Plain => weighted_sum(p, r),
            Self::MeanShifted => mean_shifted_sum(p, r),
        }
    }

    /// `(∂score/∂p, ∂score/∂r)` scaled by `upstream`.
    pub fn backward<T: Scalar>(self, p: &[T], r: &[T], upstream: T) -> (Vec<T>, Vec<T>) {
        match self {
            Self::Plain => (
                r.iter().map(|&v| v * upstream).collect(),
                p.iter().map(|&v| v * upstream).collect(),
            ),
            Self::MeanShifted => {
                let n = T::from_usize(p.len()).unwrap();
                let mean = p.iter().copied().sum::<T>() / n;
                let r_mean = r.iter().copied().sum::<T>() / n;
                (
                    r.iter().map(|&v| (v - r_mean) * upstream).collect(),
                    p.iter().map(|&v| (v - mean) * upstream).collect(),
                )
            }
        }
    }
}

/// Image-level prediction tagged with the form that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub form: ScoreForm,
}

pub fn weighted_sum<T: Scalar>(p: &[T], r: &[T]) -> T {
    assert_eq!(p.len(), r.len());
    p.iter().zip(r).map(|(&a, &b)| a * b).sum()
}

pub fn mean_shifted_sum<T: Scalar>(p: &[T], r: &[T]) -> T {
    assert_eq!(p.len(), r.len());
    let mean = p.iter().copied().sum::<T>() / T::from_usize(p.len()).unwrap();
    p.iter().zip(r).map(|(&a, &b)| (a - mean) * b).sum()
}

/// P = Σ p_{i,j}·r_{i,j}.
pub fn aggregate<T: Scalar>(p: &PmosMap<T>, r: &RoiMap<T>) -> Result<QualityScore, DimMismatch> {
    p.check_same_dims(r.map())?;
    Ok(QualityScore {
        value: weighted_sum(p.values(), r.values()).to_f64().unwrap(),
        form: ScoreForm::Plain,
    })
}

/// P_ms = Σ (p_{i,j} − p̄)·r_{i,j}.
pub fn aggregate_ms<T: Scalar>(p: &PmosMap<T>, r: &RoiMap<T>) -> Result<QualityScore, DimMismatch> {
    p.check_same_dims(r.map())?;
    Ok(QualityScore {
        value: mean_shifted_sum(p.values(), r.values()).to_f64().unwrap(),
        form: ScoreForm::MeanShifted,
    })
}

pub fn aggregate_as<T: Scalar>(
    form: ScoreForm,
    p: &PmosMap<T>,
    r: &RoiMap<T>,
) -> Result<QualityScore, DimMismatch> {
    match form {
        ScoreForm::Plain => aggregate(p, r),
        ScoreForm::MeanShifted => aggregate_ms(p, r),
    }
}

/// |pred − g|.
pub fn l1_loss(pred: &QualityScore, g: f64) -> f64 {
    (pred.value - g).abs()
}

/// Subgradient of |pred − g| w.r.t. pred; zero at the kink.
pub fn l1_grad<T: Scalar>(pred: T, g: T) -> T {
    let d = pred - g;
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean L1 over a batch.
pub fn mean_l1(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    preds.iter().zip(targets).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64
}

pub const ALIGNMENT: usize = 32;

/// How to undo [`pad_to_multiple_32`] on an output map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub width: usize,
    pub height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
}

impl CropRecord {
    pub fn for_dims(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            padded_width: width.div_ceil(ALIGNMENT) * ALIGNMENT,
            padded_height: height.div_ceil(ALIGNMENT) * ALIGNMENT,
        }
    }

    /// True when no padding was added.
    pub fn is_empty(&self) -> bool {
        self.width == self.padded_width && self.height == self.padded_height
    }

    pub fn crop_pmos<T: Scalar>(&self, p: &PmosMap<T>) -> PmosMap<T> {
        p.crop(self.width, self.height)
    }

    /// Crops ROI weights back to the true image and restores Σr = 1.
    pub fn crop_roi<T: Scalar>(&self, r: &RoiMap<T>) -> RoiMap<T> {
        if self.is_empty() {
            r.clone()
        } else {
            r.crop_renormalized(self.width, self.height)
        }
    }
}

/// Mirror index for reflect padding that also works when `n` is smaller than the pad.
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads every plane on the right/bottom to `height × width`.
pub fn reflect_pad_tensor<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(height >= h && width >= w);
    if (height, width) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, height, width]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..height {
                let sy = reflect(y, h);
                for xx in 0..width {
                    dst[y * width + xx] = src[sy * w + reflect(xx, w)];
                }
            }
        }
    }
    out
}

/// Reflect-pads right/bottom up to the next multiples of 32.
pub fn pad_to_multiple_32(img: &ImageTensor) -> (ImageTensor, CropRecord) {
    let record = CropRecord::for_dims(img.width(), img.height());
    if record.is_empty() {
        return (img.clone(), record);
    }
    let (w, h) = (img.width(), img.height());
    let padded = ImageTensor::from_fn(record.padded_width, record.padded_height, |x, y, c| {
        img.get(reflect(x, w), reflect(y, h), c)
    });
    (padded, record)
}
