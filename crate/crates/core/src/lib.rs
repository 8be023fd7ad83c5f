//! Pixel-by-pixel no-reference image quality assessment.
//!
//! A fully convolutional local network predicts a quality value for every
//! pixel (pMOS), an ROI head predicts how much each pixel should count, and a
//! stride-32 context branch feeds image-level features to both. The image score
//! is the ROI-weighted sum of the pMOS map.

pub mod aggregation;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod floatmap;
pub mod image;
pub mod local_iqa;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod roi_head;
pub mod tensor;
pub mod trainer;
