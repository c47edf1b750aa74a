//! Facial skin color analysis: face localization, Otsu skin segmentation,
//! dominant-color distributions and the pixel-mean baseline classifier.

mod baseline;
pub mod convert;
mod face;
pub mod otsu;
mod quantize;
mod segment;

use thiserror::Error;

pub use baseline::baseline_classify;
pub use face::{
    detect_face, detect_face_with, skin_likely, BoundingBox, Detection, FaceDetector, FaceRegion,
    SkinBlobDetector, CROP_SIZE, MIN_IMAGE_SIDE,
};
pub use otsu::{histogram, otsu_threshold, Histogram};
pub use quantize::{
    distribution_from_histogram, dominant_pixels, median_cut, DominantColor, PixelDistribution,
    DEFAULT_K,
};
pub use segment::{segment_skin, segment_skin_with, ChannelSplit, Side, SkinMask, SkinPriors};

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("image is {width}x{height}; at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} is required")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("histogram has no counts")]
    EmptyHistogram,
    #[error("skin mask is empty")]
    NoSkinPixels,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid face region: {0}")]
    InvalidRegion(String),
}
