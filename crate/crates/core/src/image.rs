//! Image samples, ROI masks, loading and normalization.

use std::path::Path;

use thiserror::Error;

use crate::netpbm::{self, NetpbmError, PnmKind};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("netpbm: {0}")]
    Netpbm(#[from] NetpbmError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("unsupported image file {0:?}")]
    Unsupported(String),
    #[error("DMXT image file must hold exactly one tensor of shape [C,H,W] with C in {{1,3}}, got {0}")]
    BadDmxtImage(String),
    #[error("roi dimensions {roi_h}x{roi_w} do not match image {img_h}x{img_w}")]
    RoiDimensionMismatch {
        roi_h: usize,
        roi_w: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("standardize requires std > 0 (channel {0})")]
    ZeroStd(usize),
    #[error("normalization parameters carry {params} channels, image has {image}")]
    ChannelMismatch { params: usize, image: usize },
}

/// A loaded image: pixels in [0, 1], planar `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Tensor,
    pub source_id: String,
}

impl ImageSample {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Tensor,
        source_id: String,
    ) -> Result<Self, ImageError> {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(pixels.shape(), &[channels, height, width]);
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            source_id,
        })
    }

    pub fn pixel(&self, c: usize, row: usize, col: usize) -> f32 {
        self.pixels.data()[(c * self.height + row) * self.width + col]
    }
}

/// Binary region-of-interest mask paired with an image.
#[derive(Debug, Clone)]
pub struct RoiMask {
    pub height: usize,
    pub width: usize,
    mask: Vec<bool>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), height * width);
        Self {
            height,
            width,
            mask,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.mask[row * self.width + col] = v;
    }

    pub fn nonzero(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn matches(&self, image: &ImageSample) -> Result<(), ImageError> {
        if self.height != image.height || self.width != image.width {
            return Err(ImageError::RoiDimensionMismatch {
                roi_h: self.height,
                roi_w: self.width,
                img_h: image.height,
                img_w: image.width,
            });
        }
        Ok(())
    }
}

/// Loads a PGM (1-channel), PPM (3-channel) or DMXT tensor file into an
/// [`ImageSample`]. DMXT pixels are taken verbatim and clamped to [0, 1].
pub fn load_image(path: &Path) -> Result<ImageSample, ImageError> {
    let id = path.to_string_lossy().into_owned();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if ext == "dmxt" {
        let map = tensor::read_tensors(path)?;
        if map.len() != 1 {
            return Err(ImageError::BadDmxtImage(format!("{} tensors", map.len())));
        }
        let (_, t) = map.into_iter().next().unwrap();
        let shape = t.shape().to_vec();
        if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
            return Err(ImageError::BadDmxtImage(format!("shape {shape:?}")));
        }
        let data: Vec<f32> = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let pixels = Tensor::new(shape.clone(), data)?;
        return ImageSample::new(shape[0], shape[1], shape[2], pixels, id);
    }
    let img = netpbm::read_pnm(path)?;
    let channels = img.channels();
    let pixels = Tensor::new(vec![channels, img.height, img.width], img.samples)?;
    ImageSample::new(channels, img.height, img.width, pixels, id)
}

/// Loads a PGM file as a binary ROI mask (nonzero pixel = inside the ROI).
pub fn load_roi(path: &Path) -> Result<RoiMask, ImageError> {
    let img = netpbm::read_pnm(path)?;
    if img.kind != PnmKind::Gray {
        return Err(ImageError::Unsupported(format!(
            "{}: roi masks must be single-channel PGM",
            path.display()
        )));
    }
    let mask = img.samples.iter().map(|&v| v > 0.0).collect();
    Ok(RoiMask::new(img.height, img.width, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormalizeMode {
    /// Identity on [0,1] data.
    Unit,
    /// `(x - mean) / std` per channel.
    Standardize { mean: Vec<f32>, std: Vec<f32> },
}

pub fn normalize(image: &ImageSample, mode: &NormalizeMode) -> Result<Tensor, ImageError> {
    match mode {
        NormalizeMode::Unit => Ok(image.pixels.clone()),
        NormalizeMode::Standardize { mean, std } => {
            if mean.len() != image.channels || std.len() != image.channels {
                return Err(ImageError::ChannelMismatch {
                    params: mean.len(),
                    image: image.channels,
                });
            }
            if let Some(c) = std.iter().position(|&s| s <= 0.0) {
                return Err(ImageError::ZeroStd(c));
            }
            let plane = image.height * image.width;
            let mut data = Vec::with_capacity(image.pixels.numel());
            for c in 0..image.channels {
                let (m, s) = (mean[c], std[c]);
                for i in 0..plane {
                    data.push((image.pixels.data()[c * plane + i] - m) / s);
                }
            }
            Ok(Tensor::new(image.pixels.shape().to_vec(), data)?)
        }
    }
}
