//! Multi-crop view generation with RGB/medical augmentation policies and
//! label-guided ROI cropping.
//!
//! Random crops draw an area fraction uniformly from the configured scale
//! interval; the integer crop side is clamped so the realized fraction stays
//! inside the interval. Guided crops draw their side fraction from the local
//! scale range and are positioned uniformly among windows that contain the
//! focus pixel, so containment holds by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{ImageSample, RoiMask};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("primitive {0} is disabled by the {1} policy")]
    Disabled(&'static str, &'static str),
    #[error("parameter out of range for {0}: {1}")]
    ParamRange(&'static str, String),
    #[error("degenerate crop window: image {h}x{w} cannot host a crop with scale [{lo}, {hi}]")]
    DegenerateCrop { h: usize, w: usize, lo: f64, hi: f64 },
    #[error("crop rectangle out of bounds")]
    CropBounds,
    #[error("roi has no nonzero pixel")]
    EmptyRoi,
    #[error("invalid crop config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropConfig {
    pub global_crops_scale: (f64, f64),
    pub local_crops_scale: (f64, f64),
    pub global_crops_number: usize,
    pub local_crops_number: usize,
    pub global_crops_size: usize,
    pub local_crops_size: usize,
    pub guided_crops_number: usize,
}

impl CropConfig {
    /// Desk defaults: 2 global 32px crops, 8 local 16px crops, 2 guided.
    pub fn desk() -> Self {
        Self {
            global_crops_scale: (0.4, 1.0),
            local_crops_scale: (0.1, 0.4),
            global_crops_number: 2,
            local_crops_number: 8,
            global_crops_size: 32,
            local_crops_size: 16,
            guided_crops_number: 2,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (lo, hi) in [self.global_crops_scale, self.local_crops_scale] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(AugmentError::BadConfig(format!(
                    "scale range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        if self.global_crops_size == 0 || self.local_crops_size == 0 {
            return Err(AugmentError::BadConfig("crop sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyDomain {
    Rgb,
    Medical,
}

impl PolicyDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyDomain::Rgb => "rgb",
            PolicyDomain::Medical => "medical",
        }
    }
}

/// Per-primitive application probabilities. The domain decides which
/// primitives are admissible at all: medical forbids solarization and color
/// jitter, RGB forbids brightness shifts and noise addition.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub domain: PolicyDomain,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
    pub color_jitter_prob: f64,
    pub brightness_prob: f64,
    pub noise_prob: f64,
}

impl AugmentationPolicy {
    pub fn rgb() -> Self {
        Self {
            domain: PolicyDomain::Rgb,
            hflip_prob: 0.5,
            vflip_prob: 0.0,
            blur_prob: 0.5,
            solarize_prob: 0.2,
            color_jitter_prob: 0.8,
            brightness_prob: 0.0,
            noise_prob: 0.0,
        }
    }

    pub fn medical() -> Self {
        Self {
            domain: PolicyDomain::Medical,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            blur_prob: 0.5,
            solarize_prob: 0.0,
            color_jitter_prob: 0.0,
            brightness_prob: 0.5,
            noise_prob: 0.5,
        }
    }

    /// Table-3 gating, row for row.
    pub fn allows(&self, kind: PrimitiveKind) -> bool {
        !matches!(
            (self.domain, kind),
            (PolicyDomain::Medical, PrimitiveKind::Solarize)
                | (PolicyDomain::Medical, PrimitiveKind::ColorJitter)
                | (PolicyDomain::Rgb, PrimitiveKind::BrightnessShift)
                | (PolicyDomain::Rgb, PrimitiveKind::NoiseAddition)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    HFlip,
    VFlip,
    Crop,
    ResizedCrop,
    GaussianBlur,
    Solarize,
    ColorJitter,
    BrightnessShift,
    NoiseAddition,
}

impl PrimitiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrimitiveKind::HFlip => "hflip",
            PrimitiveKind::VFlip => "vflip",
            PrimitiveKind::Crop => "crop",
            PrimitiveKind::ResizedCrop => "resized_crop",
            PrimitiveKind::GaussianBlur => "gaussian_blur",
            PrimitiveKind::Solarize => "solarize",
            PrimitiveKind::ColorJitter => "color_jitter",
            PrimitiveKind::BrightnessShift => "brightness_shift",
            PrimitiveKind::NoiseAddition => "noise_addition",
        }
    }
}

/// One augmentation primitive with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    HFlip,
    VFlip,
    Crop { top: usize, left: usize, height: usize, width: usize },
    ResizedCrop { top: usize, left: usize, height: usize, width: usize, out_size: usize },
    GaussianBlur { sigma: f64 },
    Solarize { threshold: f32 },
    ColorJitter { brightness: f32, contrast: f32 },
    BrightnessShift { delta: f32 },
    NoiseAddition { sigma: f32 },
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::HFlip => PrimitiveKind::HFlip,
            Primitive::VFlip => PrimitiveKind::VFlip,
            Primitive::Crop { .. } => PrimitiveKind::Crop,
            Primitive::ResizedCrop { .. } => PrimitiveKind::ResizedCrop,
            Primitive::GaussianBlur { .. } => PrimitiveKind::GaussianBlur,
            Primitive::Solarize { .. } => PrimitiveKind::Solarize,
            Primitive::ColorJitter { .. } => PrimitiveKind::ColorJitter,
            Primitive::BrightnessShift { .. } => PrimitiveKind::BrightnessShift,
            Primitive::NoiseAddition { .. } => PrimitiveKind::NoiseAddition,
        }
    }

    fn validate(&self) -> Result<(), AugmentError> {
        match self {
            Primitive::GaussianBlur { sigma } => {
                if !(0.1..=2.0).contains(sigma) {
                    return Err(AugmentError::ParamRange("gaussian_blur", format!("sigma {sigma}")));
                }
            }
            Primitive::Solarize { threshold } => {
                if !(0.0..=1.0).contains(threshold) {
                    return Err(AugmentError::ParamRange("solarize", format!("threshold {threshold}")));
                }
            }
            Primitive::ColorJitter { brightness, contrast } => {
                for (name, f) in [("brightness", brightness), ("contrast", contrast)] {
                    if !(0.5..=1.5).contains(f) {
                        return Err(AugmentError::ParamRange(
                            "color_jitter",
                            format!("{name} factor {f}"),
                        ));
                    }
                }
            }
            Primitive::BrightnessShift { delta } => {
                if !(-0.2..=0.2).contains(delta) {
                    return Err(AugmentError::ParamRange("brightness_shift", format!("delta {delta}")));
                }
            }
            Primitive::NoiseAddition { sigma } => {
                if !(0.01..=0.1).contains(sigma) {
                    return Err(AugmentError::ParamRange("noise_addition", format!("sigma {sigma}")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn plane(img: &ImageSample) -> usize {
    img.height * img.width
}

fn rebuild(img: &ImageSample, height: usize, width: usize, data: Vec<f32>) -> ImageSample {
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageSample::new(
        img.channels,
        height,
        width,
        Tensor::new(vec![img.channels, height, width], data).unwrap(),
        img.source_id.clone(),
    )
    .unwrap()
}

/// Applies one primitive under the active policy. Output keeps the channel
/// count and is clamped to [0, 1]; flips are exact pixel permutations.
pub fn apply_primitive(
    img: &ImageSample,
    prim: &Primitive,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ImageSample, AugmentError> {
    if !policy.allows(prim.kind()) {
        return Err(AugmentError::Disabled(prim.kind().as_str(), policy.domain.as_str()));
    }
    prim.validate()?;
    let (h, w, p) = (img.height, img.width, plane(img));
    let src = img.pixels.data();
    let out = match prim {
        Primitive::HFlip => {
            let mut data = vec![0.0; src.len()];
            for c in 0..img.channels {
                for r in 0..h {
                    for x in 0..w {
                        data[c * p + r * w + x] = src[c * p + r * w + (w - 1 - x)];
                    }
                }
            }
            rebuild(img, h, w, data)
        }
        Primitive::VFlip => {
            let mut data = vec![0.0; src.len()];
            for c in 0..img.channels {
                for r in 0..h {
                    let sr = h - 1 - r;
                    data[c * p + r * w..c * p + r * w + w]
                        .copy_from_slice(&src[c * p + sr * w..c * p + sr * w + w]);
                }
            }
            rebuild(img, h, w, data)
        }
        Primitive::Crop { top, left, height, width } => {
            if top + height > h || left + width > w || *height == 0 || *width == 0 {
                return Err(AugmentError::CropBounds);
            }
            let mut data = vec![0.0; img.channels * height * width];
            for c in 0..img.channels {
                for r in 0..*height {
                    for x in 0..*width {
                        data[(c * height + r) * width + x] =
                            src[c * p + (top + r) * w + (left + x)];
                    }
                }
            }
            rebuild(img, *height, *width, data)
        }
        Primitive::ResizedCrop { top, left, height, width, out_size } => {
            if top + height > h || left + width > w || *height == 0 || *width == 0 {
                return Err(AugmentError::CropBounds);
            }
            let data = crop_resize_bilinear(img, *top, *left, *height, *width, *out_size);
            rebuild(img, *out_size, *out_size, data)
        }
        Primitive::GaussianBlur { sigma } => {
            let data = gaussian_blur(img, *sigma);
            rebuild(img, h, w, data)
        }
        Primitive::Solarize { threshold } => {
            let data = src
                .iter()
                .map(|&v| if v >= *threshold { 1.0 - v } else { v })
                .collect();
            rebuild(img, h, w, data)
        }
        Primitive::ColorJitter { brightness, contrast } => {
            // multiplicative brightness, then contrast about the mean
            let mean: f32 = src.iter().sum::<f32>() / src.len() as f32;
            let data = src
                .iter()
                .map(|&v| (v * brightness - mean) * contrast + mean)
                .collect();
            rebuild(img, h, w, data)
        }
        Primitive::BrightnessShift { delta } => {
            let data = src.iter().map(|&v| v + delta).collect();
            rebuild(img, h, w, data)
        }
        Primitive::NoiseAddition { sigma } => {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0f32, *sigma).unwrap();
            let data = src.iter().map(|&v| v + normal.sample(rng)).collect();
            rebuild(img, h, w, data)
        }
    };
    Ok(out)
}

/// Bilinear resize of a crop window to `out x out` (half-pixel centers,
/// clamped to the window).
fn crop_resize_bilinear(
    img: &ImageSample,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    out: usize,
) -> Vec<f32> {
    let p = plane(img);
    let (h, w) = (img.height, img.width);
    let src = img.pixels.data();
    let mut data = vec![0.0f32; img.channels * out * out];
    let sy = ch as f64 / out as f64;
    let sx = cw as f64 / out as f64;
    for c in 0..img.channels {
        for r in 0..out {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, ch as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(ch - 1);
            let wy = fy - y0 as f64;
            for x in 0..out {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, cw as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(cw - 1);
                let wx = fx - x0 as f64;
                let at = |yy: usize, xx: usize| -> f64 {
                    src[c * p + (top + yy).min(h - 1) * w + (left + xx).min(w - 1)] as f64
                };
                let v = at(y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + at(y0, x1) * (1.0 - wy) * wx
                    + at(y1, x0) * wy * (1.0 - wx)
                    + at(y1, x1) * wy * wx;
                data[(c * out + r) * out + x] = v as f32;
            }
        }
    }
    data
}

/// Separable Gaussian blur, clamp-to-edge padding, kernel normalized so a
/// constant image stays constant.
fn gaussian_blur(img: &ImageSample, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (h, w, p) = (img.height, img.width, plane(img));
    let src = img.pixels.data();
    let mut tmp = vec![0.0f64; src.len()];
    for c in 0..img.channels {
        for r in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += src[c * p + r * w + sx] as f64 * kv;
                }
                tmp[c * p + r * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for c in 0..img.channels {
        for r in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += tmp[c * p + sr * w + x] * kv;
                }
                out[c * p + r * w + x] = acc as f32;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
    Guided,
}

#[derive(Debug, Clone)]
pub struct ViewProvenance {
    pub kind: ViewKind,
    /// (top, left, height, width) in source-image pixels.
    pub crop: (usize, usize, usize, usize),
    pub primitives: Vec<PrimitiveKind>,
    /// Focus pixel for guided views.
    pub focus: Option<(usize, usize)>,
    /// Guided view that fell back to a random window (empty ROI).
    pub fallback_random: bool,
}

/// The augmented global/local/guided crops produced from one source image.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub global_views: Vec<Tensor>,
    pub local_views: Vec<Tensor>,
    pub guided_views: Vec<Tensor>,
    pub global_provenance: Vec<ViewProvenance>,
    pub local_provenance: Vec<ViewProvenance>,
    pub guided_provenance: Vec<ViewProvenance>,
    pub rng_seed: u64,
}

/// Uniformly draws a focusing center among the ROI's nonzero pixels.
pub fn pick_focus_center(
    roi: &RoiMask,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize), AugmentError> {
    let nz = roi.nonzero();
    if nz.is_empty() {
        return Err(AugmentError::EmptyRoi);
    }
    Ok(nz[rng.gen_range(0..nz.len())])
}

/// Integer crop side whose squared fraction of the image area stays inside
/// [lo, hi].
fn draw_crop_side(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    (lo, hi): (f64, f64),
) -> Result<usize, AugmentError> {
    let area = (h * w) as f64;
    let side_min = (lo * area).sqrt().ceil() as usize;
    let side_max = ((hi * area).sqrt().floor() as usize).min(h.min(w));
    if side_min > side_max || side_min == 0 {
        return Err(AugmentError::DegenerateCrop { h, w, lo, hi });
    }
    let frac = rng.gen_range(lo..=hi);
    let side = (frac * area).sqrt().round() as usize;
    Ok(side.clamp(side_min, side_max))
}

fn random_window(rng: &mut ChaCha8Rng, h: usize, w: usize, side: usize) -> (usize, usize) {
    let top = rng.gen_range(0..=h - side);
    let left = rng.gen_range(0..=w - side);
    (top, left)
}

/// Window of the given side containing `(fr, fc)`, uniform over valid
/// positions.
fn window_containing(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    side: usize,
    (fr, fc): (usize, usize),
) -> (usize, usize) {
    let top_lo = fr.saturating_sub(side - 1);
    let top_hi = fr.min(h - side);
    let left_lo = fc.saturating_sub(side - 1);
    let left_hi = fc.min(w - side);
    let top = rng.gen_range(top_lo..=top_hi);
    let left = rng.gen_range(left_lo..=left_hi);
    (top, left)
}

/// Draws the per-view photometric chain in a fixed decision order.
fn photometric_chain(policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut chain = Vec::new();
    if rng.gen::<f64>() < policy.hflip_prob {
        chain.push(Primitive::HFlip);
    }
    if rng.gen::<f64>() < policy.vflip_prob {
        chain.push(Primitive::VFlip);
    }
    if rng.gen::<f64>() < policy.blur_prob {
        chain.push(Primitive::GaussianBlur { sigma: rng.gen_range(0.1..=2.0) });
    }
    match policy.domain {
        PolicyDomain::Rgb => {
            if rng.gen::<f64>() < policy.color_jitter_prob {
                chain.push(Primitive::ColorJitter {
                    brightness: rng.gen_range(0.6..=1.4f32),
                    contrast: rng.gen_range(0.6..=1.4f32),
                });
            }
            if rng.gen::<f64>() < policy.solarize_prob {
                chain.push(Primitive::Solarize { threshold: rng.gen_range(0.4..=0.6) });
            }
        }
        PolicyDomain::Medical => {
            if rng.gen::<f64>() < policy.brightness_prob {
                chain.push(Primitive::BrightnessShift { delta: rng.gen_range(-0.2..=0.2f32) });
            }
            if rng.gen::<f64>() < policy.noise_prob {
                chain.push(Primitive::NoiseAddition { sigma: rng.gen_range(0.01..=0.1f32) });
            }
        }
    }
    chain
}

#[allow(clippy::too_many_arguments)]
fn make_one_view(
    image: &ImageSample,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
    kind: ViewKind,
    crop: (usize, usize, usize, usize),
    out_size: usize,
    focus: Option<(usize, usize)>,
    fallback_random: bool,
) -> Result<(Tensor, ViewProvenance), AugmentError> {
    let (top, left, ch, cw) = crop;
    let resized = apply_primitive(
        image,
        &Primitive::ResizedCrop { top, left, height: ch, width: cw, out_size },
        policy,
        rng,
    )?;
    let chain = photometric_chain(policy, rng);
    let mut view = resized;
    let mut logged = vec![PrimitiveKind::ResizedCrop];
    for prim in &chain {
        view = apply_primitive(&view, prim, policy, rng)?;
        logged.push(prim.kind());
    }
    Ok((
        view.pixels,
        ViewProvenance {
            kind,
            crop,
            primitives: logged,
            focus,
            fallback_random,
        },
    ))
}

/// Generates the configured global, local, and label-guided views.
/// Deterministic given (image, configs, seed).
pub fn make_views(
    image: &ImageSample,
    crops: &CropConfig,
    policy: &AugmentationPolicy,
    roi: Option<&RoiMask>,
    seed: u64,
) -> Result<ViewSet, AugmentError> {
    crops.validate()?;
    let (h, w) = (image.height, image.width);
    let mut set = ViewSet {
        global_views: Vec::new(),
        local_views: Vec::new(),
        guided_views: Vec::new(),
        global_provenance: Vec::new(),
        local_provenance: Vec::new(),
        guided_provenance: Vec::new(),
        rng_seed: seed,
    };

    for i in 0..crops.global_crops_number {
        let mut rng = stream_rng(seed, Stream::Augment, &[0, i as u64]);
        let side = draw_crop_side(&mut rng, h, w, crops.global_crops_scale)?;
        let (top, left) = random_window(&mut rng, h, w, side);
        let (view, prov) = make_one_view(
            image,
            policy,
            &mut rng,
            ViewKind::Global,
            (top, left, side, side),
            crops.global_crops_size,
            None,
            false,
        )?;
        set.global_views.push(view);
        set.global_provenance.push(prov);
    }

    for i in 0..crops.local_crops_number {
        let mut rng = stream_rng(seed, Stream::Augment, &[1, i as u64]);
        let side = draw_crop_side(&mut rng, h, w, crops.local_crops_scale)?;
        let (top, left) = random_window(&mut rng, h, w, side);
        let (view, prov) = make_one_view(
            image,
            policy,
            &mut rng,
            ViewKind::Local,
            (top, left, side, side),
            crops.local_crops_size,
            None,
            false,
        )?;
        set.local_views.push(view);
        set.local_provenance.push(prov);
    }

    if crops.guided_crops_number > 0 {
        if let Some(roi) = roi {
            let focusable = !roi.is_empty();
            for i in 0..crops.guided_crops_number {
                let mut rng = stream_rng(seed, Stream::Augment, &[2, i as u64]);
                // side fraction drawn from the local scale range
                let (lo, hi) = crops.local_crops_scale;
                let side_frac = rng.gen_range(lo..=hi);
                let side = ((side_frac * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
                let (crop, focus, fallback) = if focusable {
                    let f = pick_focus_center(roi, &mut rng)?;
                    let (top, left) = window_containing(&mut rng, h, w, side, f);
                    ((top, left, side, side), Some(f), false)
                } else {
                    // all-zero ROI: fall back to a random window, recorded
                    let (top, left) = random_window(&mut rng, h, w, side);
                    ((top, left, side, side), None, true)
                };
                let (view, prov) = make_one_view(
                    image,
                    policy,
                    &mut rng,
                    ViewKind::Guided,
                    crop,
                    crops.local_crops_size,
                    focus,
                    fallback,
                )?;
                set.guided_views.push(view);
                set.guided_provenance.push(prov);
            }
        }
    }
    Ok(set)
}
