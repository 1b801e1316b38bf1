//! Binary netpbm (P5 PGM, P6 PPM) decoding and encoding.
//!
//! 8-bit samples scale by 1/255, 16-bit (maxval > 255, big-endian per the
//! netpbm spec) by 1/maxval, into [0, 1].

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("unsupported magic bytes (only binary P5/P6 are supported)")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("dimension overflow: {0}x{1}")]
    DimensionOverflow(usize, usize),
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

/// Decoded netpbm image: planar row-major samples in [0, 1], one plane per
/// channel.
#[derive(Debug, Clone)]
pub struct PnmImage {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<f32>,
}

impl PnmImage {
    pub fn channels(&self) -> usize {
        match self.kind {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage, NetpbmError> {
    decode_pnm(&fs::read(path)?)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage, NetpbmError> {
    if bytes.len() < 2 {
        return Err(NetpbmError::BadMagic);
    }
    let kind = match &bytes[..2] {
        b"P5" => PnmKind::Gray,
        b"P6" => PnmKind::Rgb,
        _ => return Err(NetpbmError::BadMagic),
    };
    let mut pos = 2;
    let width = read_header_number(bytes, &mut pos)?;
    let height = read_header_number(bytes, &mut pos)?;
    let maxval = read_header_number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(NetpbmError::BadHeader(format!("maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(NetpbmError::BadHeader("missing raster separator".into()));
    }
    pos += 1;

    let channels = match kind {
        PnmKind::Gray => 1,
        PnmKind::Rgb => 3,
    };
    let pixels = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or(NetpbmError::DimensionOverflow(width, height))?;
    if width == 0 || height == 0 {
        return Err(NetpbmError::BadHeader("zero dimension".into()));
    }
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let expected = pixels * bytes_per_sample;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(NetpbmError::Truncated {
            expected,
            actual: raster.len(),
        });
    }

    // Interleaved raster -> planar channel layout.
    let scale = 1.0 / maxval as f32;
    let mut samples = vec![0.0f32; pixels];
    for i in 0..width * height {
        for c in 0..channels {
            let raw = if bytes_per_sample == 1 {
                raster[i * channels + c] as u32
            } else {
                let o = (i * channels + c) * 2;
                u16::from_be_bytes([raster[o], raster[o + 1]]) as u32
            };
            samples[c * width * height + i] = raw as f32 * scale;
        }
    }
    Ok(PnmImage {
        kind,
        width,
        height,
        samples,
    })
}

fn read_header_number(bytes: &[u8], pos: &mut usize) -> Result<usize, NetpbmError> {
    // Skip whitespace and '#' comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(NetpbmError::BadHeader("expected integer".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| NetpbmError::BadHeader("integer out of range".into()))
}

/// Encodes planar [0,1] samples as 8-bit binary PGM/PPM (values clamped,
/// rounded to nearest).
pub fn encode_pnm(kind: PnmKind, width: usize, height: usize, samples: &[f32]) -> Vec<u8> {
    let channels = match kind {
        PnmKind::Gray => 1usize,
        PnmKind::Rgb => 3,
    };
    assert_eq!(samples.len(), width * height * channels);
    let magic = match kind {
        PnmKind::Gray => "P5",
        PnmKind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    for i in 0..width * height {
        for c in 0..channels {
            let v = samples[c * width * height + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pnm(
    path: &Path,
    kind: PnmKind,
    width: usize,
    height: usize,
    samples: &[f32],
) -> Result<(), NetpbmError> {
    fs::write(path, encode_pnm(kind, width, height, samples))?;
    Ok(())
}
