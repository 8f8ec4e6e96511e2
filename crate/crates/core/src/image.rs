//! Binary PPM (P6) / PGM (P5) reading and writing, plus conversions between
//! byte images and [-1, 1] planar tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit image (1 channel grayscale or 3 channel RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct ByteImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ByteImage {
    pub fn new(channels: usize, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ImageFormat {
                path: String::new(),
                reason: format!("unsupported channel count {channels}"),
            });
        }
        if pixels.len() != channels * width * height {
            return Err(Error::DataLength {
                expected: channels * width * height,
                got: pixels.len(),
            });
        }
        Ok(ByteImage {
            channels,
            width,
            height,
            pixels,
        })
    }
}

/// Map a `[c x h x w]` tensor in [-1, 1] to bytes (clamped).
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<ByteImage> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "tensor_to_image",
            left: shape.to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let v = t.values();
    let mut pixels = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let val = v[ch * h * w + y * w + x].as_f64();
                let byte = ((val + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
                pixels[(y * w + x) * c + ch] = byte;
            }
        }
    }
    ByteImage::new(c, w, h, pixels)
}

/// Map bytes to a `[c x h x w]` tensor in [-1, 1].
pub fn image_to_tensor<T: Scalar>(img: &ByteImage) -> Tensor<T> {
    let (c, h, w) = (img.channels, img.height, img.width);
    let mut data = vec![T::zero(); c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let byte = img.pixels[(y * w + x) * c + ch];
                data[ch * h * w + y * w + x] = T::from_f64(byte as f64 / 255.0 * 2.0 - 1.0);
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], data).unwrap()
}

/// Write P5 (grayscale) or P6 (RGB) depending on the channel count.
pub fn write_image(path: &Path, img: &ByteImage) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    out.extend_from_slice(&img.pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Read a binary P5/P6 file. Header comments (`#`) are skipped.
pub fn read_image(path: &Path) -> Result<ByteImage> {
    let bytes = fs::read(path)?;
    let err = |reason: &str| Error::ImageFormat {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        // returns (start, end) of the next whitespace-separated token,
        // skipping # comments
        let mut i = pos;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        pos = i;
        Some((start, i))
    };

    let (s, e) = token(&bytes).ok_or_else(|| err("missing magic"))?;
    let channels = match &bytes[s..e] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(err("not a binary P5/P6 file")),
    };
    let parse_int = |range: (usize, usize)| -> Result<usize> {
        std::str::from_utf8(&bytes[range.0..range.1])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| err("bad header integer"))
    };
    let width = parse_int(token(&bytes).ok_or_else(|| err("missing width"))?)?;
    let height = parse_int(token(&bytes).ok_or_else(|| err("missing height"))?)?;
    let maxval = parse_int(token(&bytes).ok_or_else(|| err("missing maxval"))?)?;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    let data_start = pos + 1;
    let expected = channels * width * height;
    if bytes.len() < data_start + expected {
        return Err(err("payload shorter than header promises"));
    }
    ByteImage::new(
        channels,
        width,
        height,
        bytes[data_start..data_start + expected].to_vec(),
    )
}

/// Write an importance-score heatmap as PGM: scores are min-max normalized
/// to [0, 255] over the grid and upscaled by `scale` with nearest neighbor.
pub fn write_heatmap_pgm(path: &Path, scores: &[f64], side: usize, scale: usize) -> Result<()> {
    if scores.len() != side * side {
        return Err(Error::DataLength {
            expected: side * side,
            got: scores.len(),
        });
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let out_side = side * scale.max(1);
    let mut pixels = vec![0u8; out_side * out_side];
    for y in 0..out_side {
        for x in 0..out_side {
            let s = scores[(y / scale.max(1)) * side + x / scale.max(1)];
            pixels[y * out_side + x] = (((s - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    write_image(path, &ByteImage::new(1, out_side, out_side, pixels)?)
}
