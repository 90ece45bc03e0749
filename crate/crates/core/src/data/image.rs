//! Decoding, bilinear resampling and affine augmentation.

use std::path::Path;

use ::image::{DynamicImage, GrayImage, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;
use crate::tensor::{Shape, Tensor};

/// Shear factors are drawn from `[-SHEAR_RANGE, SHEAR_RANGE]`.
pub const SHEAR_RANGE: f64 = 0.1;
/// Zoom factors are drawn from `[1 - ZOOM_RANGE, 1 + ZOOM_RANGE]`.
pub const ZOOM_RANGE: f64 = 0.1;

fn hwc(img: &Tensor) -> (usize, usize, usize) {
    match *img.dims() {
        [h, w, c] => (h, w, c),
        ref d => panic!("expected a rank-3 image, got {d:?}"),
    }
}

/// Bilinear sample at continuous pixel coordinates `(y, x)`, where integer
/// coordinates are pixel centers. Coordinates outside the image are clamped
/// (edge replication).
fn sample(data: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, out: &mut [f64]) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (wy, wx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize, k: usize| data[(yy * w + xx) * c + k];
    for (k, o) in out.iter_mut().enumerate() {
        let top = at(y0, x0, k) + (at(y0, x1, k) - at(y0, x0, k)) * wx;
        let bottom = at(y1, x0, k) + (at(y1, x1, k) - at(y1, x0, k)) * wx;
        *o = top + (bottom - top) * wy;
    }
}

/// Half-pixel-aligned bilinear resize (`align_corners = false`): output
/// pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = hwc(img);
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        let y = (i as f64 + 0.5) * sy - 0.5;
        for j in 0..ow {
            let x = (j as f64 + 0.5) * sx - 0.5;
            sample(img.data(), h, w, c, y, x, &mut out[(i * ow + j) * c..][..c]);
        }
    }
    Tensor::from_vec(Shape::new(vec![oh, ow, c]).expect("nonzero dims"), out).expect("sized above")
}

/// Resizes a rank-3 image to `(H, W, C)`, replicating a single channel or
/// averaging channels down to one as needed.
pub fn conform(img: &Tensor, target: &[usize]) -> Result<Tensor, DataError> {
    let &[th, tw, tc] = target else {
        return Err(DataError::Target(target.to_vec()));
    };
    let (h, w, c) = hwc(img);
    let resized = if (h, w) == (th, tw) {
        img.clone()
    } else {
        resize_bilinear(img, th, tw)
    };
    let data: Vec<f64> = match (c, tc) {
        (a, b) if a == b => return Ok(resized),
        (1, _) => resized
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, tc))
            .collect(),
        (_, 1) => resized
            .data()
            .chunks_exact(c)
            .map(|p| p.iter().sum::<f64>() / c as f64)
            .collect(),
        _ => return Err(DataError::Target(target.to_vec())),
    };
    Ok(Tensor::from_vec(Shape::new(target.to_vec())?, data)?)
}

/// Loads an 8-bit grayscale or RGB PNG, resizes it to `target = (H, W, C)`
/// and maps pixel values `x` to `x / 127.5 - 1`.
///
/// Grayscale is replicated when `C = 3`; RGB is reduced to luma
/// (0.299, 0.587, 0.114) when `C = 1`.
pub fn load_and_preprocess(path: &Path, target: &[usize]) -> Result<Tensor, DataError> {
    let &[th, tw, tc] = target else {
        return Err(DataError::Target(target.to_vec()));
    };
    if th == 0 || tw == 0 || !(tc == 1 || tc == 3) {
        return Err(DataError::Target(target.to_vec()));
    }
    let decode = |source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    };
    let img = ImageReader::open(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .decode()
        .map_err(decode)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (src_c, raw): (usize, Vec<u8>) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageRgb8(rgb) => (3, rgb.into_raw()),
        other => {
            return Err(DataError::Unsupported {
                path: path.to_path_buf(),
                format: format!("{:?}", other.color()),
            })
        }
    };
    let pixels: Vec<f64> = match (src_c, tc) {
        (1, 3) => raw.iter().flat_map(|&v| [f64::from(v); 3]).collect(),
        (3, 1) => raw
            .chunks_exact(3)
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect(),
        _ => raw.iter().map(|&v| f64::from(v)).collect(),
    };
    let src = Tensor::from_vec(Shape::new(vec![h, w, tc])?, pixels)?;
    let resized = if (h, w) == (th, tw) {
        src
    } else {
        resize_bilinear(&src, th, tw)
    };
    Ok(resized.map(|v| (v / 127.5 - 1.0).clamp(-1.0, 1.0)))
}

/// Writes a `[-1, 1]` image as an 8-bit PNG (grayscale, or the first
/// channel of a multi-channel image).
pub(super) fn save_png(img: &Tensor, path: &Path) -> Result<(), DataError> {
    let (h, w, c) = hwc(img);
    let raw: Vec<u8> = img
        .data()
        .chunks_exact(c)
        .map(|p| ((p[0].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from the image")
        .save(path)
        .map_err(|source| DataError::Decode {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Horizontal shear factor: `x' = x + shear * y` about the center.
    pub shear: f64,
    /// Isotropic magnification about the center; `> 1` enlarges content.
    pub zoom: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { shear: 0.0, zoom: 1.0 };

    pub fn draw(seed: u64) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AugmentParams {
            shear: rng.random_range(-SHEAR_RANGE..=SHEAR_RANGE),
            zoom: rng.random_range(1.0 - ZOOM_RANGE..=1.0 + ZOOM_RANGE),
        }
    }
}

/// Random shear and zoom, drawn from `seed`.
pub fn augment(img: &Tensor, seed: u64) -> Tensor {
    augment_with(img, AugmentParams::draw(seed))
}

/// Applies the forward map `p' = c + zoom * [[1, shear], [0, 1]] (p - c)`
/// by inverse bilinear sampling with edge replication.
pub fn augment_with(img: &Tensor, params: AugmentParams) -> Tensor {
    let (h, w, c) = hwc(img);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for i in 0..h {
        let dy = (i as f64 - cy) / params.zoom;
        for j in 0..w {
            let dx = (j as f64 - cx) / params.zoom - params.shear * dy;
            sample(img.data(), h, w, c, cy + dy, cx + dx, &mut out[(i * w + j) * c..][..c]);
        }
    }
    Tensor::from_vec(img.shape().clone(), out).expect("same shape")
}
