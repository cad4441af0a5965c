//! Mask morphology, resizing, and application.

use ndarray::{Array2, Array3};

use crate::error::{MisureError, Result};
use crate::types::{BinaryMask, ContinuousMask, Image, ProbabilityMap};

/// Offsets of a structuring element relative to its center.
///
/// Invariants: contains (0,0) and is symmetric under negation, so
/// dilation with it is extensive and commutes with reflection.
#[derive(Debug, Clone)]
pub struct StructuringElement {
    offsets: Vec<(i64, i64)>,
}

impl StructuringElement {
    /// Disk of the given radius: offsets with dy^2 + dx^2 <= r^2.
    pub fn disk(radius: u32) -> Self {
        let r = i64::from(radius);
        let r2 = r * r;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r2 {
                    offsets.push((dy, dx));
                }
            }
        }
        Self { offsets }
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Morphological dilation: a pixel is set iff any element offset
/// reaches a set pixel of the input. Out-of-bounds offsets are ignored.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (h, w) = mask.dim();
    let src = mask.data();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if src[[y, x]] == 0 {
                continue;
            }
            for &(dy, dx) in se.offsets() {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[[ny as usize, nx as usize]] = 1;
                }
            }
        }
    }
    BinaryMask::new_unchecked_from(out)
}

/// Pixelwise product of image and mask, broadcast over channels.
pub fn apply_mask(image: &Image, mask: &ContinuousMask) -> Result<Image> {
    let (c, h, w) = image.shape();
    if mask.dim() != (h, w) {
        return Err(MisureError::InputShape {
            expected: format!("mask {h}x{w}"),
            got: format!("{}x{}", mask.dim().0, mask.dim().1),
        });
    }
    let m = mask.data();
    let mut data = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[[ch, y, x]] = image.data()[[ch, y, x]] * m[[y, x]];
            }
        }
    }
    Ok(Image::new_unchecked(data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMethod {
    /// Preserves binarity; each output pixel copies its nearest source.
    Nearest,
    /// Align-corners-false bilinear; values stay within input bounds.
    Bilinear,
}

fn nearest_index(out_i: usize, scale: f64, src_len: usize) -> usize {
    // Center-aligned mapping: source coordinate of the output pixel center.
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let idx = src.round();
    idx.clamp(0.0, (src_len - 1) as f64) as usize
}

/// Source interpolation weights for one output coordinate (bilinear).
fn lerp_coords(out_i: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (src_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    let t = src - i0 as f64;
    (i0, i1, t)
}

pub fn resize_array(
    src: &Array2<f64>,
    out_h: usize,
    out_w: usize,
    method: ResizeMethod,
) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    match method {
        ResizeMethod::Nearest => Array2::from_shape_fn((out_h, out_w), |(y, x)| {
            src[[nearest_index(y, sy, h), nearest_index(x, sx, w)]]
        }),
        ResizeMethod::Bilinear => Array2::from_shape_fn((out_h, out_w), |(y, x)| {
            let (y0, y1, ty) = lerp_coords(y, sy, h);
            let (x0, x1, tx) = lerp_coords(x, sx, w);
            let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
            let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
            top * (1.0 - ty) + bot * ty
        }),
    }
}

/// Adjoint of nearest `resize_array`: sums the upstream gradient over
/// all output pixels that copied each source pixel. For any g and m,
/// `<g, resize(m)> == <adjoint(g), m>`.
pub fn resize_nearest_adjoint(grad_out: &Array2<f64>, src_h: usize, src_w: usize) -> Array2<f64> {
    let (out_h, out_w) = grad_out.dim();
    if (src_h, src_w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let sy = src_h as f64 / out_h as f64;
    let sx = src_w as f64 / out_w as f64;
    let mut grad_src = Array2::<f64>::zeros((src_h, src_w));
    for y in 0..out_h {
        let srcy = nearest_index(y, sy, src_h);
        for x in 0..out_w {
            grad_src[[srcy, nearest_index(x, sx, src_w)]] += grad_out[[y, x]];
        }
    }
    grad_src
}

/// Adjoint of bilinear `resize_array`: scatters an upstream gradient at
/// the output resolution back onto source pixels with the same weights.
/// For any g and m, `<g, resize(m)> == <adjoint(g), m>`.
pub fn resize_bilinear_adjoint(
    grad_out: &Array2<f64>,
    src_h: usize,
    src_w: usize,
) -> Array2<f64> {
    let (out_h, out_w) = grad_out.dim();
    if (src_h, src_w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let sy = src_h as f64 / out_h as f64;
    let sx = src_w as f64 / out_w as f64;
    let mut grad_src = Array2::<f64>::zeros((src_h, src_w));
    for y in 0..out_h {
        let (y0, y1, ty) = lerp_coords(y, sy, src_h);
        for x in 0..out_w {
            let (x0, x1, tx) = lerp_coords(x, sx, src_w);
            let g = grad_out[[y, x]];
            grad_src[[y0, x0]] += g * (1.0 - tx) * (1.0 - ty);
            grad_src[[y0, x1]] += g * tx * (1.0 - ty);
            grad_src[[y1, x0]] += g * (1.0 - tx) * ty;
            grad_src[[y1, x1]] += g * tx * ty;
        }
    }
    grad_src
}

pub fn resize_mask(
    mask: &ContinuousMask,
    out_h: usize,
    out_w: usize,
    method: ResizeMethod,
) -> ContinuousMask {
    ContinuousMask::new_unchecked(resize_array(mask.data(), out_h, out_w, method))
}

pub fn resize_binary(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let cont = resize_array(
        &mask.data().mapv(f64::from),
        out_h,
        out_w,
        ResizeMethod::Nearest,
    );
    BinaryMask::new_unchecked_from(cont.mapv(|v| if v >= 0.5 { 1u8 } else { 0 }))
}

/// Zeroes values below `low`, caps values above 1; anything in between
/// is kept as-is.
pub fn clamp_mask(mask: &mut Array2<f64>, low: f64) {
    for v in mask.iter_mut() {
        if *v < low {
            *v = 0.0;
        } else if *v > 1.0 {
            *v = 1.0;
        }
    }
}

/// Binary mask of saliency strictly above the threshold.
pub fn threshold_saliency(saliency: &Array2<f64>, threshold: f64) -> BinaryMask {
    BinaryMask::new_unchecked_from(
        saliency.mapv(|v| if v > threshold { 1u8 } else { 0 }),
    )
}

/// Argmax-equals-class indicator, ties broken toward the lower index.
pub fn binarize_prediction(probs: &ProbabilityMap, class: usize) -> Result<BinaryMask> {
    let (l, h, w) = probs.shape();
    if class >= l {
        return Err(MisureError::ClassAbsent { class });
    }
    let p = probs.data();
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = p[[0, y, x]];
        for ch in 1..l {
            if p[[ch, y, x]] > best_v {
                best_v = p[[ch, y, x]];
                best = ch;
            }
        }
        u8::from(best == class)
    });
    Ok(BinaryMask::new_unchecked_from(mask))
}
