//! Comparator saliency methods: randomized masking, sliding-window
//! occlusion, and activation-weighted class mapping.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::SegmentationAdapter;
use crate::error::{MisureError, Result};
use crate::masks::{apply_mask, binarize_prediction, resize_array, ResizeMethod};
use crate::metrics::dice_hard;
use crate::parallel::{map_items, map_items_seq};
use crate::types::{ContinuousMask, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiseConfig {
    pub n_masks: usize,
    /// Side length of the low-resolution Bernoulli grid.
    pub grid: usize,
    pub keep_prob: f64,
    pub thresholds: Vec<f64>,
    pub seed: u64,
    /// Divide each pixel by its empirical visibility count before
    /// normalizing, the classic importance estimate. Off by default:
    /// a plain linear combination of the masks.
    pub normalize_by_expectation: bool,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            n_masks: 2000,
            grid: 7,
            keep_prob: 0.5,
            thresholds: vec![0.2, 0.4],
            seed: 0,
            normalize_by_expectation: false,
        }
    }
}

impl RiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_masks == 0 {
            return Err(MisureError::Config("n_masks must be >= 1".into()));
        }
        if self.grid == 0 {
            return Err(MisureError::Config("grid must be >= 1".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(MisureError::Config(format!(
                "keep_prob must lie in (0,1), got {}",
                self.keep_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgcConfig {
    /// Activation layer name the adapter must recognize.
    pub layer: String,
    pub thresholds: Vec<f64>,
}

impl Default for SgcConfig {
    fn default() -> Self {
        Self {
            layer: "bottleneck".into(),
            thresholds: vec![0.05, 0.1],
        }
    }
}

/// Min–max rescale to [0,1]; a zero-range map becomes all zeros.
fn min_max_normalize(mut map: Array2<f64>) -> Array2<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        map.fill(0.0);
        return map;
    }
    map.mapv_inplace(|v| (v - lo) / (hi - lo));
    map
}

/// Low-resolution Bernoulli grid, bilinearly upsampled one cell larger than
/// the image and cropped at an integer sub-cell shift.
fn rise_mask(rng: &mut ChaCha8Rng, grid: usize, keep_prob: f64, h: usize, w: usize) -> ContinuousMask {
    let cells = Array2::from_shape_fn((grid, grid), |_| f64::from(rng.gen_bool(keep_prob)));
    let cell_h = h.div_ceil(grid).max(1);
    let cell_w = w.div_ceil(grid).max(1);
    let big = resize_array(
        &cells,
        (grid + 1) * cell_h,
        (grid + 1) * cell_w,
        ResizeMethod::Bilinear,
    );
    let dy = rng.gen_range(0..cell_h);
    let dx = rng.gen_range(0..cell_w);
    let cropped = Array2::from_shape_fn((h, w), |(y, x)| big[[y + dy, x + dx]].clamp(0.0, 1.0));
    ContinuousMask::new_unchecked(cropped)
}

/// Weighted combination of caller-supplied masks, each weighted by the
/// class-`class` Dice between the masked and original predictions, then
/// min–max normalized. Mask evaluations run concurrently for thread-safe
/// adapters; the reduction always happens in mask-index order.
pub fn rise_saliency_with_masks(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    class: usize,
    masks: Vec<ContinuousMask>,
    normalize_by_expectation: bool,
) -> Result<ContinuousMask> {
    let (_, h, w) = x0.shape();
    let p0 = adapter.forward(x0)?;
    let pred0 = binarize_prediction(&p0, class)?;
    if pred0.is_empty() {
        return Err(MisureError::ClassAbsent { class });
    }

    let score = |mask: ContinuousMask| -> Result<(ContinuousMask, f64)> {
        let x_m = apply_mask(x0, &mask)?;
        let p_m = adapter.forward(&x_m)?;
        let pred_m = binarize_prediction(&p_m, class)?;
        let dice = dice_hard(&pred_m, &pred0)?;
        Ok((mask, dice))
    };
    let scored = if adapter.capabilities().thread_safe {
        map_items(masks, score)
    } else {
        map_items_seq(masks, score)
    };

    let mut sum = Array2::<f64>::zeros((h, w));
    let mut visibility = Array2::<f64>::zeros((h, w));
    for item in scored {
        let (mask, dice) = item?;
        sum.scaled_add(dice, mask.data());
        visibility += mask.data();
    }
    if normalize_by_expectation {
        for (s, &c) in sum.iter_mut().zip(visibility.iter()) {
            *s = if c > 0.0 { *s / c } else { 0.0 };
        }
    }
    Ok(ContinuousMask::new_unchecked(min_max_normalize(sum)))
}

/// Randomized-masking saliency with `cfg.n_masks` generated masks.
pub fn rise_saliency(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    class: usize,
    cfg: &RiseConfig,
) -> Result<ContinuousMask> {
    cfg.validate()?;
    let (_, h, w) = x0.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masks: Vec<ContinuousMask> = (0..cfg.n_masks)
        .map(|_| rise_mask(&mut rng, cfg.grid, cfg.keep_prob, h, w))
        .collect();
    rise_saliency_with_masks(adapter, x0, class, masks, cfg.normalize_by_expectation)
}

/// Sliding-window occlusion: each window is zeroed in turn and scored by
/// how much the class-`class` prediction degrades; per-pixel scores are
/// averaged over the windows covering the pixel, then min–max normalized.
pub fn occlusion_saliency(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    class: usize,
    patch: usize,
    stride: usize,
) -> Result<ContinuousMask> {
    if patch == 0 || stride == 0 {
        return Err(MisureError::Config(
            "occlusion patch and stride must be >= 1".into(),
        ));
    }
    let (_, h, w) = x0.shape();
    let p0 = adapter.forward(x0)?;
    let pred0 = binarize_prediction(&p0, class)?;
    if pred0.is_empty() {
        return Err(MisureError::ClassAbsent { class });
    }

    let mut origins = Vec::new();
    let mut y = 0;
    while y < h {
        let mut x = 0;
        while x < w {
            origins.push((y, x));
            x += stride;
        }
        y += stride;
    }

    let score = |origin: (usize, usize)| -> Result<f64> {
        let (oy, ox) = origin;
        let mut occluded = x0.data().clone();
        for yy in oy..(oy + patch).min(h) {
            for xx in ox..(ox + patch).min(w) {
                for c in 0..occluded.dim().0 {
                    occluded[[c, yy, xx]] = 0.0;
                }
            }
        }
        let p_m = adapter.forward(&Image::new_unchecked(occluded))?;
        let pred_m = binarize_prediction(&p_m, class)?;
        Ok(1.0 - dice_hard(&pred_m, &pred0)?)
    };
    let scores = if adapter.capabilities().thread_safe {
        map_items(origins.clone(), score)
    } else {
        map_items_seq(origins.clone(), score)
    };

    let mut acc = Array2::<f64>::zeros((h, w));
    let mut cover = Array2::<f64>::zeros((h, w));
    for ((oy, ox), s) in origins.into_iter().zip(scores) {
        let s = s?;
        for yy in oy..(oy + patch).min(h) {
            for xx in ox..(ox + patch).min(w) {
                acc[[yy, xx]] += s;
                cover[[yy, xx]] += 1.0;
            }
        }
    }
    for (a, &c) in acc.iter_mut().zip(cover.iter()) {
        if c > 0.0 {
            *a /= c;
        }
    }
    Ok(ContinuousMask::new_unchecked(min_max_normalize(acc)))
}

/// Activation-weighted class saliency: the target scalar is the summed
/// class-`class` probability over the pixels predicted as that class; each
/// activation map is weighted by the spatial mean of the target's gradient
/// on it, and the rectified weighted sum is upsampled and normalized.
pub fn seg_grad_cam(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    class: usize,
    cfg: &SgcConfig,
) -> Result<ContinuousMask> {
    let (_, h, w) = x0.shape();
    let p0 = adapter.forward(x0)?;
    let pred0 = binarize_prediction(&p0, class)?;
    if pred0.is_empty() {
        return Err(MisureError::ClassAbsent { class });
    }

    let (classes, ph, pw) = p0.shape();
    let mut cotangent = Array3::<f64>::zeros((classes, ph, pw));
    {
        let mut plane = cotangent.index_axis_mut(ndarray::Axis(0), class);
        for (c, &m) in plane.iter_mut().zip(pred0.data().iter()) {
            *c = f64::from(m);
        }
    }

    let acts = adapter.activations(x0, &cfg.layer)?;
    let grads = adapter.activation_gradient(x0, &cfg.layer, &cotangent)?;
    if acts.dim() != grads.dim() {
        return Err(MisureError::Shape(format!(
            "activations {:?} vs gradient {:?}",
            acts.dim(),
            grads.dim()
        )));
    }

    let (k, ah, aw) = acts.dim();
    let spatial = (ah * aw) as f64;
    let mut cam = Array2::<f64>::zeros((ah, aw));
    for i in 0..k {
        let weight = grads.index_axis(ndarray::Axis(0), i).sum() / spatial;
        cam.scaled_add(weight, &acts.index_axis(ndarray::Axis(0), i));
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let up = resize_array(&cam, h, w, ResizeMethod::Bilinear);
    Ok(ContinuousMask::new_unchecked(min_max_normalize(up)))
}
