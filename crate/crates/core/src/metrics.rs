//! Segmentation-overlap metrics and saliency evaluation scores.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adapter::SegmentationAdapter;
use crate::error::{MisureError, Result};
use crate::masks::{apply_mask, binarize_prediction};
use crate::types::{BinaryMask, ContinuousMask, Image, ProbabilityMap};

/// Hard Dice overlap of two binary masks. Two empty masks overlap
/// perfectly by convention (score 1).
pub fn dice_hard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MisureError::InputShape {
            expected: format!("{}x{}", a.dim().0, a.dim().1),
            got: format!("{}x{}", b.dim().0, b.dim().1),
        });
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        inter += u64::from(x & y);
        total += u64::from(x) + u64::from(y);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Smoothed soft Dice on real-valued maps:
/// `(2*sum(p*q) + eps) / (sum(p) + sum(q) + eps)`.
pub fn dice_soft(p: &Array2<f64>, q: &Array2<f64>, eps: f64) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(MisureError::InputShape {
            expected: format!("{}x{}", p.dim().0, p.dim().1),
            got: format!("{}x{}", q.dim().0, q.dim().1),
        });
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_q = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        inter += a * b;
        sum_p += a;
        sum_q += b;
    }
    Ok((2.0 * inter + eps) / (sum_p + sum_q + eps))
}

/// Hard Dice between the class-`class` argmax regions of two
/// probability maps. Errors when the class is absent from the
/// original (second) prediction.
pub fn dice_explained_from_probs(
    probs_explained: &ProbabilityMap,
    probs_original: &ProbabilityMap,
    class: usize,
) -> Result<f64> {
    let b = binarize_prediction(probs_original, class)?;
    if b.is_empty() {
        return Err(MisureError::ClassAbsent { class });
    }
    let a = binarize_prediction(probs_explained, class)?;
    dice_hard(&a, &b)
}

/// How well the model's prediction on an explanation image agrees
/// with its prediction on the original image, for one class.
pub fn dice_explained(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    saliency_image: &Image,
    class: usize,
) -> Result<f64> {
    let p_orig = adapter.forward(x0)?;
    let p_expl = adapter.forward(saliency_image)?;
    dice_explained_from_probs(&p_expl, &p_orig, class)
}

/// Fraction of the predicted region retained by a saliency map:
/// `count(saliency > 0) / count(prediction == 1)`.
pub fn perturbation_ratio(saliency: &ContinuousMask, prediction: &BinaryMask) -> Result<f64> {
    if saliency.dim() != prediction.dim() {
        return Err(MisureError::InputShape {
            expected: format!("{}x{}", prediction.dim().0, prediction.dim().1),
            got: format!("{}x{}", saliency.dim().0, saliency.dim().1),
        });
    }
    let pred = prediction.count_ones();
    if pred == 0 {
        return Err(MisureError::EmptyInput(
            "perturbation ratio needs a nonempty prediction".into(),
        ));
    }
    Ok(saliency.count_nonzero() as f64 / pred as f64)
}

/// Reveals pixels of `x0` in decreasing saliency order (ties broken
/// row-major) in `steps` equal increments and scores each prefix by
/// class-`class` Dice against the original prediction. Returns
/// `steps + 1` points `(revealed_fraction, dice)`, the first at
/// fraction 0 and the last at fraction 1.
pub fn insertion_curve(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    saliency: &ContinuousMask,
    class: usize,
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    if steps < 2 {
        return Err(MisureError::Config(
            "insertion curve needs at least two steps".into(),
        ));
    }
    let (h, w) = saliency.dim();
    if (x0.height(), x0.width()) != (h, w) {
        return Err(MisureError::InputShape {
            expected: format!("{h}x{w}"),
            got: format!("{}x{}", x0.height(), x0.width()),
        });
    }
    let p_orig = adapter.forward(x0)?;
    let pred = binarize_prediction(&p_orig, class)?;
    if pred.is_empty() {
        return Err(MisureError::ClassAbsent { class });
    }
    let sal = saliency.data();
    let mut order: Vec<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).collect();
    // Stable sort keeps row-major order among equal saliency values.
    order.sort_by(|&(ay, ax), &(by, bx)| {
        sal[[by, bx]]
            .partial_cmp(&sal[[ay, ax]])
            .expect("saliency values are finite")
    });
    let total = h * w;
    let mut revealed = Array2::<f64>::zeros((h, w));
    let mut cursor = 0usize;
    let mut curve = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        let upto = total * s / steps;
        while cursor < upto {
            let (y, x) = order[cursor];
            revealed[[y, x]] = 1.0;
            cursor += 1;
        }
        let masked = apply_mask(x0, &ContinuousMask::new_unchecked(revealed.clone()))?;
        let probs = adapter.forward(&masked)?;
        let dice = dice_hard(&binarize_prediction(&probs, class)?, &pred)?;
        curve.push((upto as f64 / total as f64, dice));
    }
    Ok(curve)
}

/// Summary scores for one explanation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice_explained: f64,
    pub perturbation_ratio: f64,
    pub wall_time_s: f64,
    pub n_dilations: usize,
}
