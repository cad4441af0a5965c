//! Growth stage: dilate the predicted region until the model's prediction on
//! the masked image agrees with its prediction on the full image.

use crate::adapter::SegmentationAdapter;
use crate::config::MisureConfig;
use crate::error::{MisureError, Result};
use crate::masks::{apply_mask, binarize_prediction, dilate, resize_mask, ResizeMethod, StructuringElement};
use crate::metrics::dice_hard;
use crate::types::{BinaryMask, ContinuousMask, Image, ProbabilityMap};

/// One growth iteration: Dice against the reference prediction and the size
/// of the working mask at that point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrTraceRow {
    pub iteration: usize,
    pub dice: f64,
    pub nonzero_count: usize,
}

/// A region whose pixels suffice to reproduce the reference prediction.
#[derive(Debug, Clone)]
pub struct SrResult {
    /// Final mask at image resolution; superset of the initial prediction.
    pub m_sr: BinaryMask,
    /// The input with everything outside `m_sr` switched off.
    pub x_sr: Image,
    /// Number of dilation steps taken.
    pub n_dilations: usize,
    /// Dice at termination; strictly above `tau`.
    pub dice_at_stop: f64,
    pub trace: Vec<SrTraceRow>,
}

/// Initial mask: all ones at `mask_size`, resized to the image grid, then
/// zeroed outside the class-`class` prediction. The output is binary-valued.
pub fn init_mask(
    probs: &ProbabilityMap,
    class: usize,
    mask_size: (usize, usize),
) -> Result<ContinuousMask> {
    let prediction = binarize_prediction(probs, class)?;
    if prediction.is_empty() {
        return Err(MisureError::ClassAbsent { class });
    }
    let ones = ContinuousMask::ones(mask_size.0, mask_size.1);
    let resized = resize_mask(
        &ones,
        probs.height(),
        probs.width(),
        ResizeMethod::Nearest,
    );
    let data = resized.into_data() * &prediction.data().mapv(f64::from);
    ContinuousMask::new(data)
}

/// Grows the prediction support by disk dilation until the masked input's
/// prediction reaches Dice > `config.tau` against the full input's
/// prediction for `class`. The cap only exists to bound misbehaving
/// adapters: an all-ones mask reproduces the input exactly, so growth
/// terminates on its own.
pub fn find_sr(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    class: usize,
    config: &MisureConfig,
) -> Result<SrResult> {
    config.validate()?;
    let p0 = adapter.forward(x0)?;
    let pred0 = binarize_prediction(&p0, class)?;
    if pred0.is_empty() {
        return Err(MisureError::ClassAbsent { class });
    }

    let m0 = init_mask(&p0, class, config.mask_size)?;
    let cap = config.dilation_cap(x0.height(), x0.width());
    let kernel = StructuringElement::disk(config.kernel_radius);
    let mut mask = m0.support();
    let mut n_dilations = 0usize;
    let mut trace = Vec::new();

    loop {
        let x_m = apply_mask(x0, &mask.to_continuous())?;
        let p_m = adapter.forward(&x_m)?;
        let pred_m = binarize_prediction(&p_m, class)?;
        let dice = dice_hard(&pred_m, &pred0)?;
        trace.push(SrTraceRow {
            iteration: n_dilations,
            dice,
            nonzero_count: mask.count_ones(),
        });
        if dice > config.tau {
            return Ok(SrResult {
                m_sr: mask,
                x_sr: x_m,
                n_dilations,
                dice_at_stop: dice,
                trace,
            });
        }
        if n_dilations == cap {
            return Err(MisureError::MaxDilationsExceeded { cap, dice });
        }
        mask = dilate(&mask, &kernel);
        n_dilations += 1;
    }
}
