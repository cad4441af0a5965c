//! Pruning stage: shrink the grown region to a minimal one by optimizing a
//! continuous mask under sparsity, smoothness, and prediction-preservation
//! pressure, with a hard clamp rule applied after every step.

use std::time::Instant;

use ndarray::{Array2, Array3};

use crate::adapter::SegmentationAdapter;
use crate::config::MisureConfig;
use crate::error::{MisureError, Result};
use crate::masks::{apply_mask, binarize_prediction, clamp_mask, resize_binary, resize_mask, resize_nearest_adjoint, ResizeMethod};
use crate::metrics::{dice_explained_from_probs, perturbation_ratio, MetricReport};
use crate::sr::SrResult;
use crate::types::{ContinuousMask, Image, ProbabilityMap};

/// Objective value at one optimizer iteration, split into its three terms.
/// Row 0 is the initial mask; the last row is the returned mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsrTraceRow {
    pub iteration: usize,
    pub total: f64,
    pub l1_term: f64,
    pub tv_term: f64,
    pub dice_term: f64,
}

/// Objective decomposition returned alongside the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub l1: f64,
    pub tv: f64,
    pub dice_loss: f64,
}

/// Counts of invariant violations observed across all iterations.
/// Both stay zero when the clamp and support rules hold.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClampAudit {
    /// Mask values outside {0} ∪ [clamp_low, 1] after a step.
    pub value_violations: usize,
    /// Nonzero mask values outside the grown region's support.
    pub support_violations: usize,
}

#[derive(Debug, Clone)]
pub struct MsrResult {
    /// Final mask at image resolution; values in {0} ∪ [clamp_low, 1],
    /// support contained in the grown region.
    pub m_msr: ContinuousMask,
    /// The grown-region image with the final mask applied.
    pub x_msr: Image,
    pub objective_trace: Vec<MsrTraceRow>,
    pub metrics: MetricReport,
    pub clamp_audit: ClampAudit,
}

/// Shared objective/gradient core. The mask lives at `config.mask_size`;
/// the sparsity and smoothness terms are computed there, while the
/// preservation term sees the mask resized (nearest) to the image grid.
/// Nearest resizing keeps mask values untouched, so the clamp value set
/// survives the round trip, and its adjoint is an exact scatter-sum.
fn eval_objective(
    adapter: &dyn SegmentationAdapter,
    x_sr: &Image,
    m: &ContinuousMask,
    p_ref: &ProbabilityMap,
    class: usize,
    config: &MisureConfig,
    want_grad: bool,
) -> Result<(f64, ObjectiveParts, Option<Array2<f64>>)> {
    let (mh, mw) = m.dim();
    let (_, h, w) = x_sr.shape();
    let omega = (mh * mw) as f64;
    let v = m.data();

    let l1 = config.lambda / omega * v.iter().map(|x| x.abs()).sum::<f64>();

    // Forward differences with replicate boundary: the last row/column
    // difference is zero and contributes nothing.
    let beta = config.beta;
    let mut tv = 0.0;
    for y in 0..mh {
        for x in 0..mw {
            if x + 1 < mw {
                tv += (v[[y, x + 1]] - v[[y, x]]).abs().powf(beta);
            }
            if y + 1 < mh {
                tv += (v[[y + 1, x]] - v[[y, x]]).abs().powf(beta);
            }
        }
    }
    tv *= config.gamma;

    let m_img = if (mh, mw) == (h, w) {
        m.clone()
    } else {
        resize_mask(m, h, w, ResizeMethod::Nearest)
    };
    let x_m = apply_mask(x_sr, &m_img)?;
    let probs = adapter.forward(&x_m)?;
    if probs.shape() != p_ref.shape() {
        return Err(MisureError::Shape(format!(
            "model output {:?} does not match reference {:?}",
            probs.shape(),
            p_ref.shape()
        )));
    }

    let channels: &[usize] = if class == 0 { &[0] } else { &[0, class] };
    let mut dice_loss = 1.0;
    // Per-channel soft-Dice sums, kept for the cotangent below.
    let mut stats = Vec::with_capacity(channels.len());
    for &i in channels {
        let alpha = if i == 0 { config.alpha_bg } else { config.alpha_fg };
        let q = probs.data().index_axis(ndarray::Axis(0), i);
        let r = p_ref.data().index_axis(ndarray::Axis(0), i);
        let num = 2.0 * q.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>() + config.eps;
        let den = q.sum() + r.sum() + config.eps;
        dice_loss -= alpha * num / den;
        stats.push((i, alpha, num, den));
    }

    let total = l1 + tv + dice_loss;
    if !total.is_finite() {
        return Err(MisureError::Numerical(format!(
            "objective is not finite: l1={l1} tv={tv} dice={dice_loss}"
        )));
    }
    let parts = ObjectiveParts { l1, tv, dice_loss };
    if !want_grad {
        return Ok((total, parts, None));
    }

    let mut grad = Array2::<f64>::zeros((mh, mw));
    let scale = config.lambda / omega;
    for (g, &x) in grad.iter_mut().zip(v.iter()) {
        // Subgradient 0 at exactly zero; mask values are nonnegative.
        if x > 0.0 {
            *g = scale;
        } else if x < 0.0 {
            *g = -scale;
        }
    }
    for y in 0..mh {
        for x in 0..mw {
            if x + 1 < mw {
                let d = v[[y, x + 1]] - v[[y, x]];
                let dd = config.gamma * beta * d.abs().powf(beta - 1.0) * d.signum();
                grad[[y, x + 1]] += dd;
                grad[[y, x]] -= dd;
            }
            if y + 1 < mh {
                let d = v[[y + 1, x]] - v[[y, x]];
                let dd = config.gamma * beta * d.abs().powf(beta - 1.0) * d.signum();
                grad[[y + 1, x]] += dd;
                grad[[y, x]] -= dd;
            }
        }
    }

    // d(dice_loss)/d(probs): for soft dice n/d, the per-pixel derivative
    // w.r.t. q_p is (2 r_p d - n) / d^2; other channels get zero.
    let (classes, ph, pw) = p_ref.shape();
    let mut cotangent = Array3::<f64>::zeros((classes, ph, pw));
    for &(i, alpha, num, den) in &stats {
        let r = p_ref.data().index_axis(ndarray::Axis(0), i);
        let mut ct = cotangent.index_axis_mut(ndarray::Axis(0), i);
        for (c, &rv) in ct.iter_mut().zip(r.iter()) {
            *c = -alpha * (2.0 * rv * den - num) / (den * den);
        }
    }
    let dx = adapter.vjp(&x_m, &cotangent)?;

    // Chain rule through x_m = x_sr ⊙ m (per channel), then pull the
    // image-resolution gradient back onto the mask grid.
    let mut dm_img = Array2::<f64>::zeros((h, w));
    for c in 0..x_sr.channels() {
        let xs = x_sr.data().index_axis(ndarray::Axis(0), c);
        let dc = dx.index_axis(ndarray::Axis(0), c);
        for ((g, &a), &b) in dm_img.iter_mut().zip(xs.iter()).zip(dc.iter()) {
            *g += a * b;
        }
    }
    if (mh, mw) == (h, w) {
        grad += &dm_img;
    } else {
        grad += &resize_nearest_adjoint(&dm_img, mh, mw);
    }
    Ok((total, parts, Some(grad)))
}

/// Total objective and its decomposition at mask `m`.
pub fn objective(
    adapter: &dyn SegmentationAdapter,
    x_sr: &Image,
    m: &ContinuousMask,
    p_ref: &ProbabilityMap,
    class: usize,
    config: &MisureConfig,
) -> Result<(f64, ObjectiveParts)> {
    let (total, parts, _) = eval_objective(adapter, x_sr, m, p_ref, class, config, false)?;
    Ok((total, parts))
}

/// Gradient of the objective with respect to the mask, on the mask grid.
pub fn objective_gradient(
    adapter: &dyn SegmentationAdapter,
    x_sr: &Image,
    m: &ContinuousMask,
    p_ref: &ProbabilityMap,
    class: usize,
    config: &MisureConfig,
) -> Result<Array2<f64>> {
    let (_, _, grad) = eval_objective(adapter, x_sr, m, p_ref, class, config, true)?;
    Ok(grad.expect("gradient requested"))
}

/// Decoupled-weight-decay adaptive-moment update with the decay set to
/// zero: the sparsity term already provides shrinkage.
struct AdamW {
    m1: Array2<f64>,
    m2: Array2<f64>,
    t: u32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(h: usize, w: usize) -> Self {
        Self {
            m1: Array2::zeros((h, w)),
            m2: Array2::zeros((h, w)),
            t: 0,
        }
    }

    fn step(&mut self, v: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t as i32);
        let c2 = 1.0 - Self::B2.powi(self.t as i32);
        for ((x, g), (m1, m2)) in v
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m1.iter_mut().zip(self.m2.iter_mut()))
        {
            *m1 = Self::B1 * *m1 + (1.0 - Self::B1) * g;
            *m2 = Self::B2 * *m2 + (1.0 - Self::B2) * g * g;
            let mhat = *m1 / c1;
            let vhat = *m2 / c2;
            *x -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Prunes the grown region by `config.iterations` optimizer steps. After
/// every step, values below `clamp_low` drop to zero, values above one are
/// clipped, and everything outside the grown region's support is zeroed.
pub fn find_msr(
    adapter: &dyn SegmentationAdapter,
    sr: &SrResult,
    x0: &Image,
    class: usize,
    config: &MisureConfig,
) -> Result<MsrResult> {
    config.validate()?;
    let start = Instant::now();
    let p_ref = adapter.forward(x0)?;
    let (h, w) = sr.m_sr.dim();
    let (mh, mw) = config.mask_size;

    // Support constraint on the mask grid; ones over it as the start point.
    let support = if (mh, mw) == (h, w) {
        sr.m_sr.clone()
    } else {
        resize_binary(&sr.m_sr, mh, mw)
    };
    let sup = support.data().mapv(f64::from);
    let mut v = sup.clone();

    let mut opt = AdamW::new(mh, mw);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut audit = ClampAudit::default();

    for iteration in 0..config.iterations {
        let m = ContinuousMask::new(v.clone())?;
        let (total, parts, grad) =
            eval_objective(adapter, x_sr_ref(sr), &m, &p_ref, class, config, true)?;
        trace.push(MsrTraceRow {
            iteration,
            total,
            l1_term: parts.l1,
            tv_term: parts.tv,
            dice_term: parts.dice_loss,
        });
        opt.step(&mut v, &grad.expect("gradient requested"), config.lr);
        clamp_mask(&mut v, config.clamp_low);
        v *= &sup;
        for (&x, &s) in v.iter().zip(sup.iter()) {
            let in_set = x == 0.0 || (config.clamp_low..=1.0).contains(&x);
            if !in_set {
                audit.value_violations += 1;
            }
            if s == 0.0 && x != 0.0 {
                audit.support_violations += 1;
            }
        }
    }

    let m_final = ContinuousMask::new(v)?;
    let (total, parts, _) =
        eval_objective(adapter, x_sr_ref(sr), &m_final, &p_ref, class, config, false)?;
    trace.push(MsrTraceRow {
        iteration: config.iterations,
        total,
        l1_term: parts.l1,
        tv_term: parts.tv,
        dice_term: parts.dice_loss,
    });

    // Image-resolution artifact: nearest resize keeps the clamp value set,
    // and intersecting with the grown support restores exact containment.
    let mut m_img = if (mh, mw) == (h, w) {
        m_final.into_data()
    } else {
        resize_mask(&m_final, h, w, ResizeMethod::Nearest).into_data()
    };
    for (x, &s) in m_img.iter_mut().zip(sr.m_sr.data().iter()) {
        if s == 0 {
            *x = 0.0;
        }
    }
    let m_msr = ContinuousMask::new(m_img)?;
    let x_msr = apply_mask(&sr.x_sr, &m_msr)?;

    let p_msr = adapter.forward(&x_msr)?;
    let dice = dice_explained_from_probs(&p_msr, &p_ref, class)?;
    let pred0 = binarize_prediction(&p_ref, class)?;
    let ratio = perturbation_ratio(&m_msr, &pred0)?;
    let metrics = MetricReport {
        dice_explained: dice,
        perturbation_ratio: ratio,
        wall_time_s: start.elapsed().as_secs_f64(),
        n_dilations: sr.n_dilations,
    };

    Ok(MsrResult {
        m_msr,
        x_msr,
        objective_trace: trace,
        metrics,
        clamp_audit: audit,
    })
}

fn x_sr_ref(sr: &SrResult) -> &Image {
    &sr.x_sr
}
