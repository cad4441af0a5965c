//! Shared configuration for the region-growing and mask-optimization stages.

use serde::{Deserialize, Serialize};

use crate::error::{MisureError, Result};

/// Hyperparameters for the two-stage saliency pipeline.
///
/// Serialized configs may omit any field; omitted fields take the defaults
/// below, so partial JSON overrides compose cleanly with CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisureConfig {
    /// Dice threshold the grown region must exceed before growth stops.
    pub tau: f64,
    /// Optimizer learning rate.
    pub lr: f64,
    /// Sparsity weight on the mean absolute mask value.
    pub lambda: f64,
    /// Smoothness weight on the total-variation term.
    pub gamma: f64,
    /// Exponent applied to forward differences inside the smoothness term.
    pub beta: f64,
    /// Preservation weight for the background channel.
    pub alpha_bg: f64,
    /// Preservation weight for the explained class channel.
    pub alpha_fg: f64,
    /// Number of optimizer iterations.
    pub iterations: usize,
    /// Mask values strictly below this are forced to zero after each step.
    pub clamp_low: f64,
    /// Resolution (h, w) of the optimization variable.
    pub mask_size: (usize, usize),
    /// Radius of the disk structuring element used for dilation.
    pub kernel_radius: u32,
    /// Additive smoothing inside the soft Dice ratio.
    pub eps: f64,
    pub seed: u64,
    /// Defensive cap on dilation steps; `None` derives a per-image cap large
    /// enough to saturate any mask.
    pub max_dilations: Option<usize>,
}

impl Default for MisureConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            lr: 0.1,
            lambda: 0.01,
            gamma: 0.01,
            beta: 3.0,
            alpha_bg: 1.0,
            alpha_fg: 2.0,
            iterations: 100,
            clamp_low: 0.2,
            mask_size: (224, 224),
            kernel_radius: 3,
            eps: 1.0,
            seed: 0,
            max_dilations: None,
        }
    }
}

impl MisureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MisureError::Config(msg));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0,1), got {}", self.tau));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite nonnegative real, got {v}"));
            }
        }
        if !(self.beta >= 1.0) {
            return bad(format!("beta must be >= 1, got {}", self.beta));
        }
        if self.alpha_fg < self.alpha_bg {
            return bad(format!(
                "alpha_fg ({}) must be >= alpha_bg ({})",
                self.alpha_fg, self.alpha_bg
            ));
        }
        if !(0.0..1.0).contains(&self.clamp_low) {
            return bad(format!("clamp_low must lie in [0,1), got {}", self.clamp_low));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.mask_size.0 == 0 || self.mask_size.1 == 0 {
            return bad("mask_size dimensions must be nonzero".into());
        }
        if self.kernel_radius == 0 {
            return bad("kernel_radius must be >= 1".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.max_dilations == Some(0) {
            return bad("max_dilations must be >= 1 when set".into());
        }
        Ok(())
    }

    /// Dilation cap for an h-by-w image when none is configured: enough
    /// radius-`kernel_radius` steps to saturate any nonempty mask, plus slack.
    pub fn dilation_cap(&self, height: usize, width: usize) -> usize {
        match self.max_dilations {
            Some(cap) => cap,
            None => {
                let span = height.max(width);
                span.div_ceil(self.kernel_radius as usize) + 2
            }
        }
    }
}
