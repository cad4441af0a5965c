//! Post-hoc reliability: three saliency-derived features feed a logistic
//! classifier predicting whether ground-truth Dice crosses a threshold, so
//! failures can be flagged when no ground truth is available.

use serde::{Deserialize, Serialize};

use crate::error::{MisureError, Result};
use crate::records::SaliencyRecord;

/// The three features, in this fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityFeatures {
    pub n_dilations: f64,
    pub dice_msr_vs_pred: f64,
    pub nonzero_ratio: f64,
}

impl ReliabilityFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.n_dilations, self.dice_msr_vs_pred, self.nonzero_ratio]
    }
}

/// Features straight from a record's growth and pruning columns. Only
/// pruned-mask rows qualify; grown-region and baseline rows lack the
/// pruning metrics the classifier was trained on.
pub fn extract_features(record: &SaliencyRecord) -> Result<ReliabilityFeatures> {
    if record.method != "misure" {
        return Err(MisureError::Record(format!(
            "record {}/{} was produced by `{}`, which has no pruning results",
            record.image_id, record.class_id, record.method
        )));
    }
    let features = ReliabilityFeatures {
        n_dilations: record.n_dilations as f64,
        dice_msr_vs_pred: record.dice_explained,
        nonzero_ratio: record.perturbation_ratio,
    };
    if features.as_array().iter().any(|v| !v.is_finite()) {
        return Err(MisureError::Record(format!(
            "record {}/{} has non-finite feature values",
            record.image_id, record.class_id
        )));
    }
    Ok(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityModel {
    pub weights: [f64; 3],
    pub bias: f64,
    pub feature_means: [f64; 3],
    pub feature_stds: [f64; 3],
    pub label_threshold: f64,
}

impl ReliabilityModel {
    fn standardize(&self, f: &ReliabilityFeatures) -> [f64; 3] {
        let x = f.as_array();
        [
            (x[0] - self.feature_means[0]) / self.feature_stds[0],
            (x[1] - self.feature_means[1]) / self.feature_stds[1],
            (x[2] - self.feature_means[2]) / self.feature_stds[2],
        ]
    }

    /// Sigmoid of the standardized linear score, clamped to the open unit
    /// interval so downstream log-odds never hit infinities.
    pub fn predict_proba(&self, f: &ReliabilityFeatures) -> f64 {
        let z = self.standardize(f);
        let score = self.bias + self.weights.iter().zip(z.iter()).map(|(w, v)| w * v).sum::<f64>();
        sigmoid(score).clamp(1e-12, 1.0 - 1e-12)
    }

    pub fn predict(&self, f: &ReliabilityFeatures) -> bool {
        self.predict_proba(f) >= 0.5
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves the 4x4 symmetric system by Gaussian elimination with partial
/// pivoting; small enough that no linear-algebra dependency is warranted.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(MisureError::Numerical(
                "singular normal equations in the reliability fit".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in (row + 1)..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Newton fit of the L2-penalized logistic likelihood (bias unpenalized).
/// Labels are `gt_dice >= threshold`; features are standardized first.
/// Converges when the gradient max-norm drops below 1e-6.
pub fn train(
    features: &[ReliabilityFeatures],
    gt_dice: &[f64],
    threshold: f64,
    l2: f64,
    max_iter: usize,
) -> Result<ReliabilityModel> {
    if features.len() != gt_dice.len() {
        return Err(MisureError::Shape(format!(
            "{} feature rows vs {} dice values",
            features.len(),
            gt_dice.len()
        )));
    }
    let labels: Vec<bool> = gt_dice.iter().map(|&d| d >= threshold).collect();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(MisureError::DegenerateLabels(format!(
            "{n_pos} positive and {n_neg} negative; need at least 2 of each"
        )));
    }

    let n = features.len() as f64;
    let mut means = [0.0; 3];
    let mut stds = [0.0; 3];
    for f in features {
        for (m, v) in means.iter_mut().zip(f.as_array()) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    for f in features {
        for k in 0..3 {
            let d = f.as_array()[k] - means[k];
            stds[k] += d * d;
        }
    }
    for (index, s) in stds.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s <= 0.0 {
            return Err(MisureError::DegenerateFeature { index });
        }
    }

    let x: Vec<[f64; 3]> = features
        .iter()
        .map(|f| {
            let raw = f.as_array();
            [
                (raw[0] - means[0]) / stds[0],
                (raw[1] - means[1]) / stds[1],
                (raw[2] - means[2]) / stds[2],
            ]
        })
        .collect();

    // Parameter vector [w0, w1, w2, b].
    let mut theta = [0.0f64; 4];
    for _ in 0..max_iter {
        let mut grad = [0.0f64; 4];
        let mut hess = [[0.0f64; 4]; 4];
        for (xi, &yi) in x.iter().zip(labels.iter()) {
            let score = theta[3] + theta[0] * xi[0] + theta[1] * xi[1] + theta[2] * xi[2];
            let p = sigmoid(score);
            let resid = p - f64::from(yi);
            let s = (p * (1.0 - p)).max(1e-12);
            let aug = [xi[0], xi[1], xi[2], 1.0];
            for i in 0..4 {
                grad[i] += resid * aug[i];
                for j in 0..4 {
                    hess[i][j] += s * aug[i] * aug[j];
                }
            }
        }
        for i in 0..3 {
            grad[i] += l2 * theta[i];
            hess[i][i] += l2;
        }
        let max_norm = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if max_norm < 1e-6 {
            break;
        }
        let step = solve4(hess, grad)?;
        for (t, s) in theta.iter_mut().zip(step.iter()) {
            *t -= s;
        }
    }

    Ok(ReliabilityModel {
        weights: [theta[0], theta[1], theta[2]],
        bias: theta[3],
        feature_means: means,
        feature_stds: stds,
        label_threshold: threshold,
    })
}

/// Rank-statistic AUC (ties count one half) plus the ROC curve sampled at
/// every distinct score threshold, from (0,0) to (1,1).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<(f64, f64)>)> {
    if scores.len() != labels.len() {
        return Err(MisureError::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MisureError::DegenerateLabels(
            "roc_auc needs both classes present".into(),
        ));
    }

    // Average ranks over tie groups, ascending by score.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let auc = (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0)
        / (n_pos as f64 * n_neg as f64);

    // Curve: descending thresholds, one point per distinct score.
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let mut j = k;
        while j > 0 && scores[order[j - 1]] == scores[order[k - 1]] {
            j -= 1;
        }
        for &idx in &order[j..k] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        k = j;
    }
    Ok((auc, curve))
}
