//! Reliability verb: trains, evaluates, or applies the per-class
//! logistic model over saliency-derived features. Ground truth comes
//! from the dataset directory; predictions come from the artifact PNGs
//! referenced by the records CSV.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use misure_core::io::{ensure_parent_dir, read_gray_png};
use misure_core::metrics::dice_hard;
use misure_core::records::{SaliencyRecord, SCHEMA_VERSION};
use misure_core::reliability::{
    extract_features, roc_auc, train, ReliabilityFeatures, ReliabilityModel,
};
use misure_core::triangle::load_sample;
use misure_core::types::BinaryMask;
use misure_core::MisureError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    pub models: BTreeMap<String, ReliabilityModel>,
}

/// One usable row: features plus the prediction-vs-ground-truth Dice.
struct LabeledRow {
    class_id: usize,
    features: ReliabilityFeatures,
    gt_dice: f64,
}

fn load_binary_png(path: &Path) -> anyhow::Result<BinaryMask> {
    let gray = read_gray_png(path)?;
    Ok(BinaryMask::new(gray.mapv(|v| u8::from(v > 0.5)))?)
}

/// Joins records against ground truth. Non-pruning rows and rows whose
/// artifacts or ground truth cannot be loaded are logged and skipped.
fn gather_rows(
    records: &[SaliencyRecord],
    records_root: &Path,
    data: &Path,
    split: &str,
) -> Vec<LabeledRow> {
    let mut rows = Vec::new();
    for r in records {
        if r.method != "misure" {
            continue;
        }
        let features = match extract_features(r) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("record {}/{}: {e}", r.image_id, r.class_id);
                continue;
            }
        };
        let joined = (|| -> anyhow::Result<f64> {
            let sample = load_sample(&data.join(split), &r.image_id)?;
            let pred = load_binary_png(&records_root.join(&r.prediction_path))?;
            Ok(dice_hard(&pred, &sample.gt_mask)?)
        })();
        match joined {
            Ok(gt_dice) => rows.push(LabeledRow {
                class_id: r.class_id,
                features,
                gt_dice,
            }),
            Err(e) => eprintln!("record {}/{}: {e}", r.image_id, r.class_id),
        }
    }
    rows
}

fn by_class(rows: &[LabeledRow]) -> BTreeMap<usize, Vec<&LabeledRow>> {
    let mut grouped: BTreeMap<usize, Vec<&LabeledRow>> = BTreeMap::new();
    for row in rows {
        grouped.entry(row.class_id).or_default().push(row);
    }
    grouped
}

pub fn run_train(
    records: &[SaliencyRecord],
    records_root: &Path,
    data: &Path,
    split: &str,
    threshold: f64,
    model_path: &Path,
) -> anyhow::Result<()> {
    let rows = gather_rows(records, records_root, data, split);
    if rows.is_empty() {
        bail!("no usable pruning records with ground truth");
    }
    let mut models = BTreeMap::new();
    for (class_id, class_rows) in by_class(&rows) {
        let features: Vec<ReliabilityFeatures> =
            class_rows.iter().map(|r| r.features).collect();
        let dice: Vec<f64> = class_rows.iter().map(|r| r.gt_dice).collect();
        match train(&features, &dice, threshold, 1e-3, 50) {
            Ok(model) => {
                models.insert(class_id.to_string(), model);
            }
            Err(e @ MisureError::DegenerateLabels(_)) => {
                eprintln!("class {class_id}: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if models.is_empty() {
        bail!("no class produced a trainable label split");
    }
    let file = ModelFile {
        schema: SCHEMA_VERSION.into(),
        models,
    };
    ensure_parent_dir(model_path)?;
    std::fs::write(model_path, serde_json::to_string_pretty(&file)?)
        .with_context(|| format!("writing {}", model_path.display()))?;
    Ok(())
}

pub fn load_model_file(path: &Path) -> anyhow::Result<ModelFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(file)
}

pub fn run_eval(
    records: &[SaliencyRecord],
    records_root: &Path,
    data: &Path,
    split: &str,
    model_file: &ModelFile,
    out: &Path,
) -> anyhow::Result<()> {
    let rows = gather_rows(records, records_root, data, split);
    if rows.is_empty() {
        bail!("no usable pruning records with ground truth");
    }
    let mut csv = String::from("schema,class_id,n,n_positive,accuracy,auc\n");
    let mut evaluated = 0usize;
    for (class_id, class_rows) in by_class(&rows) {
        let Some(model) = model_file.models.get(&class_id.to_string()) else {
            eprintln!("class {class_id}: no trained model");
            continue;
        };
        let scores: Vec<f64> = class_rows
            .iter()
            .map(|r| model.predict_proba(&r.features))
            .collect();
        let labels: Vec<bool> = class_rows
            .iter()
            .map(|r| r.gt_dice >= model.label_threshold)
            .collect();
        let correct = scores
            .iter()
            .zip(&labels)
            .filter(|(s, &l)| (**s >= 0.5) == l)
            .count();
        let accuracy = correct as f64 / labels.len() as f64;
        match roc_auc(&scores, &labels) {
            Ok((auc, curve)) => {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    SCHEMA_VERSION,
                    class_id,
                    labels.len(),
                    labels.iter().filter(|&&l| l).count(),
                    accuracy,
                    auc
                ));
                let mut roc = String::from("schema,fpr,tpr\n");
                for (fpr, tpr) in curve {
                    roc.push_str(&format!("{SCHEMA_VERSION},{fpr},{tpr}\n"));
                }
                let roc_path = out.join(format!("roc_class{class_id}.csv"));
                ensure_parent_dir(&roc_path)?;
                std::fs::write(&roc_path, roc)?;
                evaluated += 1;
            }
            Err(e @ MisureError::DegenerateLabels(_)) => {
                eprintln!("class {class_id}: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if evaluated == 0 {
        bail!("no class could be evaluated");
    }
    let path = out.join("reliability_eval.csv");
    ensure_parent_dir(&path)?;
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Scores records without ground truth. Rows missing pruning results go
/// to the error log instead of the score file.
pub fn run_predict(
    records: &[SaliencyRecord],
    model_file: &ModelFile,
    out: &Path,
) -> anyhow::Result<()> {
    let mut scores = String::from("schema,image_id,class_id,proba,predicted_reliable\n");
    let mut errors = String::from("schema,image_id,class_id,method,error\n");
    let mut n_scored = 0usize;
    for r in records {
        let outcome = extract_features(r).and_then(|features| {
            let model = model_file.models.get(&r.class_id.to_string()).ok_or_else(|| {
                MisureError::Record(format!("no trained model for class {}", r.class_id))
            })?;
            Ok(model.predict_proba(&features))
        });
        match outcome {
            Ok(proba) => {
                scores.push_str(&format!(
                    "{},{},{},{},{}\n",
                    SCHEMA_VERSION,
                    r.image_id,
                    r.class_id,
                    proba,
                    proba >= 0.5
                ));
                n_scored += 1;
            }
            Err(e) => {
                errors.push_str(&format!(
                    "{},{},{},{},\"{}\"\n",
                    SCHEMA_VERSION, r.image_id, r.class_id, r.method, e
                ));
            }
        }
    }
    let score_path = out.join("reliability_scores.csv");
    ensure_parent_dir(&score_path)?;
    std::fs::write(&score_path, scores)?;
    std::fs::write(out.join("reliability_errors.csv"), errors)?;
    if n_scored == 0 {
        bail!("no record could be scored");
    }
    Ok(())
}
