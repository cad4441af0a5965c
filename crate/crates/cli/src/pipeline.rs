//! Batch explanation engine shared by the `explain` and `sweep` verbs.
//!
//! Images run through a deterministic map (parallel when the adapter
//! allows concurrent calls); per-image failures are collected, logged,
//! and never abort the batch. Records come back sorted canonically so
//! output bytes are reproducible run to run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use misure_core::baselines::{occlusion_saliency, rise_saliency, seg_grad_cam, RiseConfig, SgcConfig};
use misure_core::io::{ensure_parent_dir, write_float_map, write_gray_png, write_png_preview, FloatMap};
use misure_core::masks::{apply_mask, binarize_prediction, threshold_saliency};
use misure_core::metrics::{dice_explained_from_probs, perturbation_ratio};
use misure_core::msr::find_msr;
use misure_core::parallel::{map_items, map_items_seq};
use misure_core::records::{self, SaliencyRecord, SCHEMA_VERSION};
use misure_core::sr::find_sr;
use misure_core::triangle::TriangleSample;
use misure_core::types::{BinaryMask, ContinuousMask, Image, ProbabilityMap};
use misure_core::{MisureConfig, SegmentationAdapter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Misure,
    Rise,
    Occlusion,
    SegGradCam,
}

impl Method {
    fn label(self) -> &'static str {
        match self {
            Method::Misure => "misure",
            Method::Rise => "rise",
            Method::Occlusion => "occlusion",
            Method::SegGradCam => "seggradcam",
        }
    }
}

pub fn parse_methods(list: &str) -> anyhow::Result<Vec<Method>> {
    let mut methods = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "misure" => methods.push(Method::Misure),
            "rise" => methods.push(Method::Rise),
            "occlusion" => methods.push(Method::Occlusion),
            "seggradcam" => methods.push(Method::SegGradCam),
            "all" => {
                methods.extend([
                    Method::Misure,
                    Method::Rise,
                    Method::Occlusion,
                    Method::SegGradCam,
                ]);
            }
            other => bail!("unknown method `{other}` (expected misure, rise, occlusion, seggradcam, or all)"),
        }
    }
    if methods.is_empty() {
        bail!("no methods selected");
    }
    methods.dedup();
    Ok(methods)
}

/// Everything an explanation batch needs beyond the adapter and data.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub misure: MisureConfig,
    pub rise: RiseConfig,
    pub sgc: SgcConfig,
    /// Occlusion window; `None` derives `max(2, min(h, w) / 8)`.
    pub occ_patch: Option<usize>,
    /// Occlusion step; `None` derives `max(1, patch / 2)`.
    pub occ_stride: Option<usize>,
    pub methods: Vec<Method>,
    /// Leading fraction of the corpus that gets noise-corrupted inputs,
    /// forcing unreliable predictions for the reliability pipeline.
    pub corrupt_fraction: f64,
    pub split: String,
    pub adapter_name: String,
}

impl RunSettings {
    /// Stable hash over the full configuration view (no paths, so the
    /// same settings fingerprint identically wherever outputs land).
    pub fn fingerprint(&self) -> String {
        let methods: Vec<&str> = self.methods.iter().map(|m| m.label()).collect();
        records::fingerprint(&serde_json::json!({
            "misure": self.misure,
            "rise": self.rise,
            "sgc": self.sgc,
            "occ_patch": self.occ_patch,
            "occ_stride": self.occ_stride,
            "methods": methods,
            "corrupt_fraction": self.corrupt_fraction,
            "split": self.split,
            "adapter": self.adapter_name,
        }))
    }
}

const CORRUPT_SALT: u64 = 0x6d69_7375;
/// Additive uniform noise amplitude for corrupted inputs; strong enough
/// that the toy model hallucinates spurious foreground.
const CORRUPT_NOISE: f64 = 0.55;

/// Seeded per-pixel noise keyed by the sample index, so corruption is
/// reproducible regardless of batch order.
fn corrupt_image(image: &Image, seed: u64, index: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CORRUPT_SALT);
    rng.set_stream(index as u64);
    let data = image
        .data()
        .mapv(|v| (v + CORRUPT_NOISE * rng.gen::<f64>()).clamp(0.0, 1.0));
    Image::new(data).expect("clamped noise stays finite")
}

fn to_continuous(mask: &BinaryMask) -> ContinuousMask {
    ContinuousMask::new(mask.data().mapv(f64::from)).expect("binary values are valid")
}

/// Classes present in the argmax prediction, background excluded.
fn classes_present(probs: &ProbabilityMap) -> Vec<usize> {
    let (classes, h, w) = probs.data().dim();
    let mut present = vec![false; classes];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            for c in 1..classes {
                if probs.data()[[c, y, x]] > probs.data()[[best, y, x]] {
                    best = c;
                }
            }
            present[best] = true;
        }
    }
    (1..classes).filter(|&c| present[c]).collect()
}

pub struct ExplainOutcome {
    pub records: Vec<SaliencyRecord>,
    pub n_images: usize,
    pub n_failed: usize,
}

struct ImageJob {
    sample: TriangleSample,
    corrupted: bool,
}

struct ArtifactSink<'a> {
    out: &'a Path,
}

impl ArtifactSink<'_> {
    fn saliency_rel(&self, id: &str, class: usize, method: &str) -> String {
        format!("saliency/{id}_c{class}_{}", method.replace('@', "-"))
    }

    fn write_map(&self, rel: &str, map: &ContinuousMask) -> misure_core::Result<String> {
        let float_rel = format!("{rel}.misuf");
        write_float_map(&self.out.join(&float_rel), &FloatMap::from_array2(map.data()))?;
        write_png_preview(&self.out.join(format!("{rel}.png")), map.data())?;
        Ok(float_rel)
    }

    fn write_binary(&self, rel: &str, mask: &BinaryMask) -> misure_core::Result<String> {
        let png_rel = format!("{rel}.png");
        write_gray_png(&self.out.join(&png_rel), &mask.data().mapv(f64::from))?;
        Ok(png_rel)
    }

    fn write_prediction(&self, id: &str, class: usize, pred: &BinaryMask) -> misure_core::Result<String> {
        let rel = format!("predictions/{id}_c{class}.png");
        write_gray_png(&self.out.join(&rel), &pred.data().mapv(f64::from))?;
        Ok(rel)
    }
}

fn base_record(id: &str, class: usize, fingerprint: &str, pred_size: usize) -> SaliencyRecord {
    SaliencyRecord {
        schema: SCHEMA_VERSION.into(),
        image_id: id.to_string(),
        class_id: class,
        method: String::new(),
        fingerprint: fingerprint.to_string(),
        n_dilations: 0,
        dice_explained: 0.0,
        perturbation_ratio: 0.0,
        wall_time_s: 0.0,
        prediction_size_px: pred_size,
        saliency_path: String::new(),
        prediction_path: String::new(),
    }
}

/// Thresholds a continuous saliency map and scores the surviving region:
/// Dice of the masked input's prediction against the original, plus the
/// retained-pixel ratio.
fn score_thresholded(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    p0: &ProbabilityMap,
    pred0: &BinaryMask,
    saliency: &ContinuousMask,
    threshold: f64,
    class: usize,
) -> misure_core::Result<(BinaryMask, f64, f64)> {
    let bin = threshold_saliency(saliency.data(), threshold);
    let cont = to_continuous(&bin);
    let masked = apply_mask(x0, &cont)?;
    let dice = dice_explained_from_probs(&adapter.forward(&masked)?, p0, class)?;
    let ratio = perturbation_ratio(&cont, pred0)?;
    Ok((bin, dice, ratio))
}

#[allow(clippy::too_many_arguments)]
fn explain_one_class(
    adapter: &dyn SegmentationAdapter,
    x0: &Image,
    p0: &ProbabilityMap,
    id: &str,
    class: usize,
    settings: &RunSettings,
    fingerprint: &str,
    sink: Option<&ArtifactSink>,
) -> misure_core::Result<Vec<SaliencyRecord>> {
    let pred0 = binarize_prediction(p0, class)?;
    let pred_size = pred0.count_ones();
    let mut records = Vec::new();
    let prediction_path = match sink {
        Some(s) => s.write_prediction(id, class, &pred0)?,
        None => String::new(),
    };
    let base = {
        let mut r = base_record(id, class, fingerprint, pred_size);
        r.prediction_path = prediction_path;
        r
    };

    for &method in &settings.methods {
        match method {
            Method::Misure => {
                let start = Instant::now();
                let sr = find_sr(adapter, x0, class, &settings.misure)?;
                let sr_time = start.elapsed().as_secs_f64();
                let msr = find_msr(adapter, &sr, x0, class, &settings.misure)?;
                let total_time = start.elapsed().as_secs_f64();

                let mut sr_rec = base.clone();
                sr_rec.method = "misure-sr".into();
                sr_rec.n_dilations = sr.n_dilations;
                sr_rec.dice_explained = sr.dice_at_stop;
                sr_rec.perturbation_ratio =
                    perturbation_ratio(&to_continuous(&sr.m_sr), &pred0)?;
                sr_rec.wall_time_s = sr_time;
                if let Some(s) = sink {
                    sr_rec.saliency_path =
                        s.write_binary(&s.saliency_rel(id, class, "misure-sr"), &sr.m_sr)?;
                }
                records.push(sr_rec);

                let mut msr_rec = base.clone();
                msr_rec.method = "misure".into();
                msr_rec.n_dilations = msr.metrics.n_dilations;
                msr_rec.dice_explained = msr.metrics.dice_explained;
                msr_rec.perturbation_ratio = msr.metrics.perturbation_ratio;
                msr_rec.wall_time_s = total_time;
                if let Some(s) = sink {
                    msr_rec.saliency_path =
                        s.write_map(&s.saliency_rel(id, class, "misure"), &msr.m_msr)?;
                }
                records.push(msr_rec);
            }
            Method::Rise => {
                let start = Instant::now();
                let map = rise_saliency(adapter, x0, class, &settings.rise)?;
                let wall = start.elapsed().as_secs_f64();
                if let Some(s) = sink {
                    s.write_map(&s.saliency_rel(id, class, "rise"), &map)?;
                }
                for &t in &settings.rise.thresholds {
                    let (bin, dice, ratio) =
                        score_thresholded(adapter, x0, p0, &pred0, &map, t, class)?;
                    let mut rec = base.clone();
                    rec.method = format!("rise@{t}");
                    rec.dice_explained = dice;
                    rec.perturbation_ratio = ratio;
                    rec.wall_time_s = wall;
                    if let Some(s) = sink {
                        rec.saliency_path =
                            s.write_binary(&s.saliency_rel(id, class, &rec.method), &bin)?;
                    }
                    records.push(rec);
                }
            }
            Method::Occlusion => {
                let (_, h, w) = x0.shape();
                let patch = settings.occ_patch.unwrap_or_else(|| (h.min(w) / 8).max(2));
                let stride = settings.occ_stride.unwrap_or_else(|| (patch / 2).max(1));
                let start = Instant::now();
                let map = occlusion_saliency(adapter, x0, class, patch, stride)?;
                let wall = start.elapsed().as_secs_f64();
                if let Some(s) = sink {
                    s.write_map(&s.saliency_rel(id, class, "occlusion"), &map)?;
                }
                for &t in &settings.rise.thresholds {
                    let (bin, dice, ratio) =
                        score_thresholded(adapter, x0, p0, &pred0, &map, t, class)?;
                    let mut rec = base.clone();
                    rec.method = format!("occlusion@{t}");
                    rec.dice_explained = dice;
                    rec.perturbation_ratio = ratio;
                    rec.wall_time_s = wall;
                    if let Some(s) = sink {
                        rec.saliency_path =
                            s.write_binary(&s.saliency_rel(id, class, &rec.method), &bin)?;
                    }
                    records.push(rec);
                }
            }
            Method::SegGradCam => {
                let start = Instant::now();
                let map = seg_grad_cam(adapter, x0, class, &settings.sgc)?;
                let wall = start.elapsed().as_secs_f64();
                if let Some(s) = sink {
                    s.write_map(&s.saliency_rel(id, class, "seggradcam"), &map)?;
                }
                for &t in &settings.sgc.thresholds {
                    let (bin, dice, ratio) =
                        score_thresholded(adapter, x0, p0, &pred0, &map, t, class)?;
                    let mut rec = base.clone();
                    rec.method = format!("seggradcam@{t}");
                    rec.dice_explained = dice;
                    rec.perturbation_ratio = ratio;
                    rec.wall_time_s = wall;
                    if let Some(s) = sink {
                        rec.saliency_path =
                            s.write_binary(&s.saliency_rel(id, class, &rec.method), &bin)?;
                    }
                    records.push(rec);
                }
            }
        }
    }
    Ok(records)
}

/// Runs every selected method over every image and class present in the
/// prediction. `out = None` skips artifact emission (used by sweeps).
pub fn run_explain(
    adapter: &dyn SegmentationAdapter,
    samples: Vec<TriangleSample>,
    settings: &RunSettings,
    out: Option<&Path>,
) -> anyhow::Result<ExplainOutcome> {
    settings.misure.validate().context("misure config")?;
    settings.rise.validate().context("rise config")?;
    if samples.is_empty() {
        bail!("no samples in split `{}`", settings.split);
    }
    if let Some(dir) = out {
        ensure_parent_dir(&dir.join("saliency/x"))?;
        ensure_parent_dir(&dir.join("predictions/x"))?;
    }

    let fingerprint = settings.fingerprint();
    let n_images = samples.len();
    let n_corrupt = (settings.corrupt_fraction * n_images as f64).round() as usize;
    let jobs: Vec<ImageJob> = samples
        .into_iter()
        .enumerate()
        .map(|(i, sample)| ImageJob {
            sample,
            corrupted: i < n_corrupt,
        })
        .collect();

    let sink = out.map(|dir| ArtifactSink { out: dir });
    let worker = |job: ImageJob| -> (String, Result<Vec<SaliencyRecord>, String>) {
        let id = job.sample.meta.index.to_string();
        let x0 = if job.corrupted {
            corrupt_image(&job.sample.image, settings.misure.seed, job.sample.meta.index)
        } else {
            job.sample.image.clone()
        };
        let run = || -> misure_core::Result<Vec<SaliencyRecord>> {
            let p0 = adapter.forward(&x0)?;
            let mut records = Vec::new();
            for class in classes_present(&p0) {
                records.extend(explain_one_class(
                    adapter,
                    &x0,
                    &p0,
                    &id,
                    class,
                    settings,
                    &fingerprint,
                    sink.as_ref(),
                )?);
            }
            Ok(records)
        };
        (id.clone(), run().map_err(|e| e.to_string()))
    };

    let results = if adapter.capabilities().thread_safe {
        map_items(jobs, worker)
    } else {
        map_items_seq(jobs, worker)
    };

    let mut records = Vec::new();
    let mut n_failed = 0usize;
    for (id, result) in results {
        match result {
            Ok(rs) => records.extend(rs),
            Err(e) => {
                n_failed += 1;
                eprintln!("image {id}: {e}");
            }
        }
    }
    records::sort_records(&mut records);
    Ok(ExplainOutcome {
        records,
        n_images,
        n_failed,
    })
}

/// One sweep cell: the config delta plus aggregated means.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lr: f64,
    pub lambda: f64,
    pub mask_size: (usize, usize),
    pub n_records: usize,
    pub mean_dice_explained: f64,
    pub mean_perturbation_ratio: f64,
}

/// Runs a misure-only batch per grid cell and averages the pruned-mask
/// metrics. Cells where every image fails report zero records and NaN
/// means are avoided by skipping the division.
pub fn run_sweep(
    adapter: &dyn SegmentationAdapter,
    samples: &[TriangleSample],
    settings: &RunSettings,
    cells: &[(f64, f64, (usize, usize))],
) -> anyhow::Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &(lr, lambda, mask_size) in cells {
        let mut cell = settings.clone();
        cell.misure.lr = lr;
        cell.misure.lambda = lambda;
        cell.misure.mask_size = mask_size;
        cell.methods = vec![Method::Misure];
        let outcome = run_explain(adapter, samples.to_vec(), &cell, None)?;
        let pruned: Vec<&SaliencyRecord> = outcome
            .records
            .iter()
            .filter(|r| r.method == "misure")
            .collect();
        let n = pruned.len();
        let (mut dice, mut ratio) = (0.0, 0.0);
        for r in &pruned {
            dice += r.dice_explained;
            ratio += r.perturbation_ratio;
        }
        rows.push(SweepRow {
            lr,
            lambda,
            mask_size,
            n_records: n,
            mean_dice_explained: if n > 0 { dice / n as f64 } else { 0.0 },
            mean_perturbation_ratio: if n > 0 { ratio / n as f64 } else { 0.0 },
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> anyhow::Result<()> {
    ensure_parent_dir(path)?;
    let mut text = String::from(
        "schema,lr,lambda,mask_h,mask_w,n_records,mean_dice_explained,mean_perturbation_ratio\n",
    );
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            SCHEMA_VERSION,
            row.lr,
            row.lambda,
            row.mask_size.0,
            row.mask_size.1,
            row.n_records,
            row.mean_dice_explained,
            row.mean_perturbation_ratio
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn resolve_out(flag: Option<PathBuf>, leaf: &str) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    match std::env::var_os("MISURE_OUT") {
        Some(root) => PathBuf::from(root).join(leaf),
        None => PathBuf::from("misure-out").join(leaf),
    }
}
