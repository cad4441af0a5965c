//! Lookup-table adapter over precomputed predictions: pairs of
//! `{stem}.png` (gray image) and `{stem}.misuf` (probability map) files.
//! Supports metric evaluation of inputs whose forward results were
//! computed offline; anything needing gradients stays unavailable.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context};
use misure_core::adapter::{Capabilities, InputShape};
use misure_core::io::{read_float_map, read_gray_png};
use misure_core::types::{Image, ProbabilityMap};
use misure_core::{MisureError, SegmentationAdapter};
use ndarray::Array3;

pub struct FrozenAdapter {
    table: HashMap<Vec<u8>, ProbabilityMap>,
    num_classes: usize,
}

/// Images round-trip through 8-bit PNG, so quantized bytes are a stable
/// lookup key for anything loaded from disk.
fn quantize_key(image: &Image) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

impl FrozenAdapter {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let mut table = HashMap::new();
        let mut num_classes = 0usize;
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .with_context(|| format!("reading frozen prediction dir {}", dir.display()))?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "misuf"))
            .collect();
        entries.sort();
        for map_path in &entries {
            let png_path = map_path.with_extension("png");
            let gray = read_gray_png(&png_path)?;
            let image = Image::new(gray.insert_axis(ndarray::Axis(0)))?;
            let probs = ProbabilityMap::new(read_float_map(map_path)?.to_array3())?;
            let classes = probs.data().dim().0;
            if num_classes == 0 {
                num_classes = classes;
            } else if classes != num_classes {
                bail!(
                    "frozen map {} has {} classes, expected {}",
                    map_path.display(),
                    classes,
                    num_classes
                );
            }
            table.insert(quantize_key(&image), probs);
        }
        if table.is_empty() {
            bail!("no image/probability pairs found in {}", dir.display());
        }
        Ok(Self { table, num_classes })
    }
}

impl SegmentationAdapter for FrozenAdapter {
    fn name(&self) -> &str {
        "frozen"
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> InputShape {
        InputShape {
            channels: 1,
            height: None,
            width: None,
        }
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::FORWARD_ONLY
    }

    fn forward(&self, image: &Image) -> misure_core::Result<ProbabilityMap> {
        self.table
            .get(&quantize_key(image))
            .cloned()
            .ok_or_else(|| {
                MisureError::Record("input image has no precomputed prediction".into())
            })
    }

    fn vjp(&self, _image: &Image, _cotangent: &Array3<f64>) -> misure_core::Result<Array3<f64>> {
        Err(MisureError::Capability {
            adapter: "frozen".into(),
            capability: "vjp".into(),
        })
    }
}
