//! Synthetic dataset: three "member" objects whose centers form an
//! approximately equilateral triangle, plus up to three distractors placed
//! so that no other triple of centers comes close to that shape. The
//! segmentation target is the union of the member footprints.
//!
//! All geometry is integer-valued and every random draw comes from a
//! ChaCha8 stream keyed by `(seed, sample index)`, so generated datasets
//! are byte-identical across platforms and runs.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MisureError, Result};
use crate::io::{read_gray_png, write_gray_png, write_json};
use crate::parallel::map_indices;
use crate::types::{BinaryMask, Image};

/// Two member sides may differ by at most this factor.
pub const SIDE_TOLERANCE: f64 = 1.15;
const MAX_ATTEMPTS: usize = 1000;
const GENERATOR_VERSION: u32 = 1;
/// Stamp intensity for geometric objects, on a black background.
const INK: u8 = 220;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disk,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub center: (i64, i64),
    pub shape: Shape,
    /// Side length / diameter in pixels.
    pub size: i64,
    pub is_member: bool,
    /// Distractors are drawn as outlines, members filled.
    pub hollow: bool,
    /// Index into the external glyph set, when one was used.
    pub glyph: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: usize,
    pub image_size: usize,
    pub objects: Vec<ObjectMeta>,
}

#[derive(Debug, Clone)]
pub struct TriangleSample {
    pub image: Image,
    pub gt_mask: BinaryMask,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<TriangleSample>,
    pub val: Vec<TriangleSample>,
}

#[derive(Debug, Clone)]
pub enum ObjectSource {
    Geometric,
    /// Directory holding the standard IDX files; glyphs are stamped
    /// instead of geometric shapes.
    FashionMnistDir(std::path::PathBuf),
}

/// True when `(dy, dx)` lies inside the shape of the given size centered
/// at the origin. Integer arithmetic only.
fn contains(shape: Shape, size: i64, dy: i64, dx: i64) -> bool {
    let half = size / 2;
    match shape {
        Shape::Square => dy.abs() <= half && dx.abs() <= half,
        Shape::Disk => 4 * (dy * dy + dx * dx) <= size * size,
        Shape::Triangle => {
            // Upward apex; half-width grows by half a pixel per row.
            let t = dy + half;
            (0..=2 * half).contains(&t) && 2 * dx.abs() <= t
        }
    }
}

fn footprint_hit(obj: &ObjectMeta, y: i64, x: i64) -> bool {
    let (dy, dx) = (y - obj.center.0, x - obj.center.1);
    let outer = contains(obj.shape, obj.size, dy, dx);
    if !obj.hollow {
        return outer;
    }
    // Two-pixel outline: the shape minus a shrunk copy of itself.
    outer && !contains(obj.shape, obj.size - 4, dy, dx)
}

fn side_lengths(a: (i64, i64), b: (i64, i64), c: (i64, i64)) -> [f64; 3] {
    let d2 = |p: (i64, i64), q: (i64, i64)| {
        let (dy, dx) = (p.0 - q.0, p.1 - q.1);
        ((dy * dy + dx * dx) as f64).sqrt()
    };
    [d2(a, b), d2(b, c), d2(c, a)]
}

/// The member criterion: all pairwise distances within the tolerance
/// factor of each other, degenerate triples excluded.
pub fn is_member_triple(a: (i64, i64), b: (i64, i64), c: (i64, i64)) -> bool {
    let sides = side_lengths(a, b, c);
    let min = sides.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = sides.iter().cloned().fold(0.0f64, f64::max);
    min > 0.0 && max / min <= SIDE_TOLERANCE
}

struct GlyphSet {
    glyphs: Vec<Array2<u8>>,
}

struct GenParams<'a> {
    image_size: usize,
    /// Inclusive object-size range for geometric shapes.
    size_lo: i64,
    size_hi: i64,
    glyphs: Option<&'a GlyphSet>,
}

fn clearance(obj_size: i64) -> i64 {
    obj_size / 2 + 1
}

fn centers_separated(a: (i64, i64), sa: i64, b: (i64, i64), sb: i64) -> bool {
    let (dy, dx) = (a.0 - b.0, a.1 - b.1);
    let need = clearance(sa) + clearance(sb) + 1;
    dy * dy + dx * dx >= need * need
}

/// Exact-constant 60 degree rotation; basic IEEE operations only, so the
/// result is identical on every platform.
fn rotate60(dy: i64, dx: i64, clockwise: bool) -> (i64, i64) {
    const SIN60: f64 = 0.866_025_403_784_438_6;
    let (fy, fx) = (dy as f64, dx as f64);
    let s = if clockwise { -SIN60 } else { SIN60 };
    let ry = 0.5 * fy + s * fx;
    let rx = -s * fy + 0.5 * fx;
    (ry.round() as i64, rx.round() as i64)
}

/// Retries over derived RNG streams when a layout rejects; the retry
/// count is part of the deterministic sampling procedure.
const SAMPLE_RETRIES: u64 = 64;

fn gen_sample(seed: u64, index: usize, params: &GenParams) -> Result<TriangleSample> {
    let mut last = MisureError::Placement {
        attempts: MAX_ATTEMPTS,
    };
    for retry in 0..SAMPLE_RETRIES {
        let stream = index as u64 + (retry << 40);
        match gen_sample_stream(seed, index, stream, params) {
            Ok(sample) => return Ok(sample),
            Err(e @ MisureError::Placement { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

fn gen_sample_stream(
    seed: u64,
    index: usize,
    stream: u64,
    params: &GenParams,
) -> Result<TriangleSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let size = params.image_size as i64;

    let draw_size = |rng: &mut ChaCha8Rng| rng.gen_range(params.size_lo..=params.size_hi);
    let draw_shape = |rng: &mut ChaCha8Rng| match rng.gen_range(0..3u8) {
        0 => Shape::Square,
        1 => Shape::Disk,
        _ => Shape::Triangle,
    };
    let draw_glyph = |rng: &mut ChaCha8Rng| {
        params
            .glyphs
            .map(|set| rng.gen_range(0..set.glyphs.len()))
    };

    // Member triple: a random base edge in an annulus, closed with a
    // rotated copy, rejected until everything fits and stays tolerant.
    let side_lo = (3 * size / 10).max(2);
    let side_hi = (9 * size / 20).max(side_lo);
    let member_sizes = [draw_size(&mut rng), draw_size(&mut rng), draw_size(&mut rng)];
    let margin = member_sizes.iter().map(|&s| clearance(s)).max().unwrap();
    if 2 * margin >= size {
        return Err(MisureError::Placement {
            attempts: MAX_ATTEMPTS,
        });
    }

    let mut members: Option<[(i64, i64); 3]> = None;
    for _ in 0..MAX_ATTEMPTS {
        let c1 = (
            rng.gen_range(margin..size - margin),
            rng.gen_range(margin..size - margin),
        );
        let dy = rng.gen_range(-side_hi..=side_hi);
        let dx = rng.gen_range(-side_hi..=side_hi);
        let d2 = dy * dy + dx * dx;
        if d2 < side_lo * side_lo || d2 > side_hi * side_hi {
            continue;
        }
        let c2 = (c1.0 + dy, c1.1 + dx);
        let (ry, rx) = rotate60(dy, dx, rng.gen_bool(0.5));
        let c3 = (c1.0 + ry, c1.1 + rx);
        let triple = [c1, c2, c3];
        let in_bounds = triple
            .iter()
            .all(|c| c.0 >= margin && c.0 < size - margin && c.1 >= margin && c.1 < size - margin);
        let separated = centers_separated(c1, member_sizes[0], c2, member_sizes[1])
            && centers_separated(c2, member_sizes[1], c3, member_sizes[2])
            && centers_separated(c1, member_sizes[0], c3, member_sizes[2]);
        if in_bounds && separated && is_member_triple(c1, c2, c3) {
            members = Some(triple);
            break;
        }
    }
    let members = members.ok_or(MisureError::Placement {
        attempts: MAX_ATTEMPTS,
    })?;

    let mut objects: Vec<ObjectMeta> = members
        .iter()
        .zip(member_sizes.iter())
        .map(|(&center, &obj_size)| ObjectMeta {
            center,
            shape: draw_shape(&mut rng),
            size: obj_size,
            is_member: true,
            hollow: false,
            glyph: draw_glyph(&mut rng),
        })
        .collect();

    // Distractors are optional decoration: when the canvas has no room
    // left, the sample keeps however many fit.
    let n_distractors = rng.gen_range(0..=3usize);
    for _ in 0..n_distractors {
        let obj_size = draw_size(&mut rng);
        let shape = draw_shape(&mut rng);
        let glyph = draw_glyph(&mut rng);
        let dmargin = clearance(obj_size);
        if 2 * dmargin >= size {
            break;
        }
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let center = (
                rng.gen_range(dmargin..size - dmargin),
                rng.gen_range(dmargin..size - dmargin),
            );
            let clear = objects
                .iter()
                .all(|o| centers_separated(center, obj_size, o.center, o.size));
            if !clear {
                continue;
            }
            // No triple through this center may look like the members'.
            let mut forms_triple = false;
            for i in 0..objects.len() {
                for j in (i + 1)..objects.len() {
                    if is_member_triple(center, objects[i].center, objects[j].center) {
                        forms_triple = true;
                    }
                }
            }
            if forms_triple {
                continue;
            }
            objects.push(ObjectMeta {
                center,
                shape,
                size: obj_size,
                is_member: false,
                hollow: true,
                glyph,
            });
            placed = true;
            break;
        }
        if !placed {
            break;
        }
    }

    let meta = SampleMeta {
        seed,
        index,
        image_size: params.image_size,
        objects,
    };
    render_sample(&meta, params.glyphs)
}

/// Rasterizes a sample from its metadata. Geometric footprints are exactly
/// recomputable from the metadata alone.
fn render_sample(meta: &SampleMeta, glyphs: Option<&GlyphSet>) -> Result<TriangleSample> {
    let size = meta.image_size;
    let mut canvas = Array2::<u8>::zeros((size, size));
    let mut gt = Array2::<u8>::zeros((size, size));

    for obj in &meta.objects {
        match (glyphs, obj.glyph) {
            (Some(set), Some(g)) => {
                let glyph = &set.glyphs[g];
                let (gh, gw) = glyph.dim();
                for ((gy, gx), &v) in glyph.indexed_iter() {
                    let y = obj.center.0 + gy as i64 - gh as i64 / 2;
                    let x = obj.center.1 + gx as i64 - gw as i64 / 2;
                    if y < 0 || x < 0 || y >= size as i64 || x >= size as i64 {
                        continue;
                    }
                    let (y, x) = (y as usize, x as usize);
                    canvas[[y, x]] = canvas[[y, x]].max(v);
                    if obj.is_member && v >= 128 {
                        gt[[y, x]] = 1;
                    }
                }
            }
            _ => {
                let half = obj.size / 2 + 1;
                for y in (obj.center.0 - half).max(0)..=(obj.center.0 + half).min(size as i64 - 1) {
                    for x in
                        (obj.center.1 - half).max(0)..=(obj.center.1 + half).min(size as i64 - 1)
                    {
                        if footprint_hit(obj, y, x) {
                            canvas[[y as usize, x as usize]] = INK;
                            if obj.is_member {
                                gt[[y as usize, x as usize]] = 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let image = Image::new(
        canvas
            .mapv(|v| f64::from(v) / 255.0)
            .insert_axis(ndarray::Axis(0)),
    )?;
    Ok(TriangleSample {
        image,
        gt_mask: BinaryMask::new(gt)?,
        meta: meta.clone(),
    })
}

fn split_counts(n: usize) -> (usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    (train, n - train)
}

fn generate(n: usize, seed: u64, params: &GenParams) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(MisureError::Config("dataset size must be >= 1".into()));
    }
    let samples = map_indices(n, |i| gen_sample(seed, i, params));
    let mut all = Vec::with_capacity(n);
    for s in samples {
        all.push(s?);
    }
    let (n_train, _) = split_counts(n);
    let val = all.split_off(n_train);
    Ok(DatasetSplit { train: all, val })
}

/// Full-scale dataset; object sizes scale with the image side.
pub fn generate_triangle(
    n: usize,
    image_size: usize,
    source: &ObjectSource,
    seed: u64,
) -> Result<DatasetSplit> {
    match source {
        ObjectSource::Geometric => {
            let lo = (image_size as i64 / 8).max(4);
            let hi = (image_size as i64 * 7 / 32).max(lo);
            generate(
                n,
                seed,
                &GenParams {
                    image_size,
                    size_lo: lo,
                    size_hi: hi,
                    glyphs: None,
                },
            )
        }
        ObjectSource::FashionMnistDir(dir) => {
            let glyphs = load_fashion_mnist(dir)?;
            generate(
                n,
                seed,
                &GenParams {
                    image_size,
                    size_lo: 28,
                    size_hi: 28,
                    glyphs: Some(&glyphs),
                },
            )
        }
    }
}

/// Desk-scale variant: 64 px canvases with 8-14 px shapes; members are
/// filled, distractors hollow, so membership is locally decidable.
pub fn generate_triangle_tiny(n: usize, image_size: usize, seed: u64) -> Result<DatasetSplit> {
    generate(
        n,
        seed,
        &GenParams {
            image_size,
            size_lo: (image_size as i64 * 8 / 64).max(4),
            size_hi: (image_size as i64 * 14 / 64).max(6),
            glyphs: None,
        },
    )
}

/// Verifies the geometric contract of one sample: exactly three members in
/// tolerance, no other tolerant triple, and (for geometric objects) the
/// ground truth equal to the union of member footprints.
pub fn self_check(sample: &TriangleSample) -> Result<()> {
    let meta = &sample.meta;
    let members: Vec<&ObjectMeta> = meta.objects.iter().filter(|o| o.is_member).collect();
    if members.len() != 3 {
        return Err(MisureError::Record(format!(
            "sample {} has {} member objects",
            meta.index,
            members.len()
        )));
    }
    if !is_member_triple(members[0].center, members[1].center, members[2].center) {
        return Err(MisureError::Record(format!(
            "sample {} member centers violate the side tolerance",
            meta.index
        )));
    }
    let centers: Vec<(i64, i64)> = meta.objects.iter().map(|o| o.center).collect();
    let member_idx: Vec<usize> = meta
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_member)
        .map(|(i, _)| i)
        .collect();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            for k in (j + 1)..centers.len() {
                let is_the_members = member_idx == [i, j, k];
                if !is_the_members && is_member_triple(centers[i], centers[j], centers[k]) {
                    return Err(MisureError::Record(format!(
                        "sample {} has a second tolerant triple ({i},{j},{k})",
                        meta.index
                    )));
                }
            }
        }
    }
    if meta.objects.iter().all(|o| o.glyph.is_none()) {
        let size = meta.image_size;
        let mut expected = Array2::<u8>::zeros((size, size));
        for obj in meta.objects.iter().filter(|o| o.is_member) {
            for y in 0..size {
                for x in 0..size {
                    if footprint_hit(obj, y as i64, x as i64) {
                        expected[[y, x]] = 1;
                    }
                }
            }
        }
        if &expected != sample.gt_mask.data() {
            return Err(MisureError::Record(format!(
                "sample {} ground truth does not match member footprints",
                meta.index
            )));
        }
    }
    if sample.gt_mask.is_empty() {
        return Err(MisureError::Record(format!(
            "sample {} has an empty ground truth",
            meta.index
        )));
    }
    Ok(())
}

pub fn save_sample(sample: &TriangleSample, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MisureError::io(dir.display().to_string(), e))?;
    let plane = sample.image.data().index_axis(ndarray::Axis(0), 0);
    write_gray_png(&dir.join(format!("{stem}.png")), &plane.to_owned())?;
    write_gray_png(
        &dir.join(format!("{stem}_mask.png")),
        &sample.gt_mask.data().mapv(f64::from),
    )?;
    let meta = serde_json::to_value(&sample.meta)
        .map_err(|e| MisureError::Record(format!("meta serialization: {e}")))?;
    write_json(&dir.join(format!("{stem}.json")), &meta)?;
    Ok(())
}

pub fn load_sample(dir: &Path, stem: &str) -> Result<TriangleSample> {
    let meta_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&meta_path).map_err(|_| MisureError::Format {
        path: meta_path.display().to_string(),
        reason: "missing or unreadable metadata".into(),
    })?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| MisureError::Format {
        path: meta_path.display().to_string(),
        reason: format!("bad metadata: {e}"),
    })?;

    let image_plane = read_gray_png(&dir.join(format!("{stem}.png")))?;
    let image = Image::new(image_plane.insert_axis(ndarray::Axis(0)))?;
    let mask_path = dir.join(format!("{stem}_mask.png"));
    let mask_plane = read_gray_png(&mask_path)?;
    let mut gt = Array2::<u8>::zeros(mask_plane.dim());
    for (g, &v) in gt.iter_mut().zip(mask_plane.iter()) {
        if v == 0.0 {
            *g = 0;
        } else if v == 1.0 {
            *g = 1;
        } else {
            return Err(MisureError::Format {
                path: mask_path.display().to_string(),
                reason: format!("mask value {v} is neither 0 nor 255"),
            });
        }
    }
    Ok(TriangleSample {
        image,
        gt_mask: BinaryMask::new(gt)?,
        meta,
    })
}

/// Writes `train/` and `val/` sample files plus a `manifest.json` with the
/// seed, counts, and generator version.
pub fn save_dataset(split: &DatasetSplit, root: &Path) -> Result<()> {
    for (name, samples) in [("train", &split.train), ("val", &split.val)] {
        let dir = root.join(name);
        for sample in samples {
            save_sample(sample, &dir, &sample.meta.index.to_string())?;
        }
    }
    let seed = split
        .train
        .first()
        .or(split.val.first())
        .map(|s| s.meta.seed)
        .unwrap_or(0);
    let image_size = split
        .train
        .first()
        .or(split.val.first())
        .map(|s| s.meta.image_size)
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "image_size": image_size,
        "n_train": split.train.len(),
        "n_val": split.val.len(),
    });
    write_json(&root.join("manifest.json"), &manifest)
}

pub fn load_dataset(root: &Path) -> Result<DatasetSplit> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|_| MisureError::Format {
        path: manifest_path.display().to_string(),
        reason: "missing manifest".into(),
    })?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| MisureError::Format {
            path: manifest_path.display().to_string(),
            reason: format!("bad manifest: {e}"),
        })?;
    let version = manifest["generator_version"].as_u64().unwrap_or(0);
    if version != u64::from(GENERATOR_VERSION) {
        return Err(MisureError::Format {
            path: manifest_path.display().to_string(),
            reason: format!("unsupported generator version {version}"),
        });
    }

    let load_dir = |name: &str| -> Result<Vec<TriangleSample>> {
        let dir = root.join(name);
        let mut stems: Vec<usize> = Vec::new();
        if let Ok(entries) = fs::read_dir(&dir) {
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(stem) = name.strip_suffix(".json") {
                    if let Ok(idx) = stem.parse::<usize>() {
                        stems.push(idx);
                    }
                }
            }
        }
        stems.sort_unstable();
        stems
            .into_iter()
            .map(|idx| load_sample(&dir, &idx.to_string()))
            .collect()
    };
    Ok(DatasetSplit {
        train: load_dir("train")?,
        val: load_dir("val")?,
    })
}

/// Reads big-endian IDX image files (magic 0x00000803) from `dir`. Accepts
/// the conventional training-file name.
fn load_fashion_mnist(dir: &Path) -> Result<GlyphSet> {
    let candidates = ["train-images-idx3-ubyte", "train-images.idx3-ubyte"];
    let path = candidates
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
        .ok_or_else(|| {
            MisureError::DataSource(format!(
                "no IDX image file found in {}",
                dir.display()
            ))
        })?;
    let bytes = fs::read(&path).map_err(|e| MisureError::io(path.display().to_string(), e))?;
    parse_idx_images(&bytes, &path.display().to_string())
}

fn parse_idx_images(bytes: &[u8], origin: &str) -> Result<GlyphSet> {
    let bad = |reason: String| MisureError::DataSource(format!("{origin}: {reason}"));
    if bytes.len() < 16 {
        return Err(bad("file shorter than the IDX header".into()));
    }
    let be32 = |at: usize| u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    if be32(0) != 0x0000_0803 {
        return Err(bad(format!("bad magic {:#010x}", be32(0))));
    }
    let count = be32(4) as usize;
    let rows = be32(8) as usize;
    let cols = be32(12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {count} images of {rows}x{cols}, got {}",
            bytes.len()
        )));
    }
    let mut glyphs = Vec::with_capacity(count);
    for i in 0..count {
        let at = 16 + i * rows * cols;
        glyphs.push(
            Array2::from_shape_vec((rows, cols), bytes[at..at + rows * cols].to_vec())
                .expect("length checked above"),
        );
    }
    if glyphs.is_empty() {
        return Err(bad("IDX file holds zero images".into()));
    }
    Ok(GlyphSet { glyphs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;
    use tempfile::tempdir;

    #[test]
    fn full_size_split_is_1400_600() {
        // Small canvas keeps the 2000-sample run cheap; the split rule is
        // size-independent.
        let split = generate_triangle(10, 64, &ObjectSource::Geometric, 5).unwrap();
        assert_eq!(split.train.len(), 7);
        assert_eq!(split.val.len(), 3);
        let (train, val) = split_counts(2000);
        assert_eq!((train, val), (1400, 600));
    }

    #[test]
    fn samples_pass_the_geometry_self_check() {
        let split = generate_triangle_tiny(40, 64, 11).unwrap();
        for sample in split.train.iter().chain(split.val.iter()) {
            self_check(sample).unwrap();
            assert!(!sample.gt_mask.is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_triangle_tiny(12, 64, 99).unwrap();
        let b = generate_triangle_tiny(12, 64, 99).unwrap();
        for (sa, sb) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(sa.image.data(), sb.image.data());
            assert_eq!(sa.gt_mask.data(), sb.gt_mask.data());
            assert_eq!(sa.meta, sb.meta);
        }
        let c = generate_triangle_tiny(12, 64, 100).unwrap();
        assert_ne!(
            a.train[0].image.data(),
            c.train[0].image.data(),
            "different seeds should differ"
        );
    }

    #[test]
    fn tiny_generation_is_fast() {
        let start = Instant::now();
        generate_triangle_tiny(64, 64, 0).unwrap();
        assert!(start.elapsed().as_secs_f64() < 5.0);
    }

    #[test]
    fn members_are_solid_and_distractors_hollow() {
        let split = generate_triangle_tiny(20, 64, 3).unwrap();
        let mut saw_distractor = false;
        for sample in split.train.iter().chain(split.val.iter()) {
            for obj in &sample.meta.objects {
                assert_eq!(obj.is_member, !obj.hollow);
                if !obj.is_member {
                    saw_distractor = true;
                    // Hollow interiors stay dark: the center pixel of a
                    // distractor is never inked.
                    let (cy, cx) = obj.center;
                    assert_eq!(
                        sample.image.data()[[0, cy as usize, cx as usize]],
                        0.0,
                        "hollow center should be background"
                    );
                }
            }
        }
        assert!(saw_distractor, "20 samples should include a distractor");
    }

    #[test]
    fn impossible_canvas_reports_placement_failure() {
        assert!(matches!(
            generate_triangle_tiny(1, 10, 0),
            Err(MisureError::Placement { attempts: 1000 })
        ));
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempdir().unwrap();
        let split = generate_triangle_tiny(1, 64, 7).unwrap();
        let sample = &split.train[0];
        save_sample(sample, dir.path(), "0").unwrap();
        let back = load_sample(dir.path(), "0").unwrap();
        assert_eq!(back.image.data(), sample.image.data());
        assert_eq!(back.gt_mask.data(), sample.gt_mask.data());
        assert_eq!(back.meta, sample.meta);
    }

    #[test]
    fn truncated_png_is_a_format_error() {
        let dir = tempdir().unwrap();
        let split = generate_triangle_tiny(1, 64, 7).unwrap();
        save_sample(&split.train[0], dir.path(), "0").unwrap();
        let png = dir.path().join("0.png");
        let bytes = fs::read(&png).unwrap();
        fs::write(&png, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_sample(dir.path(), "0"),
            Err(MisureError::Format { .. })
        ));
    }

    #[test]
    fn missing_meta_is_a_format_error_naming_the_file() {
        let dir = tempdir().unwrap();
        let split = generate_triangle_tiny(1, 64, 7).unwrap();
        save_sample(&split.train[0], dir.path(), "0").unwrap();
        fs::remove_file(dir.path().join("0.json")).unwrap();
        match load_sample(dir.path(), "0") {
            Err(MisureError::Format { path, .. }) => assert!(path.contains("0.json")),
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn dataset_directory_round_trips_with_manifest() {
        let dir = tempdir().unwrap();
        let split = generate_triangle_tiny(6, 64, 21).unwrap();
        save_dataset(&split, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["n_train"], 4);
        assert_eq!(manifest["n_val"], 2);
        assert_eq!(manifest["seed"], 21);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), 4);
        assert_eq!(back.val.len(), 2);
        for (a, b) in split.train.iter().zip(back.train.iter()) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.meta, b.meta);
        }
    }

    #[test]
    fn idx_glyphs_parse_and_stamp() {
        let dir = tempdir().unwrap();
        let (rows, cols, count) = (28usize, 28usize, 3usize);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&(count as u32).to_be_bytes());
        bytes.extend_from_slice(&(rows as u32).to_be_bytes());
        bytes.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..count {
            for y in 0..rows {
                for x in 0..cols {
                    // Solid bright core so footprints are nonempty.
                    let core = y >= 6 && y < 22 && x >= 6 && x < 22;
                    bytes.push(if core { 200 + i as u8 } else { 0 });
                }
            }
        }
        fs::write(dir.path().join("train-images-idx3-ubyte"), &bytes).unwrap();

        let split =
            generate_triangle(4, 128, &ObjectSource::FashionMnistDir(dir.path().into()), 2)
                .unwrap();
        for sample in split.train.iter().chain(split.val.iter()) {
            assert!(!sample.gt_mask.is_empty());
            assert!(sample.meta.objects.iter().all(|o| o.glyph.is_some()));
        }
    }

    #[test]
    fn corrupt_idx_is_a_data_source_error() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("train-images-idx3-ubyte"), b"not idx").unwrap();
        assert!(matches!(
            generate_triangle(1, 64, &ObjectSource::FashionMnistDir(dir.path().into()), 0),
            Err(MisureError::DataSource(_))
        ));
        assert!(matches!(
            generate_triangle(
                1,
                64,
                &ObjectSource::FashionMnistDir(dir.path().join("nope")),
                0
            ),
            Err(MisureError::DataSource(_))
        ));
    }

    #[test]
    fn rotation_produces_tolerant_triples() {
        for (dy, dx) in [(20i64, 5i64), (-13, 17), (9, -21), (25, 0)] {
            let c1 = (50i64, 50i64);
            let c2 = (c1.0 + dy, c1.1 + dx);
            let (ry, rx) = rotate60(dy, dx, false);
            let c3 = (c1.0 + ry, c1.1 + rx);
            assert!(is_member_triple(c1, c2, c3), "({dy},{dx})");
        }
    }

    #[test]
    fn collinear_centers_are_never_member_triples() {
        assert!(!is_member_triple((0, 0), (0, 10), (0, 20)));
        assert!(!is_member_triple((0, 0), (0, 0), (0, 10)));
        assert!(!is_member_triple((5, 5), (10, 10), (15, 15)));
    }
}
