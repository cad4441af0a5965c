//! File containers for float maps and model parameters.
//!
//! ## MISU-F float map container
//!
//! Little-endian layout:
//!
//! ```text
//! magic   6 bytes  "MISU-F"
//! h       u32
//! w       u32
//! c       u32
//! payload h*w*c little-endian f32, row-major over (h, w, c):
//!         payload[(y*w + x)*c + ch]
//! ```
//!
//! ## MISU-M model container
//!
//! ```text
//! magic     6 bytes  "MISU-M"
//! version   u16      (currently 1)
//! n_tensors u32
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8, dims ndim*u32
//!   data     prod(dims) little-endian f32, row-major
//! ```
//!
//! Values are stored as f32 in both containers; the engine computes in
//! f64 and narrows on write.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{MisureError, Result};

const MAP_MAGIC: &[u8; 6] = b"MISU-F";
const MODEL_MAGIC: &[u8; 6] = b"MISU-M";
pub const MODEL_VERSION: u16 = 1;

/// A float map with shape (h, w, c) as stored in a MISU-F file.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Row-major over (h, w, c).
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn from_array2(arr: &Array2<f64>) -> Self {
        let (h, w) = arr.dim();
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(arr[[y, x]] as f32);
            }
        }
        Self { h, w, c: 1, data }
    }

    /// Packs a `[C][H][W]` stack channel-interleaved.
    pub fn from_array3(arr: &Array3<f64>) -> Self {
        let (c, h, w) = arr.dim();
        let mut data = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(arr[[ch, y, x]] as f32);
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.c != 1 {
            return Err(MisureError::Shape(format!(
                "expected single-channel map, got c={}",
                self.c
            )));
        }
        Ok(Array2::from_shape_fn((self.h, self.w), |(y, x)| {
            f64::from(self.data[y * self.w + x])
        }))
    }

    pub fn to_array3(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.c, self.h, self.w), |(ch, y, x)| {
            f64::from(self.data[(y * self.w + x) * self.c + ch])
        })
    }
}

pub fn write_float_map(path: &Path, map: &FloatMap) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + map.data.len() * 4);
    buf.extend_from_slice(MAP_MAGIC);
    buf.extend_from_slice(&(map.h as u32).to_le_bytes());
    buf.extend_from_slice(&(map.w as u32).to_le_bytes());
    buf.extend_from_slice(&(map.c as u32).to_le_bytes());
    for v in &map.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| MisureError::io(path.display().to_string(), e))
}

pub fn read_float_map(path: &Path) -> Result<FloatMap> {
    let bytes = fs::read(path).map_err(|e| MisureError::io(path.display().to_string(), e))?;
    let fail = |reason: &str| MisureError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    if bytes.len() < 18 || &bytes[..6] != MAP_MAGIC {
        return Err(fail("missing MISU-F magic"));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| fail("dims overflow"))?;
    if bytes.len() != 18 + n * 4 {
        return Err(fail("payload length does not match header dims"));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = 18 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok(FloatMap { h, w, c, data })
}

/// Named tensors, ordered by name so serialization is canonical.
pub type TensorMap = BTreeMap<String, ArrayD<f64>>;

pub fn write_model(path: &Path, tensors: &TensorMap) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, arr) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| MisureError::io(path.display().to_string(), e))
}

pub fn read_model(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| MisureError::io(path.display().to_string(), e))?;
    let fail = |reason: String| MisureError::Format {
        path: path.display().to_string(),
        reason,
    };
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 6];
    cur.read_exact(&mut magic)
        .map_err(|_| fail("truncated header".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(fail("missing MISU-M magic".into()));
    }
    let mut u16buf = [0u8; 2];
    let mut u32buf = [0u8; 4];
    cur.read_exact(&mut u16buf)
        .map_err(|_| fail("truncated version".into()))?;
    let version = u16::from_le_bytes(u16buf);
    if version != MODEL_VERSION {
        return Err(fail(format!("unsupported model version {version}")));
    }
    cur.read_exact(&mut u32buf)
        .map_err(|_| fail("truncated tensor count".into()))?;
    let n_tensors = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = TensorMap::new();
    for _ in 0..n_tensors {
        cur.read_exact(&mut u16buf)
            .map_err(|_| fail("truncated tensor name length".into()))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(|_| fail("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fail("tensor name is not UTF-8".into()))?;
        let mut ndim_buf = [0u8; 1];
        cur.read_exact(&mut ndim_buf)
            .map_err(|_| fail("truncated tensor rank".into()))?;
        let ndim = ndim_buf[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            cur.read_exact(&mut u32buf)
                .map_err(|_| fail("truncated tensor dims".into()))?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f32buf = [0u8; 4];
        for _ in 0..n {
            cur.read_exact(&mut f32buf)
                .map_err(|_| fail(format!("truncated data for tensor `{name}`")))?;
            data.push(f64::from(f32::from_le_bytes(f32buf)));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| fail(format!("bad tensor shape: {e}")))?;
        tensors.insert(name, arr);
    }
    Ok(tensors)
}

/// Writes an 8-bit grayscale PNG preview of a single-channel map,
/// min-max scaled; a constant map becomes all black.
pub fn write_png_preview(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = if range > 0.0 {
                (map[[y, x]] - lo) / range
            } else {
                0.0
            };
            pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer length matches dims");
    img.save(path).map_err(|e| MisureError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Writes a grayscale PNG with exact u8 quantization `round(v*255)`.
pub fn write_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            pixels.push((map[[y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer length matches dims");
    img.save(path).map_err(|e| MisureError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Reads a grayscale PNG into `[0,1]` values (`v/255`).
pub fn read_gray_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| MisureError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(gray.get_pixel(x as u32, y as u32)[0]) / 255.0
    }))
}

/// Saves a file atomically enough for tests: write then rename is not
/// needed here; plain write with directory creation.
pub fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| MisureError::io(parent.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Writes a JSON value to disk with a trailing newline.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    ensure_parent_dir(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    let mut f =
        fs::File::create(path).map_err(|e| MisureError::io(path.display().to_string(), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| MisureError::io(path.display().to_string(), e))
}
