//! Dataset ingestion and the raw tensor container used for clips, latents,
//! and checkpoint parameters.
//!
//! Container layout (little-endian throughout):
//!   magic "CDT1" | version u32 | dtype u32 (1 = f32) | rank u32 |
//!   dims u64[rank] | payload f32[product(dims)] row-major
//! Round trips are bit-exact; truncated or inconsistent files are rejected.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::video::VideoTensor;
use crate::FORMAT_VERSION;

pub const CONTAINER_MAGIC: &[u8; 4] = b"CDT1";
pub const DTYPE_F32: u32 = 1;

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    if t.dtype() != DType::F32 {
        return Err(Error::data(format!(
            "tensor container stores f32 only, got {:?}",
            t.dtype()
        )));
    }
    let dims = t.dims().to_vec();
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    let mut buf = Vec::with_capacity(16 + dims.len() * 8 + data.len() * 4);
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for x in &data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>, device: &Device) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(fail("container shorter than its header"));
    }
    if &bytes[0..4] != CONTAINER_MAGIC {
        return Err(fail("bad container magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported container version {version}")));
    }
    if u32_at(8) != DTYPE_F32 {
        return Err(fail("unsupported dtype code"));
    }
    let rank = u32_at(12) as usize;
    if rank > 8 {
        return Err(fail(&format!("implausible rank {rank}")));
    }
    let dims_end = 16 + rank * 8;
    if bytes.len() < dims_end {
        return Err(fail("container truncated in dims"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let o = 16 + i * 8;
        let d = u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        dims.push(d as usize);
    }
    let count: usize = dims.iter().product();
    if bytes.len() != dims_end + count * 4 {
        return Err(fail(&format!(
            "payload length {} does not match dims {:?}",
            bytes.len() - dims_end,
            dims
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let o = dims_end + i * 4;
        data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
    }
    Ok(Tensor::from_vec(data, dims, device)?)
}

/// Preprocessing applied to every clip: optional bilinear resize of the short
/// side, center crop, truncation to 1+F frames, and the affine map
/// x/127.5 - 1 into [-1, 1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreprocessSpec {
    pub resize: Option<usize>,
    pub crop: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub path: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub preprocess: PreprocessSpec,
    pub clips: Vec<ClipEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut m: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for c in &m.clips {
            if !m.base_dir.join(&c.path).is_dir() {
                return Err(Error::data(format!(
                    "manifest entry {} does not resolve to a directory",
                    c.path
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest serialization: {e}")))?;
        fs::write(path.as_ref(), text)?;
        Ok(())
    }

    pub fn split<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a ClipEntry> + 'a {
        self.clips.iter().filter(move |c| c.split == tag)
    }
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    // zero-padded names make lexical order numeric
    files.sort();
    Ok(files)
}

fn bilinear_resize(img: &image::RgbImage, nw: u32, nh: u32) -> image::RgbImage {
    image::imageops::resize(img, nw, nh, image::imageops::FilterType::Triangle)
}

/// Loads one clip: decode frames, apply the preprocess settings, normalize
/// to [-1, 1].
pub fn load_clip(entry: &ClipEntry, base_dir: &Path, spec: &PreprocessSpec, device: &Device) -> Result<VideoTensor> {
    let dir = base_dir.join(&entry.path);
    let files = frame_files(&dir)?;
    if files.len() < spec.frames {
        return Err(Error::data(format!(
            "{}: {} frames available, {} required",
            dir.display(),
            files.len(),
            spec.frames
        )));
    }
    let crop = spec.crop;
    let mut data = Vec::with_capacity(spec.frames * crop * crop * 3);
    for f in files.iter().take(spec.frames) {
        let img = image::open(f)
            .map_err(|e| Error::data(format!("{}: {e}", f.display())))?
            .to_rgb8();
        let img = match spec.resize {
            Some(short) => {
                let (w, h) = (img.width(), img.height());
                let s = short as f64 / w.min(h) as f64;
                let (nw, nh) = (
                    (w as f64 * s).round().max(1.0) as u32,
                    (h as f64 * s).round().max(1.0) as u32,
                );
                bilinear_resize(&img, nw, nh)
            }
            None => img,
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w < crop || h < crop {
            return Err(Error::data(format!(
                "{}: {w}x{h} smaller than crop {crop}",
                f.display()
            )));
        }
        let (x0, y0) = ((w - crop) / 2, (h - crop) / 2);
        for y in 0..crop {
            for x in 0..crop {
                let px = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
                for c in 0..3 {
                    data.push(px.0[c] as f32 / 127.5 - 1.0);
                }
            }
        }
    }
    let t = Tensor::from_vec(data, (spec.frames, crop, crop, 3), device)?;
    VideoTensor::new(t, None)
}

/// Loads every clip of a split into memory.
pub fn load_split(manifest: &DatasetManifest, tag: &str, device: &Device) -> Result<Vec<VideoTensor>> {
    let clips: Vec<_> = manifest.split(tag).collect();
    if clips.is_empty() {
        return Err(Error::data(format!("manifest has no '{tag}' clips")));
    }
    clips
        .into_iter()
        .map(|e| load_clip(e, &manifest.base_dir, &manifest.preprocess, device))
        .collect()
}

/// One synthetic scene: sinusoidal gradient background plus 1..3 filled
/// squares, the whole scene translated each frame by a constant integer pixel
/// velocity with wraparound. Deterministic per (seed, clip index).
pub struct SynthClip {
    pub velocity: (i32, i32),
    /// RGB8 frames, row-major, len = frames * res * res * 3.
    pub frames: Vec<Vec<u8>>,
}

pub fn synth_clip(seed: u64, clip_idx: u64, res: usize, frames: usize) -> SynthClip {
    let mut rng = stream(seed, clip_idx, Purpose::ClipGen);
    let (mut dx, mut dy) = (0i32, 0i32);
    while dx == 0 && dy == 0 {
        dx = rng.random_range(-2..=2);
        dy = rng.random_range(-2..=2);
    }
    let tau = std::f64::consts::TAU;
    let amp = rng.random_range(0.10..0.30);
    let kx = rng.random_range(1..=4) as f64 * tau / res as f64;
    let ky = rng.random_range(1..=4) as f64 * tau / res as f64;
    let phase: [f64; 3] = [
        rng.random_range(0.0..tau),
        rng.random_range(0.0..tau),
        rng.random_range(0.0..tau),
    ];
    struct Square {
        x: usize,
        y: usize,
        size: usize,
        color: [f64; 3],
    }
    let n_sq = rng.random_range(1..=3);
    let squares: Vec<Square> = (0..n_sq)
        .map(|_| Square {
            x: rng.random_range(0..res),
            y: rng.random_range(0..res),
            size: rng.random_range(res / 8..=res / 3),
            color: [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ],
        })
        .collect();

    // static scene sampled on the integer grid
    let scene_px = |x: usize, y: usize| -> [u8; 3] {
        let mut v = [0f64; 3];
        for c in 0..3 {
            v[c] = 0.5 + amp * (kx * x as f64 + ky * y as f64 + phase[c]).sin();
        }
        for s in &squares {
            let in_x = (x + res - s.x) % res < s.size;
            let in_y = (y + res - s.y) % res < s.size;
            if in_x && in_y {
                v = s.color;
            }
        }
        v.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
    };

    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let sx = (f as i32 * dx).rem_euclid(res as i32) as usize;
        let sy = (f as i32 * dy).rem_euclid(res as i32) as usize;
        let mut buf = Vec::with_capacity(res * res * 3);
        for y in 0..res {
            for x in 0..res {
                let px = scene_px((x + res - sx) % res, (y + res - sy) % res);
                buf.extend_from_slice(&px);
            }
        }
        out.push(buf);
    }
    SynthClip { velocity: (dx, dy), frames: out }
}

/// Writes a deterministic synthetic dataset: PNG frame directories plus a
/// manifest. The last max(1, n/16) clips are tagged "val".
pub fn make_synthetic_dataset(
    seed: u64,
    n_clips: usize,
    resolution: usize,
    frames: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    if n_clips == 0 || resolution == 0 || frames == 0 {
        return Err(Error::usage("dataset parameters must be positive"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let val_from = n_clips - (n_clips / 16).max(1).min(n_clips);
    let mut entries = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let clip = synth_clip(seed, i as u64, resolution, frames);
        let rel = format!("clip_{i:04}");
        let dir = out_dir.join(&rel);
        fs::create_dir_all(&dir)?;
        for (f, buf) in clip.frames.iter().enumerate() {
            image::save_buffer(
                dir.join(format!("frame_{f:04}.png")),
                buf,
                resolution as u32,
                resolution as u32,
                image::ColorType::Rgb8,
            )
            .map_err(|e| Error::data(format!("png write: {e}")))?;
        }
        entries.push(ClipEntry {
            path: rel,
            frames,
            width: resolution,
            height: resolution,
            split: if i >= val_from { "val" } else { "train" }.to_string(),
        });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        preprocess: PreprocessSpec { resize: None, crop: resolution, frames },
        clips: entries,
        base_dir: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
