//! On-disk datasets: PNG images, single-channel label PNGs with a palette
//! sidecar, and a manifest with seeds and checksums.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::scene::{scene_at, SceneSpec};
use crate::segmap::{Palette, SegMap};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const PALETTE: &str = "palette.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// `[1, 3, H, W]` model-space image to 8-bit RGB.
pub fn tensor_to_rgb(x: &Tensor) -> Result<RgbImage> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Shape {
            op: "tensor_to_rgb",
            detail: format!("{s:?}"),
        });
    }
    let (h, w) = (s[2], s[3]);
    let d = x.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |j, i| {
        let p = i as usize * w + j as usize;
        Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |idx| {
        let (c, p) = (idx / (h * w), idx % (h * w));
        let px = img.get_pixel((p % w) as u32, (p / w) as u32);
        px.0[c] as f64 / 127.5 - 1.0
    })
}

pub fn encode_png_rgb(x: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    tensor_to_rgb(x)?.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

/// Labels as a single-channel PNG whose pixel values are class ids.
pub fn encode_png_labels(y: &SegMap) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(y.width() as u32, y.height() as u32, |j, i| {
        Luma([y.get(i as usize, j as usize)])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png_labels(bytes: &[u8], palette: &Palette) -> Result<SegMap> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    SegMap::new(h, w, img.into_raw(), palette.clone())
}

/// Colour rendering of a map with its palette.
pub fn encode_png_colored(y: &SegMap) -> Result<Vec<u8>> {
    let img = RgbImage::from_fn(y.width() as u32, y.height() as u32, |j, i| {
        Rgb(y.palette().0[y.get(i as usize, j as usize) as usize].color)
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_png_rgb(&fs::read(path)?)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => Ok(fs::create_dir_all(d)?),
        _ => Ok(()),
    }
}

/// Writes an RGB PNG, creating the parent directory if needed.
pub fn write_image(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    create_parent(path.as_ref())?;
    fs::write(path, encode_png_rgb(x)?)?;
    Ok(())
}

pub fn read_palette(path: impl AsRef<Path>) -> Result<Palette> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Reads a label PNG using the palette sidecar next to it (or in a parent directory).
pub fn read_labels(path: impl AsRef<Path>) -> Result<SegMap> {
    let path = path.as_ref();
    let mut dir = path.parent();
    while let Some(d) = dir {
        let cand = d.join(PALETTE);
        if cand.exists() {
            return decode_png_labels(&fs::read(path)?, &read_palette(cand)?);
        }
        dir = d.parent();
    }
    Err(Error::Missing(format!("{PALETTE} for {}", path.display())))
}

pub fn write_labels(path: impl AsRef<Path>, y: &SegMap) -> Result<()> {
    let path = path.as_ref();
    create_parent(path)?;
    fs::write(path, encode_png_labels(y)?)?;
    if let Some(d) = path.parent() {
        fs::write(d.join(PALETTE), serde_json::to_vec_pretty(y.palette())?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    /// First scene index.
    pub start: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub index: u64,
    pub image: String,
    pub labels: String,
    pub image_sha256: String,
    pub labels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub splits: Vec<(SplitSpec, Vec<FileEntry>)>,
}

/// Default splits: DDPM training images, annotated classifier images, held-out test images.
pub fn default_splits() -> Vec<SplitSpec> {
    vec![
        SplitSpec {
            name: "train".into(),
            start: 0,
            count: 500,
        },
        SplitSpec {
            name: "annotated".into(),
            start: 5000,
            count: 20,
        },
        SplitSpec {
            name: "test".into(),
            start: 10_000,
            count: 50,
        },
    ]
}

/// Generates and writes every split under `root/<split>/`.
pub fn write_dataset(
    root: impl AsRef<Path>,
    spec: &SceneSpec,
    splits: &[SplitSpec],
) -> Result<Manifest> {
    spec.validate()?;
    let root = root.as_ref();
    let mut out = Vec::new();
    for split in splits {
        let dir = root.join(&split.name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(PALETTE), serde_json::to_vec_pretty(&spec.palette)?)?;
        let entries = par::try_map_range(split.count, |i| -> Result<FileEntry> {
            let index = split.start + i as u64;
            let (x, y) = scene_at(spec, index)?;
            let (img, lab) = (encode_png_rgb(&x)?, encode_png_labels(&y)?);
            let image = format!("{index:06}.png");
            let labels = format!("{index:06}_labels.png");
            fs::write(dir.join(&image), &img)?;
            fs::write(dir.join(&labels), &lab)?;
            Ok(FileEntry {
                index,
                image,
                labels,
                image_sha256: sha256_hex(&img),
                labels_sha256: sha256_hex(&lab),
            })
        })?;
        out.push((split.clone(), entries));
    }
    let manifest = Manifest {
        spec: spec.clone(),
        splits: out,
    };
    fs::write(root.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(
        root.as_ref().join(MANIFEST),
    )?)?)
}

/// Loads one split, verifying checksums.
pub fn read_split(root: impl AsRef<Path>, name: &str) -> Result<Vec<(Tensor, SegMap)>> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let (_, entries) = manifest
        .splits
        .iter()
        .find(|(s, _)| s.name == name)
        .ok_or_else(|| Error::Missing(format!("split {name}")))?;
    let dir: PathBuf = root.join(name);
    let palette = read_palette(dir.join(PALETTE))?;
    par::try_map_slice(entries, |e| {
        let img = fs::read(dir.join(&e.image))?;
        let lab = fs::read(dir.join(&e.labels))?;
        if sha256_hex(&img) != e.image_sha256 || sha256_hex(&lab) != e.labels_sha256 {
            return Err(Error::Format(format!(
                "checksum mismatch for scene {}",
                e.index
            )));
        }
        Ok((decode_png_rgb(&img)?, decode_png_labels(&lab, &palette)?))
    })
}
