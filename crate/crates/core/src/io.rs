//! On-disk formats: CPT1 tensors, PGM/PPM images and dataset directories.
//!
//! A CPT1 file is the magic `CPT1`, one dtype byte (0 f32, 1 f64, 2 i32,
//! 3 u8), one rank byte, `rank` little-endian `u32` dims and then the
//! row-major data, little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SyntheticScene;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{DType, Element, Tensor};

pub const CPT_MAGIC: &[u8; 4] = b"CPT1";

pub fn encode_cpt<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank {} too large", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size_of());
    out.extend_from_slice(CPT_MAGIC);
    out.push(T::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Reads the header: dtype, shape and the offset of the data.
fn decode_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 6 || &bytes[..4] != CPT_MAGIC {
        return Err(Error::Format("missing CPT1 header".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let data_start = 6 + 4 * rank;
    if bytes.len() < data_start {
        return Err(Error::Format("truncated CPT1 shape".into()));
    }
    let shape: Vec<usize> = bytes[6..data_start]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = shape
        .iter()
        .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("CPT1 shape overflows".into()))?;
    if bytes.len() - data_start != expected {
        return Err(Error::Format(format!(
            "CPT1 data holds {} bytes, shape {shape:?} needs {expected}",
            bytes.len() - data_start
        )));
    }
    Ok((dtype, shape, data_start))
}

pub fn decode_cpt<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape, start) = decode_header(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("expected {} tensor, found {}", T::DTYPE.name(), dtype.name())));
    }
    let data = bytes[start..].chunks_exact(dtype.size_of()).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

/// The dtype stored in a CPT1 buffer.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    decode_header(bytes).map(|(d, _, _)| d)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_cpt<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_bytes(path, &encode_cpt(t)?)
}

pub fn load_cpt<T: Element>(path: &Path) -> Result<Tensor<T>> {
    decode_cpt(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Binary greyscale image, `pixels` row-major.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape("pgm", &[height, width], &[pixels.len()]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Binary colour image, `rgb` row-major with interleaved channels.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape("ppm", &[height, width, 3], &[rgb.len()]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_bytes(path, &encode_pgm(width, height, pixels)?)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_bytes(path, &encode_ppm(width, height, rgb)?)
}

/// Colours of predicted classes; class `c` uses entry `c % 8`.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [245, 130, 48],
    [70, 240, 240],
];

/// Colour of ignored pixels.
pub const IGNORE_COLOR: [u8; 3] = [255, 255, 255];

pub fn labels_to_rgb(labels: &LabelMap) -> Vec<u8> {
    labels
        .labels()
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| {
            if labels.is_ignored(i) || l < 0 {
                IGNORE_COLOR
            } else {
                PALETTE[l as usize % PALETTE.len()]
            }
        })
        .collect()
}

/// `[3, H, W]` image in `[0, 1]` to interleaved 8-bit RGB.
pub fn image_to_rgb(image: &Tensor<f32>) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("image", &[3, 0, 0], image.shape()));
    }
    let hw = image.shape()[1] * image.shape()[2];
    let d = image.data();
    Ok((0..hw)
        .flat_map(|i| (0..3).map(move |c| to_byte(d[c * hw + i] as f64)))
        .collect())
}

/// `round(255·v)` with `v` clamped to `[0, 1]`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub const DATASET_MANIFEST: &str = "manifest.txt";

fn scene_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id:05}.img.cpt")), dir.join(format!("{id:05}.lbl.cpt")))
}

/// Writes `{id}.img.cpt` (f32 `[3, H, W]`), `{id}.lbl.cpt` (i32 `[H, W]`)
/// per scene and a manifest listing `id seed` pairs.
pub fn export_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    create_dir(dir)?;
    let mut manifest = format!("cpnet-dataset 1\ncount {}\n", scenes.len());
    for (id, s) in scenes.iter().enumerate() {
        let (img, lbl) = scene_paths(dir, id);
        save_cpt(&img, &s.image)?;
        let labels = Tensor::new(vec![s.labels.height(), s.labels.width()], s.labels.labels().to_vec())?;
        save_cpt(&lbl, &labels)?;
        writeln!(manifest, "{id:05} {}", s.seed).unwrap();
    }
    write_bytes(&dir.join(DATASET_MANIFEST), manifest.as_bytes())
}

fn manifest_entries(dir: &Path) -> Result<Vec<(usize, u64)>> {
    let path = dir.join(DATASET_MANIFEST);
    let text = String::from_utf8(read_bytes(&path)?).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("cpnet-dataset 1") {
        return Err(bad("unrecognised header"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("missing count"))?;
    let entries = lines
        .map(|l| {
            let (id, seed) = l.split_once(' ').ok_or_else(|| bad("malformed entry"))?;
            Ok((id.parse().map_err(|_| bad("bad id"))?, seed.parse().map_err(|_| bad("bad seed"))?))
        })
        .collect::<Result<Vec<_>>>()?;
    if entries.len() != count {
        return Err(bad("entry count does not match"));
    }
    Ok(entries)
}

pub fn load_scene(dir: &Path, id: usize, seed: u64) -> Result<SyntheticScene> {
    let (img, lbl) = scene_paths(dir, id);
    let image: Tensor<f32> = load_cpt(&img)?;
    let labels: Tensor<i32> = load_cpt(&lbl)?;
    if image.rank() != 3 || image.shape()[0] != 3 || labels.shape() != &image.shape()[1..] {
        return Err(Error::Format(format!("scene {id:05}: image {:?} and labels {:?} disagree", image.shape(), labels.shape())));
    }
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    Ok(SyntheticScene {
        image,
        labels: LabelMap::new(h, w, labels.into_data())?,
        seed,
    })
}

pub fn import_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    manifest_entries(dir)?.into_iter().map(|(id, seed)| load_scene(dir, id, seed)).collect()
}

/// One scene of an exported dataset, looked up by id.
pub fn import_scene(dir: &Path, id: usize) -> Result<SyntheticScene> {
    let seed = manifest_entries(dir)?
        .into_iter()
        .find(|&(i, _)| i == id)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::InvalidArgument(format!("no scene {id} in {}", dir.display())))?;
    load_scene(dir, id, seed)
}
