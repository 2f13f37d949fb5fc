//! Dataset ingestion and the shifted evaluation subsets.
//!
//! Supported formats, bit-exact:
//!
//! - IDX (MNIST / Fashion-MNIST): big-endian magic `0x00000803` for image
//!   files and `0x00000801` for label files, raw or gzip (detected by the
//!   gzip magic bytes).
//! - CIFAR-10 binary batches: records of 1 label byte + 3072 channel-planar
//!   pixel bytes.
//!
//! Pixels are normalized to `[0, 1]`; no mean/std standardization. The
//! shift protocol translates images along the x axis with zero fill,
//! restricted to images whose nonzero pixels sit at least `margin`
//! columns from both borders so no mass is ever lost.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::rng::chacha;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "EQPF_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic 0x{got:08x}, expected 0x{want:08x}")]
    BadMagic { path: PathBuf, got: u32, want: u32 },
    #[error("{path}: truncated payload, expected {expected} bytes, got {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a multiple of the {record} byte record")]
    BadRecordLength {
        path: PathBuf,
        len: usize,
        record: usize,
    },
    #[error("label {label} out of range for 10 classes")]
    BadLabel { label: u8 },
    #[error("{0}")]
    Invalid(String),
}

/// One image with pixels normalized to `[0, 1]`, stored row-major
/// `[h][w][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub label: u8,
}

impl LabeledImage {
    pub fn pixel(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.pixels[(r * self.w + c) * self.channels + ch]
    }

    /// Sum of all pixel values ("mass"), used by the shift invariants.
    pub fn mass(&self) -> f64 {
        self.pixels.iter().sum()
    }
}

/// A loaded dataset split plus a fingerprint of the raw bytes it came
/// from (recorded in run manifests).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub sha256: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic shuffled index order for a seed.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.images.len()).collect();
        idx.shuffle(&mut chacha(seed));
        idx
    }
}

fn read_source(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    // gzip magic 1f 8b
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Parse an IDX image/label file pair into labeled images.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_source(images_path)?;
    let lab_bytes = read_source(labels_path)?;
    let mut hasher = Sha256::new();
    hasher.update(&img_bytes);
    hasher.update(&lab_bytes);

    let magic_of = |bytes: &[u8], path: &Path| -> Result<u32, DataError> {
        if bytes.len() < 4 {
            return Err(DataError::Truncated {
                path: path.to_path_buf(),
                expected: 4,
                actual: bytes.len(),
            });
        }
        Ok(be_u32(bytes, 0))
    };
    let magic = magic_of(&img_bytes, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            got: magic,
            want: IDX_IMAGE_MAGIC,
        });
    }
    if img_bytes.len() < 16 {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            expected: 16,
            actual: img_bytes.len(),
        });
    }
    let n = be_u32(&img_bytes, 4) as usize;
    let h = be_u32(&img_bytes, 8) as usize;
    let w = be_u32(&img_bytes, 12) as usize;
    let expected = 16 + n * h * w;
    if img_bytes.len() != expected {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            expected,
            actual: img_bytes.len(),
        });
    }

    let lmagic = magic_of(&lab_bytes, labels_path)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            got: lmagic,
            want: IDX_LABEL_MAGIC,
        });
    }
    if lab_bytes.len() < 8 {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            expected: 8,
            actual: lab_bytes.len(),
        });
    }
    let ln = be_u32(&lab_bytes, 4) as usize;
    if lab_bytes.len() != 8 + ln {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            expected: 8 + ln,
            actual: lab_bytes.len(),
        });
    }
    if n != ln {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ln,
        });
    }

    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let base = 16 + i * h * w;
        let label = lab_bytes[8 + i];
        if label > 9 {
            return Err(DataError::BadLabel { label });
        }
        let pixels: Vec<f64> = img_bytes[base..base + h * w]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(LabeledImage {
            pixels,
            h,
            w,
            channels: 1,
            label,
        });
    }
    Ok(Dataset {
        images,
        sha256: hex_digest(hasher),
    })
}

/// Parse CIFAR-10 binary batch files: per record one label byte then 3072
/// pixel bytes in channel-planar order (all red, all green, all blue).
pub fn load_cifar10(batch_paths: &[PathBuf]) -> Result<Dataset, DataError> {
    if batch_paths.is_empty() {
        return Err(DataError::Invalid("no CIFAR-10 batch files given".into()));
    }
    let mut hasher = Sha256::new();
    let mut images = Vec::new();
    for path in batch_paths {
        let bytes = read_source(path)?;
        hasher.update(&bytes);
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DataError::BadRecordLength {
                path: path.clone(),
                len: bytes.len(),
                record: CIFAR_RECORD_LEN,
            });
        }
        for record in bytes.chunks(CIFAR_RECORD_LEN) {
            let label = record[0];
            if label > 9 {
                return Err(DataError::BadLabel { label });
            }
            let planes = &record[1..];
            let mut pixels = vec![0.0; 32 * 32 * 3];
            for ch in 0..3 {
                for p in 0..1024 {
                    pixels[p * 3 + ch] = planes[ch * 1024 + p] as f64 / 255.0;
                }
            }
            images.push(LabeledImage {
                pixels,
                h: 32,
                w: 32,
                channels: 3,
                label,
            });
        }
    }
    Ok(Dataset {
        images,
        sha256: hex_digest(hasher),
    })
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Bilinear resize of a single-channel or multi-channel image to
/// `out_h x out_w`. Align-centers convention; output values stay inside
/// the input's range because the weights are convex.
pub fn resize_bilinear(img: &LabeledImage, out_h: usize, out_w: usize) -> LabeledImage {
    if img.h == out_h && img.w == out_w {
        return img.clone();
    }
    let c = img.channels;
    let mut pixels = vec![0.0; out_h * out_w * c];
    for r in 0..out_h {
        let sy = ((r as f64 + 0.5) * img.h as f64 / out_h as f64 - 0.5)
            .clamp(0.0, (img.h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let fy = sy - y0 as f64;
        for col in 0..out_w {
            let sx = ((col as f64 + 0.5) * img.w as f64 / out_w as f64 - 0.5)
                .clamp(0.0, (img.w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v = img.pixel(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
                    + img.pixel(y1, x0, ch) * fy * (1.0 - fx)
                    + img.pixel(y0, x1, ch) * (1.0 - fy) * fx
                    + img.pixel(y1, x1, ch) * fy * fx;
                pixels[(r * out_w + col) * c + ch] = v;
            }
        }
    }
    LabeledImage {
        pixels,
        h: out_h,
        w: out_w,
        channels: c,
        label: img.label,
    }
}

/// Translate an image along the x axis by `offset` columns (positive =
/// right), filling vacated columns with zero. Shape is preserved.
pub fn shift_x(img: &LabeledImage, offset: i64) -> Result<LabeledImage, DataError> {
    if offset.unsigned_abs() as usize > img.w {
        return Err(DataError::Invalid(format!(
            "shift offset {offset} exceeds image width {}",
            img.w
        )));
    }
    let mut pixels = vec![0.0; img.pixels.len()];
    for r in 0..img.h {
        for c in 0..img.w {
            let src = c as i64 - offset;
            if src < 0 || src >= img.w as i64 {
                continue;
            }
            for ch in 0..img.channels {
                pixels[(r * img.w + c) * img.channels + ch] =
                    img.pixel(r, src as usize, ch);
            }
        }
    }
    Ok(LabeledImage {
        pixels,
        h: img.h,
        w: img.w,
        channels: img.channels,
        label: img.label,
    })
}

/// True when every nonzero pixel sits at least `margin` columns away from
/// both vertical borders, so shifts up to `margin` lose nothing. Blank
/// images qualify vacuously.
pub fn is_shiftable(img: &LabeledImage, margin: usize) -> bool {
    if 2 * margin >= img.w {
        return img.pixels.iter().all(|&v| v == 0.0);
    }
    for r in 0..img.h {
        for c in 0..img.w {
            if c >= margin && c < img.w - margin {
                continue;
            }
            for ch in 0..img.channels {
                if img.pixel(r, c, ch) != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

/// Indices of the eligible shifted-evaluation subset: images of
/// `class_id` whose nonzero pixels clear `margin` on both sides. An empty
/// result is reported as an error naming the class and margin rather than
/// silently returning nothing.
pub fn select_shiftable(
    images: &[LabeledImage],
    class_id: u8,
    margin: usize,
) -> Result<Vec<usize>, DataError> {
    let subset: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, im)| im.label == class_id && is_shiftable(im, margin))
        .map(|(i, _)| i)
        .collect();
    if subset.is_empty() {
        return Err(DataError::Invalid(format!(
            "no images of class {class_id} admit a {margin}-pixel shift margin"
        )));
    }
    Ok(subset)
}

/// Well-known file layouts under the dataset root.
pub fn mnist_paths(root: &Path, train: bool) -> (PathBuf, PathBuf) {
    let dir = root.join("mnist");
    if train {
        (
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        )
    } else {
        (
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        )
    }
}

pub fn fashion_paths(root: &Path, train: bool) -> (PathBuf, PathBuf) {
    let dir = root.join("fashion");
    if train {
        (
            dir.join("train-images-idx3-ubyte"),
            dir.join("train-labels-idx1-ubyte"),
        )
    } else {
        (
            dir.join("t10k-images-idx3-ubyte"),
            dir.join("t10k-labels-idx1-ubyte"),
        )
    }
}

pub fn cifar10_paths(root: &Path, train: bool) -> Vec<PathBuf> {
    let dir = root.join("cifar10");
    if train {
        (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect()
    } else {
        vec![dir.join("test_batch.bin")]
    }
}

/// Dataset root: explicit flag value, else `EQPF_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(v) = std::env::var(DATA_DIR_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("data")
}

/// Writes IDX image/label fixture files, optionally gzipped. Coded
/// straight from the format layout, independently of the reader, so the
/// pair serves as a round-trip oracle in the verification suite.
pub fn write_idx_fixture(
    dir: &Path,
    images: &[Vec<u8>],
    labels: &[u8],
    h: usize,
    w: usize,
    gzip: bool,
) -> Result<(PathBuf, PathBuf), DataError> {
    use std::io::Write;
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let ip = dir.join(if gzip { "imgs.gz" } else { "imgs" });
    let lp = dir.join(if gzip { "labs.gz" } else { "labs" });
    let write = |path: &PathBuf, data: &[u8]| -> Result<(), DataError> {
        if gzip {
            let f = File::create(path).map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            enc.write_all(data)
                .and_then(|_| enc.finish().map(|_| ()))
                .map_err(|source| DataError::Io {
                    path: path.clone(),
                    source,
                })
        } else {
            std::fs::write(path, data).map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })
        }
    };
    write(&ip, &img)?;
    write(&lp, &lab)?;
    Ok((ip, lp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(
        dir: &Path,
        images: &[Vec<u8>],
        labels: &[u8],
        h: usize,
        w: usize,
        gzip: bool,
    ) -> (PathBuf, PathBuf) {
        write_idx_fixture(dir, images, labels, h, w, gzip).unwrap()
    }

    #[test]
    fn idx_fixture_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![vec![0u8, 51, 102, 255, 20, 10], vec![9, 8, 7, 6, 5, 4]];
        let labels = vec![3u8, 7];
        for gzip in [false, true] {
            let (ip, lp) = write_fixture(dir.path(), &images, &labels, 2, 3, gzip);
            let ds = load_idx(&ip, &lp).unwrap();
            assert_eq!(ds.len(), 2);
            for (im, (raw, lab)) in ds.images.iter().zip(images.iter().zip(&labels)) {
                assert_eq!(im.label, *lab);
                assert_eq!((im.h, im.w, im.channels), (2, 3, 1));
                for (p, r) in im.pixels.iter().zip(raw) {
                    assert_eq!(*p, *r as f64 / 255.0);
                }
            }
        }
    }

    #[test]
    fn idx_magic_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), &[vec![0u8; 4]], &[1], 2, 2, false);
        // pass the images file as labels: wrong magic
        let err = load_idx(&ip, &ip).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { got, .. } if got == IDX_IMAGE_MAGIC));
        let err = load_idx(&lp, &lp).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { got, .. } if got == IDX_LABEL_MAGIC));
    }

    #[test]
    fn idx_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let three = vec![vec![0u8; 4], vec![0u8; 4], vec![0u8; 4]];
        let (ip, lp) = write_fixture(dir.path(), &three, &[1, 2, 3], 2, 2, false);
        // chop the payload
        let bytes = std::fs::read(&ip).unwrap();
        let cut = dir.path().join("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_idx(&cut, &lp).unwrap_err(),
            DataError::Truncated { .. }
        ));
        // labels file with fewer entries
        let (_, lp2) = write_fixture(dir.path(), &three, &[1, 2], 2, 2, false);
        // rebuild images with 3 entries against 2 labels
        let err = load_idx(&ip, &lp2).unwrap_err();
        assert!(matches!(
            err,
            DataError::CountMismatch {
                images: 3,
                labels: 2
            }
        ));
    }

    #[test]
    fn cifar_record_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = vec![9u8];
        record.extend((0..3072).map(|i| (i % 251) as u8));
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &record).unwrap();
        let ds = load_cifar10(&[path]).unwrap();
        assert_eq!(ds.len(), 1);
        let im = &ds.images[0];
        assert_eq!(im.label, 9);
        assert_eq!((im.h, im.w, im.channels), (32, 32, 3));
        // channel-planar unpacking: red plane first
        for p in 0..1024 {
            assert_eq!(im.pixels[p * 3], ((p % 251) as f64) / 255.0);
            assert_eq!(im.pixels[p * 3 + 1], (((1024 + p) % 251) as f64) / 255.0);
            assert_eq!(im.pixels[p * 3 + 2], (((2048 + p) % 251) as f64) / 255.0);
        }
    }

    #[test]
    fn cifar_rejects_partial_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 3073 + 100]).unwrap();
        assert!(matches!(
            load_cifar10(&[path]).unwrap_err(),
            DataError::BadRecordLength { .. }
        ));
    }

    fn gray(pixels: Vec<f64>, h: usize, w: usize) -> LabeledImage {
        LabeledImage {
            pixels,
            h,
            w,
            channels: 1,
            label: 0,
        }
    }

    #[test]
    fn resize_preserves_constants_and_bounds() {
        let img = gray(vec![0.4; 28 * 28], 28, 28);
        let out = resize_bilinear(&img, 32, 32);
        assert!(out.pixels.iter().all(|&v| (v - 0.4).abs() < 1e-12));

        let mut rng = chacha(8);
        let noisy = gray(
            (0..28 * 28)
                .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
                .collect(),
            28,
            28,
        );
        let lo = noisy.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = noisy.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = resize_bilinear(&noisy, 14, 14);
        for &v in &out.pixels {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    /// Second, independently coded bilinear interpolation used as the
    /// resize oracle (explicit corner-weight formulation).
    fn bilinear_oracle(img: &LabeledImage, oh: usize, ow: usize) -> Vec<f64> {
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                let sy = (((r as f64) + 0.5) / oh as f64 * img.h as f64 - 0.5)
                    .clamp(0.0, img.h as f64 - 1.0);
                let sx = (((c as f64) + 0.5) / ow as f64 * img.w as f64 - 0.5)
                    .clamp(0.0, img.w as f64 - 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(img.h - 1), (x0 + 1).min(img.w - 1));
                let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                let w00 = (1.0 - dy) * (1.0 - dx);
                let w10 = dy * (1.0 - dx);
                let w01 = (1.0 - dy) * dx;
                let w11 = dy * dx;
                out[r * ow + c] = w00 * img.pixel(y0, x0, 0)
                    + w10 * img.pixel(y1, x0, 0)
                    + w01 * img.pixel(y0, x1, 0)
                    + w11 * img.pixel(y1, x1, 0);
            }
        }
        out
    }

    #[test]
    fn resize_matches_independent_oracle_on_checkerboard() {
        let pixels: Vec<f64> = (0..28 * 28)
            .map(|i| {
                let (r, c) = (i / 28, i % 28);
                if (r + c) % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let img = gray(pixels, 28, 28);
        for (oh, ow) in [(32, 32), (14, 14), (24, 24)] {
            let got = resize_bilinear(&img, oh, ow);
            let want = bilinear_oracle(&img, oh, ow);
            for (g, w) in got.pixels.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shift_zero_is_identity_and_shifts_move_pixels() {
        let mut pixels = vec![0.0; 28 * 28];
        pixels[5 * 28 + 10] = 0.8;
        let img = gray(pixels, 28, 28);
        assert_eq!(shift_x(&img, 0).unwrap(), img);
        let s = shift_x(&img, 4).unwrap();
        assert_eq!(s.pixel(5, 14, 0), 0.8);
        assert_eq!(s.pixel(5, 10, 0), 0.0);
    }

    #[test]
    fn shift_roundtrip_on_interior_support() {
        let mut pixels = vec![0.0; 16 * 16];
        for c in 5..10 {
            pixels[7 * 16 + c] = 0.5;
        }
        let img = gray(pixels, 16, 16);
        let back = shift_x(&shift_x(&img, 3).unwrap(), -3).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn shift_preserves_mass_for_eligible_images() {
        let mut pixels = vec![0.0; 32 * 32];
        for c in 12..20 {
            pixels[16 * 32 + c] = 0.3;
        }
        let img = gray(pixels, 32, 32);
        assert!(is_shiftable(&img, 8));
        for off in -8..=8 {
            let s = shift_x(&img, off).unwrap();
            assert_eq!(s.mass(), img.mass(), "offset {off}");
        }
    }

    #[test]
    fn eligibility_rules() {
        let blank = gray(vec![0.0; 32 * 32], 32, 32);
        assert!(is_shiftable(&blank, 8));
        let mut pixels = vec![0.0; 32 * 32];
        pixels[3] = 0.1; // nonzero in column 3

        let edge = gray(pixels, 32, 32);
        assert!(!is_shiftable(&edge, 8));
        let images = vec![blank.clone(), edge.clone()];
        // class 0 contains both; only blank qualifies
        let idx = select_shiftable(&images, 0, 8).unwrap();
        assert_eq!(idx, vec![0]);
        // a class with no eligible members errors
        let err = select_shiftable(&[edge], 0, 8).unwrap_err();
        assert!(err.to_string().contains("class 0"));
    }

    #[test]
    fn shuffled_indices_deterministic() {
        let ds = Dataset {
            images: vec![gray(vec![0.0; 4], 2, 2); 10],
            sha256: String::new(),
        };
        assert_eq!(ds.shuffled_indices(3), ds.shuffled_indices(3));
        assert_ne!(ds.shuffled_indices(3), ds.shuffled_indices(4));
    }
}
