//! MNIST-style IDX files: a big-endian `u32` magic (2051 images, 2049
//! labels), `u32` count, `u32` rows and cols for images, then unsigned bytes.

use std::fs;
use std::path::Path;

use super::{DomainDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// `N×3×rows×cols`, pixels mapped by `x / 127.5 - 1`, gray replicated.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let plane = self.rows * self.cols;
        let mut data = Vec::with_capacity(self.count * 3 * plane);
        for img in self.pixels.chunks(plane) {
            for _ in 0..3 {
                data.extend(img.iter().map(|&b| b as f64 / 127.5 - 1.0));
            }
        }
        Tensor::new(&[self.count, 3, self.rows, self.cols], data)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::BadMagic {
            expected: want.to_string(),
            found: magic.to_string(),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after IDX payload",
            bytes.len() - expected
        )));
    }
    Ok(())
}

pub fn decode_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Malformed(format!("image dimensions {rows}×{cols}")));
    }
    check_len(bytes, 16 + count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + count)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Result<Vec<u8>> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::shape(
            "idx",
            format!(
                "{} pixels for {}×{}×{}",
                images.pixels.len(),
                images.count,
                images.rows,
                images.cols
            ),
        ));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    decode_images(&read(path.as_ref())?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    decode_labels(&read(path.as_ref())?)
}

pub fn write_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_images(images)?).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

/// Reads an image file straight to a `[-1, 1]` tensor.
pub fn parse_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    read_images(path)?.to_tensor()
}

/// Bilinear resampling (pixel-center aligned) of `N×C×H×W` to a square side.
pub fn resize(t: &Tensor, size: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("resize", format!("{s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if h == size && w == size {
        return Ok(t.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(size, h), axis(size, w));
    let mut out = Vec::with_capacity(planes * size * size);
    for p in t.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[s[0], s[1], size, size], out)
}

/// Builds a domain from an image/label file pair, resampled to `size`.
pub fn load_idx_domain(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    size: usize,
    domain: usize,
) -> Result<DomainDataset> {
    let raw = read_images(&images)?;
    let lab = read_labels(&labels)?;
    if raw.count != lab.len() {
        return Err(Error::CountMismatch {
            images: raw.count,
            labels: lab.len(),
        });
    }
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::LabelOutOfRange {
            label: l,
            classes: NUM_CLASSES,
        });
    }
    let tensor = resize(&raw.to_tensor()?, size)?;
    let digest = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(encode_images(&raw)?);
        h.update(encode_labels(&lab));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    DomainDataset::new(
        domain,
        tensor,
        labels,
        format!("idx({}, sha256={digest})", images.as_ref().display()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 3,
            cols: 2,
            pixels: vec![0, 255, 128, 7, 9, 1, 2, 3, 4, 5, 6, 250],
        }
    }

    #[test]
    fn round_trip_and_mapping() {
        let bytes = encode_images(&sample()).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let back = decode_images(&bytes).unwrap();
        assert_eq!(back, sample());
        let t = back.to_tensor().unwrap();
        assert_eq!(t.shape(), &[2, 3, 3, 2]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[6], -1.0);
    }

    #[test]
    fn truncation_reports_lengths() {
        let bytes = encode_images(&sample()).unwrap();
        match decode_images(&bytes[..bytes.len() - 1]) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (28, 27));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn magic_numbers_are_not_interchangeable() {
        let labels = encode_labels(&[1, 2, 3]);
        assert_eq!(&labels[..4], &[0, 0, 8, 1]);
        assert!(matches!(decode_images(&labels), Err(Error::BadMagic { .. })));
        let images = encode_images(&sample()).unwrap();
        assert!(matches!(decode_labels(&images), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn resize_keeps_constants() {
        let t = Tensor::full(&[1, 3, 28, 28], 0.25);
        let r = resize(&t, 16).unwrap();
        assert_eq!(r.shape(), &[1, 3, 16, 16]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = (dir.path().join("i"), dir.path().join("l"));
        write_images(&pi, &sample()).unwrap();
        write_labels(&pl, &[1, 2, 3]).unwrap();
        assert!(matches!(
            load_idx_domain(&pi, &pl, 16, 0),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }
}
