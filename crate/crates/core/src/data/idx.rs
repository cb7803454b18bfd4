//! IDX (MNIST-family) file reader.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::models::{Samples, Targets};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an images file: `(count, rows, cols, pixels)`.
pub fn read_images<R: Read>(mut r: R) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(&mut r)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32_be(&mut r)? as usize;
    let rows = read_u32_be(&mut r)? as usize;
    let cols = read_u32_be(&mut r)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels)?;
    Ok((count, rows, cols, pixels))
}

pub fn read_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let magic = read_u32_be(&mut r)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let count = read_u32_be(&mut r)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)?;
    Ok(labels)
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major into one feature row.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Samples> {
    let (count, rows, cols, pixels) = read_images(BufReader::new(File::open(images_path)?))?;
    let labels = read_labels(BufReader::new(File::open(labels_path)?))?;
    from_parts(count, rows, cols, &pixels, &labels)
}

fn from_parts(count: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> Result<Samples> {
    if labels.len() != count {
        return Err(Error::Consistency(format!("{count} images but {} labels", labels.len())));
    }
    let x = Array2::from_shape_vec((count, rows * cols), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("pixel count matches header");
    Samples::new(x, Targets::Class(labels.iter().map(|&l| l as usize).collect()))
}

/// Standard file names inside a Fashion-MNIST directory.
pub fn fashion_mnist_paths(dir: &Path, train: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn images_bytes(magic: u32, count: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, count, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn labels_bytes(magic: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&magic.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn loads_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &images_bytes(IMAGES_MAGIC, 2, &[0, 255, 51, 102, 1, 2, 3, 4]));
        let lab = write(dir.path(), "l", &labels_bytes(LABELS_MAGIC, &[3, 9]));
        let s = load_idx(&img, &lab).unwrap();
        assert_eq!(s.x.dim(), (2, 4));
        assert_eq!(s.x[[0, 1]], 1.0);
        assert_eq!(s.x[[0, 2]], 0.2);
        assert_eq!(s.y, Targets::Class(vec![3, 9]));
    }

    #[test]
    fn zero_magic_is_format_error() {
        assert!(matches!(read_images(images_bytes(0, 1, &[0; 4]).as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn swapped_magic_is_format_error() {
        assert!(matches!(read_labels(labels_bytes(IMAGES_MAGIC, &[1]).as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_images_is_io_error() {
        assert!(matches!(read_images(images_bytes(IMAGES_MAGIC, 2, &[0; 5]).as_slice()), Err(Error::Io(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &images_bytes(IMAGES_MAGIC, 2, &[0; 8]));
        let lab = write(dir.path(), "l", &labels_bytes(LABELS_MAGIC, &[1, 2, 3]));
        assert!(matches!(load_idx(&img, &lab), Err(Error::Consistency(_))));
    }
}
