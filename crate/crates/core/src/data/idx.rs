//! IDX image/label files (big-endian headers, unsigned byte payload).

use std::path::Path;

use super::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Flattens images to vectors, optionally block-averages `factor x factor`
/// tiles, and maps pixel values `p` to `p / 128 - 1`.
pub fn parse_idx_images(images: &[u8], labels: &[u8], factor: usize) -> Result<TabularDataset> {
    if be_u32(images, 0)? != IMAGE_MAGIC {
        return Err(Error::Format("image file magic is not 0x00000803".into()));
    }
    if be_u32(labels, 0)? != LABEL_MAGIC {
        return Err(Error::Format("label file magic is not 0x00000801".into()));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    let factor = factor.max(1);
    if rows % factor != 0 || cols % factor != 0 {
        return Err(Error::Domain(format!(
            "downscale factor {factor} does not divide {rows}x{cols}"
        )));
    }
    let px = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(n))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let body = images
        .get(16..)
        .filter(|b| b.len() == px)
        .ok_or_else(|| Error::Format(format!("image payload should hold {px} bytes")))?;
    let lab = labels
        .get(8..)
        .filter(|b| b.len() == n)
        .ok_or_else(|| Error::Format(format!("label payload should hold {n} bytes")))?;
    let (out_r, out_c) = (rows / factor, cols / factor);
    let mut values = Vec::with_capacity(n * out_r * out_c);
    let area = (factor * factor) as f64;
    for img in body.chunks_exact(rows * cols) {
        for br in 0..out_r {
            for bc in 0..out_c {
                let mut acc = 0.0;
                for r in 0..factor {
                    for c in 0..factor {
                        acc += img[(br * factor + r) * cols + bc * factor + c] as f64;
                    }
                }
                values.push(acc / area / 128.0 - 1.0);
            }
        }
    }
    let mut distinct: Vec<u8> = lab.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let classes: Vec<String> = distinct.iter().map(|d| d.to_string()).collect();
    let label_idx = lab
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    let names = (0..out_r * out_c).map(|i| format!("px{i}")).collect();
    TabularDataset::new(Matrix::from_vec(n, out_r * out_c, values)?, label_idx, classes, names)
}

pub fn load_idx_images(images: impl AsRef<Path>, labels: impl AsRef<Path>, factor: usize) -> Result<TabularDataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let img = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lab = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx_images(&img, &lab, factor)
}

#[cfg(test)]
pub(crate) fn encode(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for i in images {
        img.extend_from_slice(i);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_values() {
        let (img, lab) = encode(&[vec![0; 4], vec![255, 0, 128, 64]], 2, 2, &[3, 7]);
        let d = parse_idx_images(&img, &lab, 1).unwrap();
        assert!(d.features.row(0).iter().all(|&v| v == -1.0));
        assert_eq!(d.features.row(1)[0], 0.9921875);
        assert_eq!(d.features.row(1)[2], 0.0);
        assert_eq!(d.classes, vec!["3", "7"]);
    }

    #[test]
    fn downscale_preserves_mean() {
        let pix: Vec<u8> = (0..28 * 28).map(|i| ((i * 37) % 256) as u8).collect();
        let (img, lab) = encode(&[pix], 28, 28, &[1]);
        let full = parse_idx_images(&img, &lab, 1).unwrap();
        let small = parse_idx_images(&img, &lab, 4).unwrap();
        assert_eq!(small.dim(), 49);
        let m = |d: &TabularDataset| d.features.row(0).iter().sum::<f64>() / d.dim() as f64;
        assert!((m(&full) - m(&small)).abs() < 1e-12);
        assert!(parse_idx_images(&img, &lab, 5).is_err());
    }

    #[test]
    fn header_errors() {
        let (img, lab) = encode(&[vec![0; 4]], 2, 2, &[1, 2]);
        assert!(matches!(parse_idx_images(&img, &lab, 1), Err(Error::Data(_))));
        let (mut img, lab) = encode(&[vec![0; 4]], 2, 2, &[1]);
        img[3] = 0x01;
        assert!(matches!(parse_idx_images(&img, &lab, 1), Err(Error::Format(_))));
        assert!(parse_idx_images(&img[..5], &lab, 1).is_err());
    }
}
