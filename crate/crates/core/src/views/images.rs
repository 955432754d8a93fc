//! RGB image batches, the CIFAR-10 binary reader and the RGB / L / ab split.

use std::fs;
use std::path::Path;

use super::color::rgb_to_lab;
use super::dataset::{MultiViewDataset, ViewKind, ViewSpec};
use crate::error::{Error, Result};

/// Images stored channel-planar (`C x H x W` per image) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub labels: Option<Vec<u32>>,
}

impl ImageBatch {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let sz = self.channels * self.pixels();
        &self.data[i * sz..(i + 1) * sz]
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parse CIFAR-10 binary records: one label byte then 1024 bytes each of
/// the R, G and B planes, row-major.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<ImageBatch> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            offset,
            msg: format!(
                "file length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as u32);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(ImageBatch {
        count,
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        data,
        labels: Some(labels),
    })
}

pub fn load_cifar_binary(path: &Path) -> Result<ImageBatch> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes)
}

/// L is divided by this before it enters the L view.
pub const L_SCALE: f64 = 100.0;
/// a and b are divided by this before they enter the ab view.
pub const AB_SCALE: f64 = 128.0;

/// Split images into RGB, luminance and ab-chroma views. `normalize`
/// scales L by 1/100 and ab by 1/128; RGB is kept as is in `[0, 1]`.
pub fn split_views(images: &ImageBatch, normalize: bool) -> Result<MultiViewDataset> {
    if images.channels != 3 {
        return Err(Error::invalid(format!(
            "split_views needs 3 channels, got {}",
            images.channels
        )));
    }
    let px = images.pixels();
    let mut rgb = Vec::with_capacity(images.count * 3 * px);
    let mut l = Vec::with_capacity(images.count * px);
    let mut ab = Vec::with_capacity(images.count * 2 * px);
    let (ls, abs) = if normalize {
        (L_SCALE, AB_SCALE)
    } else {
        (1.0, 1.0)
    };
    for i in 0..images.count {
        let img = images.image(i);
        rgb.extend_from_slice(img);
        let mut a_plane = Vec::with_capacity(px);
        let mut b_plane = Vec::with_capacity(px);
        for p in 0..px {
            let lab = rgb_to_lab(img[p], img[px + p], img[2 * px + p])?;
            l.push(lab[0] / ls);
            a_plane.push(lab[1] / abs);
            b_plane.push(lab[2] / abs);
        }
        ab.extend(a_plane);
        ab.extend(b_plane);
    }
    let specs = vec![
        ViewSpec {
            kind: ViewKind::Rgb,
            dim: 3 * px,
            range: (0.0, 1.0),
        },
        ViewSpec {
            kind: ViewKind::Luminance,
            dim: px,
            range: (0.0, 100.0 / ls),
        },
        ViewSpec {
            kind: ViewKind::Ab,
            dim: 2 * px,
            range: (-128.0 / abs, 128.0 / abs),
        },
    ];
    MultiViewDataset::new(specs, vec![rgb, l, ab], images.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, CIFAR_RECORD - 1));
        r
    }

    #[test]
    fn two_record_file() {
        let mut bytes = record(3, 0);
        bytes.extend(record(7, 255));
        let b = parse_cifar_binary(&bytes).unwrap();
        assert_eq!(b.count, 2);
        assert_eq!(b.labels.as_deref(), Some(&[3, 7][..]));
        assert_eq!(b.image(1)[0], 1.0);
        assert_eq!(b.image(0)[3071], 0.0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record(1, 10);
        bytes.extend(&record(2, 10)[..100]);
        match parse_cifar_binary(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    fn batch(count: usize, side: usize, f: impl Fn(usize) -> f64) -> ImageBatch {
        ImageBatch {
            count,
            channels: 3,
            height: side,
            width: side,
            data: (0..count * 3 * side * side).map(f).collect(),
            labels: None,
        }
    }

    #[test]
    fn view_dims_for_4x4() {
        let ds = split_views(&batch(2, 4, |i| (i % 7) as f64 / 7.0), true).unwrap();
        let dims: Vec<usize> = ds.specs().iter().map(|s| s.dim).collect();
        assert_eq!(dims, vec![48, 16, 32]);
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn white_images_have_l_100() {
        let ds = split_views(&batch(2, 4, |_| 1.0), false).unwrap();
        assert!(ds.view(1).iter().all(|v| (v - 100.0).abs() < 1e-3));
    }

    #[test]
    fn sample_rows_align_across_views() {
        let imgs = batch(3, 2, |i| ((i * 37) % 101) as f64 / 100.0);
        let ds = split_views(&imgs, false).unwrap();
        for i in 0..3 {
            assert_eq!(ds.sample(0, i), imgs.image(i));
            let img = imgs.image(i);
            let lab = rgb_to_lab(img[0], img[4], img[8]).unwrap();
            assert_eq!(ds.sample(1, i)[0], lab[0]);
            assert_eq!(ds.sample(2, i)[0], lab[1]);
            assert_eq!(ds.sample(2, i)[4], lab[2]);
        }
    }

    #[test]
    fn grayscale_rejected() {
        let mut b = batch(1, 2, |_| 0.5);
        b.channels = 1;
        b.data.truncate(4);
        assert!(split_views(&b, true).is_err());
    }

    /// Runs only when `CIFAR10_BATCH` points at a real `data_batch_*.bin`.
    #[test]
    fn real_batch_first_record() {
        let Ok(path) = std::env::var("CIFAR10_BATCH") else {
            return;
        };
        let bytes = fs::read(&path).unwrap();
        let label = bytes[0];
        assert!(label <= 9);
        let b = parse_cifar_binary(&bytes).unwrap();
        assert_eq!(b.labels.as_ref().unwrap()[0], label as u32);
        let first = b.image(0);
        let (lo, hi) = first
            .iter()
            .fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(first[0], bytes[1] as f64 / 255.0);
    }
}
