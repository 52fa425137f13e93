//! Image datasets: CIFAR-10 binary ingest, a procedural stand-in, and
//! seeded drop-last minibatching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure, HvpError, Result};
use crate::rng::{self, tag};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Dense `height × width × 3` raster, channel-interleaved, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && data.len() == height * width * 3,
            "image {height}×{width}×3 cannot hold {} values",
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Append this image in planar `[3,H,W]` order.
    pub fn write_chw(&self, out: &mut Vec<f32>) {
        for c in 0..3 {
            out.extend(self.data.iter().skip(c).step_by(3));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        ensure!(
            images.len() == labels.len(),
            "{} images but {} labels",
            images.len(),
            labels.len()
        );
        ensure!(
            labels.iter().all(|&l| (l as usize) < num_classes),
            "label outside [0, {num_classes})"
        );
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` items (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn source_dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height(), i.width()))
    }
}

/// Parse CIFAR-10 binary records: one label byte, then 1024 R, 1024 G and
/// 1024 B bytes in row-major order.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(HvpError::format(format!(
            "CIFAR-10 binary length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(HvpError::format(format!(
                "record {r} has label byte {} (expected 0..=9)",
                rec[0]
            )));
        }
        labels.push(rec[0]);
        let px = &rec[1..];
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                data.push(px[c * plane + i] as f32 / 255.0);
            }
        }
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?);
    }
    Dataset::new(images, labels, CIFAR_CLASSES)
}

pub fn load_cifar10_bin(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| HvpError::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Encode into the CIFAR-10 binary layout. Pixels are rounded to 8 bits.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        ensure!(
            img.height() == CIFAR_SIDE && img.width() == CIFAR_SIDE,
            "CIFAR-10 records are 32×32, got {}×{}",
            img.height(),
            img.width()
        );
        ensure!((label as usize) < CIFAR_CLASSES, "label {label} exceeds 9");
        out.push(label);
        for c in 0..3 {
            for i in 0..plane {
                out.push((img.data()[i * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_cifar10_bin(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cifar10(ds)?).map_err(|e| HvpError::io(path, e))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Signed coverage of a class shape at offset (dx, dy) from its centre.
fn inside_shape(kind: usize, dx: f32, dy: f32, r: f32) -> bool {
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dy <= 0.7 * r && dy >= -r + 2.0 * dx.abs(),
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
        _ => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
    }
}

/// Procedural 32×32 labelled images. The class fixes the shape, a base hue
/// and an anchor position; size, offsets, shading, background and a small
/// distractor patch are jittered per image. Pixels are quantised to 8 bits
/// so the set round-trips through the CIFAR-10 layout.
pub fn synth_dataset(seed: u64, n: usize, num_classes: usize) -> Result<Dataset> {
    ensure!(n > 0, "synthetic dataset size must be positive");
    ensure!(num_classes >= 2, "need at least two classes, got {num_classes}");
    ensure!(num_classes <= 256, "labels are bytes; at most 256 classes");
    let side = CIFAR_SIDE;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::stream(seed, &[tag::SYNTH, i as u64]);
        let class = rng.random_range(0..num_classes);
        let kind = class % 5;
        let frac = class as f32 / num_classes as f32;
        let hue = frac + rng.random_range(-0.03..0.03);
        let angle = std::f32::consts::TAU * frac;
        let cx = 15.5 + 6.0 * angle.cos() + rng.random_range(-3.0..3.0);
        let cy = 15.5 + 6.0 * angle.sin() + rng.random_range(-3.0..3.0);
        let radius = rng.random_range(6.0..10.0);
        let fg_sat = rng.random_range(0.6..1.0);
        let fg_val = rng.random_range(0.7..1.0);

        let bg_hue: f32 = rng.random();
        let bg_a = hsv_to_rgb(bg_hue, rng.random_range(0.1..0.5), rng.random_range(0.1..0.45));
        let bg_b = hsv_to_rgb(bg_hue + 0.15, rng.random_range(0.1..0.5), rng.random_range(0.1..0.45));
        let grad_angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (ga, gb) = (grad_angle.cos(), grad_angle.sin());

        let dist_size = rng.random_range(3..6) as f32;
        let dist_x = rng.random_range(0.0..side as f32 - dist_size);
        let dist_y = rng.random_range(0.0..side as f32 - dist_size);
        let dist_rgb = hsv_to_rgb(rng.random(), rng.random_range(0.3..1.0), rng.random_range(0.4..1.0));

        let mut img = Image::filled(side, side, [0.0; 3]);
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let t = (((fx - 16.0) * ga + (fy - 16.0) * gb) / 32.0 + 0.5).clamp(0.0, 1.0);
                let mut rgb = [0.0f32; 3];
                for c in 0..3 {
                    rgb[c] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
                }
                if fx >= dist_x && fx < dist_x + dist_size && fy >= dist_y && fy < dist_y + dist_size {
                    rgb = dist_rgb;
                }
                let (dx, dy) = (fx - cx, fy - cy);
                if inside_shape(kind, dx, dy, radius) {
                    // radial shading keeps the interior textured
                    let shade = 1.0 - 0.35 * ((dx * dx + dy * dy).sqrt() / radius).min(1.0);
                    rgb = hsv_to_rgb(hue, fg_sat, fg_val * shade);
                }
                for v in &mut rgb {
                    let noisy = *v + rng.random_range(-0.03..0.03);
                    *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
                img.set_pixel(y, x, rgb);
            }
        }
        images.push(img);
        labels.push(class as u8);
    }
    Dataset::new(images, labels, num_classes)
}

/// Seeded shuffling plan for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub order: Vec<usize>,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        ensure!(batch_size > 0, "batch size must be positive");
        ensure!(
            batch_size <= len,
            "batch size {batch_size} exceeds dataset length {len}"
        );
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::PERMUTATION, epoch]));
        Ok(Self {
            epoch,
            seed,
            batch_size,
            order,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }

    /// Full batches only; the remainder of the permutation is dropped.
    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order
            .chunks_exact(self.batch_size)
    }
}

/// Index batches for one epoch, as owned vectors.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let plan = BatchPlan::new(len, batch_size, seed, epoch)?;
    Ok(plan.batches().map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(label: u8, px: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(px, CIFAR_RECORD - 1));
        r
    }

    #[test]
    fn parses_records() {
        let mut bytes = record(3, 255);
        bytes.extend(record(0, 0));
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 0]);
        assert!(ds.images[0].data().iter().all(|&v| v == 1.0));
        assert!(ds.images[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_planes_map_to_rgb() {
        let mut bytes = vec![1u8];
        bytes.extend(std::iter::repeat_n(10u8, 1024));
        bytes.extend(std::iter::repeat_n(20u8, 1024));
        bytes.extend(std::iter::repeat_n(30u8, 1024));
        let ds = parse_cifar10(&bytes).unwrap();
        let p = ds.images[0].pixel(5, 7);
        assert_eq!(p, [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(parse_cifar10(&record(10, 0)), Err(HvpError::Format(_))));
        assert!(matches!(parse_cifar10(&[0u8; 100]), Err(HvpError::Format(_))));
        assert!(matches!(parse_cifar10(&[]), Err(HvpError::Format(_))));
    }

    #[test]
    fn synth_is_deterministic_and_seed_dependent() {
        let a = synth_dataset(1, 12, 4).unwrap();
        let b = synth_dataset(1, 12, 4).unwrap();
        let c = synth_dataset(2, 12, 4).unwrap();
        assert_eq!(a, b);
        let diff = a
            .images
            .iter()
            .zip(&c.images)
            .flat_map(|(x, y)| x.data().iter().zip(y.data()))
            .filter(|(p, q)| p != q)
            .count();
        assert!(diff > 0);
        assert!(a.images.iter().flat_map(|i| i.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synth_two_classes() {
        let ds = synth_dataset(3, 10, 2).unwrap();
        assert!(ds.labels.iter().all(|&l| l < 2));
        assert!(synth_dataset(3, 0, 2).is_err());
        assert!(synth_dataset(3, 5, 1).is_err());
    }

    #[test]
    fn synth_round_trips_through_cifar_layout() {
        let ds = synth_dataset(5, 6, 10).unwrap();
        let back = parse_cifar10(&encode_cifar10(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn batch_examples() {
        let b = batches(10, 3, 7, 0).unwrap();
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        assert_eq!(all.len(), 9);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
        assert_eq!(b, batches(10, 3, 7, 0).unwrap());
        assert_ne!(
            BatchPlan::new(10, 3, 7, 0).unwrap().order,
            BatchPlan::new(10, 3, 7, 1).unwrap().order
        );
        assert!(batches(2, 3, 7, 0).is_err());
    }

    proptest! {
        #[test]
        fn epoch_batches_cover_plan_prefix(len in 1usize..200, m in 1usize..50, seed: u64, epoch in 0u64..5) {
            prop_assume!(m <= len);
            let plan = BatchPlan::new(len, m, seed, epoch).unwrap();
            let mut sorted = plan.order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..len).collect::<Vec<_>>());
            let flat: Vec<usize> = plan.batches().flatten().copied().collect();
            prop_assert_eq!(&flat[..], &plan.order[..(len / m) * m]);
        }
    }
}
