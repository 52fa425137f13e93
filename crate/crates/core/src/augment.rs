//! The view distribution: sampling augmentation parameters, rendering views
//! from them, and the geometry and appearance distances between two views.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterStrengths {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub crop_scale: [f32; 2],
    pub crop_ratio: [f32; 2],
    pub out_size: usize,
    pub flip_prob: f32,
    pub jitter_prob: f32,
    pub jitter_strengths: JitterStrengths,
    pub grayscale_prob: f32,
    pub blur_prob: f32,
    pub blur_sigma_range: [f32; 2],
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            out_size: 32,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strengths: JitterStrengths {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
            },
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: [0.1, 2.0],
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        ensure!(
            lo > 0.0 && lo <= hi && hi <= 1.0,
            "crop_scale must satisfy 0 < lo ≤ hi ≤ 1, got {:?}",
            self.crop_scale
        );
        let [rlo, rhi] = self.crop_ratio;
        ensure!(
            rlo > 0.0 && rlo <= rhi,
            "crop_ratio must satisfy 0 < lo ≤ hi, got {:?}",
            self.crop_ratio
        );
        ensure!(self.out_size > 0, "out_size must be positive");
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            ensure!((0.0..=1.0).contains(&p), "{name} must lie in [0,1], got {p}");
        }
        let s = self.jitter_strengths;
        ensure!(
            s.brightness >= 0.0 && s.contrast >= 0.0 && s.saturation >= 0.0,
            "jitter strengths must be non-negative"
        );
        ensure!(
            (0.0..=0.5).contains(&s.hue),
            "hue strength must lie in [0, 0.5], got {}",
            s.hue
        );
        let [slo, shi] = self.blur_sigma_range;
        ensure!(
            slo > 0.0 && slo <= shi,
            "blur_sigma_range must satisfy 0 < lo ≤ hi, got {:?}",
            self.blur_sigma_range
        );
        Ok(())
    }

    /// A configuration with every appearance operation switched off.
    pub fn geometric_only(&self) -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..self.clone()
        }
    }
}

/// Crop rectangle in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    #[serde(rename = "crop_x")]
    pub x: u32,
    #[serde(rename = "crop_y")]
    pub y: u32,
    #[serde(rename = "crop_w")]
    pub w: u32,
    #[serde(rename = "crop_h")]
    pub h: u32,
}

impl CropBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0
            && self.h > 0
            && (self.x + self.w) as usize <= width
            && (self.y + self.h) as usize <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

pub const DEFAULT_JITTER_ORDER: [JitterOp; 4] = [
    JitterOp::Brightness,
    JitterOp::Contrast,
    JitterOp::Saturation,
    JitterOp::Hue,
];

/// Colour parameters of a view: jitter factors, their order, grayscale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub jitter_applied: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub apply_order: [JitterOp; 4],
    pub grayscale: bool,
}

impl Appearance {
    pub fn identity() -> Self {
        Self {
            jitter_applied: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            apply_order: DEFAULT_JITTER_ORDER,
            grayscale: false,
        }
    }
}

/// Everything needed to replay one view, and the log row describing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub source_h: u32,
    pub source_w: u32,
    #[serde(flatten)]
    pub crop: CropBox,
    pub flipped: bool,
    pub jitter_applied: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub apply_order: [JitterOp; 4],
    pub grayscale: bool,
    pub blur: bool,
    pub blur_sigma: f32,
}

impl ViewParams {
    /// Full-image crop with every other operation at identity.
    pub fn identity(height: usize, width: usize) -> Self {
        Self::from_parts(
            height,
            width,
            CropBox::new(0, 0, width as u32, height as u32),
            false,
            Appearance::identity(),
            false,
            0.0,
        )
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        crop: CropBox,
        flipped: bool,
        a: Appearance,
        blur: bool,
        blur_sigma: f32,
    ) -> Self {
        Self {
            source_h: height as u32,
            source_w: width as u32,
            crop,
            flipped,
            jitter_applied: a.jitter_applied,
            brightness: a.brightness,
            contrast: a.contrast,
            saturation: a.saturation,
            hue: a.hue,
            apply_order: a.apply_order,
            grayscale: a.grayscale,
            blur,
            blur_sigma,
        }
    }

    pub fn appearance(&self) -> Appearance {
        Appearance {
            jitter_applied: self.jitter_applied,
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
            hue: self.hue,
            apply_order: self.apply_order,
            grayscale: self.grayscale,
        }
    }

    pub fn with_appearance(mut self, a: &Appearance) -> Self {
        self.jitter_applied = a.jitter_applied;
        self.brightness = a.brightness;
        self.contrast = a.contrast;
        self.saturation = a.saturation;
        self.hue = a.hue;
        self.apply_order = a.apply_order;
        self.grayscale = a.grayscale;
        self
    }

    /// Crop and flip only.
    pub fn geometric(&self) -> Self {
        let mut p = self.with_appearance(&Appearance::identity());
        p.blur = false;
        p.blur_sigma = 0.0;
        p
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// Random-resized-crop box: area fraction uniform in `crop_scale`, aspect
/// ratio log-uniform in `crop_ratio`, ten placement attempts, then a centre
/// crop clipped to the ratio range.
pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, cfg: &AugConfig, height: usize, width: usize) -> CropBox {
    let area = (height * width) as f32;
    let (log_lo, log_hi) = (cfg.crop_ratio[0].ln(), cfg.crop_ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.crop_scale[0], cfg.crop_scale[1]);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return CropBox::new(x as u32, y as u32, w as u32, h as u32);
        }
    }
    let in_ratio = width as f32 / height as f32;
    let (w, h) = if in_ratio < cfg.crop_ratio[0] {
        (width, ((width as f32 / cfg.crop_ratio[0]).round() as usize).clamp(1, height))
    } else if in_ratio > cfg.crop_ratio[1] {
        (((height as f32 * cfg.crop_ratio[1]).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropBox::new(((width - w) / 2) as u32, ((height - h) / 2) as u32, w as u32, h as u32)
}

/// Jitter factors (each with probability `jitter_prob`), a random sub-op
/// order, and the grayscale flag.
pub fn sample_appearance<R: Rng + ?Sized>(rng: &mut R, cfg: &AugConfig) -> Appearance {
    let mut a = Appearance::identity();
    if rng.random_bool(cfg.jitter_prob as f64) {
        let s = cfg.jitter_strengths;
        a.jitter_applied = true;
        a.brightness = uniform(rng, (1.0 - s.brightness).max(0.0), 1.0 + s.brightness);
        a.contrast = uniform(rng, (1.0 - s.contrast).max(0.0), 1.0 + s.contrast);
        a.saturation = uniform(rng, (1.0 - s.saturation).max(0.0), 1.0 + s.saturation);
        a.hue = uniform(rng, -s.hue, s.hue);
        a.apply_order.shuffle(rng);
    }
    a.grayscale = rng.random_bool(cfg.grayscale_prob as f64);
    a
}

pub fn sample_view_params<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugConfig,
    source_dims: (usize, usize),
) -> ViewParams {
    let (height, width) = source_dims;
    let crop = sample_crop(rng, cfg, height, width);
    let flipped = rng.random_bool(cfg.flip_prob as f64);
    let appearance = sample_appearance(rng, cfg);
    let blur = rng.random_bool(cfg.blur_prob as f64);
    let sigma = if blur {
        uniform(rng, cfg.blur_sigma_range[0], cfg.blur_sigma_range[1])
    } else {
        0.0
    };
    ViewParams::from_parts(height, width, crop, flipped, appearance, blur, sigma)
}

// ------------------------------------------------------------------ rendering

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[inline]
fn luma(p: [f32; 3]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

fn resized_crop(img: &Image, crop: CropBox, out: usize) -> Image {
    let (x0, y0) = (crop.x as f32, crop.y as f32);
    let (cw, ch) = (crop.w as f32, crop.h as f32);
    let (xmax, ymax) = ((crop.x + crop.w - 1) as f32, (crop.y + crop.h - 1) as f32);
    let sx = cw / out as f32;
    let sy = ch / out as f32;
    let mut dst = Image::filled(out, out, [0.0; 3]);
    for oy in 0..out {
        let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(y0, ymax);
        let ylo = fy.floor();
        let ty = fy - ylo;
        let (ylo, yhi) = (ylo as usize, (ylo as usize + 1).min(ymax as usize));
        for ox in 0..out {
            let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(x0, xmax);
            let xlo = fx.floor();
            let tx = fx - xlo;
            let (xlo, xhi) = (xlo as usize, (xlo as usize + 1).min(xmax as usize));
            let (a, b) = (img.pixel(ylo, xlo), img.pixel(ylo, xhi));
            let (c, d) = (img.pixel(yhi, xlo), img.pixel(yhi, xhi));
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                let top = a[k] * (1.0 - tx) + b[k] * tx;
                let bot = c[k] * (1.0 - tx) + d[k] * tx;
                rgb[k] = top * (1.0 - ty) + bot * ty;
            }
            dst.set_pixel(oy, ox, rgb);
        }
    }
    dst
}

fn hflip(img: &mut Image) {
    let w = img.width();
    for y in 0..img.height() {
        for x in 0..w / 2 {
            let (l, r) = (img.pixel(y, x), img.pixel(y, w - 1 - x));
            img.set_pixel(y, x, r);
            img.set_pixel(y, w - 1 - x, l);
        }
    }
}

fn clamp01(img: &mut Image) {
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn rgb_to_hsv(p: [f32; 3]) -> [f32; 3] {
    let mx = p[0].max(p[1]).max(p[2]);
    let mn = p[0].min(p[1]).min(p[2]);
    let d = mx - mn;
    let h = if d == 0.0 {
        0.0
    } else if mx == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0) / 6.0
    } else if mx == p[1] {
        ((p[2] - p[0]) / d + 2.0) / 6.0
    } else {
        ((p[0] - p[1]) / d + 4.0) / 6.0
    };
    let s = if mx == 0.0 { 0.0 } else { d / mx };
    [h, s, mx]
}

fn hsv_to_rgb(q: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = q;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, qq, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [qq, v, p],
        2 => [p, v, t],
        3 => [p, qq, v],
        4 => [t, p, v],
        _ => [v, p, qq],
    }
}

fn apply_jitter_op(img: &mut Image, op: JitterOp, p: &ViewParams) {
    match op {
        JitterOp::Brightness => {
            let f = p.brightness;
            img.data_mut().iter_mut().for_each(|v| *v *= f);
        }
        JitterOp::Contrast => {
            let f = p.contrast;
            let n = (img.height() * img.width()) as f32;
            let mean = img.data().chunks(3).map(|c| luma([c[0], c[1], c[2]])).sum::<f32>() / n;
            img.data_mut()
                .iter_mut()
                .for_each(|v| *v = f * *v + (1.0 - f) * mean);
        }
        JitterOp::Saturation => {
            let f = p.saturation;
            for c in img.data_mut().chunks_mut(3) {
                let g = luma([c[0], c[1], c[2]]);
                c.iter_mut().for_each(|v| *v = f * *v + (1.0 - f) * g);
            }
        }
        JitterOp::Hue => {
            let shift = p.hue;
            for c in img.data_mut().chunks_mut(3) {
                let mut hsv = rgb_to_hsv([c[0], c[1], c[2]]);
                hsv[0] = (hsv[0] + shift).rem_euclid(1.0);
                c.copy_from_slice(&hsv_to_rgb(hsv));
            }
        }
    }
    clamp01(img);
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let reflect = |i: isize, n: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (j, k) in kernel.iter().enumerate() {
                let p = img.pixel(y as usize, reflect(x + j as isize - radius, w));
                (0..3).for_each(|c| acc[c] += k * p[c]);
            }
            tmp.set_pixel(y as usize, x as usize, acc);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (j, k) in kernel.iter().enumerate() {
                let p = tmp.pixel(reflect(y + j as isize - radius, h), x as usize);
                (0..3).for_each(|c| acc[c] += k * p[c]);
            }
            img.set_pixel(y as usize, x as usize, acc);
        }
    }
}

/// Render a view: crop → bilinear resize → flip → jitter in `apply_order` →
/// grayscale → Gaussian blur → clamp to [0,1].
pub fn apply_view(image: &Image, p: &ViewParams, out_size: usize) -> Result<Image> {
    ensure!(
        p.crop.fits(image.height(), image.width()),
        "crop {:?} does not fit a {}×{} image",
        p.crop,
        image.height(),
        image.width()
    );
    ensure!(out_size > 0, "out_size must be positive");
    let mut img = resized_crop(image, p.crop, out_size);
    if p.flipped {
        hflip(&mut img);
    }
    if p.jitter_applied {
        for op in p.apply_order {
            apply_jitter_op(&mut img, op, p);
        }
    }
    if p.grayscale {
        for c in img.data_mut().chunks_mut(3) {
            let g = luma([c[0], c[1], c[2]]);
            c.fill(g);
        }
    }
    if p.blur && p.blur_sigma > 0.0 {
        gaussian_blur(&mut img, p.blur_sigma);
    }
    clamp01(&mut img);
    Ok(img)
}

// ------------------------------------------------------------------ pair metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub iou: f64,
    pub rel_center_distance: f64,
    pub color_distance: f64,
}

/// Intersection over union of two crop boxes.
pub fn iou(a: &CropBox, b: &CropBox) -> Result<f64> {
    ensure!(
        a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0,
        "iou of a zero-area crop ({a:?}, {b:?})"
    );
    let ix = (a.x + a.w).min(b.x + b.w) as i64 - a.x.max(b.x) as i64;
    let iy = (a.y + a.h).min(b.y + b.h) as i64 - a.y.max(b.y) as i64;
    let inter = (ix.max(0) * iy.max(0)) as f64;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Distance between crop centres divided by the source diagonal.
pub fn rel_center_distance(a: &CropBox, b: &CropBox, source_dims: (usize, usize)) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let diag = ((source_dims.0 * source_dims.0 + source_dims.1 * source_dims.1) as f64).sqrt();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() / diag
}

/// Euclidean distance between the (brightness, contrast, saturation, hue)
/// factors of two views.
pub fn color_distance(a: &ViewParams, b: &ViewParams) -> f64 {
    [
        a.brightness - b.brightness,
        a.contrast - b.contrast,
        a.saturation - b.saturation,
        a.hue - b.hue,
    ]
    .iter()
    .map(|d| (*d as f64).powi(2))
    .sum::<f64>()
    .sqrt()
}

pub fn pair_geometry(a: &ViewParams, b: &ViewParams) -> Result<PairGeometry> {
    Ok(PairGeometry {
        iou: iou(&a.crop, &b.crop)?,
        rel_center_distance: rel_center_distance(
            &a.crop,
            &b.crop,
            (a.source_h as usize, a.source_w as usize),
        ),
        color_distance: color_distance(a, b),
    })
}
