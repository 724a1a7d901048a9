//! View sampling, photometric augmentation, and cross-view mask geometry.
//!
//! Two augmented views are drawn from distributions T1/T2 that share crop,
//! flip, jitter and grayscale behavior but differ in blur and solarization
//! probability (1.0/0.0 for T1, 0.1/0.2 for T2). The spanning view is the
//! smallest crop covering both views; discovery label maps computed on it
//! are warped into each view's feature grid by nearest-neighbor lookup.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Mask, TensorOf};

/// Integer crop rectangle in source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn full(h: usize, w: usize) -> Self {
        CropRect { x: 0, y: 0, w, h }
    }

    pub fn contains(&self, other: &CropRect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }

    fn within(&self, img_h: usize, img_w: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= img_w && self.y + self.h <= img_h
    }
}

/// Crop, flip flag and output resolution defining one view of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewGeometry {
    pub crop: CropRect,
    pub hflip: bool,
    /// (height, width) the crop is resized to.
    pub out_size: (usize, usize),
}

/// Color-jitter offsets plus the order the four sub-ops run in.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Permutation of [0, 1, 2, 3] = [brightness, contrast, saturation, hue].
    pub order: [usize; 4],
}

/// Everything needed to reproduce one augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSample {
    pub geometry: ViewGeometry,
    pub jitter: Option<ColorJitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

impl AugmentationSample {
    /// Geometry-only sample: full crop, no flip, no photometric ops.
    pub fn identity(img_h: usize, img_w: usize, out_size: (usize, usize)) -> Self {
        AugmentationSample {
            geometry: ViewGeometry {
                crop: CropRect::full(img_h, img_w),
                hflip: false,
                out_size,
            },
            jitter: None,
            grayscale: false,
            blur_sigma: None,
            solarize: false,
        }
    }
}

/// The two augmentation distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistId {
    T1,
    T2,
}

impl DistId {
    fn blur_prob(self) -> f64 {
        match self {
            DistId::T1 => 1.0,
            DistId::T2 => 0.1,
        }
    }

    fn solarize_prob(self) -> f64 {
        match self {
            DistId::T1 => 0.0,
            DistId::T2 => 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Square side of each augmented view.
    pub view_size: usize,
    /// Discovery-view side as a multiple of `view_size`.
    pub discovery_ratio: f64,
    /// Lower bound of the crop area as a fraction of the image area.
    pub min_area_frac: f64,
    pub brightness_max: f64,
    pub contrast_max: f64,
    pub saturation_max: f64,
    pub hue_max: f64,
    /// Square blur kernel side.
    pub blur_kernel: usize,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            view_size: 32,
            discovery_ratio: 2.0,
            min_area_frac: 0.08,
            brightness_max: 0.4,
            contrast_max: 0.4,
            saturation_max: 0.2,
            hue_max: 0.1,
            blur_kernel: 23,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.view_size < 4 {
            return Err(Error::config("view_size must be >= 4"));
        }
        if self.discovery_ratio < 1.0 {
            return Err(Error::config("discovery_ratio must be >= 1"));
        }
        if self.min_area_frac <= 0.0 || self.min_area_frac >= 1.0 {
            return Err(Error::config("min_area_frac must lie in (0, 1)"));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::config("blur kernel side must be odd"));
        }
        Ok(())
    }

    /// Side of the spanning (discovery) view.
    pub fn discovery_side(&self) -> usize {
        (self.view_size as f64 * self.discovery_ratio).round() as usize
    }
}

const CROP_ATTEMPTS: usize = 100;
const ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);

/// Area-uniform, log-aspect-uniform crop; falls back to the largest centered
/// square after 100 infeasible draws.
fn sample_crop(rng: &mut ChaCha8Rng, img_h: usize, img_w: usize, min_area_frac: f64) -> CropRect {
    let area = (img_h * img_w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let target = rng.random_range(min_area_frac..=1.0) * area;
        let ratio = (rng.random_range(ASPECT_RANGE.0.ln()..=ASPECT_RANGE.1.ln())).exp();
        let w = (target * ratio).sqrt().round().max(1.0) as usize;
        let h = (target / ratio).sqrt().round().max(1.0) as usize;
        if w <= img_w && h <= img_h {
            let x = rng.random_range(0..=img_w - w);
            let y = rng.random_range(0..=img_h - h);
            return CropRect { x, y, w, h };
        }
    }
    let side = img_h.min(img_w);
    CropRect { x: (img_w - side) / 2, y: (img_h - side) / 2, w: side, h: side }
}

/// Draw one augmentation from T1 or T2 for an `img_h x img_w` image.
pub fn sample_augmentation(
    rng: &mut ChaCha8Rng,
    dist: DistId,
    cfg: &AugmentConfig,
    img_h: usize,
    img_w: usize,
) -> AugmentationSample {
    let crop = sample_crop(rng, img_h, img_w, cfg.min_area_frac);
    let hflip = rng.random::<f64>() < 0.5;
    let jitter = if rng.random::<f64>() < 0.8 {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(rng);
        Some(ColorJitter {
            brightness: rng.random_range(-cfg.brightness_max..=cfg.brightness_max),
            contrast: rng.random_range(-cfg.contrast_max..=cfg.contrast_max),
            saturation: rng.random_range(-cfg.saturation_max..=cfg.saturation_max),
            hue: rng.random_range(-cfg.hue_max..=cfg.hue_max),
            order,
        })
    } else {
        None
    };
    let grayscale = rng.random::<f64>() < 0.2;
    let blur_sigma = if rng.random::<f64>() < dist.blur_prob() {
        Some(rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max))
    } else {
        None
    };
    let solarize = rng.random::<f64>() < dist.solarize_prob();
    AugmentationSample {
        geometry: ViewGeometry {
            crop,
            hflip,
            out_size: (cfg.view_size, cfg.view_size),
        },
        jitter,
        grayscale,
        blur_sigma,
        solarize,
    }
}

// ── Pixel transforms ────────────────────────────────────────────────

fn luma(px: &[f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Crop + bilinear resize, then optional horizontal flip.
pub fn crop_resize<S: Scalar>(image: &TensorOf<S>, geom: &ViewGeometry) -> Result<TensorOf<S>> {
    let (img_h, img_w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::shape(format!("image must be h x w x 3, got {s:?}"))),
    };
    if !geom.crop.within(img_h, img_w) {
        return Err(Error::geometry(format!("crop {:?} outside {img_h}x{img_w}", geom.crop)));
    }
    let (oh, ow) = geom.out_size;
    let c = geom.crop;
    let sample = |sy: f64, sx: f64, ch: usize| -> f64 {
        // Clamped bilinear lookup inside the crop.
        let clamp = |v: f64, lo: usize, hi: usize| v.max(lo as f64).min(hi as f64);
        let sy = clamp(sy, c.y, c.y + c.h - 1);
        let sx = clamp(sx, c.x, c.x + c.w - 1);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(c.y + c.h - 1);
        let x1 = (x0 + 1).min(c.x + c.w - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        let at = |yy: usize, xx: usize| image.data()[(yy * img_w + xx) * 3 + ch].to_f64_lossy();
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut out = vec![S::zero(); oh * ow * 3];
    let sy_scale = c.h as f64 / oh as f64;
    let sx_scale = c.w as f64 / ow as f64;
    for oy in 0..oh {
        let sy = c.y as f64 + (oy as f64 + 0.5) * sy_scale - 0.5;
        for ox in 0..ow {
            let oxx = if geom.hflip { ow - 1 - ox } else { ox };
            let sx = c.x as f64 + (oxx as f64 + 0.5) * sx_scale - 0.5;
            for ch in 0..3 {
                out[(oy * ow + ox) * 3 + ch] = S::lit(sample(sy, sx, ch));
            }
        }
    }
    TensorOf::new(vec![oh, ow, 3], out)
}

fn for_each_pixel<S: Scalar>(image: &mut TensorOf<S>, mut f: impl FnMut(&mut [f64; 3])) {
    for px in image.data_mut().chunks_mut(3) {
        let mut v = [px[0].to_f64_lossy(), px[1].to_f64_lossy(), px[2].to_f64_lossy()];
        f(&mut v);
        for (dst, &x) in px.iter_mut().zip(&v) {
            *dst = S::lit(x.clamp(0.0, 1.0));
        }
    }
}

fn apply_jitter<S: Scalar>(image: &mut TensorOf<S>, jitter: &ColorJitter) {
    for &op in &jitter.order {
        match op {
            0 => {
                let f = 1.0 + jitter.brightness;
                for_each_pixel(image, |px| px.iter_mut().for_each(|v| *v *= f));
            }
            1 => {
                let n = (image.numel() / 3) as f64;
                let mean: f64 = image
                    .data()
                    .chunks(3)
                    .map(|p| {
                        luma(&[p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy()])
                    })
                    .sum::<f64>()
                    / n;
                let f = 1.0 + jitter.contrast;
                for_each_pixel(image, |px| {
                    px.iter_mut().for_each(|v| *v = mean + (*v - mean) * f)
                });
            }
            2 => {
                let f = 1.0 + jitter.saturation;
                for_each_pixel(image, |px| {
                    let g = luma(px);
                    px.iter_mut().for_each(|v| *v = g + (*v - g) * f);
                });
            }
            _ => {
                // Rotation about the achromatic axis approximating a hue shift.
                let theta = jitter.hue * std::f64::consts::TAU;
                let (s, c) = theta.sin_cos();
                let a = c + (1.0 - c) / 3.0;
                let b = (1.0 - c) / 3.0 - s / 3.0_f64.sqrt();
                let d = (1.0 - c) / 3.0 + s / 3.0_f64.sqrt();
                for_each_pixel(image, |px| {
                    let [r, g, bl] = *px;
                    px[0] = a * r + b * g + d * bl;
                    px[1] = d * r + a * g + b * bl;
                    px[2] = b * r + d * g + a * bl;
                });
            }
        }
    }
}

fn apply_grayscale<S: Scalar>(image: &mut TensorOf<S>) {
    for_each_pixel(image, |px| {
        let g = luma(px);
        *px = [g, g, g];
    });
}

/// Separable Gaussian blur; border taps are renormalized so a constant image
/// stays constant and kernel mass is preserved.
fn apply_blur<S: Scalar>(image: &mut TensorOf<S>, sigma: f64, kernel_side: usize) {
    let radius = kernel_side / 2;
    let taps: Vec<f64> = (0..kernel_side)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();

    let (h, w) = (image.shape()[0], image.shape()[1]);
    let pass = |src: &[S], out: &mut Vec<S>, horizontal: bool| {
        out.clear();
        out.resize(h * w * 3, S::zero());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    let mut mass = 0.0;
                    for (i, &t) in taps.iter().enumerate() {
                        let o = i as isize - radius as isize;
                        let (yy, xx) = if horizontal {
                            (y as isize, x as isize + o)
                        } else {
                            (y as isize + o, x as isize)
                        };
                        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += t * src[(yy as usize * w + xx as usize) * 3 + ch].to_f64_lossy();
                        mass += t;
                    }
                    out[(y * w + x) * 3 + ch] = S::lit(acc / mass);
                }
            }
        }
    };
    let mut tmp = Vec::new();
    pass(image.data(), &mut tmp, true);
    let mut done = Vec::new();
    pass(&tmp, &mut done, false);
    image.data_mut().copy_from_slice(&done);
}

fn apply_solarize<S: Scalar>(image: &mut TensorOf<S>) {
    for_each_pixel(image, |px| {
        px.iter_mut().for_each(|v| {
            if *v >= 0.5 {
                *v = 1.0 - *v;
            }
        })
    });
}

/// Run the full pipeline: crop+resize, flip, jitter, grayscale, blur,
/// solarize. Output values always lie in [0, 1].
pub fn apply_augmentation<S: Scalar>(
    image: &TensorOf<S>,
    sample: &AugmentationSample,
    blur_kernel: usize,
) -> Result<TensorOf<S>> {
    let mut out = crop_resize(image, &sample.geometry)?;
    if let Some(jitter) = &sample.jitter {
        apply_jitter(&mut out, jitter);
    }
    if sample.grayscale {
        apply_grayscale(&mut out);
    }
    if let Some(sigma) = sample.blur_sigma {
        apply_blur(&mut out, sigma, blur_kernel);
    }
    if sample.solarize {
        apply_solarize(&mut out);
    }
    // Photometric ops clamp as they go; clip once more for the contract.
    Ok(out.map(|v| v.max(S::zero()).min(S::one())))
}

// ── Cross-view geometry ─────────────────────────────────────────────

/// Smallest crop containing both view crops, resized to `out_side`.
pub fn spanning_view(g1: &ViewGeometry, g2: &ViewGeometry, out_side: usize) -> ViewGeometry {
    let x = g1.crop.x.min(g2.crop.x);
    let y = g1.crop.y.min(g2.crop.y);
    let right = (g1.crop.x + g1.crop.w).max(g2.crop.x + g2.crop.w);
    let bottom = (g1.crop.y + g1.crop.h).max(g2.crop.y + g2.crop.h);
    ViewGeometry {
        crop: CropRect { x, y, w: right - x, h: bottom - y },
        hflip: false,
        out_size: (out_side, out_side),
    }
}

/// Resample a label map living on `from`'s grid onto `out_grid` cells of the
/// `to` view, by nearest-neighbor lookup of each target cell center.
pub fn warp_labelmap(
    labels: &LabelMap,
    from: &ViewGeometry,
    to: &ViewGeometry,
    out_grid: (usize, usize),
) -> Result<LabelMap> {
    if !from.crop.contains(&to.crop) {
        return Err(Error::geometry(format!(
            "warp target {:?} not contained in source {:?}",
            to.crop, from.crop
        )));
    }
    let (h0, w0) = (labels.height(), labels.width());
    let (th, tw) = out_grid;
    let sy_scale = to.crop.h as f64 / th as f64;
    let sx_scale = to.crop.w as f64 / tw as f64;
    Ok(LabelMap::from_fn(th, tw, |ty, tx| {
        // Integer-index flip keeps the arithmetic exact at native resolution.
        let txx = if to.hflip { tw - 1 - tx } else { tx };
        let sx = to.crop.x as f64 + (txx as f64 + 0.5) * sx_scale;
        let sy = to.crop.y as f64 + (ty as f64 + 0.5) * sy_scale;
        let mut u = (sx - from.crop.x as f64) / from.crop.w as f64;
        let v = (sy - from.crop.y as f64) / from.crop.h as f64;
        if from.hflip {
            u = 1.0 - u;
        }
        let gx = ((u * w0 as f64) as usize).min(w0 - 1);
        let gy = ((v * h0 as f64) as usize).min(h0 - 1);
        labels.get(gy, gx)
    }))
}

/// Per-segment binary masks of a warped label map; masks that received no
/// cells in the target view are empty and are meant to be discarded.
pub fn warp_masks(
    labels: &LabelMap,
    segments: usize,
    from: &ViewGeometry,
    to: &ViewGeometry,
    out_grid: (usize, usize),
) -> Result<Vec<Mask>> {
    Ok(warp_labelmap(labels, from, to, out_grid)?.masks(segments))
}
