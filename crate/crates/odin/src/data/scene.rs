//! Synthetic multi-object scenes and short videos with exact ground truth.
//!
//! Scenes are colored geometric shapes (disks, rectangles, triangles) over a
//! textured background. Shape kind doubles as the semantic class, occlusion
//! is resolved by depth order, and every instance mask is non-empty. Object
//! centers and per-frame motion are integer-valued, so a moving object's
//! raster translates exactly (objects carry their texture with them).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Mask, TensorOf};
use crate::util::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

impl ShapeKind {
    /// Semantic class id; 0 is reserved for the background.
    pub fn class_id(self) -> u8 {
        match self {
            ShapeKind::Disk => 1,
            ShapeKind::Rect => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Amplitude of the background/object noise texture in [0, 1].
    pub texture_level: f64,
    /// Object size range as a fraction of the shorter image side.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 4,
            shape_kinds: vec![ShapeKind::Disk, ShapeKind::Rect, ShapeKind::Triangle],
            texture_level: 0.06,
            min_size_frac: 0.14,
            max_size_frac: 0.26,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::config("scene extents must be >= 32"));
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return Err(Error::config("need max_objects >= min_objects >= 1"));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::config("at least one shape kind required"));
        }
        if !(0.0..=1.0).contains(&self.texture_level) {
            return Err(Error::config("texture_level must lie in [0, 1]"));
        }
        if self.min_size_frac <= 0.0 || self.max_size_frac < self.min_size_frac {
            return Err(Error::config("need max_size_frac >= min_size_frac > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<S> {
    /// `[h, w, 3]` image with values in [0, 1].
    pub image: TensorOf<S>,
    /// One binary mask per object, pairwise disjoint.
    pub instance_masks: Vec<Mask>,
    /// Class id per object, aligned with `instance_masks`.
    pub class_ids: Vec<u8>,
}

impl<S: Scalar> Scene<S> {
    /// Instance label map: 0 background, k+1 for object k.
    pub fn label_map(&self) -> LabelMap {
        let h = self.instance_masks[0].height();
        let w = self.instance_masks[0].width();
        let mut labels = vec![0u8; h * w];
        for (k, mask) in self.instance_masks.iter().enumerate() {
            for (i, &m) in mask.data().iter().enumerate() {
                if m {
                    labels[i] = (k + 1) as u8;
                }
            }
        }
        LabelMap::new(h, w, labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScene<S> {
    pub frames: Vec<Scene<S>>,
    pub first_frame_labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    #[serde(flatten)]
    pub scene: SceneConfig,
    pub frames: usize,
    pub max_step_px: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            scene: SceneConfig {
                min_objects: 2,
                max_objects: 3,
                min_size_frac: 0.18,
                max_size_frac: 0.30,
                ..SceneConfig::default()
            },
            frames: 8,
            max_step_px: 2,
        }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.frames < 2 {
            return Err(Error::config("videos need at least 2 frames"));
        }
        Ok(())
    }
}

// ── Placement plans ─────────────────────────────────────────────────

/// One object: everything needed to rasterize it at any integer offset.
#[derive(Clone, Debug)]
pub struct Placement {
    pub kind: ShapeKind,
    pub center: (i64, i64), // (x, y)
    pub size: i64,
    pub color: [f64; 3],
    pub noise_seed: u64,
}

#[derive(Clone, Debug)]
struct Background {
    base: [f64; 3],
    grad_x: [f64; 3],
    grad_y: [f64; 3],
    noise_seed: u64,
}

/// Deterministic value noise in [-1, 1] from integer coordinates.
fn hash_noise(seed: u64, x: i64, y: i64, c: usize) -> f64 {
    let mut z = seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z ^= (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z ^= (c as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_background(rng: &mut ChaCha8Rng) -> Background {
    let base_v = rng.random_range(0.25..0.45);
    let base = hsv_to_rgb(rng.random_range(0.0..1.0), rng.random_range(0.05..0.25), base_v);
    let mut grad = |_unused: ()| {
        [
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
        ]
    };
    let grad_x = grad(());
    let grad_y = grad(());
    Background { base, grad_x, grad_y, noise_seed: rng.random() }
}

fn sample_placements(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<Placement> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let short = cfg.height.min(cfg.width) as f64;
    let hue0 = rng.random_range(0.0..1.0);
    (0..n)
        .map(|i| {
            let kind = cfg.shape_kinds[rng.random_range(0..cfg.shape_kinds.len())];
            let size = (rng.random_range(cfg.min_size_frac..=cfg.max_size_frac) * short)
                .round()
                .max(2.0) as i64;
            let cx = rng.random_range(size..cfg.width as i64 - size);
            let cy = rng.random_range(size..cfg.height as i64 - size);
            // Spread hues around the wheel so instances stay distinguishable.
            let hue = hue0 + i as f64 / n as f64 + rng.random_range(-0.04..0.04);
            let color = hsv_to_rgb(hue, rng.random_range(0.55..0.95), rng.random_range(0.6..0.95));
            Placement { kind, center: (cx, cy), size, color, noise_seed: rng.random() }
        })
        .collect()
}

impl Placement {
    /// Containment test in image coordinates, inclusive of edges.
    fn contains(&self, x: i64, y: i64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let s = self.size;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= s * s,
            ShapeKind::Rect => dx.abs() <= s && dy.abs() <= (s * 3).div_euclid(4),
            ShapeKind::Triangle => {
                // Apex up: (0, -s), (-s, s), (s, s); inclusive half-planes.
                let (ax, ay) = (0i64, -s);
                let (bx, by) = (-s, s);
                let (cx, cy) = (s, s);
                let e0 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                let e1 = (cx - bx) * (dy - by) - (cy - by) * (dx - bx);
                let e2 = (ax - cx) * (dy - cy) - (ay - cy) * (dx - cx);
                (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)
            }
        }
    }

    fn shifted(&self, dx: i64, dy: i64) -> Placement {
        let mut p = self.clone();
        p.center = (p.center.0 + dx, p.center.1 + dy);
        p
    }
}

/// Rasterize placements back-to-front over the background.
fn render<S: Scalar>(
    background: &Background,
    placements: &[Placement],
    cfg: &SceneConfig,
) -> (TensorOf<S>, Vec<Mask>) {
    let (h, w) = (cfg.height, cfg.width);
    let amp = cfg.texture_level;
    let mut image = vec![S::zero(); h * w * 3];
    let mut top = vec![usize::MAX; h * w]; // MAX = background
    for y in 0..h {
        for x in 0..w {
            let cell = y * w + x;
            // Later placements are closer to the camera.
            for (k, p) in placements.iter().enumerate().rev() {
                if p.contains(x as i64, y as i64) {
                    top[cell] = k;
                    break;
                }
            }
            let px = &mut image[cell * 3..cell * 3 + 3];
            if top[cell] == usize::MAX {
                let fx = x as f64 / w as f64 - 0.5;
                let fy = y as f64 / h as f64 - 0.5;
                for c in 0..3 {
                    let v = background.base[c]
                        + background.grad_x[c] * fx
                        + background.grad_y[c] * fy
                        + amp * hash_noise(background.noise_seed, x as i64, y as i64, c);
                    px[c] = S::lit(v.clamp(0.0, 1.0));
                }
            } else {
                let p = &placements[top[cell]];
                // Object-local coordinates keep the texture attached to the
                // object under translation.
                let ox = x as i64 - p.center.0;
                let oy = y as i64 - p.center.1;
                for c in 0..3 {
                    let v = p.color[c] + amp * hash_noise(p.noise_seed, ox, oy, c);
                    px[c] = S::lit(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let masks = (0..placements.len())
        .map(|k| Mask::new(h, w, top.iter().map(|&t| t == k).collect()))
        .collect();
    (TensorOf::new(vec![h, w, 3], image).expect("consistent extents"), masks)
}

/// Render a plan into a scene, failing if any object is fully occluded.
fn try_scene<S: Scalar>(
    background: &Background,
    placements: &[Placement],
    cfg: &SceneConfig,
) -> Option<Scene<S>> {
    let (image, masks) = render(background, placements, cfg);
    if masks.iter().any(|m| m.is_empty_mask()) {
        return None;
    }
    let class_ids = placements.iter().map(|p| p.kind.class_id()).collect();
    Some(Scene { image, instance_masks: masks, class_ids })
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Deterministic multi-object scene from `(seed, config)`.
pub fn generate_scene<S: Scalar>(seed: u64, cfg: &SceneConfig) -> Result<Scene<S>> {
    cfg.validate()?;
    let mut rng = substream(seed, 0x5ce9, 0);
    let background = sample_background(&mut rng);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let placements = sample_placements(&mut rng, cfg);
        if let Some(scene) = try_scene(&background, &placements, cfg) {
            return Ok(scene);
        }
    }
    Err(Error::data(format!(
        "could not place {} object(s) without total occlusion after {PLACEMENT_ATTEMPTS} attempts",
        cfg.min_objects
    )))
}

/// Render the same placements over `frames` frames with the given per-object
/// velocities, bouncing off the borders so objects stay fully visible.
pub fn render_video<S: Scalar>(
    background_seed: u64,
    placements: &[Placement],
    velocities: &[(i64, i64)],
    cfg: &SceneConfig,
    frames: usize,
) -> Option<VideoScene<S>> {
    let mut rng = substream(background_seed, 0xb6, 0);
    let background = sample_background(&mut rng);
    let mut centers: Vec<(i64, i64)> = placements.iter().map(|p| p.center).collect();
    let mut vel = velocities.to_vec();
    let mut out = Vec::with_capacity(frames);
    for frame in 0..frames {
        if frame > 0 {
            for (k, p) in placements.iter().enumerate() {
                let (lo_x, hi_x) = (p.size, cfg.width as i64 - 1 - p.size);
                let (lo_y, hi_y) = (p.size, cfg.height as i64 - 1 - p.size);
                let step = |pos: i64, v: i64, lo: i64, hi: i64| -> (i64, i64) {
                    let next = pos + v;
                    if next < lo || next > hi {
                        (pos - v, -v)
                    } else {
                        (next, v)
                    }
                };
                let (nx, vx) = step(centers[k].0, vel[k].0, lo_x, hi_x);
                let (ny, vy) = step(centers[k].1, vel[k].1, lo_y, hi_y);
                centers[k] = (nx, ny);
                vel[k] = (vx, vy);
            }
        }
        let current: Vec<Placement> = placements
            .iter()
            .zip(&centers)
            .map(|(p, &(cx, cy))| p.shifted(cx - p.center.0, cy - p.center.1))
            .collect();
        out.push(try_scene(&background, &current, cfg)?);
    }
    let first_frame_labels = out[0].label_map();
    Some(VideoScene { frames: out, first_frame_labels })
}

/// Deterministic video with temporally coherent object motion.
pub fn generate_video<S: Scalar>(seed: u64, cfg: &VideoConfig) -> Result<VideoScene<S>> {
    cfg.validate()?;
    let mut rng = substream(seed, 0x71de0, 0);
    let bg_seed: u64 = rng.random();
    let step = cfg.max_step_px as i64;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let placements = sample_placements(&mut rng, &cfg.scene);
        let velocities: Vec<(i64, i64)> = placements
            .iter()
            .map(|_| (rng.random_range(-step..=step), rng.random_range(-step..=step)))
            .collect();
        if let Some(video) = render_video(bg_seed, &placements, &velocities, &cfg.scene, cfg.frames)
        {
            return Ok(video);
        }
    }
    Err(Error::data(format!(
        "could not keep {} object(s) visible across {} frames after {PLACEMENT_ATTEMPTS} attempts",
        cfg.scene.min_objects, cfg.frames
    )))
}
