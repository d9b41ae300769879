//! Procedural indoor scenes rendered in two appearance domains.
//!
//! Every scene is a box room (floor, back wall, ceiling) seen by a level
//! pinhole camera, populated with furniture-like rectangles and ellipses.
//! Depth, labels, instance outlines and the HHA encoding are exact by
//! construction. The target domain perturbs only the RGB rendering (palette
//! hue, brightness ramp, blur, noise), plus an optional sensor range limit
//! on depth.

mod dataset;
mod hha;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{
    class_distribution, write_dataset, Access, Dataset, DatasetConfig, LoadedSample, Manifest,
    ManifestEntry, Part, Parts, SampleFiles, Split, render_entry, MANIFEST_FILE,
};
pub use hha::{disparity, encode_hha, MAX_DEPTH, MIN_DEPTH};

use crate::autodiff::IGNORE_LABEL;
use crate::error::{config_check, contract, Result};
use crate::maps::{BoundaryMap, LabelMap};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FLOOR: u8 = 0;
pub const WALL: u8 = 1;
pub const CEILING: u8 = 2;
/// Index of the first furniture class.
pub const FIRST_OBJECT: usize = 3;

const ROOM_HEIGHT: f64 = 2.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Level pinhole camera; the principal point is the image center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCamera {
    pub height_above_floor: f64,
    /// Up direction in camera coordinates (x right, y down, z forward).
    pub gravity_up: [f64; 3],
    pub focal_px: f64,
}

impl SceneCamera {
    pub fn for_width(width: usize) -> Self {
        Self {
            height_above_floor: 1.5,
            gravity_up: [0.0, -1.0, 0.0],
            focal_px: 0.9 * width as f64,
        }
    }
}

/// Appearance and content statistics of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainParams {
    /// Relative class frequency; zero removes the class entirely.
    pub class_frequencies: Vec<f64>,
    /// Base RGB per class in `[0, 1]`.
    pub palette: Vec<[f32; 3]>,
    pub hue_shift_deg: f32,
    pub noise_sigma: f32,
    pub blur_radius: usize,
    /// Peak relative brightness change of a linear ramp across the image.
    pub brightness_gradient: f32,
    pub object_count_range: (usize, usize),
    /// Depths at or beyond this range read as "no return".
    pub max_sensor_depth: Option<f32>,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self::source(6)
    }
}

impl DomainParams {
    pub fn source(classes: usize) -> Self {
        Self {
            class_frequencies: vec![1.0; classes],
            palette: default_palette(classes),
            hue_shift_deg: 0.0,
            noise_sigma: 0.0,
            blur_radius: 0,
            brightness_gradient: 0.0,
            object_count_range: (1, 4),
            max_sensor_depth: None,
        }
    }

    pub fn target(classes: usize) -> Self {
        Self {
            hue_shift_deg: 150.0,
            noise_sigma: 0.05,
            blur_radius: 1,
            brightness_gradient: 0.35,
            max_sensor_depth: Some(6.5),
            ..Self::source(classes)
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        config_check!(
            self.class_frequencies.len() == classes && self.palette.len() == classes,
            "domain parameters describe {} frequencies and {} colors for {} classes",
            self.class_frequencies.len(),
            self.palette.len(),
            classes
        );
        config_check!(
            self.class_frequencies.iter().all(|&f| f >= 0.0 && f.is_finite())
                && self.class_frequencies.iter().sum::<f64>() > 0.0,
            "class frequencies must be non-negative with a positive sum"
        );
        config_check!(
            self.object_count_range.0 <= self.object_count_range.1,
            "object count range {:?} is empty",
            self.object_count_range
        );
        config_check!(
            self.noise_sigma >= 0.0 && self.brightness_gradient >= 0.0,
            "noise and brightness gradient must be non-negative"
        );
        Ok(())
    }
}

pub fn default_class_names(classes: usize) -> Vec<String> {
    let base = ["floor", "wall", "ceiling", "bed", "cabinet", "picture"];
    (0..classes)
        .map(|k| match base.get(k) {
            Some(n) => n.to_string(),
            None => format!("object{k}"),
        })
        .collect()
}

pub fn default_palette(classes: usize) -> Vec<[f32; 3]> {
    let base = [
        [0.55, 0.38, 0.22],
        [0.82, 0.78, 0.66],
        [0.93, 0.93, 0.96],
        [0.22, 0.32, 0.78],
        [0.58, 0.18, 0.12],
        [0.18, 0.62, 0.30],
    ];
    (0..classes)
        .map(|k| match base.get(k) {
            Some(c) => *c,
            None => hsv_to_rgb((k as f32 * 137.5) % 360.0, 0.7, 0.7),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
enum Mount {
    Floor,
    /// Hangs on the back wall with its center at this elevation range (m).
    Wall(f64, f64),
}

#[derive(Clone, Copy, Debug)]
struct Template {
    width: f64,
    height: f64,
    shape: Shape,
    mount: Mount,
}

fn template(class: usize) -> Template {
    const TEMPLATES: [Template; 3] = [
        Template {
            width: 2.0,
            height: 0.6,
            shape: Shape::Rect,
            mount: Mount::Floor,
        },
        Template {
            width: 0.8,
            height: 1.9,
            shape: Shape::Rect,
            mount: Mount::Floor,
        },
        Template {
            width: 0.9,
            height: 0.7,
            shape: Shape::Ellipse,
            mount: Mount::Wall(1.1, 1.8),
        },
    ];
    TEMPLATES[(class - FIRST_OBJECT) % TEMPLATES.len()]
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    /// `3×H×W` in `[0, 1]`.
    pub rgb: Tensor,
    /// Meters, row-major `H×W`.
    pub depth: Vec<f32>,
    /// `3×H×W` in `[0, 1]`.
    pub hha: Tensor,
    pub labels: LabelMap,
    pub boundaries: BoundaryMap,
    /// Instance id per pixel: 0 ceiling, 1 wall, 2 floor, then objects.
    pub instances: Vec<u16>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

struct Layout {
    instances: Vec<u16>,
    depth: Vec<f64>,
    classes: Vec<usize>,
    /// Per-instance multiplicative color jitter.
    jitter: Vec<[f32; 3]>,
}

fn pick_weighted(rng: &mut Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && u < w {
            return Some(i);
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0)
}

fn build_layout(
    rng: &mut Rng,
    params: &DomainParams,
    cam: &SceneCamera,
    (h, w): (usize, usize),
) -> Layout {
    let f = cam.focal_px;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let cam_h = cam.height_above_floor;
    let wall_dist: f64 = rng.random_range(4.0..8.0);

    let mut instances = vec![1u16; h * w];
    let mut depth = vec![wall_dist; h * w];
    for r in 0..h {
        let ray = (r as f64 + 0.5 - cy) / f;
        let (inst, z) = if ray > 0.0 {
            (2, cam_h / ray)
        } else if ray < 0.0 {
            (0, (ROOM_HEIGHT - cam_h) / -ray)
        } else {
            (1, f64::INFINITY)
        };
        if z < wall_dist {
            for c in 0..w {
                instances[r * w + c] = inst;
                depth[r * w + c] = z;
            }
        }
    }

    let mut classes = vec![CEILING as usize, WALL as usize, FLOOR as usize];
    let mut jitter: Vec<[f32; 3]> = (0..3).map(|_| color_jitter(rng)).collect();

    let object_weights: Vec<f64> = params
        .class_frequencies
        .iter()
        .enumerate()
        .map(|(k, &f)| if k >= FIRST_OBJECT { f } else { 0.0 })
        .collect();
    let (lo, hi) = params.object_count_range;
    let count = rng.random_range(lo..=hi);
    for _ in 0..count {
        let Some(class) = pick_weighted(rng, &object_weights) else {
            break;
        };
        let t = template(class);
        let ow = t.width * rng.random_range(0.8..1.2);
        let oh = t.height * rng.random_range(0.8..1.2);
        let center_px: f64 = rng.random_range(0.0..w as f64);
        let sloped = rng.random_bool(0.5);
        let tilt: f64 = if sloped { rng.random_range(-0.6..0.6) } else { 0.0 };
        let (z0, top_m, bottom_m, tilt) = match t.mount {
            Mount::Floor => {
                let z0 = rng.random_range(1.5..(wall_dist - 0.6));
                (z0, oh, 0.0, tilt)
            }
            Mount::Wall(lo, hi) => {
                let e: f64 = rng.random_range(lo..hi);
                (wall_dist - 0.05, e + oh / 2.0, e - oh / 2.0, 0.0)
            }
        };
        let id = classes.len() as u16;
        classes.push(class);
        jitter.push(color_jitter(rng));

        let half_w_px = f * ow / (2.0 * z0);
        let top = cy + f * (cam_h - top_m) / z0;
        let bottom = cy + f * (cam_h - bottom_m) / z0;
        let (left, right) = (center_px - half_w_px, center_px + half_w_px);
        let (mid_r, half_h) = ((top + bottom) / 2.0, (bottom - top) / 2.0);
        let r0 = top.floor().max(0.0) as usize;
        let r1 = (bottom.ceil().max(0.0) as usize).min(h);
        let c0 = left.floor().max(0.0) as usize;
        let c1 = (right.ceil().max(0.0) as usize).min(w);
        for r in r0..r1 {
            let py = r as f64 + 0.5;
            if py < top || py >= bottom {
                continue;
            }
            for c in c0..c1 {
                let px = c as f64 + 0.5;
                if px < left || px >= right {
                    continue;
                }
                if t.shape == Shape::Ellipse {
                    let u = (px - center_px) / half_w_px;
                    let v = (py - mid_r) / half_h;
                    if u * u + v * v > 1.0 {
                        continue;
                    }
                }
                let z = (z0 + tilt * (px - center_px) * z0 / f).clamp(0.6, wall_dist - 0.02);
                let i = r * w + c;
                if z <= depth[i] {
                    depth[i] = z;
                    instances[i] = id;
                }
            }
        }
    }
    let _ = cx;
    Layout {
        instances,
        depth,
        classes,
        jitter,
    }
}

fn color_jitter(rng: &mut Rng) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(0.88..1.12))
}

/// Class of each structural surface after frequency-zero removal.
fn structural_label(class: usize, freq: &[f64]) -> u8 {
    let present = |k: u8| freq[k as usize] > 0.0;
    match class as u8 {
        WALL if present(WALL) => WALL,
        WALL => IGNORE_LABEL,
        c if present(c) => c,
        _ if present(WALL) => WALL,
        _ => IGNORE_LABEL,
    }
}

/// Marks the nearer pixel of every 4-connected pair with different
/// instances; equal depths go to the higher instance id.
pub fn instance_boundaries(instances: &[u16], depth: &[f32], h: usize, w: usize) -> Vec<bool> {
    let mut edge = vec![false; h * w];
    let mut mark = |a: usize, b: usize| {
        if instances[a] == instances[b] {
            return;
        }
        let a_wins = match depth[a].partial_cmp(&depth[b]) {
            Some(std::cmp::Ordering::Less) => true,
            Some(std::cmp::Ordering::Greater) => false,
            _ => instances[a] > instances[b],
        };
        edge[if a_wins { a } else { b }] = true;
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                mark(i, i + 1);
            }
            if r + 1 < h {
                mark(i, i + w);
            }
        }
    }
    edge
}

pub fn generate_scene(
    rng: &mut Rng,
    params: &DomainParams,
    domain: Domain,
    (h, w): (usize, usize),
    classes: usize,
) -> Result<Sample> {
    contract!(classes >= 4, "scenes need at least 4 classes, got {}", classes);
    contract!(h >= 32 && w >= 32, "scene size {}x{} is below 32x32", h, w);
    params.validate(classes)?;
    let cam = SceneCamera::for_width(w);
    let layout = build_layout(rng, params, &cam, (h, w));

    let mut depth: Vec<f32> = layout
        .depth
        .iter()
        .map(|&z| (z as f32).clamp(MIN_DEPTH, MAX_DEPTH))
        .collect();
    let boundaries = instance_boundaries(&layout.instances, &depth, h, w);
    let labels: Vec<u8> = layout
        .instances
        .iter()
        .map(|&i| {
            let class = layout.classes[i as usize];
            if class < FIRST_OBJECT {
                structural_label(class, &params.class_frequencies)
            } else {
                class as u8
            }
        })
        .collect();

    let rgb = render(rng, params, &layout, &depth, (h, w));

    if let Some(max) = params.max_sensor_depth {
        depth.iter_mut().for_each(|d| *d = d.min(max));
    }
    let hha = encode_hha(&depth, h, w, &cam, params.max_sensor_depth)?;

    Ok(Sample {
        id: String::new(),
        domain,
        rgb,
        depth,
        hha,
        labels: LabelMap::new(h, w, labels)?,
        boundaries: BoundaryMap::from_mask(h, w, &boundaries),
        instances: layout.instances,
    })
}

fn render(
    rng: &mut Rng,
    params: &DomainParams,
    layout: &Layout,
    depth: &[f32],
    (h, w): (usize, usize),
) -> Tensor {
    let palette: Vec<[f32; 3]> = params
        .palette
        .iter()
        .map(|&c| shift_hue(c, params.hue_shift_deg))
        .collect();
    let mut img = vec![0.0f32; 3 * h * w];
    for (i, &inst) in layout.instances.iter().enumerate() {
        let class = layout.classes[inst as usize];
        let shade = 1.0 - 0.035 * depth[i];
        for ch in 0..3 {
            img[ch * h * w + i] = palette[class][ch] * layout.jitter[inst as usize][ch] * shade;
        }
    }

    // Domain-specific draws happen after every layout draw so the layout of
    // a given stream never depends on the domain.
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    if params.brightness_gradient > 0.0 {
        let (dx, dy) = (angle.cos() as f32, angle.sin() as f32);
        for r in 0..h {
            for c in 0..w {
                let u = 2.0 * (c as f32 + 0.5) / w as f32 - 1.0;
                let v = 2.0 * (r as f32 + 0.5) / h as f32 - 1.0;
                let gain = 1.0 + params.brightness_gradient * (u * dx + v * dy) / 2f32.sqrt();
                for ch in 0..3 {
                    img[ch * h * w + r * w + c] *= gain;
                }
            }
        }
    }
    if params.blur_radius > 0 {
        for plane in img.chunks_exact_mut(h * w) {
            box_blur(plane, h, w, params.blur_radius);
        }
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
        img.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new([3, h, w], img).expect("3×H×W")
}

/// Separable mean filter with edge clamping.
fn box_blur(plane: &mut [f32], h: usize, w: usize, radius: usize) {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut tmp = vec![0.0f32; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let s: f32 = (-r..=r)
                .map(|d| plane[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize])
                .sum();
            tmp[y * w + x] = s * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let s: f32 = (-r..=r)
                .map(|d| tmp[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
            plane[y * w + x] = s * norm;
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn shift_hue(c: [f32; 3], degrees: f32) -> [f32; 3] {
    if degrees == 0.0 {
        return c;
    }
    let (h, s, v) = rgb_to_hsv(c);
    hsv_to_rgb(h + degrees, s, v)
}
