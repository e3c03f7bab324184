//! Procedural street scenes.
//!
//! Layers are painted back to front, each overwriting colour and label:
//! sky, ground (sidewalk), buildings, extra street furniture, vegetation,
//! road, then vehicles and people. Every sample is a pure function of the
//! configuration and its index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SceneSample;
use crate::error::{Error, Result};

pub const DESK_CLASSES: [&str; 6] = ["road", "sidewalk", "building", "vegetation", "sky", "car"];

pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Classes beyond the desk six, in the order they are added when
/// `6 < num_classes < 19`.
const EXTRA_CLASSES: [&str; 13] = [
    "pole",
    "traffic sign",
    "person",
    "terrain",
    "wall",
    "fence",
    "traffic light",
    "truck",
    "bus",
    "rider",
    "bicycle",
    "motorcycle",
    "train",
];

/// Class names indexed by label id.
pub fn class_names(num_classes: usize) -> Result<Vec<String>> {
    let names: Vec<&str> = match num_classes {
        19 => CITYSCAPES_CLASSES.to_vec(),
        6..=18 => DESK_CLASSES.iter().chain(&EXTRA_CLASSES[..num_classes - 6]).copied().collect(),
        _ => {
            return Err(Error::config(format!(
                "scenes support 6 to 19 classes, got {num_classes}"
            )))
        }
    };
    Ok(names.into_iter().map(String::from).collect())
}

fn base_color(name: &str) -> [f64; 3] {
    match name {
        "road" => [0.36, 0.35, 0.38],
        "sidewalk" => [0.68, 0.64, 0.58],
        "building" => [0.56, 0.42, 0.34],
        "vegetation" => [0.22, 0.48, 0.18],
        "sky" => [0.55, 0.72, 0.92],
        "car" => [0.72, 0.14, 0.14],
        "wall" => [0.62, 0.60, 0.52],
        "fence" => [0.45, 0.38, 0.26],
        "pole" => [0.20, 0.20, 0.22],
        "traffic light" => [0.90, 0.75, 0.10],
        "traffic sign" => [0.95, 0.90, 0.20],
        "terrain" => [0.55, 0.62, 0.30],
        "person" => [0.85, 0.55, 0.45],
        "rider" => [0.30, 0.20, 0.60],
        "truck" => [0.15, 0.30, 0.55],
        "bus" => [0.90, 0.50, 0.10],
        "train" => [0.60, 0.62, 0.70],
        "motorcycle" => [0.10, 0.10, 0.10],
        "bicycle" => [0.10, 0.55, 0.55],
        _ => [0.5, 0.5, 0.5],
    }
}

/// Alternative body colours drawn per vehicle.
const CAR_COLORS: [[f64; 3]; 4] = [[0.72, 0.14, 0.14], [0.12, 0.22, 0.70], [0.88, 0.80, 0.20], [0.90, 0.90, 0.92]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Horizon row as a fraction of the height.
    pub horizon: (f64, f64),
    /// Road width at the bottom edge, as a fraction of the width.
    pub road_bottom: (f64, f64),
    /// Road width at the horizon, as a fraction of the width.
    pub road_top: (f64, f64),
    pub buildings: (usize, usize),
    /// Building height above the horizon, as a fraction of the height.
    pub building_height: (f64, f64),
    pub vegetation: (usize, usize),
    /// Ellipse radius, as a fraction of the height.
    pub vegetation_radius: (f64, f64),
    pub vehicles: (usize, usize),
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Per-image, per-class colour jitter amplitude.
    pub jitter: f64,
    /// Blend weight towards a channel-rotated palette; 0 keeps the
    /// reference palette.
    pub palette_shift: f64,
    /// Width of a frame of ignore-labelled pixels.
    pub ignore_border: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_classes: 6,
            height: 128,
            width: 128,
            seed: 0,
            horizon: (0.32, 0.5),
            road_bottom: (0.5, 0.9),
            road_top: (0.04, 0.16),
            buildings: (1, 4),
            building_height: (0.12, 0.35),
            vegetation: (1, 3),
            vegetation_radius: (0.05, 0.12),
            vehicles: (0, 3),
            noise: 0.03,
            jitter: 0.05,
            palette_shift: 0.0,
            ignore_border: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        class_names(self.num_classes)?;
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!("scene extents {}x{} below 16", self.height, self.width)));
        }
        let ranges = [
            ("horizon", self.horizon),
            ("road_bottom", self.road_bottom),
            ("road_top", self.road_top),
            ("building_height", self.building_height),
            ("vegetation_radius", self.vegetation_radius),
        ];
        for (name, (lo, hi)) in ranges {
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        for (name, (lo, hi)) in [("buildings", self.buildings), ("vegetation", self.vegetation), ("vehicles", self.vehicles)] {
            if lo > hi {
                return Err(Error::config(format!("{name} count range ({lo}, {hi}) is empty")));
            }
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0 && (0.0..=1.0).contains(&self.palette_shift)) {
            return Err(Error::config("noise and jitter must be non-negative, palette_shift in [0, 1]"));
        }
        if 2 * self.ignore_border >= self.height.min(self.width) {
            return Err(Error::config("ignore_border covers the whole image"));
        }
        Ok(())
    }

    /// Stable identifier of sample `index`.
    pub fn sample_id(index: u64) -> String {
        format!("s{index:07}")
    }
}

struct Canvas<'a> {
    h: usize,
    w: usize,
    classes: &'a [String],
    labels: Vec<u8>,
    color: Vec<[f64; 3]>,
    palette: Vec<[f64; 3]>,
}

impl Canvas<'_> {
    fn id(&self, name: &str) -> Option<u8> {
        self.classes.iter().position(|c| c == name).map(|i| i as u8)
    }

    fn paint(&mut self, y: usize, x: usize, class: u8, color: [f64; 3]) {
        let i = y * self.w + x;
        self.labels[i] = class;
        self.color[i] = color;
    }

    /// Fills the clipped rectangle `[y0, y1) × [x0, x1)` in a class colour,
    /// scaled by `shade`.
    fn rect(&mut self, name: &str, (y0, y1): (f64, f64), (x0, x1): (f64, f64), shade: f64) {
        let Some(class) = self.id(name) else { return };
        let c = self.palette[class as usize].map(|v| v * shade);
        let (ya, yb) = (clip(y0, self.h), clip(y1, self.h));
        let (xa, xb) = (clip(x0, self.w), clip(x1, self.w));
        for y in ya..yb {
            for x in xa..xb {
                self.paint(y, x, class, c);
            }
        }
    }
}

fn clip(v: f64, n: usize) -> usize {
    v.round().clamp(0.0, n as f64) as usize
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn count<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Renders sample `index` of the scene distribution.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let classes = class_names(cfg.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);

    let palette: Vec<[f64; 3]> = classes
        .iter()
        .map(|name| {
            let base = base_color(name);
            let rotated = [base[1], base[2], base[0]];
            let mut c = [0.0; 3];
            for k in 0..3 {
                let j = uniform(&mut rng, (-cfg.jitter, cfg.jitter));
                c[k] = (1.0 - cfg.palette_shift) * base[k] + cfg.palette_shift * rotated[k] + j;
            }
            c
        })
        .collect();
    let mut cv = Canvas {
        h,
        w,
        classes: &classes,
        labels: vec![0; h * w],
        color: vec![[0.0; 3]; h * w],
        palette,
    };

    let horizon = uniform(&mut rng, cfg.horizon) * hf;
    let hz = clip(horizon, h);

    // Sky brightens towards the horizon.
    let sky = cv.id("sky").expect("sky is a desk class");
    for y in 0..hz {
        let c = cv.palette[sky as usize].map(|v| v * (0.85 + 0.15 * y as f64 / horizon.max(1.0)));
        for x in 0..w {
            cv.paint(y, x, sky, c);
        }
    }
    cv.rect("sidewalk", (horizon, hf), (0.0, wf), 1.0);
    if cv.id("terrain").is_some() && rng.random_bool(0.6) {
        let x0 = if rng.random_bool(0.5) { 0.0 } else { wf * 0.7 };
        cv.rect("terrain", (horizon, horizon + uniform(&mut rng, (0.1, 0.3)) * hf), (x0, x0 + 0.3 * wf), 1.0);
    }

    // Buildings rest on the horizon; their tops stay below 8% of the height
    // so a sky band always survives.
    for _ in 0..count(&mut rng, cfg.buildings) {
        let bw = uniform(&mut rng, (0.1, 0.3)) * wf;
        let x0 = uniform(&mut rng, (-0.05, 0.95)) * wf;
        let top = (horizon - uniform(&mut rng, cfg.building_height) * hf).max(0.08 * hf);
        let shade = uniform(&mut rng, (0.8, 1.1));
        cv.rect("building", (top, horizon + 0.02 * hf), (x0, x0 + bw), shade);
        // Rows of darker windows.
        let mut wy = top + 0.03 * hf;
        while wy + 0.04 * hf < horizon {
            let mut wx = x0 + 0.02 * wf;
            while wx + 0.03 * wf < x0 + bw {
                cv.rect("building", (wy, wy + 0.025 * hf), (wx, wx + 0.02 * wf), shade * 0.6);
                wx += 0.05 * wf;
            }
            wy += 0.06 * hf;
        }
    }
    if cv.id("wall").is_some() && rng.random_bool(0.5) {
        let x0 = uniform(&mut rng, (0.0, 0.6)) * wf;
        cv.rect("wall", (horizon - 0.06 * hf, horizon + 0.03 * hf), (x0, x0 + 0.3 * wf), 1.0);
    }
    if cv.id("fence").is_some() && rng.random_bool(0.5) {
        let x0 = uniform(&mut rng, (0.0, 0.7)) * wf;
        let (y0, y1) = (horizon + 0.02 * hf, horizon + 0.07 * hf);
        let mut x = x0;
        while x < x0 + 0.25 * wf {
            cv.rect("fence", (y0, y1), (x, x + 0.015 * wf), 1.0);
            x += 0.04 * wf;
        }
        cv.rect("fence", (y0, y0 + 0.012 * hf), (x0, x0 + 0.25 * wf), 1.0);
    }

    for _ in 0..count(&mut rng, cfg.vegetation) {
        let r = uniform(&mut rng, cfg.vegetation_radius) * hf;
        let (ry, rx) = (r * uniform(&mut rng, (0.8, 1.3)), r * uniform(&mut rng, (1.0, 1.8)));
        let cy = horizon - uniform(&mut rng, (-0.2, 0.6)) * ry;
        let cx = uniform(&mut rng, (0.0, 1.0)) * wf;
        let Some(veg) = cv.id("vegetation") else { continue };
        let base = cv.palette[veg as usize];
        for y in clip(cy - ry, h)..clip(cy + ry, h) {
            for x in clip(cx - rx, w)..clip(cx + rx, w) {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    // Leafy speckle.
                    let s = if (x * 7 + y * 13) % 5 == 0 { 0.8 } else { 1.0 };
                    cv.paint(y, x, veg, base.map(|v| v * s));
                }
            }
        }
    }

    // Road trapezoid from the horizon to the bottom edge with dashed centre
    // markings that keep the road label.
    let road = cv.id("road").expect("road is a desk class");
    let cx_bottom = uniform(&mut rng, (0.35, 0.65)) * wf;
    let cx_top = uniform(&mut rng, (0.4, 0.6)) * wf;
    let half_bottom = uniform(&mut rng, cfg.road_bottom) * wf / 2.0;
    let half_top = uniform(&mut rng, cfg.road_top) * wf / 2.0;
    let road_at = |y: f64| {
        let t = ((y - horizon) / (hf - horizon)).clamp(0.0, 1.0);
        let c = cx_top + t * (cx_bottom - cx_top);
        let half = half_top + t * (half_bottom - half_top);
        (c, half)
    };
    let road_color = cv.palette[road as usize];
    for y in hz..h {
        let (c, half) = road_at(y as f64 + 0.5);
        let t = (y as f64 + 0.5 - horizon) / (hf - horizon);
        let dash = ((t * 12.0).floor() as i64) % 2 == 0;
        for x in clip(c - half, w)..clip(c + half, w) {
            let marking = dash && (x as f64 + 0.5 - c).abs() < (0.5 + 1.5 * t).max(0.5);
            let col = if marking { [0.92, 0.92, 0.88] } else { road_color };
            cv.paint(y, x, road, col);
        }
    }

    // Poles and signs stand at the road edge.
    for name in ["pole", "traffic light", "traffic sign"] {
        if cv.id(name).is_none() || !rng.random_bool(0.7) {
            continue;
        }
        let yb = uniform(&mut rng, (horizon + 0.1 * hf, hf));
        let (c, half) = road_at(yb);
        let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let x = c + side * (half + 0.03 * wf);
        let tall = 0.3 * (yb - horizon + 0.1 * hf);
        cv.rect("pole", (yb - tall, yb), (x - 0.008 * wf, x + 0.008 * wf), 1.0);
        if name != "pole" {
            let s = 0.035 * wf;
            cv.rect(name, (yb - tall - s, yb - tall + s * 0.5), (x - s * 0.5, x + s * 0.5), 1.0);
        }
    }

    // Vehicles and people sit on the road, scaled by perspective.
    let mut movers: Vec<&str> = vec!["car"; count(&mut rng, cfg.vehicles)];
    for name in ["person", "rider", "truck", "bus", "train", "motorcycle", "bicycle"] {
        if cv.id(name).is_some() && rng.random_bool(0.5) {
            movers.push(name);
        }
    }
    let mut placed: Vec<(f64, &str)> = movers
        .into_iter()
        .map(|name| (uniform(&mut rng, (horizon + 0.15 * (hf - horizon), hf - 2.0)), name))
        .collect();
    // Far objects first so nearer ones occlude them.
    placed.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (yb, name) in placed {
        let (c, half) = road_at(yb);
        let scale = (yb - horizon) / (hf - horizon);
        let (bw, bh) = match name {
            "car" => (0.22, 0.12),
            "truck" => (0.3, 0.2),
            "bus" => (0.35, 0.25),
            "train" => (0.6, 0.22),
            "person" | "rider" => (0.05, 0.16),
            _ => (0.08, 0.08),
        };
        let (vw, vh) = (bw * wf * scale, bh * hf * scale);
        let x = c + uniform(&mut rng, (-0.7, 0.7)) * (half - vw / 2.0).max(0.0);
        if name == "car" {
            let body = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
            let car = cv.id("car").expect("car is a desk class");
            let j = cv.palette[car as usize];
            let base = base_color("car");
            let col = [0, 1, 2].map(|k| (body[k] + j[k] - base[k]).clamp(0.0, 1.0));
            for y in clip(yb - vh, h)..clip(yb, h) {
                for xx in clip(x - vw / 2.0, w)..clip(x + vw / 2.0, w) {
                    // Darker windscreen in the upper third.
                    let top = (y as f64) < yb - vh * 0.66;
                    cv.paint(y, xx, car, if top { col.map(|v| v * 0.45) } else { col });
                }
            }
        } else {
            cv.rect(name, (yb - vh, yb), (x - vw / 2.0, x + vw / 2.0), 1.0);
        }
    }

    if cfg.ignore_border > 0 {
        let b = cfg.ignore_border;
        for y in 0..h {
            for x in 0..w {
                if y < b || x < b || y >= h - b || x >= w - b {
                    cv.labels[y * w + x] = super::IGNORE;
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid deviation");
    let mut image = Vec::with_capacity(h * w * 3);
    for c in &cv.color {
        for v in c {
            let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // Quantised to 8 bits so a PNG round trip is exact.
            image.push(((v + n).clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
        }
    }
    Ok(SceneSample {
        id: SceneConfig::sample_id(index),
        height: h,
        width: w,
        image,
        labels: cv.labels,
    })
}
