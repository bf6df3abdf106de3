//! Synthetic forward-facing road scenes with exact ground truth.
//!
//! A scene is a straight multi-lane road seen from a dashboard camera: lane
//! boundary lines run from x-intercepts on the bottom row toward a shared
//! vanishing point. The ego vehicle sits in lane `e` counted from the left,
//! so exactly `e` boundary lines lie left of the image center.

mod corrupt;
mod dataset;
mod render;
mod rng;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use corrupt::{corrupt, CorruptionConfig};
pub use dataset::{
    decode_samples, encode_samples, generate_sample, generate_samples, read_dataset, write_dataset,
    Dataset, DatasetManifest, DatasetRequest, Sample, Split, SplitName, SAMPLES_MAGIC,
    SAMPLES_VERSION,
};
pub use render::{render, render_image, render_line_ids, LineMask, Mask, RgbImage, CLUTTER_ID};
pub use rng::stream;

/// Largest lane count the generator draws.
pub const MAX_LANES: usize = 5;

/// Knobs of the scene generator (not of the detector-failure model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    /// Frames `t−n..t+n` are rendered per sample.
    pub temporal_radius: usize,
    /// Probability of a structure-free (class 0) scene.
    pub p_ambiguous: f64,
    /// Largest per-frame lateral ego shift, as a fraction of lane width.
    pub jitter_frac: f64,
    /// Standard deviation of additive image noise, in 8-bit levels.
    pub image_noise: f64,
    /// Lower end of the per-scene paint contrast range (upper end is 1).
    pub min_line_contrast: f64,
    /// Lower end of the per-line paint wear factor (1 = no wear).
    pub min_line_paint: f64,
    /// Probability that a boundary is almost entirely worn off in the image.
    pub p_worn_line: f64,
    /// Up to this many vehicles occlude the road in the image (not in masks).
    pub max_vehicles: usize,
    /// Up to this many faint leftover markings appear in the image (not in masks).
    pub max_ghost_lines: usize,
    /// Probability that shadow bands cross the road.
    pub shadow_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 100,
            width: 100,
            temporal_radius: 1,
            p_ambiguous: 0.1,
            jitter_frac: 0.08,
            image_noise: 15.0,
            min_line_contrast: 0.25,
            min_line_paint: 0.5,
            p_worn_line: 0.05,
            max_vehicles: 3,
            max_ghost_lines: 3,
            shadow_prob: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn frames(&self) -> usize {
        2 * self.temporal_radius + 1
    }
}

/// Per-boundary paint style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineStyle {
    pub dashed: bool,
    /// Row offset of the dash pattern.
    pub phase: usize,
    /// Wear factor applied to the scene's paint contrast.
    pub paint: f64,
}

/// A short straight mark (class-0 clutter).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub from: (f64, f64),
    pub to: (f64, f64),
}

/// A box-shaped vehicle ahead, drawn into the image only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub center_x: f64,
    pub bottom_row: f64,
    pub width: f64,
    pub height: f64,
    pub color: [u8; 3],
}

/// A worn leftover marking on a ray toward the vanishing point, drawn into the image only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostLine {
    pub bottom_x: f64,
    /// Painted between these fractions of the vanishing-point-to-bottom distance.
    pub span: (f64, f64),
    pub paint: f64,
}

/// A dark band across the road between two rows, drawn into the image only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shadow {
    pub rows: (f64, f64),
    /// Horizontal shear in pixels per row.
    pub skew: f64,
    pub offset: f64,
    pub width: f64,
    pub darkness: f64,
}

/// Photometric parameters of the rendered image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub brightness: f64,
    pub contrast: f64,
    pub road_tint: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

/// Ground-truth description of one scene. Coordinates are pixels with `x`
/// growing rightward and rows growing downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub lane_count: usize,
    /// 1-based, counted from the left.
    pub ego_lane: usize,
    /// `(x, row)` of the vanishing point; `row` is also the horizon.
    pub vanishing_point: (f64, f64),
    /// `lane_count + 1` strictly increasing bottom-row x-intercepts.
    pub bottom_offsets: Vec<f64>,
    pub lane_width: f64,
    pub ambiguous: bool,
    /// Lateral shift of every line's bottom intercept, per frame `t−n..t+n`.
    pub jitter: Vec<f64>,
    pub styles: Vec<LineStyle>,
    /// Lines are painted from this fraction of the vanishing-point-to-bottom
    /// distance down to the bottom row.
    pub top_frac: f64,
    pub half_thickness: f64,
    pub clutter: Vec<Stroke>,
    /// Far to near.
    pub vehicles: Vec<Vehicle>,
    pub ghosts: Vec<GhostLine>,
    pub shadows: Vec<Shadow>,
    pub appearance: Appearance,
}

impl SceneParams {
    /// Class label: 0 for ambiguous scenes, else `min(ego_lane, 4)`.
    pub fn label(&self) -> u8 {
        if self.ambiguous {
            0
        } else {
            self.ego_lane.min(4) as u8
        }
    }

    pub fn temporal_radius(&self) -> usize {
        self.jitter.len() / 2
    }

    /// Row of the vanishing point to bottom row distance.
    fn depth_rows(&self) -> f64 {
        (self.height - 1) as f64 - self.vanishing_point.1
    }

    /// Horizontal pixel shift per row (moving down) of boundary `i` at `frame`.
    pub fn line_run(&self, i: usize, frame: usize) -> f64 {
        (self.bottom_offsets[i] + self.jitter[frame] - self.vanishing_point.0) / self.depth_rows()
    }

    /// Center x of boundary `i` on `row` at frame index `frame` (0-based, `t−n` first).
    pub fn line_x(&self, i: usize, frame: usize, row: f64) -> f64 {
        let f = (row - self.vanishing_point.1) / self.depth_rows();
        let b = self.bottom_offsets[i] + self.jitter[frame];
        self.vanishing_point.0 + f * (b - self.vanishing_point.0)
    }

    /// First painted row.
    pub fn top_row(&self) -> usize {
        (self.vanishing_point.1 + self.top_frac * self.depth_rows()).ceil() as usize
    }

    /// Number of painted rows of boundary `i` at `frame` whose center lies inside the image.
    pub fn visible_rows(&self, i: usize, frame: usize) -> usize {
        render::painted_rows(self, i, frame)
            .into_iter()
            .filter(|&r| {
                let x = self.line_x(i, frame, r as f64);
                x >= 0.0 && x <= (self.width - 1) as f64
            })
            .count()
    }

    /// Boundaries strictly left of the image center on the bottom row of frame `t`.
    pub fn lines_left_of_center(&self) -> usize {
        let n = self.temporal_radius();
        let center = self.width as f64 / 2.0;
        self.bottom_offsets
            .iter()
            .filter(|b| **b + self.jitter[n] < center)
            .count()
    }
}

/// Draws one scene from `rng`. Geometry is re-drawn until every line that
/// determines the label is painted over enough rows to be measurable.
pub fn generate_scene(cfg: &GeneratorConfig, rng: &mut impl Rng) -> SceneParams {
    let ambiguous = rng.random::<f64>() < cfg.p_ambiguous;
    let appearance = Appearance {
        brightness: rng.random_range(0.7..1.15),
        contrast: rng.random_range(cfg.min_line_contrast.min(1.0)..=1.0),
        road_tint: rng.random_range(-6.0..6.0),
        noise_sigma: cfg.image_noise,
        noise_seed: rng.random(),
    };
    let clutter = if ambiguous {
        clutter_strokes(cfg, rng)
    } else {
        Vec::new()
    };
    loop {
        let mut scene = draw_geometry(cfg, rng, ambiguous);
        scene.appearance = appearance;
        scene.clutter = clutter.clone();
        if ambiguous || geometry_is_measurable(&scene) {
            scene.vehicles = vehicles(cfg, &scene, rng);
            scene.ghosts = ghost_lines(cfg, &scene, rng);
            scene.shadows = shadows(cfg, &scene, rng);
            return scene;
        }
    }
}

fn draw_geometry(cfg: &GeneratorConfig, rng: &mut impl Rng, ambiguous: bool) -> SceneParams {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let scale = w / 100.0;
    let lane_count = rng.random_range(1..=MAX_LANES);
    let ego_lane = rng.random_range(1..=lane_count);
    let lane_width = rng.random_range(0.20..0.26) * w;
    // image center sits in the inner 40% of the ego lane
    let within = rng.random_range(0.3..0.7);
    let ego_left = w / 2.0 - within * lane_width;
    let bottom_offsets: Vec<f64> = (0..=lane_count)
        .map(|i| ego_left + (i as f64 - (ego_lane - 1) as f64) * lane_width)
        .collect();
    let vy = rng.random_range(0.28..0.34) * h;
    let vx = w / 2.0 + rng.random_range(-0.05..0.05) * lane_width;
    let frames = cfg.frames();
    let jitter: Vec<f64> = (0..frames)
        .map(|k| {
            if k == cfg.temporal_radius || cfg.jitter_frac == 0.0 {
                0.0
            } else {
                rng.random_range(-cfg.jitter_frac..=cfg.jitter_frac) * lane_width
            }
        })
        .collect();
    let styles: Vec<LineStyle> = (0..=lane_count)
        .map(|i| LineStyle {
            dashed: i != 0 && i != lane_count,
            phase: rng.random_range(0..64),
            paint: if rng.random::<f64>() < cfg.p_worn_line {
                rng.random_range(0.0..0.12)
            } else {
                rng.random_range(cfg.min_line_paint.min(1.0)..=1.0)
            },
        })
        .collect();
    let half_thickness = 1.3 * scale;
    let mut scene = SceneParams {
        width: cfg.width,
        height: cfg.height,
        lane_count,
        ego_lane,
        vanishing_point: (vx, vy),
        bottom_offsets,
        lane_width,
        ambiguous,
        jitter,
        styles,
        top_frac: 0.0,
        half_thickness,
        clutter: Vec::new(),
        vehicles: Vec::new(),
        ghosts: Vec::new(),
        shadows: Vec::new(),
        appearance: Appearance {
            brightness: 1.0,
            contrast: 1.0,
            road_tint: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        },
    };
    scene.top_frac = separation_top_frac(&scene, scale);
    scene
}

/// Smallest painted depth fraction at which neighbouring strokes still leave a
/// background gap, so 8-connected labelling cannot bridge two lines.
fn separation_top_frac(scene: &SceneParams, scale: f64) -> f64 {
    let depth = scene.depth_rows();
    let max_jitter = scene.jitter.iter().fold(0.0f64, |m, j| m.max(j.abs()));
    let run = |b: f64| (b.abs() + max_jitter) / depth;
    let mut frac: f64 = 0.25;
    for pair in scene.bottom_offsets.windows(2) {
        let (r0, r1) = (
            run(pair[0] - scene.vanishing_point.0),
            run(pair[1] - scene.vanishing_point.0),
        );
        let hw = |r: f64| scene.half_thickness * (1.0 + r * r).sqrt();
        let needed = 1.5 * scale + r0.max(r1) + hw(r0) + hw(r1);
        frac = frac.max(needed / scene.lane_width);
    }
    frac.min(0.6)
}

/// The `min(e, 4)` boundaries nearest the ego on the left, and the ego's right
/// boundary, must show at least one whole dash (dashed lines) or 16 rows at
/// 100 px height (solid lines) in every frame.
fn geometry_is_measurable(scene: &SceneParams) -> bool {
    let solid_rows = (16.0 * scene.height as f64 / 100.0).ceil() as usize;
    let dash_rows = render::dash_pattern(scene.height).1;
    let e = scene.ego_lane;
    let required = (e.saturating_sub(4)..e).chain(std::iter::once(e));
    let frames = scene.jitter.len();
    let center = scene.width as f64 / 2.0;
    let ego_ok = (0..frames).all(|k| {
        scene.bottom_offsets[e - 1] + scene.jitter[k] < center
            && scene.bottom_offsets[e] + scene.jitter[k] > center
    });
    ego_ok
        && required.into_iter().all(|i| {
            let min_rows = if scene.styles[i].dashed {
                dash_rows
            } else {
                solid_rows
            };
            (0..frames).all(|k| scene.visible_rows(i, k) >= min_rows)
        })
}

/// Vehicles in random lanes at random depths, scaled by perspective.
fn vehicles(cfg: &GeneratorConfig, scene: &SceneParams, rng: &mut impl Rng) -> Vec<Vehicle> {
    let count = rng.random_range(0..=cfg.max_vehicles);
    let n = scene.temporal_radius();
    let depth = scene.depth_rows();
    let mut out: Vec<Vehicle> = (0..count)
        .map(|_| {
            let lane = rng.random_range(0..scene.lane_count);
            let f = rng.random_range(scene.top_frac.max(0.2)..0.9);
            let row = scene.vanishing_point.1 + f * depth;
            let center = 0.5 * (scene.line_x(lane, n, row) + scene.line_x(lane + 1, n, row))
                + rng.random_range(-0.1..0.1) * scene.lane_width * f;
            let width = rng.random_range(0.6..0.85) * scene.lane_width * f;
            let shade = rng.random_range(30.0..220.0);
            let tint: [f64; 3] = [
                rng.random_range(0.7..1.2),
                rng.random_range(0.7..1.2),
                rng.random_range(0.7..1.2),
            ];
            Vehicle {
                center_x: center,
                bottom_row: row,
                width,
                height: width * rng.random_range(0.7..1.0),
                color: tint.map(|t| (shade * t).clamp(0.0, 255.0) as u8),
            }
        })
        .collect();
    out.sort_by(|a, b| a.bottom_row.total_cmp(&b.bottom_row));
    out
}

/// Leftover markings at least a third of a lane away from every real boundary.
fn ghost_lines(cfg: &GeneratorConfig, scene: &SceneParams, rng: &mut impl Rng) -> Vec<GhostLine> {
    let count = rng.random_range(0..=cfg.max_ghost_lines);
    if scene.ambiguous {
        return Vec::new();
    }
    let w = scene.width as f64;
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 50 * (count + 1) {
        tries += 1;
        let bottom_x = rng.random_range(-0.5 * w..1.5 * w);
        let a = rng.random_range(scene.top_frac..0.9);
        let b = rng.random_range(a + 0.1..1.1).min(1.0);
        let paint = rng.random_range(0.25..0.6);
        if scene
            .bottom_offsets
            .iter()
            .all(|x| (x - bottom_x).abs() > scene.lane_width / 3.0)
        {
            out.push(GhostLine {
                bottom_x,
                span: (a, b),
                paint,
            });
        }
    }
    out
}

fn shadows(cfg: &GeneratorConfig, scene: &SceneParams, rng: &mut impl Rng) -> Vec<Shadow> {
    if rng.random::<f64>() >= cfg.shadow_prob {
        return Vec::new();
    }
    let (top, h) = (scene.vanishing_point.1, scene.height as f64);
    let w = scene.width as f64;
    (0..rng.random_range(1..=3))
        .map(|_| {
            let r0 = rng.random_range(top..h);
            let height = rng.random_range(0.05..0.25) * h;
            Shadow {
                rows: (r0, (r0 + height).min(h)),
                skew: rng.random_range(-1.5..1.5),
                offset: rng.random_range(-0.2 * w..0.8 * w),
                width: rng.random_range(0.3..1.2) * w,
                darkness: rng.random_range(0.45..0.75),
            }
        })
        .collect()
}

fn clutter_strokes(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Vec<Stroke> {
    let scale = cfg.width as f64 / 100.0;
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            let x = rng.random_range(0.1..0.9) * cfg.width as f64;
            let y = rng.random_range(0.45..0.95) * cfg.height as f64;
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let len = rng.random_range(3.0..6.0) * scale;
            Stroke {
                from: (x, y),
                to: (x + len * angle.cos(), y + len * angle.sin()),
            }
        })
        .collect()
}
