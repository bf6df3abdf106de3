use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SceneParams, Stroke};

/// Line-id value of clutter pixels.
pub const CLUTTER_ID: u8 = 255;

/// Planar 3×H×W 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let plane = self.width * self.height;
        let at = row * self.width + col;
        [
            self.data[at],
            self.data[plane + at],
            self.data[2 * plane + at],
        ]
    }
}

/// Binary H×W mask with values 0 and 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn positive(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }
}

/// Per-pixel owner plane: 0 background, `i + 1` for boundary `i`, [`CLUTTER_ID`] for clutter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineMask {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
}

impl LineMask {
    pub fn to_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .ids
                .iter()
                .map(|&id| if id != 0 { 255 } else { 0 })
                .collect(),
        }
    }

    /// Distinct non-background ids in ascending order.
    pub fn line_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        (1..=255u8).filter(|id| seen[*id as usize]).collect()
    }
}

/// Mask for `frame_offset ∈ [−n, n]`, plus the image when `frame_offset == 0`.
pub fn render(scene: &SceneParams, frame_offset: i64) -> (Option<RgbImage>, Mask) {
    let ids = render_line_ids(scene, frame_offset);
    let image = (frame_offset == 0).then(|| render_image(scene, &ids));
    (image, ids.to_mask())
}

/// Rasterizes the boundary strokes (and clutter) of one frame.
pub fn render_line_ids(scene: &SceneParams, frame_offset: i64) -> LineMask {
    let (w, h) = (scene.width, scene.height);
    let n = scene.temporal_radius() as i64;
    assert!(
        frame_offset.abs() <= n,
        "frame offset {frame_offset} outside radius {n}"
    );
    let frame = (frame_offset + n) as usize;
    let mut ids = vec![0u8; w * h];
    if !scene.ambiguous {
        for i in 0..scene.styles.len() {
            let run = scene.line_run(i, frame);
            let reach = scene.half_thickness * (1.0 + run * run).sqrt();
            for row in painted_rows(scene, i, frame) {
                let xc = scene.line_x(i, frame, row as f64);
                let lo = (xc - reach).ceil().max(0.0);
                let hi = (xc + reach).floor().min((w - 1) as f64);
                if lo > hi {
                    continue;
                }
                for x in lo as usize..=hi as usize {
                    ids[row * w + x] = (i + 1) as u8;
                }
            }
        }
    }
    let radius = 0.7 * w as f64 / 100.0;
    for stroke in &scene.clutter {
        paint_stroke(&mut ids, w, h, stroke, radius);
    }
    LineMask {
        width: w,
        height: h,
        ids,
    }
}

/// Rows per dash period and painted rows per period.
pub(crate) fn dash_pattern(height: usize) -> (usize, usize) {
    let scale = height as f64 / 100.0;
    let period = (13.0 * scale).round().max(2.0) as usize;
    let on = ((10.0 * scale).round() as usize).clamp(1, period - 1);
    (period, on)
}

/// Rows in which boundary `i` is painted at frame index `frame`. Solid lines
/// cover every row from the top row down; dashed lines keep only dashes that
/// lie wholly inside the painted band and the image.
pub(crate) fn painted_rows(scene: &SceneParams, i: usize, frame: usize) -> Vec<usize> {
    let (w, h) = (scene.width as f64, scene.height);
    let top = scene.top_row();
    if top >= h {
        return Vec::new();
    }
    let style = scene.styles[i];
    if !style.dashed {
        return (top..h).collect();
    }
    let run = scene.line_run(i, frame);
    let reach = scene.half_thickness * (1.0 + run * run).sqrt();
    let inside = |row: usize| {
        let x = scene.line_x(i, frame, row as f64);
        x - reach >= 0.0 && x + reach <= w - 1.0
    };
    let (period, on) = dash_pattern(h);
    let span = h - top;
    let mut rows = Vec::new();
    // dash k covers rows-from-bottom [k·period − phase, k·period − phase + on)
    let phase = style.phase % period;
    let mut start = period - phase;
    if phase == 0 {
        start = 0;
    }
    while start + on <= span {
        let dash: Vec<usize> = (start..start + on).map(|fb| h - 1 - fb).collect();
        if dash.iter().all(|&r| inside(r)) {
            rows.extend(dash);
        }
        start += period;
    }
    rows.sort_unstable();
    rows
}

fn paint_stroke(ids: &mut [u8], w: usize, h: usize, s: &Stroke, radius: f64) {
    let (x0, y0) = s.from;
    let (x1, y1) = s.to;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    let rmin = (y0.min(y1) - radius).floor().max(0.0) as usize;
    let rmax = ((y0.max(y1) + radius).ceil().max(0.0) as usize).min(h - 1);
    let cmin = (x0.min(x1) - radius).floor().max(0.0) as usize;
    let cmax = ((x0.max(x1) + radius).ceil().max(0.0) as usize).min(w - 1);
    for row in rmin..=rmax {
        for col in cmin..=cmax {
            let (px, py) = (col as f64 - x0, row as f64 - y0);
            let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
            let (ex, ey) = (px - t * dx, py - t * dy);
            if ex * ex + ey * ey <= radius * radius {
                ids[row * w + col] = CLUTTER_ID;
            }
        }
    }
}

fn paint_ghosts(rgb: &mut [f64], scene: &SceneParams) {
    let (w, h) = (scene.width, scene.height);
    let plane = w * h;
    let (vx, vy) = scene.vanishing_point;
    let depth = (h - 1) as f64 - vy;
    for g in &scene.ghosts {
        let run = (g.bottom_x - vx) / depth;
        let reach = scene.half_thickness * (1.0 + run * run).sqrt();
        let r0 = (vy + g.span.0 * depth).ceil().max(0.0) as usize;
        let r1 = ((vy + g.span.1 * depth).floor() as usize).min(h - 1);
        let contrast = scene.appearance.contrast * g.paint;
        for row in r0..=r1 {
            let xc = vx + (row as f64 - vy) * run;
            let lo = (xc - reach).ceil().max(0.0);
            let hi = (xc + reach).floor().min((w - 1) as f64);
            if lo > hi {
                continue;
            }
            for col in lo as usize..=hi as usize {
                for ch in 0..3 {
                    let v = &mut rgb[ch * plane + row * w + col];
                    *v += contrast * (240.0 * scene.appearance.brightness - *v);
                }
            }
        }
    }
}

fn paint_shadows(rgb: &mut [f64], scene: &SceneParams) {
    let (w, h) = (scene.width, scene.height);
    let plane = w * h;
    for s in &scene.shadows {
        let r0 = s.rows.0.ceil().max(scene.vanishing_point.1.ceil()) as usize;
        let r1 = (s.rows.1.floor() as usize).min(h - 1);
        for row in r0..=r1 {
            let left = s.offset + s.skew * (row as f64 - s.rows.0);
            let lo = left.ceil().max(0.0);
            let hi = (left + s.width).floor().min((w - 1) as f64);
            if lo > hi {
                continue;
            }
            for col in lo as usize..=hi as usize {
                for ch in 0..3 {
                    rgb[ch * plane + row * w + col] *= s.darkness;
                }
            }
        }
    }
}

fn paint_vehicle(rgb: &mut [f64], w: usize, h: usize, v: &super::Vehicle, brightness: f64) {
    let plane = w * h;
    let top = (v.bottom_row - v.height).round().max(0.0) as usize;
    let bottom = (v.bottom_row.round() as usize).min(h - 1);
    let left = (v.center_x - 0.5 * v.width).round().max(0.0);
    let right = (v.center_x + 0.5 * v.width).round().min((w - 1) as f64);
    if left > right {
        return;
    }
    let span = (bottom.saturating_sub(top) + 1) as f64;
    for row in top..=bottom {
        let t = (row - top) as f64 / span;
        // rear window in the upper band, dark bumper strip at the bottom
        let k = if t < 0.35 {
            0.55
        } else if t > 0.85 {
            0.35
        } else {
            1.0
        };
        for col in left as usize..=right as usize {
            let at = row * w + col;
            for ch in 0..3 {
                rgb[ch * plane + at] = v.color[ch] as f64 * k * brightness;
            }
        }
    }
}

/// Sky band above the horizon, gray pavement below it, painted strokes
/// where `ids` is set, then additive Gaussian noise.
pub fn render_image(scene: &SceneParams, ids: &LineMask) -> RgbImage {
    let (w, h) = (scene.width, scene.height);
    let plane = w * h;
    let a = scene.appearance;
    let horizon = scene.vanishing_point.1;
    let mut rgb = vec![0f64; 3 * plane];
    for row in 0..h {
        let r = row as f64;
        for col in 0..w {
            let base = if r < horizon {
                let t = r / horizon.max(1.0);
                [120.0 + 65.0 * t, 160.0 + 45.0 * t, 215.0 + 15.0 * t]
            } else {
                let g = 96.0 + a.road_tint + 14.0 * (r - horizon) / h as f64;
                [g, g, g + 3.0]
            };
            let at = row * w + col;
            let contrast = match ids.ids[at] {
                0 => 0.0,
                CLUTTER_ID => a.contrast,
                id => a.contrast * scene.styles[id as usize - 1].paint,
            };
            for ch in 0..3 {
                let v = base[ch] + contrast * (240.0 - base[ch]);
                rgb[ch * plane + at] = v * a.brightness;
            }
        }
    }
    paint_ghosts(&mut rgb, scene);
    paint_shadows(&mut rgb, scene);
    for v in &scene.vehicles {
        paint_vehicle(&mut rgb, w, h, v, a.brightness);
    }
    if a.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, a.noise_sigma).expect("finite sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(a.noise_seed);
        for v in rgb.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    RgbImage {
        width: w,
        height: h,
        data: rgb
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}
