//! Variant B: lane number from a lane binary mask alone.
//!
//! Connected strokes are fitted with total-least-squares lines, dashes of one
//! physical line are merged, and lines with positive slope are counted.
//! Slopes are taken in y-up coordinates (`y_up = H − 1 − row`), where boundary
//! lines left of the ego rise toward the vanishing point, so on a perfect mask
//! the positive-slope count equals the ego lane index counted from the left.

use serde::{Deserialize, Serialize};

/// Thresholds of the heuristic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub min_area: usize,
    pub merge_angle_deg: f64,
    pub merge_offset_px: f64,
    /// Fits steeper than this count by centroid side instead of slope sign.
    pub vertical_slope: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            min_area: 20,
            merge_angle_deg: 5.0,
            merge_offset_px: 3.0,
            vertical_slope: 10.0,
        }
    }
}

/// An 8-connected set of positive pixels, as `(row, col)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub id: usize,
    pub pixels: Vec<(usize, usize)>,
}

/// Labels 8-connected components of `mask` (row-major, `width` columns) and
/// drops those smaller than `min_area`. Ids follow raster order of each
/// component's first pixel, counted before filtering.
pub fn label_components(mask: &[u8], width: usize, min_area: usize) -> Vec<Component> {
    let height = if width == 0 { 0 } else { mask.len() / width };
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let mut next_id = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(at) = stack.pop() {
            let (r, c) = (at / width, at % width);
            pixels.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= height as i64 || nc >= width as i64 {
                        continue;
                    }
                    let nb = nr as usize * width + nc as usize;
                    if mask[nb] != 0 && !seen[nb] {
                        seen[nb] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        if pixels.len() >= min_area {
            pixels.sort_unstable();
            out.push(Component {
                id: next_id,
                pixels,
            });
        }
        next_id += 1;
    }
    out
}

/// First and second raw moments of a pixel set in `(x, y_up)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Moments {
    fn add(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn combine(&self, o: &Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            sx: self.sx + o.sx,
            sy: self.sy + o.sy,
            sxx: self.sxx + o.sxx,
            syy: self.syy + o.syy,
            sxy: self.sxy + o.sxy,
        }
    }
}

/// A fitted line candidate. `direction` is a unit vector in y-up coordinates
/// with `dy ≥ 0` (and `dx > 0` when horizontal).
#[derive(Clone, Debug, PartialEq)]
pub struct LineFit {
    /// `(x, y_up)`.
    pub centroid: (f64, f64),
    pub direction: (f64, f64),
    /// `dy / dx`; `f64::INFINITY` when `|dx| < 1e-9`.
    pub slope: f64,
    pub support: usize,
    pub source_component_ids: Vec<usize>,
    moments: Moments,
}

impl LineFit {
    fn from_moments(m: Moments, ids: Vec<usize>) -> Option<LineFit> {
        let (cx, cy) = (m.sx / m.n, m.sy / m.n);
        let a = (m.sxx / m.n - cx * cx).max(0.0);
        let c = (m.syy / m.n - cy * cy).max(0.0);
        let b = m.sxy / m.n - cx * cy;
        let scale = m.sxx.abs().max(m.syy.abs()).max(1.0) / m.n;
        if a + c <= 1e-12 * scale {
            return None;
        }
        let lambda = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (mut dx, mut dy) = if b.abs() <= 1e-15 * scale {
            if a >= c {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        } else if a >= c {
            (lambda - c, b)
        } else {
            (b, lambda - a)
        };
        let norm = dx.hypot(dy);
        dx /= norm;
        dy /= norm;
        if dy < 0.0 || (dy == 0.0 && dx < 0.0) {
            dx = -dx;
            dy = -dy;
        }
        let slope = if dx.abs() < 1e-9 {
            f64::INFINITY
        } else {
            dy / dx
        };
        Some(LineFit {
            centroid: (cx, cy),
            direction: (dx, dy),
            slope,
            support: m.n as usize,
            source_component_ids: ids,
            moments: m,
        })
    }

    /// Perpendicular distance from `p` (`(x, y_up)`) to this line.
    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = self.direction;
        ((p.0 - self.centroid.0) * dy - (p.1 - self.centroid.1) * dx).abs()
    }

    /// Angle in degrees between the two undirected lines.
    pub fn angle_to(&self, o: &LineFit) -> f64 {
        let dot = (self.direction.0 * o.direction.0 + self.direction.1 * o.direction.1).abs();
        dot.min(1.0).acos().to_degrees()
    }
}

/// Total-least-squares fit of `component` in a mask of `height` rows;
/// `None` when all pixels coincide.
pub fn fit_line(component: &Component, height: usize) -> Option<LineFit> {
    let mut m = Moments::default();
    for &(r, c) in &component.pixels {
        m.add(c as f64, (height - 1 - r) as f64);
    }
    if m.n == 0.0 {
        return None;
    }
    LineFit::from_moments(m, vec![component.id])
}

/// Repeatedly merges the first mergeable pair (in list order) into one
/// refitted line until no pair qualifies. The offset is measured from the
/// better-supported line to the other centroid.
pub fn merge_collinear(fits: &[LineFit], cfg: &HeuristicConfig) -> Vec<LineFit> {
    let mut fits = fits.to_vec();
    'outer: loop {
        for i in 0..fits.len() {
            for j in i + 1..fits.len() {
                if mergeable(&fits[i], &fits[j], cfg) {
                    let other = fits.remove(j);
                    let mut ids = fits[i].source_component_ids.clone();
                    ids.extend_from_slice(&other.source_component_ids);
                    ids.sort_unstable();
                    let merged =
                        LineFit::from_moments(fits[i].moments.combine(&other.moments), ids)
                            .expect("union of non-degenerate fits is non-degenerate");
                    fits[i] = merged;
                    continue 'outer;
                }
            }
        }
        return fits;
    }
}

fn mergeable(a: &LineFit, b: &LineFit, cfg: &HeuristicConfig) -> bool {
    if a.angle_to(b) >= cfg.merge_angle_deg {
        return false;
    }
    let offset = if a.support >= b.support {
        a.distance_to(b.centroid)
    } else {
        b.distance_to(a.centroid)
    };
    offset < cfg.merge_offset_px
}

/// Fits left after labelling, fitting and merging.
pub fn extract_lines(mask: &[u8], width: usize, cfg: &HeuristicConfig) -> Vec<LineFit> {
    let height = if width == 0 { 0 } else { mask.len() / width };
    let fits: Vec<LineFit> = label_components(mask, width, cfg.min_area)
        .iter()
        .filter_map(|c| fit_line(c, height))
        .collect();
    merge_collinear(&fits, cfg)
}

/// Whether a fit counts toward the lane number.
pub fn counts_as_left(fit: &LineFit, width: usize, cfg: &HeuristicConfig) -> bool {
    if fit.slope.is_infinite() || fit.slope.abs() > cfg.vertical_slope {
        fit.centroid.0 < width as f64 / 2.0
    } else {
        fit.slope > 0.0
    }
}

/// `min(#positive-slope lines, 4)`; 0 when nothing survives.
pub fn predict_lane_heuristic(mask: &[u8], width: usize, cfg: &HeuristicConfig) -> u8 {
    let lines = extract_lines(mask, width, cfg);
    lines
        .iter()
        .filter(|f| counts_as_left(f, width, cfg))
        .count()
        .min(4) as u8
}
