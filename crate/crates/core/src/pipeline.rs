//! Point cloud → normalized charge image.
//!
//! `preprocess_event` composes the optional nearest-neighbour filter, the
//! x-y projection, the optional circular Hough filter, rasterization and the
//! per-image `ln(1 + v)` + min-max scaling.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::simkit::EventCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major; row index follows y, column index follows x.
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageGrid { height, width, values: vec![0.0; height * width] }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("image dimensions must be > 0"));
        }
        if values.len() != height * width {
            return Err(Error::contract(format!(
                "image of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(ImageGrid { height, width, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.values)
    }
}

/// Summation with O(log n) error growth.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
    pub charge: f64,
}

pub type Points2D = Vec<Point2D>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoughParams {
    /// Candidate radii (mm) as [min, max]; `radius_steps` values spaced evenly.
    pub radius_range: [f64; 2],
    pub radius_steps: usize,
    /// Accumulator cell size for circle centres, mm.
    pub cell_size: f64,
    /// Angular samples per point and radius when casting votes.
    pub angle_samples: usize,
    /// Points within this distance (mm) of the winning circle are kept.
    pub keep_distance: f64,
}

impl Default for HoughParams {
    fn default() -> Self {
        HoughParams {
            radius_range: [10.0, 150.0],
            radius_steps: 141,
            cell_size: 2.0,
            angle_samples: 180,
            keep_distance: 4.0,
        }
    }
}

impl HoughParams {
    pub fn radii(&self) -> Vec<f64> {
        let [lo, hi] = self.radius_range;
        if self.radius_steps <= 1 || hi <= lo {
            return vec![lo];
        }
        let step = (hi - lo) / (self.radius_steps - 1) as f64;
        (0..self.radius_steps).map(|i| lo + step * i as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::contract("hough radius range must satisfy 0 < min <= max"));
        }
        if !(self.cell_size > 0.0 && self.keep_distance >= 0.0) || self.angle_samples == 0 {
            return Err(Error::contract("hough cell size, keep distance and angle samples must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub resolution: usize,
    /// Half-width (mm) of the square imaged region, centred on the beam axis.
    pub bounds: f64,
    pub apply_nn_filter: bool,
    pub nn_radius: f64,
    pub nn_min_neighbors: usize,
    pub apply_hough: bool,
    pub hough: HoughParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resolution: 128,
            bounds: 275.0,
            apply_nn_filter: false,
            nn_radius: 10.0,
            nn_min_neighbors: 2,
            apply_hough: false,
            hough: HoughParams::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::contract("resolution must be > 0"));
        }
        if !(self.bounds > 0.0 && self.bounds.is_finite()) {
            return Err(Error::contract("bounds must be > 0"));
        }
        if self.apply_nn_filter {
            if !(self.nn_radius > 0.0) {
                return Err(Error::contract("nn_radius must be > 0"));
            }
            if self.nn_min_neighbors == 0 {
                return Err(Error::contract("nn_min_neighbors must be >= 1"));
            }
        }
        if self.apply_hough {
            self.hough.validate()?;
        }
        Ok(())
    }
}

/// Drops z, keeping one 2-D entry per 3-D point.
pub fn project_xy(cloud: &EventCloud) -> Points2D {
    cloud.points.iter().map(|p| Point2D { x: p.x, y: p.y, charge: p.charge }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub image: ImageGrid,
    /// Points outside `[-bounds, bounds]²`.
    pub dropped: usize,
}

/// Bin index of `v` in `[-bounds, bounds]` split into `n` half-open bins, the
/// last one closed.
fn bin_of(v: f64, bounds: f64, n: usize) -> Option<usize> {
    if !(v >= -bounds && v <= bounds) {
        return None;
    }
    let idx = ((v + bounds) / (2.0 * bounds) * n as f64).floor() as usize;
    Some(idx.min(n - 1))
}

pub fn rasterize(points: &[Point2D], resolution: usize, bounds: f64) -> Result<Raster> {
    if resolution == 0 || !(bounds > 0.0) {
        return Err(Error::contract("rasterize needs resolution > 0 and bounds > 0"));
    }
    let mut image = ImageGrid::zeros(resolution, resolution);
    let mut dropped = 0;
    for p in points {
        match (bin_of(p.x, bounds, resolution), bin_of(p.y, bounds, resolution)) {
            (Some(col), Some(row)) => image.values[row * resolution + col] += p.charge,
            _ => dropped += 1,
        }
    }
    Ok(Raster { image, dropped })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scaled {
    pub image: ImageGrid,
    /// Set when the image was constant (including empty) and mapped to zeros.
    pub degenerate: bool,
}

pub fn log_minmax_scale(image: &ImageGrid) -> Result<Scaled> {
    if image.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract("log scaling needs finite non-negative pixel values"));
    }
    let logged: Vec<f64> = image.values.iter().map(|v| v.ln_1p()).collect();
    let (lo, hi) = logged.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(hi > lo) {
        return Ok(Scaled { image: ImageGrid::zeros(image.height, image.width), degenerate: true });
    }
    let span = hi - lo;
    let values = logged.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    Ok(Scaled { image: ImageGrid { height: image.height, width: image.width, values }, degenerate: false })
}

/// Keeps points with at least `min_neighbors` other points within `radius`
/// (3-D Euclidean), preserving order.
pub fn nn_filter(cloud: &EventCloud, radius: f64, min_neighbors: usize) -> Result<EventCloud> {
    if !(radius > 0.0) {
        return Err(Error::contract("nn_filter radius must be > 0"));
    }
    if min_neighbors == 0 {
        return Err(Error::contract("nn_filter min_neighbors must be >= 1"));
    }
    let r2 = radius * radius;
    let pts = &cloud.points;
    let keep: Vec<bool> = (0..pts.len())
        .map(|i| {
            let a = pts[i];
            let mut count = 0;
            for (j, b) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2);
                if d2 <= r2 {
                    count += 1;
                    if count >= min_neighbors {
                        return true;
                    }
                }
            }
            false
        })
        .collect();
    let points = pts.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
    Ok(EventCloud::new(cloud.id.clone(), cloud.label, points))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub votes: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoughResult {
    pub points: Points2D,
    pub circle: Option<Circle>,
    /// Too few points to define a circle; input returned unchanged.
    pub warning: bool,
}

/// Charge-weighted circular Hough transform over (centre, radius); keeps the
/// points lying within `keep_distance` of the best circle.
pub fn hough_circle_filter(points: &[Point2D], params: &HoughParams) -> Result<HoughResult> {
    params.validate()?;
    if points.len() < 3 {
        return Ok(HoughResult { points: points.to_vec(), circle: None, warning: true });
    }

    let radii = params.radii();
    let max_r = radii.iter().cloned().fold(0.0, f64::max);
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let (x0, y0) = (xmin - max_r, ymin - max_r);
    let cols = ((xmax + max_r - x0) / params.cell_size).floor() as usize + 1;
    let rows = ((ymax + max_r - y0) / params.cell_size).floor() as usize + 1;
    let plane = rows * cols;
    let trig: Vec<(f64, f64)> =
        (0..params.angle_samples).map(|a| (2.0 * PI * a as f64 / params.angle_samples as f64).sin_cos()).collect();

    // Votes plus the vote-weighted centre sums used to refine the peak cell.
    let mut acc = vec![0.0f64; plane * radii.len()];
    let mut sx = vec![0.0f64; plane * radii.len()];
    let mut sy = vec![0.0f64; plane * radii.len()];
    let mut seen = vec![usize::MAX; plane];
    for (ri, r) in radii.iter().enumerate() {
        let base = ri * plane;
        for (pi, p) in points.iter().enumerate() {
            let w = p.charge.max(0.0);
            if w == 0.0 {
                continue;
            }
            for (s, c) in &trig {
                let cx = p.x + r * c;
                let cy = p.y + r * s;
                let col = ((cx - x0) / params.cell_size) as usize;
                let row = ((cy - y0) / params.cell_size) as usize;
                let cell = row * cols + col;
                // One vote per point per cell.
                if seen[cell] == pi + ri * points.len() {
                    continue;
                }
                seen[cell] = pi + ri * points.len();
                acc[base + cell] += w;
                sx[base + cell] += w * cx;
                sy[base + cell] += w * cy;
            }
        }
    }

    let best = acc
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
        .0;
    if acc[best] <= 0.0 {
        return Ok(HoughResult { points: points.to_vec(), circle: None, warning: true });
    }
    let circle =
        Circle { cx: sx[best] / acc[best], cy: sy[best] / acc[best], radius: radii[best / plane], votes: acc[best] };
    let kept = points
        .iter()
        .filter(|p| {
            (((p.x - circle.cx).powi(2) + (p.y - circle.cy).powi(2)).sqrt() - circle.radius).abs()
                <= params.keep_distance
        })
        .copied()
        .collect();
    Ok(HoughResult { points: kept, circle: Some(circle), warning: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub image: ImageGrid,
    pub degenerate: bool,
    pub dropped: usize,
    pub hough_warning: bool,
}

pub fn preprocess_event(cloud: &EventCloud, config: &PreprocessConfig) -> Result<Preprocessed> {
    config.validate()?;
    cloud.validate()?;
    let filtered;
    let cloud = if config.apply_nn_filter {
        filtered = nn_filter(cloud, config.nn_radius, config.nn_min_neighbors)?;
        &filtered
    } else {
        cloud
    };
    let mut points = project_xy(cloud);
    let mut hough_warning = false;
    if config.apply_hough {
        let h = hough_circle_filter(&points, &config.hough)?;
        hough_warning = h.warning;
        points = h.points;
    }
    let raster = rasterize(&points, config.resolution, config.bounds)?;
    let scaled = log_minmax_scale(&raster.image)?;
    Ok(Preprocessed { image: scaled.image, degenerate: scaled.degenerate, dropped: raster.dropped, hough_warning })
}

/// Images for a batch of events, in input order.
pub fn preprocess_all(events: &[EventCloud], config: &PreprocessConfig) -> Result<Vec<Preprocessed>> {
    config.validate()?;
    par::map(events.iter().collect(), |e| preprocess_event(e, config)).into_iter().collect()
}

/// Size of the largest 8-connected component of nonzero pixels.
pub fn largest_component(image: &ImageGrid) -> usize {
    let (h, w) = (image.height, image.width);
    let mut seen = vec![false; h * w];
    let mut best = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || image.values[start] == 0.0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && image.values[j] != 0.0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        best = best.max(size);
    }
    best
}
