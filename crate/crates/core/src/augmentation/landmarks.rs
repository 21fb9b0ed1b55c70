//! 68-point facial landmarks, the region taxonomy built on them, and a
//! convex-hull rasterizer.
//!
//! Landmark groups follow the usual 68-point layout (0-based):
//! jaw 0–16, brows 17–26, nose bridge 27–30, nostrils 31–35, right eye 36–41,
//! left eye 42–47, mouth 48–67. "Left" and "right" are the subject's, so the
//! left eye appears on the image's right-hand side.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_LANDMARKS: usize = 68;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LandmarkError {
    #[error("expected {N_LANDMARKS} landmarks, got {0}")]
    WrongCount(usize),
    #[error("landmark {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("landmark {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("landmark JSON: {0}")]
    Json(String),
    #[error("unknown region {0:?}")]
    UnknownRegion(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, LandmarkError> {
        if points.len() != N_LANDMARKS {
            return Err(LandmarkError::WrongCount(points.len()));
        }
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(LandmarkError::NonFinite(i));
        }
        Ok(Self { points })
    }

    /// Parses a JSON array of 68 `[x, y]` pairs.
    pub fn from_json(text: &str) -> Result<Self, LandmarkError> {
        let points: Vec<[f64; 2]> =
            serde_json::from_str(text).map_err(|e| LandmarkError::Json(e.to_string()))?;
        Self::new(points)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.points).expect("finite points serialize")
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Clamps every point into `[0, width] × [0, height]`; returns how many moved.
    pub fn clamp_to(&mut self, height: usize, width: usize) -> usize {
        let mut moved = 0;
        for p in &mut self.points {
            let c = [p[0].clamp(0.0, width as f64), p[1].clamp(0.0, height as f64)];
            if c != *p {
                moved += 1;
                *p = c;
            }
        }
        moved
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<(), LandmarkError> {
        for (index, p) in self.points.iter().enumerate() {
            if !(0.0..=width as f64).contains(&p[0]) || !(0.0..=height as f64).contains(&p[1]) {
                return Err(LandmarkError::OutOfBounds {
                    index,
                    x: p[0],
                    y: p[1],
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    fn group(&self, range: std::ops::RangeInclusive<usize>) -> Vec<[f64; 2]> {
        self.points[range].to_vec()
    }

    /// x coordinate of the vertical line through the nose bridge.
    pub fn midline_x(&self) -> f64 {
        self.points[27..=30].iter().map(|p| p[0]).sum::<f64>() / 4.0
    }

    /// A synthetic frontal face filling a `size × size` canvas. Handy for tests and
    /// for the toy pipeline, where no detector supplies landmarks.
    pub fn template(size: f64) -> Self {
        let s = size / 32.0;
        let mut pts = Vec::with_capacity(N_LANDMARKS);
        // jaw: half ellipse from ear to ear
        for i in 0..17 {
            let t = std::f64::consts::PI * i as f64 / 16.0;
            pts.push([16.0 - 13.0 * t.cos(), 12.0 + 17.0 * t.sin()]);
        }
        // brows
        for i in 0..5 {
            pts.push([5.0 + 2.0 * i as f64, 7.0 - (i as f64 - 2.0).abs() * 0.5]);
        }
        for i in 0..5 {
            pts.push([19.0 + 2.0 * i as f64, 7.0 - (i as f64 - 2.0).abs() * 0.5]);
        }
        // nose bridge and nostrils
        for i in 0..4 {
            pts.push([16.0, 10.0 + 2.0 * i as f64]);
        }
        for i in 0..5 {
            pts.push([13.0 + 1.5 * i as f64, 18.5 + if i == 2 { 0.5 } else { 0.0 }]);
        }
        // eyes: six points on a small ellipse each
        for cx in [10.0, 22.0] {
            for i in 0..6 {
                let t = std::f64::consts::PI * i as f64 / 3.0;
                pts.push([cx - 3.0 * t.cos(), 11.0 - 1.5 * t.sin()]);
            }
        }
        // mouth: 12 outer + 8 inner
        for i in 0..12 {
            let t = 2.0 * std::f64::consts::PI * i as f64 / 12.0;
            pts.push([16.0 - 6.0 * t.cos(), 24.0 - 2.5 * t.sin()]);
        }
        for i in 0..8 {
            let t = 2.0 * std::f64::consts::PI * i as f64 / 8.0;
            pts.push([16.0 - 4.0 * t.cos(), 24.0 - 1.0 * t.sin()]);
        }
        let points = pts.into_iter().map(|[x, y]| [x * s, y * s]).collect();
        Self::new(points).expect("template has 68 finite points")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
    LeftHalf,
    RightHalf,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::LeftEye,
        Region::RightEye,
        Region::Nose,
        Region::Mouth,
        Region::LeftHalf,
        Region::RightHalf,
    ];

    /// 1-based id; the region-expert taxonomy appends Background as id 7.
    pub fn id(self) -> u16 {
        Region::ALL.iter().position(|&r| r == self).expect("listed") as u16 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::LeftHalf => "left_half",
            Region::RightHalf => "right_half",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = LandmarkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| LandmarkError::UnknownRegion(s.to_string()))
    }
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, no repeated end point.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

const EDGE_EPS: f64 = 1e-9;

/// Whether `p` lies inside or on a counter-clockwise convex polygon.
pub fn hull_contains(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    match hull.len() {
        0 => false,
        1 => (hull[0][0] - p[0]).abs() <= EDGE_EPS && (hull[0][1] - p[1]).abs() <= EDGE_EPS,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
            let t = (dx * (p[0] - a[0]) + dy * (p[1] - a[1])) / (dx * dx + dy * dy);
            cross.abs() <= EDGE_EPS * (dx.abs() + dy.abs()) && (0.0..=1.0).contains(&t)
        }
        n => (0..n).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % n];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -EDGE_EPS
        }),
    }
}

/// Marks the pixels whose centres `(col + 0.5, row + 0.5)` fall in the hull and
/// satisfy `keep(x)`. Row-major `height × width`.
pub fn rasterize_hull(
    hull: &[[f64; 2]],
    height: usize,
    width: usize,
    keep: impl Fn(f64) -> bool,
) -> Vec<bool> {
    let mut out = vec![false; height * width];
    if hull.is_empty() {
        return out;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in hull {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let lo = |v: f64, n: usize| ((v - 0.5).floor().max(0.0) as usize).min(n);
    let hi = |v: f64, n: usize| (((v - 0.5).ceil() + 1.0).max(0.0) as usize).min(n);
    for row in lo(y0, height)..hi(y1, height) {
        for col in lo(x0, width)..hi(x1, width) {
            let c = [col as f64 + 0.5, row as f64 + 0.5];
            if keep(c[0]) && hull_contains(hull, c) {
                out[row * width + col] = true;
            }
        }
    }
    out
}

/// Pixels of one region, without any bounds check on the landmarks: parts of the
/// face outside the canvas simply do not rasterize.
pub fn rasterize_region(
    landmarks: &LandmarkSet,
    region: Region,
    height: usize,
    width: usize,
) -> Vec<bool> {
    let everywhere = |_: f64| true;
    match region {
        Region::LeftEye => rasterize_hull(&convex_hull(&landmarks.group(42..=47)), height, width, everywhere),
        Region::RightEye => rasterize_hull(&convex_hull(&landmarks.group(36..=41)), height, width, everywhere),
        Region::Nose => rasterize_hull(&convex_hull(&landmarks.group(27..=35)), height, width, everywhere),
        Region::Mouth => rasterize_hull(&convex_hull(&landmarks.group(48..=67)), height, width, everywhere),
        Region::LeftHalf | Region::RightHalf => {
            let face = convex_hull(landmarks.points());
            let mid = landmarks.midline_x();
            if region == Region::LeftHalf {
                // the subject's left is the image's right
                rasterize_hull(&face, height, width, |x| x >= mid)
            } else {
                rasterize_hull(&face, height, width, |x| x < mid)
            }
        }
    }
}
