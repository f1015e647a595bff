use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::Point;
use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 81;

/// Index ranges of the 81-point layout: the 68-point jaw/brow/nose/eye/mouth
/// convention followed by 13 forehead points.
pub mod layout {
    use std::ops::Range;

    pub const JAW: Range<usize> = 0..17;
    pub const BROWS: Range<usize> = 17..27;
    pub const NOSE: Range<usize> = 27..36;
    pub const EYES: Range<usize> = 36..48;
    pub const MOUTH: Range<usize> = 48..68;
    pub const FOREHEAD: Range<usize> = 68..81;

    /// Brows and both eyes form one region.
    pub const EYE_REGION: Range<usize> = 17..48;
}

/// Pixel slack allowed outside the image before landmarks are rejected.
pub const BOUNDS_TOLERANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Format(format!(
                "expected {NUM_LANDMARKS} landmarks, found {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Format(format!("landmark {i} is not finite")));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn range(&self, r: Range<usize>) -> &[Point] {
        &self.points[r]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| p.translate(dx, dy)).collect(),
        }
    }

    /// Checks every point lies within the image up to [`BOUNDS_TOLERANCE`]
    /// and clamps the stragglers onto the image rectangle.
    pub fn fit_to_image(&self, width: usize, height: usize) -> Result<LandmarkSet> {
        let (w, h) = (width as f64, height as f64);
        let mut points = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            let t = BOUNDS_TOLERANCE;
            if p.x < -t || p.y < -t || p.x > w + t || p.y > h + t {
                return Err(Error::Geometry(format!(
                    "landmark {i} at ({}, {}) lies outside the {width}×{height} image",
                    p.x, p.y
                )));
            }
            points.push(Point::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h)));
        }
        Ok(LandmarkSet { points })
    }

    /// Parses the text format: one `x y` pair per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut coord = |name: &str| -> Result<f64> {
                let tok = it.next().ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    message: format!("missing {name} coordinate"),
                })?;
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    message: format!("`{tok}` is not a number"),
                })
            };
            let x = coord("x")?;
            let y = coord("y")?;
            if it.next().is_some() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "expected exactly two values".into(),
                });
            }
            points.push(Point::new(x, y));
        }
        LandmarkSet::new(points)
    }

    /// Shortest round-tripping decimal form, so save → load is bit-exact.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 24);
        for p in &self.points {
            writeln!(s, "{} {}", p.x, p.y).unwrap();
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    LandmarkSet::load(path)
}
