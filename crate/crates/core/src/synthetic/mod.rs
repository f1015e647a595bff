//! Procedural face-like images with analytic 81-point landmarks, the four
//! manipulation families applied to them, and dataset generation on disk.

mod dataset;
mod manipulate;

pub use dataset::{generate_dataset, DatasetSpec, IMAGE_DIR, LANDMARK_DIR, MANIFEST_FILE};
pub use manipulate::{apply_manipulation, FamilyKind, ManipulationFamily};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfss::{LandmarkSet, Point};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_CANVAS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub seed: u64,
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub center: Point,
    /// Horizontal and vertical face semi-axes.
    pub axes: (f64, f64),
    /// Left then right eye centre.
    pub eye_centers: [Point; 2],
    /// Eye semi-axes.
    pub eye_radii: (f64, f64),
    pub iris_radius: f64,
    /// Gap between the top of an eye and its brow.
    pub brow_gap: f64,
    pub brow_arch: f64,
    /// Nose bridge top and tip.
    pub nose_top: Point,
    pub nose_tip: Point,
    pub nostril_half_width: f64,
    pub mouth_center: Point,
    pub mouth_half_width: f64,
    /// Upper and lower lip heights.
    pub lip_heights: (f64, f64),
    /// Inner-mouth half height; zero for a closed mouth.
    pub mouth_open: f64,
    pub skin: [f64; 3],
    pub background: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    /// Standard deviation of the per-pixel texture noise.
    pub noise_amplitude: f64,
}

fn jitter(rng: &mut impl Rng, v: f64, spread: f64) -> f64 {
    v + rng.random_range(-spread..=spread)
}

impl FaceParams {
    /// Draws a face for the default canvas.
    pub fn sample(seed: u64) -> FaceParams {
        let mut rng = seed::rng(seed, &[0xface]);
        let r = &mut rng;
        let c = DEFAULT_CANVAS as f64 / 128.0;
        let center = Point::new(jitter(r, 64.0, 4.0) * c, jitter(r, 66.0, 4.0) * c);
        let (a, b) = (jitter(r, 37.0, 3.0) * c, jitter(r, 47.0, 3.0) * c);
        let eye_y = center.y - jitter(r, 0.2, 0.03) * b;
        let eye_dx = jitter(r, 0.4, 0.04) * a;
        let erx = jitter(r, 0.19, 0.02) * a;
        let ery = erx * jitter(r, 0.5, 0.08);
        let nose_tip = Point::new(center.x + jitter(r, 0.0, 0.03) * a, center.y + jitter(r, 0.17, 0.03) * b);
        let mouth_center = Point::new(center.x, center.y + jitter(r, 0.5, 0.04) * b);
        let skin_tone: f64 = r.random_range(0.35..0.85);
        let skin = [
            (skin_tone + 0.12).min(1.0),
            skin_tone * jitter(r, 0.85, 0.05),
            skin_tone * jitter(r, 0.7, 0.08),
        ];
        let background = [r.random_range(0.05..0.95), r.random_range(0.05..0.95), r.random_range(0.05..0.95)];
        let iris = [r.random_range(0.05..0.5), r.random_range(0.1..0.5), r.random_range(0.05..0.6)];
        let lips = [
            jitter(r, 0.7, 0.1) * skin[0],
            jitter(r, 0.45, 0.08) * skin[1],
            jitter(r, 0.5, 0.08) * skin[2],
        ];
        FaceParams {
            seed,
            canvas: DEFAULT_CANVAS,
            center,
            axes: (a, b),
            eye_centers: [Point::new(center.x - eye_dx, eye_y), Point::new(center.x + eye_dx, eye_y)],
            eye_radii: (erx, ery),
            iris_radius: ery * jitter(r, 0.8, 0.1),
            brow_gap: jitter(r, 0.09, 0.02) * b,
            brow_arch: jitter(r, 0.04, 0.02) * b,
            nose_top: Point::new(center.x, eye_y),
            nose_tip,
            nostril_half_width: jitter(r, 0.16, 0.03) * a,
            mouth_center,
            mouth_half_width: jitter(r, 0.32, 0.05) * a,
            lip_heights: (jitter(r, 0.06, 0.015) * b, jitter(r, 0.075, 0.015) * b),
            mouth_open: if r.random_bool(0.5) { jitter(r, 0.025, 0.01) * b } else { 0.0 },
            skin,
            background,
            iris,
            lips,
            noise_amplitude: r.random_range(0.03..0.045),
        }
    }

    /// The 81 landmarks in the standard layout.
    pub fn landmarks(&self) -> Vec<Point> {
        let mut pts = Vec::with_capacity(81);
        let (cx, cy) = (self.center.x, self.center.y);
        let (a, b) = self.axes;
        let on_face = |t: f64| Point::new(cx + a * t.cos(), cy + b * t.sin());
        // jaw: lower half, left to right through the chin
        for k in 0..17 {
            pts.push(on_face(PI - PI * k as f64 / 16.0));
        }
        pts.extend(self.brow(0));
        pts.extend(self.brow(1));
        // nose bridge then nostrils
        for k in 0..4 {
            let t = k as f64 / 3.0;
            pts.push(lerp(self.nose_top, self.nose_tip, 0.15 + 0.85 * t));
        }
        pts.extend(self.nostrils());
        pts.extend(self.eye_outline(0));
        pts.extend(self.eye_outline(1));
        pts.extend(self.mouth_outline());
        // forehead arc, left to right over the top
        for j in 0..13 {
            pts.push(on_face(PI + PI * (j + 1) as f64 / 14.0));
        }
        pts
    }

    fn brow(&self, side: usize) -> Vec<Point> {
        let e = self.eye_centers[side];
        let (rx, ry) = self.eye_radii;
        let base = e.y - ry - self.brow_gap;
        (0..5)
            .map(|k| {
                let u = k as f64 / 4.0 * 2.0 - 1.0;
                Point::new(e.x + 1.15 * rx * u, base - self.brow_arch * (1.0 - u * u))
            })
            .collect()
    }

    fn nostrils(&self) -> Vec<Point> {
        let t = self.nose_tip;
        let w = self.nostril_half_width;
        (0..5)
            .map(|k| {
                let u = k as f64 / 4.0 * 2.0 - 1.0;
                Point::new(t.x + w * u, t.y + 0.25 * w * (1.0 - u * u))
            })
            .collect()
    }

    /// Leftmost corner, two top points, rightmost corner, two bottom points.
    fn eye_outline(&self, side: usize) -> Vec<Point> {
        let e = self.eye_centers[side];
        let (rx, ry) = self.eye_radii;
        [PI, 2.0 * PI / 3.0, PI / 3.0, 0.0, -PI / 3.0, -2.0 * PI / 3.0]
            .iter()
            .map(|&t| Point::new(e.x + rx * t.cos(), e.y - ry * t.sin()))
            .collect()
    }

    /// Twelve outer-lip points from the left corner clockwise, then eight
    /// inner-lip points in the same order.
    fn mouth_outline(&self) -> Vec<Point> {
        let m = self.mouth_center;
        let w = self.mouth_half_width;
        let (hu, hl) = self.lip_heights;
        let mut pts = Vec::with_capacity(20);
        for k in 0..12 {
            let t = PI - 2.0 * PI * k as f64 / 12.0;
            let h = if t.sin() >= 0.0 { hu } else { hl };
            pts.push(Point::new(m.x + w * t.cos(), m.y - h * t.sin()));
        }
        let iw = 0.8 * w;
        for k in 0..8 {
            let t = PI - 2.0 * PI * k as f64 / 8.0;
            pts.push(Point::new(m.x + iw * t.cos(), m.y - self.mouth_open * t.sin()));
        }
        pts
    }

    fn check_canvas(&self) -> Result<()> {
        let n = self.canvas as f64;
        let (a, b) = self.axes;
        let c = self.center;
        if self.canvas < 16 || !(a > 0.0 && b > 0.0) {
            return Err(Error::Geometry(format!(
                "face axes {a}×{b} on a {n}-pixel canvas",
            )));
        }
        if c.x - a < 0.0 || c.x + a > n || c.y - b < 0.0 || c.y + b > n {
            return Err(Error::Geometry(format!(
                "face ellipse at ({:.1}, {:.1}) with axes ({a:.1}, {b:.1}) leaves the {n}-pixel canvas",
                c.x, c.y
            )));
        }
        Ok(())
    }
}

fn lerp(p: Point, q: Point, t: f64) -> Point {
    Point::new(p.x + (q.x - p.x) * t, p.y + (q.y - p.y) * t)
}

/// Anti-aliased coverage of an axis-aligned ellipse at pixel centre (x, y).
fn ellipse_cover(x: f64, y: f64, c: Point, rx: f64, ry: f64) -> f64 {
    let r = ((x - c.x) / rx).hypot((y - c.y) / ry);
    (0.5 - (r - 1.0) * rx.min(ry)).clamp(0.0, 1.0)
}

/// Coverage of a stroke of the given width along a polyline.
fn stroke_cover(x: f64, y: f64, pts: &[Point], width: f64) -> f64 {
    let mut d = f64::INFINITY;
    for s in pts.windows(2) {
        let (p, q) = (s[0], s[1]);
        let (vx, vy) = (q.x - p.x, q.y - p.y);
        let len2 = vx * vx + vy * vy;
        let t = if len2 > 0.0 {
            (((x - p.x) * vx + (y - p.y) * vy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        d = d.min((x - p.x - t * vx).hypot(y - p.y - t * vy));
    }
    (0.5 * width + 0.5 - d).clamp(0.0, 1.0)
}

fn blend(px: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for (p, c) in px.iter_mut().zip(color) {
        *p += alpha * (c - *p);
    }
}

/// Renders the face described by `params` and returns the image `[H, W, 3]`
/// in [0, 1] with its landmarks.
pub fn generate_face(params: &FaceParams) -> Result<(Tensor, LandmarkSet)> {
    params.check_canvas()?;
    let n = params.canvas;
    let pts = params.landmarks();
    let lm = LandmarkSet::new(pts.clone())?;
    lm.fit_to_image(n, n)?;
    if let Some(i) = pts
        .iter()
        .position(|p| p.x < 0.0 || p.y < 0.0 || p.x > n as f64 || p.y > n as f64)
    {
        return Err(Error::Geometry(format!("landmark {i} lies outside the canvas")));
    }
    let p = params;
    let (a, b) = p.axes;
    let brows = [p.brow(0), p.brow(1)];
    let bridge = &pts[27..31];
    let nostrils = &pts[31..36];
    let (erx, ery) = p.eye_radii;
    let brow_color = p.skin.map(|v| v * 0.3);
    let shade = p.skin.map(|v| v * 0.75);
    let mouth_inner = [0.25 * p.lips[0], 0.1 * p.lips[1], 0.1 * p.lips[2]];
    let (hu, hl) = p.lip_heights;
    let mw = p.mouth_half_width;
    let mut noise_rng = seed::rng(p.seed, &[0x7e47]);
    let mut data = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            // background with a gentle vertical gradient
            let g = 0.1 * (y / n as f64 - 0.5);
            let mut px = p.background.map(|v| v + g);
            let face = ellipse_cover(x, y, p.center, a, b);
            if face > 0.0 {
                // soft light from the upper left
                let light = 0.08 * (-(x - p.center.x) / a - (y - p.center.y) / b) * 0.5;
                blend(&mut px, p.skin.map(|v| v + light), face);
                for br in &brows {
                    let cv = stroke_cover(x, y, br, 0.22 * erx + 1.0);
                    blend(&mut px, brow_color, cv * face);
                }
                for e in p.eye_centers {
                    let sclera = ellipse_cover(x, y, e, erx, ery);
                    if sclera > 0.0 {
                        blend(&mut px, [0.92, 0.92, 0.9], sclera);
                        let iris = ellipse_cover(x, y, e, p.iris_radius, p.iris_radius) * sclera;
                        blend(&mut px, p.iris, iris);
                        let pupil = ellipse_cover(x, y, e, 0.45 * p.iris_radius, 0.45 * p.iris_radius) * sclera;
                        blend(&mut px, [0.03, 0.03, 0.03], pupil);
                    }
                }
                blend(&mut px, shade, 0.6 * stroke_cover(x, y, bridge, 1.5));
                for q in [nostrils[1], nostrils[3]] {
                    let r = 0.22 * p.nostril_half_width + 0.5;
                    blend(&mut px, shade.map(|v| v * 0.5), ellipse_cover(x, y, q, r, 0.7 * r));
                }
                let m = p.mouth_center;
                let h = if y < m.y { hu } else { hl };
                let lip = ellipse_cover(x, y, m, mw, h);
                blend(&mut px, p.lips, lip);
                if p.mouth_open > 0.0 {
                    blend(&mut px, mouth_inner, ellipse_cover(x, y, m, 0.8 * mw, p.mouth_open) * lip);
                } else {
                    let seam = [Point::new(m.x - 0.8 * mw, m.y), Point::new(m.x + 0.8 * mw, m.y)];
                    blend(&mut px, mouth_inner, 0.7 * stroke_cover(x, y, &seam, 0.6) * lip);
                }
            }
            let lum: f64 = StandardNormal.sample(&mut noise_rng);
            for v in &mut px {
                let chroma: f64 = StandardNormal.sample(&mut noise_rng);
                let noisy = *v + p.noise_amplitude * (lum + 0.3 * chroma);
                data.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    Ok((Tensor::new(&[n, n, 3], data)?, lm))
}

/// A face drawn from `seed` with its landmarks.
pub fn sample_face(seed: u64) -> Result<(Tensor, LandmarkSet)> {
    generate_face(&FaceParams::sample(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfss::{group_landmarks, layout, MfssConfig};

    #[test]
    fn same_seed_same_face() {
        let (a, la) = sample_face(3).unwrap();
        let (b, lb) = sample_face(3).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn different_seeds_differ_in_many_pixels() {
        let (a, _) = sample_face(1).unwrap();
        let (b, _) = sample_face(2).unwrap();
        let px = a.len() / 3;
        let differ = (0..px)
            .filter(|&i| (0..3).any(|c| a.data()[3 * i + c] != b.data()[3 * i + c]))
            .count();
        assert!(differ * 100 >= px, "only {differ} of {px} pixels differ");
    }

    #[test]
    fn landmarks_follow_layout() {
        let p = FaceParams::sample(9);
        let pts = p.landmarks();
        assert_eq!(pts.len(), 81);
        // chin is the lowest jaw point, jaw runs left to right
        assert!(pts[0].x < pts[8].x && pts[8].x < pts[16].x);
        assert!((pts[8].y - (p.center.y + p.axes.1)).abs() < 1e-9);
        // left eye: outer corner left of inner corner; right eye mirrored
        assert!(pts[36].x < pts[39].x);
        assert!(pts[42].x < pts[45].x);
        assert!(pts[45].x > pts[42].x && pts[42].x > pts[39].x);
        // top eyelid points above the centre
        assert!(pts[37].y < p.eye_centers[0].y && pts[40].y > p.eye_centers[0].y);
        // mouth corners
        assert!((pts[48].x - (p.mouth_center.x - p.mouth_half_width)).abs() < 1e-9);
        assert!((pts[54].x - (p.mouth_center.x + p.mouth_half_width)).abs() < 1e-9);
        // brows above eyes, forehead above brows
        assert!(pts[17..27].iter().all(|q| q.y < p.eye_centers[0].y - p.eye_radii.1));
        assert!(pts[68..81].iter().all(|q| q.y < p.center.y));
    }

    #[test]
    fn mouth_landmarks_inside_rendered_mouth_box() {
        let cfg = MfssConfig::default();
        for s in 0..20 {
            let p = FaceParams::sample(s);
            let (_, lm) = generate_face(&p).unwrap();
            let rho = group_landmarks(&lm, &cfg).unwrap().margin;
            let m = p.mouth_center;
            let (w, (hu, hl)) = (p.mouth_half_width, p.lip_heights);
            for q in lm.range(layout::MOUTH) {
                assert!(q.x >= m.x - w - rho && q.x <= m.x + w + rho);
                assert!(q.y >= m.y - hu - rho && q.y <= m.y + hl + rho);
            }
        }
    }

    #[test]
    fn out_of_canvas_is_geometry_error() {
        let mut p = FaceParams::sample(0);
        p.center.x = 10.0;
        assert!(matches!(generate_face(&p), Err(Error::Geometry(_))));
    }

    #[test]
    fn pixels_in_unit_range() {
        let (img, _) = sample_face(5).unwrap();
        assert_eq!(img.shape(), &[128, 128, 3]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
