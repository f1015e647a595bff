//! Multilevel facial semantic segmentation: an image and its 81 landmarks
//! become six fragments (whole picture, background, face, eyes, mouth, nose).

mod geometry;
mod landmarks;
mod raster;

pub use geometry::{convex_hull, dilate, Point, Polygon};
pub use landmarks::{layout, load_landmarks, LandmarkSet, BOUNDS_TOLERANCE, NUM_LANDMARKS};
pub use raster::{rasterize_polygon, Mask};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The six semantic fragments in possibility-matrix column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fragment {
    #[serde(rename = "p")]
    Pic,
    #[serde(rename = "b")]
    Background,
    #[serde(rename = "f")]
    Face,
    #[serde(rename = "e")]
    Eyes,
    #[serde(rename = "m")]
    Mouth,
    #[serde(rename = "n")]
    Nose,
}

impl Fragment {
    pub const ALL: [Fragment; 6] = [
        Fragment::Pic,
        Fragment::Background,
        Fragment::Face,
        Fragment::Eyes,
        Fragment::Mouth,
        Fragment::Nose,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            Fragment::Pic => "p",
            Fragment::Background => "b",
            Fragment::Face => "f",
            Fragment::Eyes => "e",
            Fragment::Mouth => "m",
            Fragment::Nose => "n",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fragment::Pic => "pic",
            Fragment::Background => "background",
            Fragment::Face => "face",
            Fragment::Eyes => "eyes",
            Fragment::Mouth => "mouth",
            Fragment::Nose => "nose",
        }
    }

    /// Whole-image fragments are not cropped to their mask.
    pub fn is_full_frame(self) -> bool {
        matches!(self, Fragment::Pic | Fragment::Background)
    }
}

impl fmt::Display for Fragment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fragment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fragment::ALL
            .into_iter()
            .find(|f| f.key() == s || f.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown fragment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfssConfig {
    /// Region dilation as a fraction of the face-hull bounding-box diagonal.
    pub dilation_ratio: f64,
    /// Side length S of every fragment crop.
    pub fragment_size: usize,
    /// Points per vertex used to round dilated corners.
    pub dilation_segments: usize,
}

impl Default for MfssConfig {
    fn default() -> Self {
        MfssConfig {
            dilation_ratio: 0.05,
            fragment_size: 64,
            dilation_segments: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPolygons {
    pub face: Polygon,
    pub eyes: Polygon,
    pub nose: Polygon,
    pub mouth: Polygon,
    /// Dilation margin ρ in pixels.
    pub margin: f64,
}

impl RegionPolygons {
    pub fn translate(&self, dx: f64, dy: f64) -> RegionPolygons {
        RegionPolygons {
            face: self.face.translate(dx, dy),
            eyes: self.eyes.translate(dx, dy),
            nose: self.nose.translate(dx, dy),
            mouth: self.mouth.translate(dx, dy),
            margin: self.margin,
        }
    }
}

/// Groups landmarks into region hulls: the face is the hull of all points;
/// eyes (brows included), nose and mouth are hulls of their index ranges
/// grown by ρ = `dilation_ratio` × face-bounding-box diagonal.
pub fn group_landmarks(lm: &LandmarkSet, cfg: &MfssConfig) -> Result<RegionPolygons> {
    let face = convex_hull(lm.points())?;
    let (lo, hi) = face.bounds();
    let margin = cfg.dilation_ratio * (hi.x - lo.x).hypot(hi.y - lo.y);
    let region = |r| -> Result<Polygon> {
        let hull = convex_hull(lm.range(r))?;
        dilate(&hull, margin, cfg.dilation_segments)
    };
    Ok(RegionPolygons {
        eyes: region(layout::EYE_REGION)?,
        nose: region(layout::NOSE)?,
        mouth: region(layout::MOUTH)?,
        face,
        margin,
    })
}

/// Binary masks of the six fragments, indexed in [`Fragment::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentMaskSet {
    pub width: usize,
    pub height: usize,
    pub masks: [Mask; 6],
    /// Regions that extended past the image and were clipped.
    pub warnings: Vec<String>,
}

impl FragmentMaskSet {
    pub fn get(&self, f: Fragment) -> &Mask {
        &self.masks[f.index()]
    }
}

/// Local regions are intersected with the face mask so they stay inside it
/// even after dilation.
pub fn rasterize_masks(polys: &RegionPolygons, height: usize, width: usize) -> Result<FragmentMaskSet> {
    if height == 0 || width == 0 {
        return Err(Error::contract("mask size must be at least 1×1"));
    }
    let mut warnings = Vec::new();
    let mut fill = |name: &str, poly: &Polygon| {
        let (m, clipped) = rasterize_polygon(poly, width, height);
        if clipped {
            warnings.push(format!("{name} region clipped to image bounds"));
        }
        m
    };
    let face = fill("face", &polys.face);
    let eyes = fill("eyes", &polys.eyes).and(&face);
    let mouth = fill("mouth", &polys.mouth).and(&face);
    let nose = fill("nose", &polys.nose).and(&face);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FragmentMaskSet {
        width,
        height,
        masks: [Mask::full(width, height), face.not(), face, eyes, mouth, nose],
        warnings,
    })
}

/// Six `S×S×3` crops in [`Fragment::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentSet {
    pub crops: [Tensor; 6],
    pub size: usize,
    pub source_id: String,
}

impl FragmentSet {
    pub fn get(&self, f: Fragment) -> &Tensor {
        &self.crops[f.index()]
    }
}

/// Zeroes pixels outside the fragment's mask, crops to the mask bounding box
/// (whole image for background and pic) and resizes to `size × size`.
pub fn extract_fragment(img: &Tensor, masks: &FragmentMaskSet, frag: Fragment, size: usize) -> Result<Tensor> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("extract_fragment", img.shape(), &[masks.height, masks.width])),
    };
    if (h, w) != (masks.height, masks.width) {
        return Err(Error::dim("extract_fragment", img.shape(), &[masks.height, masks.width]));
    }
    if size == 0 {
        return Err(Error::contract("fragment size must be positive"));
    }
    let mask = masks.get(frag);
    let (x0, y0, x1, y1) = mask
        .bounding_box()
        .ok_or_else(|| Error::DegenerateFragment(frag.name().into()))?;
    let (x0, y0, x1, y1) = if frag.is_full_frame() {
        (0, 0, w, h)
    } else {
        (x0, y0, x1, y1)
    };
    let (ch, cw) = (y1 - y0, x1 - x0);
    let mut crop = vec![0.0; ch * cw * c];
    let src = img.data();
    for y in y0..y1 {
        for x in x0..x1 {
            if mask.get(x, y) {
                let s = (y * w + x) * c;
                let d = ((y - y0) * cw + x - x0) * c;
                crop[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(&[size, size, c], resize_bilinear(&crop, ch, cw, c, size, size))
}

pub fn extract_fragments(img: &Tensor, masks: &FragmentMaskSet, size: usize, source_id: &str) -> Result<FragmentSet> {
    let crops = [
        extract_fragment(img, masks, Fragment::Pic, size)?,
        extract_fragment(img, masks, Fragment::Background, size)?,
        extract_fragment(img, masks, Fragment::Face, size)?,
        extract_fragment(img, masks, Fragment::Eyes, size)?,
        extract_fragment(img, masks, Fragment::Mouth, size)?,
        extract_fragment(img, masks, Fragment::Nose, size)?,
    ];
    Ok(FragmentSet {
        crops,
        size,
        source_id: source_id.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub polygons: RegionPolygons,
    pub masks: FragmentMaskSet,
}

/// Landmarks → polygons → masks for an `H×W×C` image.
pub fn segment(img: &Tensor, lm: &LandmarkSet, cfg: &MfssConfig) -> Result<Segmentation> {
    let (h, w) = match *img.shape() {
        [h, w, _] => (h, w),
        _ => return Err(Error::contract(format!("expected H×W×C image, got {:?}", img.shape()))),
    };
    let lm = lm.fit_to_image(w, h)?;
    let polygons = group_landmarks(&lm, cfg)?;
    let masks = rasterize_masks(&polygons, h, w)?;
    Ok(Segmentation { polygons, masks })
}

/// Bilinear resampling with half-pixel centres (corners not aligned);
/// samples beyond the border repeat the edge pixel.
pub fn resize_bilinear(src: &[f64], sh: usize, sw: usize, c: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw * c];
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    let taps = |d: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..dh {
        let (y0, y1, fy) = taps(y, sy, sh);
        for x in 0..dw {
            let (x0, x1, fx) = taps(x, sx, sw);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * sw + xx) * c + ch];
                let top = if fx == 0.0 { p(y0, x0) } else { p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bot = if fx == 0.0 { p(y1, x0) } else { p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx };
                    top * (1.0 - fy) + bot * fy
                };
                out[(y * dw + x) * c + ch] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Landmarks placed on simple primitives: face ellipse, eye and mouth
    /// ellipses, a nose line with nostrils.
    pub(crate) fn toy_landmarks(cx: f64, cy: f64) -> LandmarkSet {
        let mut pts = Vec::with_capacity(81);
        let (a, b) = (38.0, 48.0);
        for k in 0..17 {
            let t = std::f64::consts::PI * (1.0 - k as f64 / 16.0);
            pts.push(Point::new(cx + a * t.cos(), cy + b * t.sin()));
        }
        for side in [-1.0, 1.0] {
            for k in 0..5 {
                pts.push(Point::new(cx + side * (8.0 + 4.0 * k as f64), cy - 18.0 - (k % 3) as f64));
            }
        }
        for k in 0..4 {
            pts.push(Point::new(cx, cy - 10.0 + 4.0 * k as f64));
        }
        for k in 0..5 {
            pts.push(Point::new(cx - 6.0 + 3.0 * k as f64, cy + 6.0 + (k % 2) as f64));
        }
        for side in [-1.0, 1.0] {
            for k in 0..6 {
                let t = std::f64::consts::TAU * k as f64 / 6.0;
                pts.push(Point::new(cx + side * 15.0 + 6.0 * t.cos(), cy - 10.0 + 3.0 * t.sin()));
            }
        }
        for k in 0..12 {
            let t = std::f64::consts::TAU * k as f64 / 12.0;
            pts.push(Point::new(cx + 14.0 * t.cos(), cy + 24.0 + 6.0 * t.sin()));
        }
        for k in 0..8 {
            let t = std::f64::consts::TAU * k as f64 / 8.0;
            pts.push(Point::new(cx + 9.0 * t.cos(), cy + 24.0 + 2.0 * t.sin()));
        }
        for k in 0..13 {
            let t = std::f64::consts::PI * (1.0 + (k as f64 + 0.5) / 13.0);
            pts.push(Point::new(cx + a * t.cos(), cy + b * t.sin()));
        }
        LandmarkSet::new(pts).unwrap()
    }

    #[test]
    fn hull_containment_and_nesting() {
        let lm = toy_landmarks(64.0, 64.0);
        let polys = group_landmarks(&lm, &MfssConfig::default()).unwrap();
        for p in lm.range(layout::MOUTH) {
            assert!(polys.mouth.contains_closed(*p, 1e-9));
        }
        for region in [&polys.eyes, &polys.nose, &polys.mouth] {
            for v in &region.vertices {
                assert!(polys.face.contains(*v), "{v:?} escapes face hull");
            }
        }
    }

    #[test]
    fn translation_moves_hulls() {
        let lm = toy_landmarks(60.0, 62.0);
        let cfg = MfssConfig::default();
        let a = group_landmarks(&lm, &cfg).unwrap();
        let b = group_landmarks(&lm.translate(10.0, 10.0), &cfg).unwrap();
        let shifted = a.translate(10.0, 10.0);
        for (p, q) in [(&shifted.face, &b.face), (&shifted.eyes, &b.eyes), (&shifted.mouth, &b.mouth), (&shifted.nose, &b.nose)] {
            assert_eq!(p.vertices.len(), q.vertices.len());
            for (u, v) in p.vertices.iter().zip(&q.vertices) {
                assert!((u.x - v.x).abs() < 1e-9 && (u.y - v.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_partition_and_subsets() {
        let lm = toy_landmarks(64.0, 64.0);
        let polys = group_landmarks(&lm, &MfssConfig::default()).unwrap();
        let m = rasterize_masks(&polys, 128, 128).unwrap();
        let (p, b, f) = (m.get(Fragment::Pic), m.get(Fragment::Background), m.get(Fragment::Face));
        assert_eq!(p.count(), 128 * 128);
        assert_eq!(&b.or(f), p);
        assert!(b.and(f).is_empty());
        for r in [Fragment::Eyes, Fragment::Nose, Fragment::Mouth] {
            assert!(!m.get(r).is_empty());
            assert!(m.get(r).is_subset_of(f));
        }
    }

    #[test]
    fn face_covering_image_empties_background() {
        let polys = RegionPolygons {
            face: Polygon::rect(-1.0, -1.0, 33.0, 33.0),
            eyes: Polygon::rect(4.0, 4.0, 10.0, 10.0),
            nose: Polygon::rect(12.0, 12.0, 16.0, 16.0),
            mouth: Polygon::rect(8.0, 20.0, 20.0, 26.0),
            margin: 0.0,
        };
        let m = rasterize_masks(&polys, 32, 32).unwrap();
        assert!(m.get(Fragment::Background).is_empty());
        assert!(!m.warnings.is_empty());
        let img = Tensor::ones(&[32, 32, 3]);
        assert!(matches!(
            extract_fragment(&img, &m, Fragment::Background, 32),
            Err(Error::DegenerateFragment(name)) if name == "background"
        ));
    }

    #[test]
    fn pic_fragment_is_resized_image() {
        let img = Tensor::from_fn(&[64, 64, 3], |i| (i % 97) as f64 / 97.0);
        let lm = toy_landmarks(32.0, 40.0);
        let cfg = MfssConfig { fragment_size: 64, ..Default::default() };
        let lm = LandmarkSet::new(lm.points().iter().map(|p| Point::new(p.x * 0.45 + 17.0, p.y * 0.45 + 14.0)).collect()).unwrap();
        let seg = segment(&img, &lm, &cfg).unwrap();
        let crop = extract_fragment(&img, &seg.masks, Fragment::Pic, 64).unwrap();
        assert_eq!(crop, img);
    }

    #[test]
    fn constant_image_crop_support() {
        let img = Tensor::full(&[128, 128, 3], 0.4);
        let lm = toy_landmarks(64.0, 64.0);
        let seg = segment(&img, &lm, &MfssConfig::default()).unwrap();
        // full-frame crop at native scale: no resampling
        let crop = extract_fragment(&img, &seg.masks, Fragment::Background, 128).unwrap();
        let bg = seg.masks.get(Fragment::Background);
        for y in 0..128 {
            for x in 0..128 {
                let expect = if bg.get(x, y) { 0.4 } else { 0.0 };
                for c in 0..3 {
                    assert_eq!(crop.data()[(y * 128 + x) * 3 + c], expect);
                }
            }
        }
    }

    #[test]
    fn centred_square_face_crop_is_exact() {
        let img = Tensor::from_fn(&[128, 128, 3], |i| ((i * 31) % 255) as f64 / 255.0);
        let polys = RegionPolygons {
            face: Polygon::rect(32.0, 32.0, 96.0, 96.0),
            eyes: Polygon::rect(40.0, 40.0, 88.0, 56.0),
            nose: Polygon::rect(58.0, 50.0, 70.0, 70.0),
            mouth: Polygon::rect(48.0, 74.0, 80.0, 88.0),
            margin: 0.0,
        };
        let masks = rasterize_masks(&polys, 128, 128).unwrap();
        let crop = extract_fragment(&img, &masks, Fragment::Face, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    assert_eq!(crop.data()[(y * 64 + x) * 3 + c], img.data()[((y + 32) * 128 + x + 32) * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn fragment_keys_round_trip() {
        for f in Fragment::ALL {
            assert_eq!(f.key().parse::<Fragment>().unwrap(), f);
        }
        assert_eq!(Fragment::ALL.map(|f| f.key()).join(""), "pbfemn");
    }
}
