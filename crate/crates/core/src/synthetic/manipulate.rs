//! The four manipulation families. Local families repaint one facial region;
//! global families resample or recolour the whole frame. Every family
//! resamples or smooths pixels, which suppresses the texture noise of real
//! faces inside the touched area.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfss::{group_landmarks, rasterize_masks, Fragment, LandmarkSet, Mask, MfssConfig};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FamilyKind {
    #[serde(rename = "local-eyes")]
    LocalEyes,
    #[serde(rename = "local-mouth")]
    LocalMouth,
    #[serde(rename = "global-warp")]
    GlobalWarp,
    #[serde(rename = "global-color")]
    GlobalColor,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] = [
        FamilyKind::LocalEyes,
        FamilyKind::LocalMouth,
        FamilyKind::GlobalWarp,
        FamilyKind::GlobalColor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::LocalEyes => "local-eyes",
            FamilyKind::LocalMouth => "local-mouth",
            FamilyKind::GlobalWarp => "global-warp",
            FamilyKind::GlobalColor => "global-color",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_local(self) -> bool {
        matches!(self, FamilyKind::LocalEyes | FamilyKind::LocalMouth)
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FamilyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown manipulation family `{s}` (expected local-eyes, local-mouth, global-warp or global-color)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManipulationFamily {
    pub kind: FamilyKind,
    /// In [0, 1]; zero leaves the image untouched.
    pub strength: f64,
    pub seed: u64,
}

impl ManipulationFamily {
    pub fn new(kind: FamilyKind, strength: f64, seed: u64) -> Result<Self> {
        let f = ManipulationFamily { kind, strength, seed };
        f.validate()?;
        Ok(f)
    }

    pub fn from_name(name: &str, strength: f64, seed: u64) -> Result<Self> {
        ManipulationFamily::new(name.parse()?, strength, seed)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::contract(format!(
                "manipulation strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }
}

/// Box blur of radius `r` applied separably with clamped edges.
fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..=2 * r {
                    let xx = (x + k).saturating_sub(r).min(w - 1);
                    s += src[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = s * norm;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..=2 * r {
                    let yy = (y + k).saturating_sub(r).min(h - 1);
                    s += tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = s * norm;
            }
        }
    }
    out
}

/// Smooth zero-mean noise in [-1, 1]: a coarse random grid upsampled
/// bilinearly.
fn blotch_field(h: usize, w: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn region_mask(lm: &LandmarkSet, frag: Fragment, h: usize, w: usize) -> Result<Mask> {
    let polys = group_landmarks(lm, &MfssConfig::default())?;
    let masks = rasterize_masks(&polys, h, w)?;
    Ok(masks.get(frag).clone())
}

/// Blends a blurred, checkered and blotched copy of the image into the
/// region mask. Pixels outside the mask are copied unchanged.
fn local_defect(src: &[f64], h: usize, w: usize, mask: &Mask, fam: &ManipulationFamily) -> Vec<f64> {
    let mut rng = seed::rng(fam.seed, &[fam.kind.index() as u64]);
    let blur = box_blur(src, h, w, 1);
    let blotch = blotch_field(h, w, 6, &mut rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let phase = rng.random_range(0..4usize);
    let alpha = 0.85 * fam.strength;
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let checker = if ((x + phase) / 2 + y / 2) % 2 == 0 { 1.0 } else { -1.0 };
            let i = y * w + x;
            for c in 0..3 {
                let patch = blur[i * 3 + c] + 0.10 * checker + 0.08 * tint[c] * blotch[i];
                let v = src[i * 3 + c];
                out[i * 3 + c] = (v + alpha * (patch - v)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn sample_bilinear(src: &[f64], h: usize, w: usize, x: f64, y: f64, c: usize) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let g = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c];
    let top = g(y0, x0) + tx * (g(y0, x1) - g(y0, x0));
    let bot = g(y1, x0) + tx * (g(y1, x1) - g(y1, x0));
    top + ty * (bot - top)
}

/// Sinusoidal displacement with amplitude 3 px × strength, resampled
/// bilinearly.
fn warp(src: &[f64], h: usize, w: usize, fam: &ManipulationFamily) -> Vec<f64> {
    let mut rng = seed::rng(fam.seed, &[fam.kind.index() as u64]);
    let amp = 3.0 * fam.strength;
    let lx = rng.random_range(20.0..36.0);
    let ly = rng.random_range(20.0..36.0);
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let dx = amp * (2.0 * PI * y as f64 / ly + px).sin();
            let dy = amp * (2.0 * PI * x as f64 / lx + py).sin();
            for c in 0..3 {
                out.push(sample_bilinear(src, h, w, x as f64 + dx, y as f64 + dy, c).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Hue rotation about the grey axis followed by a pull towards the local
/// mean, then a shift restoring the original mean intensity.
fn recolor(src: &[f64], h: usize, w: usize, fam: &ManipulationFamily) -> Vec<f64> {
    let mut rng = seed::rng(fam.seed, &[fam.kind.index() as u64]);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let theta = sign * fam.strength * rng.random_range(0.35..0.7);
    let (s, c) = theta.sin_cos();
    let k = 1.0 / 3.0;
    let r3 = 1.0 / 3f64.sqrt();
    // Rodrigues rotation about (1, 1, 1) / sqrt(3)
    let a = c + k * (1.0 - c);
    let b = k * (1.0 - c) - r3 * s;
    let d = k * (1.0 - c) + r3 * s;
    let rot = [[a, b, d], [d, a, b], [b, d, a]];
    let mut rotated = Vec::with_capacity(src.len());
    for px in src.chunks_exact(3) {
        for row in &rot {
            rotated.push(row[0] * px[0] + row[1] * px[1] + row[2] * px[2]);
        }
    }
    let blur = box_blur(&rotated, h, w, 2);
    let mix = 0.6 * fam.strength;
    let mut out: Vec<f64> = rotated.iter().zip(&blur).map(|(v, m)| v + mix * (m - v)).collect();
    let n = src.len() as f64;
    let shift = (src.iter().sum::<f64>() - out.iter().sum::<f64>()) / n;
    for v in &mut out {
        *v = (*v + shift).clamp(0.0, 1.0);
    }
    out
}

/// Applies `fam` to an `[H, W, 3]` image with landmarks `lm`.
pub fn apply_manipulation(img: &Tensor, lm: &LandmarkSet, fam: &ManipulationFamily) -> Result<Tensor> {
    fam.validate()?;
    let (n, h, w, c) = img.nhwc()?;
    if n != 1 || c != 3 || img.rank() != 3 {
        return Err(Error::contract(format!(
            "manipulation expects an [H, W, 3] image, got {:?}",
            img.shape()
        )));
    }
    if fam.strength == 0.0 {
        return Ok(img.clone());
    }
    let src = img.data();
    let out = match fam.kind {
        FamilyKind::LocalEyes => local_defect(src, h, w, &region_mask(lm, Fragment::Eyes, h, w)?, fam),
        FamilyKind::LocalMouth => local_defect(src, h, w, &region_mask(lm, Fragment::Mouth, h, w)?, fam),
        FamilyKind::GlobalWarp => warp(src, h, w, fam),
        FamilyKind::GlobalColor => recolor(src, h, w, fam),
    };
    Tensor::new(img.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::sample_face;

    fn changed(a: &Tensor, b: &Tensor) -> Vec<bool> {
        a.data()
            .chunks_exact(3)
            .zip(b.data().chunks_exact(3))
            .map(|(p, q)| p != q)
            .collect()
    }

    #[test]
    fn unknown_family_is_contract_error() {
        assert!(matches!(
            ManipulationFamily::from_name("global-blur", 0.5, 0),
            Err(Error::Contract(_))
        ));
        assert_eq!("local-mouth".parse::<FamilyKind>().unwrap(), FamilyKind::LocalMouth);
    }

    #[test]
    fn strength_outside_unit_interval_rejected() {
        assert!(ManipulationFamily::new(FamilyKind::GlobalWarp, 1.5, 0).is_err());
        assert!(ManipulationFamily::new(FamilyKind::GlobalWarp, f64::NAN, 0).is_err());
    }

    #[test]
    fn tiny_strength_is_near_identity() {
        let (img, lm) = sample_face(4).unwrap();
        for kind in FamilyKind::ALL {
            let fam = ManipulationFamily::new(kind, 1e-4, 1).unwrap();
            let out = apply_manipulation(&img, &lm, &fam).unwrap();
            let worst = img
                .data()
                .iter()
                .zip(out.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1.0 / 255.0, "{kind}: {worst}");
            let zero = ManipulationFamily::new(kind, 0.0, 1).unwrap();
            assert_eq!(apply_manipulation(&img, &lm, &zero).unwrap(), img);
        }
    }

    #[test]
    fn local_families_stay_inside_region() {
        for (kind, frag) in [(FamilyKind::LocalMouth, Fragment::Mouth), (FamilyKind::LocalEyes, Fragment::Eyes)] {
            for s in 0..5 {
                let (img, lm) = sample_face(s).unwrap();
                let fam = ManipulationFamily::new(kind, 1.0, s).unwrap();
                let out = apply_manipulation(&img, &lm, &fam).unwrap();
                let mask = region_mask(&lm, frag, 128, 128).unwrap();
                let diff = changed(&img, &out);
                for (i, d) in diff.iter().enumerate() {
                    if *d {
                        assert!(mask.get(i % 128, i / 128));
                    }
                }
                assert!(diff.iter().filter(|d| **d).count() > mask.count() / 2);
            }
        }
    }

    #[test]
    fn warp_changes_most_pixels() {
        let (img, lm) = sample_face(8).unwrap();
        let fam = ManipulationFamily::new(FamilyKind::GlobalWarp, 0.5, 3).unwrap();
        let out = apply_manipulation(&img, &lm, &fam).unwrap();
        let n = changed(&img, &out).iter().filter(|d| **d).count();
        assert!(2 * n >= 128 * 128, "{n}");
    }

    #[test]
    fn color_keeps_mean_and_changes_most_pixels() {
        let (img, lm) = sample_face(2).unwrap();
        let fam = ManipulationFamily::new(FamilyKind::GlobalColor, 1.0, 3).unwrap();
        let out = apply_manipulation(&img, &lm, &fam).unwrap();
        let n = changed(&img, &out).iter().filter(|d| **d).count();
        assert!(2 * n >= 128 * 128);
        let mean = |t: &Tensor| t.sum() / t.len() as f64;
        assert!((mean(&img) - mean(&out)).abs() < 0.01);
    }

    #[test]
    fn outputs_clamped_and_deterministic() {
        let (img, lm) = sample_face(6).unwrap();
        for kind in FamilyKind::ALL {
            let fam = ManipulationFamily::new(kind, 1.0, 5).unwrap();
            let a = apply_manipulation(&img, &lm, &fam).unwrap();
            assert_eq!(a, apply_manipulation(&img, &lm, &fam).unwrap());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn grey_axis_rotation_preserves_grey() {
        let grey = vec![0.4; 4 * 4 * 3];
        let fam = ManipulationFamily::new(FamilyKind::GlobalColor, 1.0, 0).unwrap();
        let out = recolor(&grey, 4, 4, &fam);
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
