use super::geometry::Polygon;

/// Binary `height × width` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` of set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Binary PGM (P5), 255 for set pixels.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }
}

/// Even-odd scanline fill. A pixel is set when its centre lies inside the
/// polygon. Returns the mask and whether the polygon extended past the image.
pub fn rasterize_polygon(poly: &Polygon, width: usize, height: usize) -> (Mask, bool) {
    let mut mask = Mask::empty(width, height);
    let v = &poly.vertices;
    let n = v.len();
    let (lo, hi) = poly.bounds();
    let clipped = lo.x < 0.0 || lo.y < 0.0 || hi.x > width as f64 || hi.y > height as f64;
    let mut xs = Vec::with_capacity(n);
    for row in 0..height {
        let yc = row as f64 + 0.5;
        if yc < lo.y || yc > hi.y {
            continue;
        }
        xs.clear();
        let mut j = n.wrapping_sub(1);
        for i in 0..n {
            let (a, b) = (v[i], v[j]);
            if (a.y > yc) != (b.y > yc) {
                xs.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
            j = i;
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(width as f64);
            if end <= start {
                continue;
            }
            for col in start as usize..end as usize {
                mask.set(col, row, true);
            }
        }
    }
    (mask, clipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfss::geometry::{convex_hull, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn left_half_square() {
        let poly = Polygon::rect(0.0, 0.0, 32.0, 40.0);
        let (m, clipped) = rasterize_polygon(&poly, 64, 40);
        assert!(!clipped);
        assert_eq!(m.count(), 64 * 40 / 2);
    }

    #[test]
    fn matches_point_in_polygon_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let pts: Vec<Point> = (0..9)
                .map(|_| Point::new(rng.random_range(-10.0..70.0), rng.random_range(-5.0..60.0)))
                .collect();
            let hull = convex_hull(&pts).unwrap();
            let (m, _) = rasterize_polygon(&hull, 64, 56);
            for y in 0..56 {
                for x in 0..64 {
                    let c = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                    assert_eq!(m.get(x, y), hull.contains(c), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn area_close_to_shoelace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let pts: Vec<Point> = (0..12)
                .map(|_| Point::new(rng.random_range(10.0..150.0), rng.random_range(10.0..150.0)))
                .collect();
            let hull = convex_hull(&pts).unwrap();
            if hull.area() < 2000.0 {
                continue;
            }
            let (m, _) = rasterize_polygon(&hull, 160, 160);
            let rel = (m.count() as f64 - hull.area()).abs() / hull.area();
            assert!(rel < 0.02, "{rel}");
        }
    }

    #[test]
    fn outside_polygon_is_clipped() {
        let poly = Polygon::rect(-10.0, -10.0, 5.0, 5.0);
        let (m, clipped) = rasterize_polygon(&poly, 8, 8);
        assert!(clipped);
        assert_eq!(m.count(), 25);
    }

    #[test]
    fn pgm_header() {
        let m = Mask::full(3, 2);
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 6);
    }
}
