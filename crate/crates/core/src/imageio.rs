//! PNG and PGM file helpers. Images are `H×W×3` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::tensor::Tensor;

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds `img` to 8 bits per channel, as a PNG round trip would.
pub fn quantize_image(img: &Tensor) -> Tensor {
    img.map(|v| quantize(v) as f64 / 255.0)
}

/// Writes a one- or three-channel image.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (n, h, w, c) = img.nhwc()?;
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::contract(format!(
            "cannot write image of shape {:?}",
            img.shape()
        )));
    }
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let mut buf = std::io::Cursor::new(Vec::new());
    let enc = if c == 3 {
        RgbImage::from_raw(w as u32, h as u32, bytes).map(|i| i.write_to(&mut buf, image::ImageFormat::Png))
    } else {
        GrayImage::from_raw(w as u32, h as u32, bytes).map(|i| i.write_to(&mut buf, image::ImageFormat::Png))
    };
    match enc {
        Some(Ok(())) => write_atomic(path, buf.get_ref()),
        Some(Err(e)) => Err(Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        }),
        None => Err(Error::contract("image buffer size mismatch")),
    }
}

pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Tensor::from_fn(&[5, 7, 3], |i| (i as f64 * 0.013) % 1.0);
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), &[5, 7, 3]);
        assert_eq!(back, quantize_image(&img));
    }

    #[test]
    fn gray_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        save_png(&path, &Tensor::full(&[4, 4, 1], 0.5)).unwrap();
        let back = load_png(&path).unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
