//! PNG load/save for the unit-range image container.
//!
//! Only 8-bit grayscale and RGB PNGs are supported; anything else is
//! rejected with an error naming the offending property. Byte value v
//! maps to v/255 on load; saving rounds to the nearest byte, so a
//! round trip moves each sample by at most half a quantization step.

use std::fs;
use std::path::Path;

use difta_core::image::Image;
use image::{ColorType, DynamicImage, ImageFormat};

use crate::CliError;

/// Load an 8-bit grayscale or RGB PNG.
pub fn load_image(path: &Path) -> Result<Image, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| CliError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let (data, h, w, c) = match decoded {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            (img.into_raw(), h, w, 1usize)
        }
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            (img.into_raw(), h, w, 3usize)
        }
        other => {
            let property = match other.color() {
                ColorType::L16 | ColorType::Rgb16 | ColorType::La16 | ColorType::Rgba16 => {
                    "bit depth 16 (only 8-bit supported)".to_string()
                }
                ColorType::La8 => "channel count 2 (alpha not supported)".to_string(),
                ColorType::Rgba8 => "channel count 4 (alpha not supported)".to_string(),
                c => format!("color type {c:?}"),
            };
            return Err(CliError::Decode {
                path: path.to_path_buf(),
                message: format!("unsupported {property}"),
            });
        }
    };
    let pixels: Vec<f64> = data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(h as usize, w as usize, c, pixels).map_err(|e| CliError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Save as an 8-bit PNG (grayscale or RGB per the image's channel count).
pub fn save_image(img: &Image, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    let quantize = |v: f64| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
    let bytes: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let result = match img.channels() {
        1 => image::save_buffer_with_format(path, &bytes, w, h, ColorType::L8, ImageFormat::Png),
        3 => image::save_buffer_with_format(path, &bytes, w, h, ColorType::Rgb8, ImageFormat::Png),
        c => {
            return Err(CliError::Internal(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    };
    result.map_err(|e| CliError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use difta_core::rng::Philox;
    use tempfile::TempDir;

    #[test]
    fn black_png_loads_as_zeros() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("black.png");
        save_image(&Image::zeros(2, 2, 3), &p).unwrap();
        let img = load_image(&p).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
    }

    #[test]
    fn byte_scaling_is_exact() {
        let dir = TempDir::new().unwrap();
        // byte 255 -> 1.0
        let p = dir.path().join("white.png");
        save_image(&Image::constant(1, 1, 1, 1.0), &p).unwrap();
        assert_eq!(load_image(&p).unwrap().pixels()[0], 1.0);
        // byte 128 -> 128/255
        let p2 = dir.path().join("mid.png");
        save_image(&Image::constant(1, 1, 1, 128.0 / 255.0), &p2).unwrap();
        assert_eq!(load_image(&p2).unwrap().pixels()[0], 128.0 / 255.0);
    }

    #[test]
    fn round_trip_error_bounded_by_half_quantization_step() {
        let dir = TempDir::new().unwrap();
        let mut rng = Philox::seed(3);
        let img = Image::from_fn(16, 16, 3, |_, _, _| rng.next_f64());
        let p = dir.path().join("rand.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        let mut max_err: f64 = 0.0;
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err <= 1.0 / 510.0 + 1e-12, "max err {max_err}");

        // exact value 0.5 comes back within the same bound
        let p2 = dir.path().join("half.png");
        save_image(&Image::constant(1, 1, 1, 0.5), &p2).unwrap();
        let v = load_image(&p2).unwrap().pixels()[0];
        assert!((v - 0.5).abs() <= 1.0 / 510.0);
    }

    #[test]
    fn rejects_alpha_and_sixteen_bit() {
        let dir = TempDir::new().unwrap();
        let rgba = dir.path().join("rgba.png");
        image::save_buffer_with_format(
            &rgba,
            &[10u8, 20, 30, 40],
            1,
            1,
            ColorType::Rgba8,
            ImageFormat::Png,
        )
        .unwrap();
        let err = load_image(&rgba).unwrap_err().to_string();
        assert!(err.contains("channel count 4"), "{err}");

        let deep = dir.path().join("deep.png");
        let buf: Vec<u8> = vec![0, 1, 2, 3, 4, 5];
        image::save_buffer_with_format(&deep, &buf, 1, 1, ColorType::Rgb16, ImageFormat::Png)
            .unwrap();
        let err = load_image(&deep).unwrap_err().to_string();
        assert!(err.contains("bit depth 16"), "{err}");
    }

    #[test]
    fn missing_file_and_non_png_rejected() {
        let dir = TempDir::new().unwrap();
        assert!(load_image(&dir.path().join("nope.png")).is_err());
        let not_png = dir.path().join("fake.png");
        std::fs::write(&not_png, b"definitely not a png").unwrap();
        assert!(load_image(&not_png).is_err());
    }
}
