//! Raster file I/O: 8-bit grayscale and RGB images plus single-channel
//! label rasters, in PNG and binary PGM/PPM.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::patch::{Image, LabelMap};

fn open_with_path(path: &Path) -> Result<ImageReader<std::io::BufReader<std::fs::File>>> {
    ImageReader::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Load an image and normalize samples to `[0,1]` per channel.
/// Grayscale sources become 1-channel, everything else 3-channel RGB.
pub fn read_image(path: &Path) -> Result<Image> {
    let dynimg = open_with_path(path)?.decode().map_err(Error::Image)?;
    let (channels, h, w, bytes): (usize, usize, usize, Vec<u8>) = match dynimg {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (1, h, w, g.into_raw())
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            (3, h, w, rgb.into_raw())
        }
    };
    // Interleaved bytes -> channel-major floats.
    let mut data = vec![0.0f64; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = bytes[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Image::new(channels, h, w, data)
}

/// Load a single-channel label raster; pixel values are class ids.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let dynimg = open_with_path(path)?.decode().map_err(Error::Image)?;
    let gray = match dynimg {
        DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    LabelMap::new(h, w, gray.into_raw())
}

/// Write a normalized image back as 8-bit PNG/PGM/PPM (chosen by extension).
pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height, image.width);
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match image.channels {
        1 => {
            let bytes: Vec<u8> = image.data.iter().map(|&v| to_byte(v)).collect();
            let buf = GrayImage::from_raw(w as u32, h as u32, bytes).unwrap();
            buf.save(path).map_err(Error::Image)
        }
        3 => {
            let mut bytes = vec![0u8; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        bytes[(y * w + x) * 3 + c] = to_byte(image.data[(c * h + y) * w + x]);
                    }
                }
            }
            let buf = RgbImage::from_raw(w as u32, h as u32, bytes).unwrap();
            buf.save(path).map_err(Error::Image)
        }
        n => Err(Error::data(format!("cannot write {n}-channel image"))),
    }
}

/// Write a label raster as an 8-bit single-channel file.
pub fn write_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let buf = GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.data.clone())
        .unwrap();
    buf.save(path).map_err(Error::Image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_round_trips_through_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..30).map(|i| (i as f64 * 8.0) / 255.0).collect();
        let img = Image::new(1, 5, 6, data).unwrap();
        for name in ["x.png", "x.pgm"] {
            let path = dir.path().join(name);
            write_image(&img, &path).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!((back.channels, back.height, back.width), (1, 5, 6), "{name}");
            for (a, b) in back.data.iter().zip(&img.data) {
                assert!((a - b).abs() < 0.5 / 255.0, "{name}");
            }
        }
    }

    #[test]
    fn rgb_image_round_trips_through_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 4).map(|i| (i % 17) as f64 / 16.0).collect();
        let img = Image::new(3, 4, 4, data).unwrap();
        let path = dir.path().join("x.ppm");
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.channels, 3);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn label_values_survive_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(3, 5, (0..15).map(|i| (i * 16) as u8).collect()).unwrap();
        let path = dir.path().join("labels.png");
        write_labels(&labels, &path).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            read_image(Path::new("/nonexistent/raster.png")),
            Err(Error::Io(_))
        ));
    }
}
