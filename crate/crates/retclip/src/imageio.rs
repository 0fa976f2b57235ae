//! 8-bit RGB PNG reading and writing.

use std::path::Path;

use retclip_core::Image;

use crate::error::IoError;

pub fn save_png(path: &Path, image: &Image) -> Result<(), IoError> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_u8())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn load_png(path: &Path) -> Result<Image, IoError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => IoError::io(path, io),
        other => IoError::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_u8(h as usize, w as usize, rgb.as_raw())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = Image::filled(5, 7, 0.25);
        img.set(2, 3, 1, 0.9);
        let q = img.quantized_u8();
        save_png(&path, &img).unwrap();
        assert_eq!(load_png(&path).unwrap(), q);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, IoError::Io { .. }));
    }
}
