//! Camera frames (8-bit interleaved RGB) and frame sources.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{stream_key, stream_u64};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W×3`.
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "frame data has {} bytes, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    /// Pseudo-random frame keyed by `(seed, frame_id)`.
    pub fn synthetic(seed: u64, frame_id: u64, height: usize, width: usize) -> Self {
        let key = stream_key(seed, (frame_id >> 32) as u32, frame_id as u32);
        let data = (0..(height * width * 3) as u64).map(|i| (stream_u64(key, i) >> 56) as u8).collect();
        Self { height, width, data }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }
}

/// Image files (png, jpg, ppm) in a directory, sorted by file name.
pub fn list_image_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "ppm"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no image files in {}", dir.display())));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_keyed() {
        let a = Frame::synthetic(7, 0, 8, 8);
        assert_eq!(a, Frame::synthetic(7, 0, 8, 8));
        assert_ne!(a, Frame::synthetic(7, 1, 8, 8));
        assert_ne!(a, Frame::synthetic(8, 0, 8, 8));
    }

    #[test]
    fn load_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8, y as u8, 9]));
        img.save(dir.path().join("b.png")).unwrap();
        img.save(dir.path().join("a.ppm")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let files = list_image_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0].ends_with("a.ppm"));
        let f = Frame::load(&files[1]).unwrap();
        assert_eq!((f.height, f.width), (4, 5));
        assert_eq!(&f.data[..3], &[0, 0, 9]);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(Frame::new(2, 2, vec![0; 11]).is_err());
    }
}
