//! PNG image I/O and the image-access seam used by the leakage audit.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::{ImageBuffer, Rgb};
use ndarray::Array3;

use super::render::Image;
use crate::error::{Error, Result};

/// Write an image as 8-bit RGB PNG (values rounded from `[0,1]`).
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (img[(c, y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        )
    })
}

/// Read an 8-bit RGB PNG into `[3, h, w]` floats in `[0,1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| {
            Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            )
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Where training and evaluation get image bytes from. The trait exists so a
/// test double can record exactly which files each pipeline phase touched.
pub trait ImageSource: Send + Sync {
    fn load(&self, path: &Path) -> Result<Arc<Image>>;
}

/// Filesystem-backed source with a decode cache.
#[derive(Default)]
pub struct FsImageSource {
    cache: Mutex<HashMap<PathBuf, Arc<Image>>>,
}

impl FsImageSource {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ImageSource for FsImageSource {
    fn load(&self, path: &Path) -> Result<Arc<Image>> {
        if let Some(img) = self.cache.lock().unwrap().get(path) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(load_png(path)?);
        self.cache
            .lock()
            .unwrap()
            .insert(path.to_path_buf(), Arc::clone(&img));
        Ok(img)
    }
}

/// One entry in an access audit: either a pipeline phase marker or a file read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditEvent {
    Phase(String),
    Read(PathBuf),
}

/// Shared audit log; the rotation runner pushes phase markers and a
/// [`RecordingImageSource`] pushes reads, so the sequence shows which phase
/// touched which files.
#[derive(Default)]
pub struct AuditLog {
    events: Mutex<Vec<AuditEvent>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, event: AuditEvent) {
        self.events.lock().unwrap().push(event);
    }

    pub fn snapshot(&self) -> Vec<AuditEvent> {
        self.events.lock().unwrap().clone()
    }
}

/// Test double: forwards to an inner source and records every read.
pub struct RecordingImageSource<S> {
    inner: S,
    log: Arc<AuditLog>,
}

impl<S: ImageSource> RecordingImageSource<S> {
    pub fn new(inner: S, log: Arc<AuditLog>) -> Self {
        RecordingImageSource { inner, log }
    }
}

impl<S: ImageSource> ImageSource for RecordingImageSource<S> {
    fn load(&self, path: &Path) -> Result<Arc<Image>> {
        self.log.push(AuditEvent::Read(path.to_path_buf()));
        self.inner.load(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn png_round_trip_is_exact_at_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img: Image = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c * 83 + y * 17 + x * 5) % 256) as f32 / 255.0
        });
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn recording_source_logs_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_png(&path, &Array3::zeros((3, 4, 4))).unwrap();
        let log = Arc::new(AuditLog::new());
        let src = RecordingImageSource::new(FsImageSource::new(), Arc::clone(&log));
        src.load(&path).unwrap();
        assert_eq!(log.snapshot(), vec![AuditEvent::Read(path)]);
    }
}
