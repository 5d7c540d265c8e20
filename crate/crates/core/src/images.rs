use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;

use crate::annotations::ImageRecord;
use crate::error::{Error, Result};
use crate::features::image_to_tensor;

/// Decoded images, resized to the network input and cached as bytes.
///
/// Relative `image_path`s resolve against `root` (normally the directory of
/// the annotation file).
#[derive(Debug, Default)]
pub struct ImageStore {
    root: PathBuf,
    cache: HashMap<(PathBuf, u32), RgbImage>,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: HashMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.root.join(&record.image_path)
        }
    }

    pub fn rgb(&mut self, record: &ImageRecord, size: u32) -> Result<&RgbImage> {
        let path = self.resolve(record);
        let key = (path.clone(), size);
        if !self.cache.contains_key(&key) {
            let img = image::open(&path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            if img.dimensions() != (record.width, record.height) {
                return Err(Error::schema(
                    &record.image_id,
                    "width/height",
                    format!(
                        "annotation says {}x{}, file is {}x{}",
                        record.width,
                        record.height,
                        img.width(),
                        img.height()
                    ),
                ));
            }
            let img = if img.dimensions() == (size, size) {
                img
            } else {
                imageops::resize(&img, size, size, FilterType::Triangle)
            };
            self.cache.insert(key.clone(), img);
        }
        Ok(&self.cache[&key])
    }

    pub fn tensor(&mut self, record: &ImageRecord, size: u32) -> Result<Array3<f64>> {
        Ok(image_to_tensor(self.rgb(record, size)?))
    }
}
