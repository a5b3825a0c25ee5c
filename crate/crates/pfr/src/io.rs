//! Image files and on-disk datasets.
//!
//! Images are read from PNG or JPEG and written as 8-bit PNG. A dataset
//! directory holds one subdirectory per identity, e.g. `<dir>/id000/0.png`.

use std::fs;
use std::path::{Path, PathBuf};

use pfr_core::data::{Identity, IdentityDataset};
use pfr_core::ImageBuffer;

use crate::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Ok(ImageBuffer::new(h as usize, w as usize, data)?)
}

/// Rounds to 8 bits per component.
pub fn to_rgb8(img: &ImageBuffer) -> image::RgbImage {
    let raw = img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer matches dimensions")
}

pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.into(), source })
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Image files anywhere below `dir` as paths relative to it, sorted.
pub fn list_images_recursive(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if is_image(&path) {
                out.push(path.strip_prefix(root).expect("walk stays below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn read_images(dir: &Path) -> Result<Vec<ImageBuffer>> {
    list_images(dir)?.iter().map(|p| read_image(p)).collect()
}

/// Loads `<dir>/<identity>/<image>` into a dataset; identities sorted by name.
pub fn load_dataset(dir: &Path) -> Result<IdentityDataset> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let mut identities = Vec::with_capacity(dirs.len());
    for d in dirs {
        let images = read_images(&d)?;
        if images.is_empty() {
            continue;
        }
        let id = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        identities.push(Identity { id, images, params: None });
    }
    Ok(IdentityDataset::new(identities)?)
}

/// Writes a dataset in the layout read by [`load_dataset`].
pub fn save_dataset(dir: &Path, dataset: &IdentityDataset) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for ident in dataset.identities() {
        for (k, img) in ident.images.iter().enumerate() {
            let path = dir.join(&ident.id).join(format!("{k}.png"));
            write_png(&path, img)?;
            written.push(path);
        }
    }
    Ok(written)
}
