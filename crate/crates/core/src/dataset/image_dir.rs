use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{Dataset, ImageShape, LabeledImages};
use crate::error::{Error, Result};

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "bmp")
    )
}

/// Directories (relative to `root`) that directly contain image files.
fn class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut has_images = false;
        for entry in std::fs::read_dir(&dir).map_err(Error::io(&dir))? {
            let path = entry.map_err(Error::io(&dir))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image(&path) {
                has_images = true;
            }
        }
        if has_images && dir != root {
            out.push(dir);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a class-per-directory image tree.
///
/// Every directory below `root` that directly holds PNG/BMP files is one
/// class; class ids follow the lexicographic order of the directory paths,
/// so both flat (`root/class/*.png`) and two-level
/// (`root/alphabet/character/*.png`) layouts work. Images are converted to
/// grayscale and, when `resize_to` is given, resampled to that square side.
pub fn load_image_directory(root: impl AsRef<Path>, resize_to: Option<usize>) -> Result<Dataset> {
    let root = root.as_ref();
    let dirs = class_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("no class directories with images under {}", root.display())));
    }
    let mut shape: Option<ImageShape> = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (class, dir) in dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(Error::io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file).map_err(|e| Error::Decode { path: file.clone(), message: e.to_string() })?;
            let mut gray = img.to_luma8();
            if let Some(side) = resize_to {
                gray = image::imageops::resize(&gray, side as u32, side as u32, FilterType::Triangle);
            }
            let this = ImageShape::new(1, gray.height() as usize, gray.width() as usize);
            match shape {
                None => shape = Some(this),
                Some(s) if s != this => {
                    return Err(Error::Consistency(format!(
                        "{} is {}x{}, expected {}x{}; pass a resize side to normalize",
                        file.display(),
                        this.height,
                        this.width,
                        s.height,
                        s.width
                    )))
                }
                Some(_) => {}
            }
            pixels.extend(gray.as_raw().iter().map(|&b| b as f32 / 255.0));
            labels.push(class);
        }
    }
    let name = root.file_name().and_then(|s| s.to_str()).unwrap_or("images").to_string();
    Dataset::new(name, shape.expect("at least one image"), dirs.len(), pixels, labels)
}

/// Writes single-channel images as `root/class-<label>/<index>.png`, a
/// layout [`load_image_directory`] reads back in label order.
pub fn write_image_directory(images: &LabeledImages, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let shape = images.shape;
    if shape.channels != 1 {
        return Err(Error::Argument(format!("only single-channel images can be written, got {}", shape.channels)));
    }
    for i in 0..images.len() {
        let dir = root.join(format!("class-{:04}", images.labels[i]));
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let bytes = images.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(shape.width as u32, shape.height as u32, bytes).expect("size matches shape");
        let path = dir.join(format!("{i:06}.png"));
        img.save(&path).map_err(|e| Error::Decode { path: path.clone(), message: e.to_string() })?;
    }
    Ok(())
}
