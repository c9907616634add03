use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{assign_splits, Domain, ImageShape, MultiDomainDataset, Sample, SplitFractions};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "gif", "tiff"];

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes an image file to channel-major RGB in `[0, 1]`, resized to `size`×`size`.
pub fn decode_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.resize_exact(size as u32, size as u32, FilterType::Triangle).to_rgb8();
    let mut out = vec![0.0; 3 * size * size];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(c * size + y as usize) * size + x as usize] = f64::from(px.0[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Loads `root/<domain>/<class>/<image>`. Class indices follow the sorted
/// class names, so they do not depend on directory enumeration order.
pub fn load_image_folder(root: &Path, image_size: usize, split_fractions: SplitFractions, seed: u64) -> Result<MultiDomainDataset> {
    split_fractions.validate()?;
    if image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    let domain_dirs = sorted_subdirs(root)?;
    if domain_dirs.is_empty() {
        return Err(Error::Data(format!("no domain directories under {}", root.display())));
    }
    let mut per_domain = Vec::new();
    let mut all_classes = BTreeSet::new();
    for (name, path) in &domain_dirs {
        let classes = sorted_subdirs(path)?;
        all_classes.extend(classes.iter().map(|(c, _)| c.clone()));
        per_domain.push((name.clone(), classes));
    }
    let class_names: Vec<String> = all_classes.into_iter().collect();
    if class_names.len() < 2 {
        return Err(Error::Data("a dataset needs at least two classes".into()));
    }
    let mut domains = Vec::new();
    for (d, (name, classes)) in per_domain.into_iter().enumerate() {
        for class in &class_names {
            if !classes.iter().any(|(c, _)| c == class) {
                return Err(Error::MissingClass {
                    domain: name,
                    class: class.clone(),
                });
            }
        }
        let mut samples = Vec::new();
        for (class, dir) in classes {
            let label = class_names.binary_search(&class).expect("class collected above");
            for file in image_files(&dir)? {
                let index = samples.len() as u64;
                samples.push(Sample {
                    image: decode_image(&file, image_size)?,
                    label,
                    domain_id: d,
                    uid: ((d as u64) << 32) | index,
                    cue: None,
                });
            }
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        domains.push(Domain {
            splits: assign_splits(&labels, class_names.len(), split_fractions, seed, d),
            name,
            samples,
        });
    }
    let dataset = MultiDomainDataset {
        domains,
        num_classes: class_names.len(),
        class_names,
        image_shape: ImageShape::new(3, image_size, image_size),
    };
    dataset.validate()?;
    Ok(dataset)
}
