//! Folder-layout dataset loaders.
//!
//! Classification: `root/<class_name>/<image>`; class ids follow the sorted
//! class-directory names. Segmentation: `root/images/<stem>.<ext>` paired
//! with `root/masks/<stem>.png` (single-channel class ids, 255 = ignore).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::RawImage;
use crate::error::{Error, Result};
use crate::metrics::LabelMap;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Labelled images plus the class-name table their ids index.
#[derive(Debug, Clone)]
pub struct ClassificationSet {
    pub class_names: Vec<String>,
    pub samples: Vec<RawImage>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(h as usize, w as usize, rgb.into_raw(), path.display().to_string())
}

pub fn load_mask(path: &Path, num_classes: usize, ignore_value: u32) -> Result<LabelMap> {
    let img = image::open(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::InvalidImage {
                path: path.display().to_string(),
                reason: format!("mask must be single-channel 8-bit, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let labels = gray.into_raw().into_iter().map(u32::from).collect();
    LabelMap::new(h as usize, w as usize, labels, num_classes, ignore_value).map_err(|e| match e {
        Error::LabelOutOfRange { label, num_classes, .. } => Error::LabelOutOfRange {
            label,
            num_classes,
            path: path.display().to_string(),
        },
        other => other,
    })
}

pub fn load_classification_dir(root: &Path) -> Result<ClassificationSet> {
    if !root.is_dir() {
        return Err(Error::InvalidDataset {
            reason: "dataset root is not a directory".into(),
            paths: vec![root.display().to_string()],
        });
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    let mut stray = Vec::new();
    for class_dir in sorted_entries(root)? {
        if !class_dir.is_dir() {
            stray.push(class_dir.display().to_string());
            continue;
        }
        let label = class_names.len();
        let name = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut found = 0;
        for file in sorted_entries(&class_dir)? {
            if file.is_file() && is_image(&file) {
                samples.push(load_image(&file)?.with_label(label));
                found += 1;
            } else {
                stray.push(file.display().to_string());
            }
        }
        if found == 0 {
            stray.push(class_dir.display().to_string());
        }
        class_names.push(name);
    }
    if !stray.is_empty() {
        return Err(Error::InvalidDataset {
            reason: "expected root/<class_name>/<image files> with at least one image per class".into(),
            paths: stray,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ClassificationSet { class_names, samples })
}

pub fn load_segmentation_dir(root: &Path, num_classes: usize, ignore_value: u32) -> Result<Vec<RawImage>> {
    let (images_dir, masks_dir) = (root.join("images"), root.join("masks"));
    let mut missing = Vec::new();
    for d in [&images_dir, &masks_dir] {
        if !d.is_dir() {
            missing.push(d.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidDataset {
            reason: "segmentation root needs images/ and masks/".into(),
            paths: missing,
        });
    }
    let by_stem = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(sorted_entries(dir)?
            .into_iter()
            .filter(|p| is_image(p))
            .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
            .collect())
    };
    let images = by_stem(&images_dir)?;
    let masks = by_stem(&masks_dir)?;
    let unpaired: Vec<String> = images
        .iter()
        .filter(|(s, _)| !masks.contains_key(*s))
        .chain(masks.iter().filter(|(s, _)| !images.contains_key(*s)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::InvalidDataset {
            reason: "images and masks must share stems".into(),
            paths: unpaired,
        });
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    images
        .iter()
        .map(|(stem, path)| {
            let img = load_image(path)?;
            let map = load_mask(&masks[stem], num_classes, ignore_value)?;
            let img = img.with_label_map(map);
            img.validate()?;
            Ok(img)
        })
        .collect()
}

pub fn save_rgb_png(path: &Path, img: &RawImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone()).ok_or_else(|| {
        Error::InvalidImage {
            path: path.display().to_string(),
            reason: "pixel buffer does not match dimensions".into(),
        }
    })?;
    buf.save(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask_png(path: &Path, map: &LabelMap) -> Result<()> {
    let bytes = map
        .labels
        .iter()
        .map(|&l| u8::try_from(l))
        .collect::<std::result::Result<Vec<u8>, _>>()
        .map_err(|_| Error::InvalidImage {
            path: path.display().to_string(),
            reason: "mask labels must fit in 8 bits".into(),
        })?;
    let buf = image::GrayImage::from_raw(map.width as u32, map.height as u32, bytes).expect("validated label map");
    buf.save(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: usize, w: usize, v: u8) -> RawImage {
        RawImage::new(h, w, vec![v; h * w * 3], "x").unwrap()
    }

    #[test]
    fn classification_tree_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, name) in ["cat", "ant"].iter().enumerate() {
            fs::create_dir(dir.path().join(name)).unwrap();
            for i in 0..2 {
                save_rgb_png(&dir.path().join(name).join(format!("{i}.png")), &solid(3, 4, (ci * 100 + i) as u8)).unwrap();
            }
        }
        let set = load_classification_dir(dir.path()).unwrap();
        assert_eq!(set.class_names, vec!["ant", "cat"]);
        assert_eq!(set.samples.len(), 4);
        assert_eq!(set.samples[0].label, Some(0));
        assert_eq!(set.samples[0].pixels[0], 100);
        assert_eq!(set.samples[3].label, Some(1));
        assert_eq!((set.samples[3].height, set.samples[3].width), (3, 4));
    }

    #[test]
    fn malformed_tree_lists_offenders() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        save_rgb_png(&dir.path().join("a/0.png"), &solid(2, 2, 1)).unwrap();
        fs::write(dir.path().join("stray.txt"), "x").unwrap();
        fs::create_dir(dir.path().join("empty")).unwrap();
        match load_classification_dir(dir.path()) {
            Err(Error::InvalidDataset { paths, .. }) => {
                assert_eq!(paths.len(), 2);
                assert!(paths.iter().any(|p| p.ends_with("stray.txt")));
                assert!(paths.iter().any(|p| p.ends_with("empty")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn segmentation_pairs_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        save_rgb_png(&dir.path().join("images/a.png"), &solid(2, 3, 9)).unwrap();
        let map = LabelMap::new(2, 3, vec![0, 1, 255, 2, 2, 0], 3, 255).unwrap();
        save_mask_png(&dir.path().join("masks/a.png"), &map).unwrap();
        let imgs = load_segmentation_dir(dir.path(), 3, 255).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].label_map.as_ref().unwrap(), &map);

        save_rgb_png(&dir.path().join("images/b.png"), &solid(2, 3, 9)).unwrap();
        assert!(matches!(
            load_segmentation_dir(dir.path(), 3, 255),
            Err(Error::InvalidDataset { .. })
        ));
    }

    #[test]
    fn mask_labels_checked_against_class_count() {
        let dir = tempfile::tempdir().unwrap();
        let map = LabelMap::new(1, 2, vec![0, 7], 8, 255).unwrap();
        let p = dir.path().join("m.png");
        save_mask_png(&p, &map).unwrap();
        assert!(matches!(load_mask(&p, 4, 255), Err(Error::LabelOutOfRange { label: 7, .. })));
    }
}
