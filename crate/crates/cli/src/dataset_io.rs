//! The dataset's on-disk form: `root/<split>/<class>/<patch_id>.png` trees
//! of 8-bit RGB files plus a `manifest.json` recording the generation
//! parameters, class ordering, and whitening statistics.
//!
//! Statistics are stored as decimal strings (shortest round-trip form), so
//! a reloaded dataset whitens with bit-identical values.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use protoparts_core::data::{Dataset, DatasetManifest, ImagePatch, NormalizationStats};
use protoparts_core::img::Image;

#[derive(Debug, Serialize, Deserialize)]
struct DiskManifest {
    classes: Vec<String>,
    patches_per_class: usize,
    patch_size: usize,
    split: f32,
    augmentation_factor: usize,
    seed: u64,
    stats: DiskStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct DiskStats {
    mean: [String; 3],
    std: [String; 3],
}

fn stats_to_disk(stats: &NormalizationStats) -> DiskStats {
    DiskStats {
        mean: stats.mean.map(|v| format!("{v}")),
        std: stats.std.map(|v| format!("{v}")),
    }
}

fn stats_from_disk(disk: &DiskStats) -> anyhow::Result<NormalizationStats> {
    let parse = |s: &String| {
        s.parse::<f32>()
            .with_context(|| format!("manifest statistic {s:?} is not a decimal number"))
    };
    Ok(NormalizationStats {
        mean: [parse(&disk.mean[0])?, parse(&disk.mean[1])?, parse(&disk.mean[2])?],
        std: [parse(&disk.std[0])?, parse(&disk.std[1])?, parse(&disk.std[2])?],
    })
}

/// Encode one image as an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &Image) -> anyhow::Result<()> {
    let buf = image::RgbImage::from_raw(img.w() as u32, img.h() as u32, img.to_rgb8())
        .expect("pixel buffer length matches image extents");
    buf.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Decode an 8-bit RGB PNG.
pub fn load_png(path: &Path) -> anyhow::Result<Image> {
    let decoded = image::ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    Ok(Image::from_rgb8(h, w, decoded.as_raw())?)
}

/// Write a dataset as a PNG tree plus manifest under `root`.
pub fn write_dataset(
    root: &Path,
    dataset: &Dataset,
    manifest: &DatasetManifest,
) -> anyhow::Result<()> {
    for (split, patches) in [("train", &dataset.train), ("test", &dataset.test)] {
        for class in &dataset.classes {
            fs::create_dir_all(root.join(split).join(class))
                .with_context(|| format!("creating {}/{split}/{class}", root.display()))?;
        }
        for patch in patches.iter() {
            let class = &dataset.classes[patch.class_id];
            save_png(&root.join(split).join(class).join(format!("{}.png", patch.id)), &patch.image)?;
        }
    }
    let disk = DiskManifest {
        classes: manifest.classes.clone(),
        patches_per_class: manifest.patches_per_class,
        patch_size: manifest.patch_size,
        split: manifest.split,
        augmentation_factor: manifest.augmentation_factor,
        seed: manifest.seed,
        stats: stats_to_disk(&dataset.stats),
    };
    let mut text = serde_json::to_string_pretty(&disk)?;
    text.push('\n');
    fs::write(root.join("manifest.json"), text)
        .with_context(|| format!("writing {}/manifest.json", root.display()))?;
    Ok(())
}

/// Trailing augmentation-variant number of a patch id, if it has one.
fn variant_of(id: &str) -> Option<usize> {
    id.rsplit_once("_v").and_then(|(_, tail)| tail.parse().ok())
}

/// Crop-source prefix of a patch id: the id minus variant and crop suffixes.
fn source_of(id: &str) -> String {
    let base = match id.rsplit_once("_v") {
        Some((head, tail)) if tail.parse::<usize>().is_ok() => head,
        _ => id,
    };
    match base.rsplit_once("_c") {
        Some((head, tail)) if tail.parse::<usize>().is_ok() => head.to_string(),
        _ => base.to_string(),
    }
}

fn read_split(
    root: &Path,
    split: &str,
    classes: &[String],
    size: usize,
) -> anyhow::Result<Vec<ImagePatch>> {
    let mut out = Vec::new();
    for (class_id, class) in classes.iter().enumerate() {
        let dir = root.join(split).join(class);
        let mut names: Vec<String> = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|entry| {
                let name = entry.ok()?.file_name().into_string().ok()?;
                name.strip_suffix(".png").map(String::from)
            })
            .collect();
        names.sort();
        for id in names {
            let image = load_png(&dir.join(format!("{id}.png")))?;
            if image.h() != size || image.w() != size {
                anyhow::bail!(
                    "{}/{split}/{class}/{id}.png is {}x{}, manifest says {size}x{size}",
                    root.display(),
                    image.h(),
                    image.w()
                );
            }
            out.push(ImagePatch {
                class_id,
                source_id: source_of(&id),
                offset: (0, 0),
                augmented: variant_of(&id).is_some_and(|v| v != 0),
                image,
                id,
            });
        }
    }
    Ok(out)
}

/// Load a dataset tree written by [`write_dataset`]. Patches come back in
/// class order, sorted by id within each class.
pub fn read_dataset(root: &Path) -> anyhow::Result<(Dataset, DatasetManifest)> {
    let text = fs::read_to_string(root.join("manifest.json"))
        .with_context(|| format!("reading {}/manifest.json", root.display()))?;
    let disk: DiskManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}/manifest.json", root.display()))?;
    let manifest = DatasetManifest {
        classes: disk.classes.clone(),
        patches_per_class: disk.patches_per_class,
        patch_size: disk.patch_size,
        split: disk.split,
        augmentation_factor: disk.augmentation_factor,
        seed: disk.seed,
    };
    manifest.validate()?;
    let dataset = Dataset {
        train: read_split(root, "train", &disk.classes, disk.patch_size)?,
        test: read_split(root, "test", &disk.classes, disk.patch_size)?,
        classes: disk.classes,
        stats: stats_from_disk(&disk.stats)?,
    };
    dataset.validate()?;
    Ok((dataset, manifest))
}
