//! Image/mask ingestion, dataset splits, augmentation and synthetic vessel images.

mod augment;
mod splits;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{ColorType, DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use splits::{list_pairs, make_splits, SamplePaths, SplitSpec};
pub use synth::{synth_vessels, FOREGROUND_RANGE};

/// Spatial sizes must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Drive,
    ChaseDb1,
    Hrf,
    Synth,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [DatasetKind::Drive, DatasetKind::ChaseDb1, DatasetKind::Hrf, DatasetKind::Synth];

    /// Training resolution as (height, width); `None` keeps the native size.
    pub fn target_size(self) -> Option<(usize, usize)> {
        match self {
            DatasetKind::Drive => Some((512, 512)),
            DatasetKind::ChaseDb1 => Some((960, 960)),
            DatasetKind::Hrf => Some((784, 1168)),
            DatasetKind::Synth => None,
        }
    }

    /// Mini-batch size used for training.
    pub fn batch_size(self) -> usize {
        match self {
            DatasetKind::Hrf => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Drive => "drive",
            DatasetKind::ChaseDb1 => "chase_db1",
            DatasetKind::Hrf => "hrf",
            DatasetKind::Synth => "synth",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "drive" => Ok(DatasetKind::Drive),
            "chase_db1" | "chase" | "chasedb1" => Ok(DatasetKind::ChaseDb1),
            "hrf" => Ok(DatasetKind::Hrf),
            "synth" => Ok(DatasetKind::Synth),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset `{other}` (expected drive, chase_db1, hrf or synth)"
            ))),
        }
    }
}

/// An image in [0,1] of shape (1,3,H,W) and its binary mask (1,1,H,W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub dataset: DatasetKind,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, dataset: DatasetKind, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let [ni, ci, h, w] = image.shape();
        if ni != 1 || ci != 3 || mask.shape() != [1, 1, h, w] {
            return Err(Error::shape("sample", image.shape(), mask.shape()));
        }
        check_size(h, w)?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("mask values must be exactly 0 or 1".into()));
        }
        Ok(Sample {
            id: id.into(),
            dataset,
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().filter(|&&m| m == 1.0).count() as f64 / self.mask.len().max(1) as f64
    }
}

pub fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            multiple: SIZE_MULTIPLE,
        });
    }
    Ok(())
}

fn open_8bit(path: &Path) -> Result<DynamicImage> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img),
        other => Err(Error::data(path, format!("expected an 8-bit image, found {other:?}"))),
    }
}

/// Reads an image/mask pair, resizes to the dataset's training size (bilinear for the image,
/// nearest for the mask), binarizes the mask at 0.5 and scales the image by 1/255.
pub fn load_sample(image_path: &Path, mask_path: &Path, dataset: DatasetKind) -> Result<Sample> {
    let image = open_8bit(image_path)?.to_rgb8();
    let mask = open_8bit(mask_path)?.to_luma8();
    if image.dimensions() != mask.dimensions() {
        return Err(Error::data(
            mask_path,
            format!("mask is {:?} but image is {:?}", mask.dimensions(), image.dimensions()),
        ));
    }
    let (image, mask) = match dataset.target_size() {
        Some((h, w)) if (w as u32, h as u32) != image.dimensions() => (
            imageops::resize(&image, w as u32, h as u32, FilterType::Triangle),
            imageops::resize(&mask, w as u32, h as u32, FilterType::Nearest),
        ),
        _ => (image, mask),
    };
    let (w, h) = (image.width() as usize, image.height() as usize);
    check_size(h, w).map_err(|e| Error::data(image_path, e.to_string()))?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(id, dataset, rgb_to_tensor(&image), gray_to_mask(&mask))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0)
}

/// 8-bit grayscale to a {0,1} mask (values ≥ 128 are foreground).
pub fn gray_to_mask(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| (img.get_pixel(x as u32, y as u32).0[0] >= 128) as u8 as f32)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// First item of a (N,3,H,W) tensor as an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.height(), t.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_byte(t.at(0, c, y as usize, x as usize))))
    })
}

/// First item/channel of a tensor as 8-bit grayscale, pixel = round(v·255).
pub fn tensor_to_gray(t: &Tensor<f32>) -> GrayImage {
    let (h, w) = (t.height(), t.width());
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_byte(t.at(0, 0, y as usize, x as usize))]))
}

fn save(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Reads an image alone and resizes it like [`load_sample`], returning (1,3,H,W) in [0,1].
pub fn load_image(path: &Path, dataset: DatasetKind) -> Result<Tensor<f32>> {
    let mut image = open_8bit(path)?.to_rgb8();
    if let Some((h, w)) = dataset.target_size() {
        if (w as u32, h as u32) != image.dimensions() {
            image = imageops::resize(&image, w as u32, h as u32, FilterType::Triangle);
        }
    }
    check_size(image.height() as usize, image.width() as usize).map_err(|e| Error::data(path, e.to_string()))?;
    Ok(rgb_to_tensor(&image))
}

/// Writes a probability map as an 8-bit grayscale image.
pub fn save_prob_map(prob: &Tensor<f32>, path: &Path) -> Result<()> {
    save(&DynamicImage::ImageLuma8(tensor_to_gray(prob)), path)
}

/// Writes `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
pub fn save_sample(sample: &Sample, root: &Path) -> Result<(PathBuf, PathBuf)> {
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let ip = images.join(format!("{}.png", sample.id));
    let mp = masks.join(format!("{}.png", sample.id));
    save(&DynamicImage::ImageRgb8(tensor_to_rgb(&sample.image)), &ip)?;
    save(&DynamicImage::ImageLuma8(tensor_to_gray(&sample.mask)), &mp)?;
    Ok((ip, mp))
}

/// Stacks samples into an (N,3,H,W) image batch and an (N,1,H,W) mask batch.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
