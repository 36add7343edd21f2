//! Dataset manifests, image/mask I/O, mask generators and batch assembly.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::sample::ImageSample;
use crate::tensor::Tensor;

/// Gray level above which an 8-bit mask pixel counts as a hole.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

/// A list of `path<TAB>split` records. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(name: &str, text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, split) = line.split_once('\t').ok_or_else(|| {
                Error::Dataset(format!("line {}: expected `path<TAB>split`", lineno + 1))
            })?;
            let path = PathBuf::from(path);
            entries.push(ManifestEntry {
                path: if path.is_absolute() { path } else { base.join(path) },
                split: split.parse()?,
            });
        }
        Ok(DatasetManifest {
            name: name.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&name, &text, base)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.path.display(), e.split))
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Converts an 8-bit RGB image to a `[-1, 1]` sample, bilinearly resized to `size`.
pub fn rgb_to_sample(img: &RgbImage, size: usize, source: &str, id: &str) -> Result<ImageSample> {
    let resized;
    let img = if img.width() as usize != size || img.height() as usize != size {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    } else {
        img
    };
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, Rgb(px)) in img.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 127.5 - 1.0;
        }
    }
    ImageSample::new(Tensor::from_vec(&[1, 3, size, size], data), source, id)
}

pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Item `index` of an `[N, 3, H, W]` tensor in `[-1, 1]` as an 8-bit image.
pub fn tensor_to_rgb(t: &Tensor, index: usize) -> RgbImage {
    let (_, _, h, w) = t.dims4();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| quantize(t.at4(index, c, y, x))))
    })
}

/// Reads an image, resizes it to `size`×`size` and scales it to `[-1, 1]`.
pub fn load_image_sized(path: &Path, size: usize) -> Result<ImageSample> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    rgb_to_sample(&img.to_rgb8(), size, &path.to_string_lossy(), &id)
}

pub fn load_image(path: &Path) -> Result<ImageSample> {
    load_image_sized(path, 256)
}

/// Loads every path on up to `workers` threads. Unreadable files are
/// skipped with a warning. The output order follows `paths`.
pub fn load_images(paths: &[PathBuf], size: usize, workers: usize) -> Vec<ImageSample> {
    let workers = workers.clamp(1, paths.len().max(1));
    let chunk = paths.len().div_ceil(workers).max(1);
    let mut slots: Vec<Option<ImageSample>> = Vec::with_capacity(paths.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|p| match load_image_sized(p, size) {
                            Ok(s) => Some(s),
                            Err(e) => {
                                warn!(path = %p.display(), error = %e, "skipping unreadable image");
                                None
                            }
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            slots.extend(h.join().expect("image loader thread panicked"));
        }
    });
    slots.into_iter().flatten().collect()
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes any supported raster format to 8-bit RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

/// Decodes a raster mask and thresholds its luma at 127.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    Ok(mask_from_gray(&image::load_from_memory(bytes)?.to_luma8()))
}

/// Thresholds an 8-bit grayscale image: values above 127 are holes.
pub fn mask_from_gray(img: &GrayImage) -> BinaryMask {
    let values = img
        .pixels()
        .map(|Luma([v])| if *v > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    BinaryMask::new(img.height() as usize, img.width() as usize, values)
        .expect("thresholded values are binary")
}

/// Holes as 255, context as 0.
pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Reads a grayscale mask file, thresholds it, and resizes it to
/// `size`×`size` by nearest neighbor.
pub fn load_irregular_mask_sized(path: &Path, size: usize) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mask = mask_from_gray(&img.to_luma8());
    Ok(if mask.height() == size && mask.width() == size {
        mask
    } else {
        mask.resize_nearest(size, size)
    })
}

pub fn load_irregular_mask(path: &Path) -> Result<BinaryMask> {
    load_irregular_mask_sized(path, 256)
}

pub fn make_center_mask_sized(size: usize, resolution: usize) -> Result<BinaryMask> {
    if size > resolution {
        return Err(Error::config(format!(
            "mask size {size} exceeds resolution {resolution}"
        )));
    }
    let off = (resolution - size) / 2;
    Ok(BinaryMask::rect(resolution, resolution, off, off, size, size))
}

/// Centered `size`×`size` hole in a 256×256 frame.
pub fn make_center_mask(size: usize) -> Result<BinaryMask> {
    make_center_mask_sized(size, 256)
}

pub fn make_random_square_mask_sized<R: Rng + ?Sized>(
    size: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<BinaryMask> {
    if size > resolution {
        return Err(Error::config(format!(
            "mask size {size} exceeds resolution {resolution}"
        )));
    }
    let top = rng.random_range(0..=resolution - size);
    let left = rng.random_range(0..=resolution - size);
    Ok(BinaryMask::rect(resolution, resolution, top, left, size, size))
}

/// A `size`×`size` hole placed uniformly inside a 256×256 frame.
pub fn make_random_square_mask<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<BinaryMask> {
    make_random_square_mask_sized(size, 256, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    CenterSquare,
    RandomSquare,
    IrregularFile,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Square side in pixels (ignored for irregular masks).
    pub size: usize,
    /// Mask file, or a directory of mask files, for irregular masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<PathBuf>,
}

impl MaskSpec {
    pub fn center(size: usize) -> Self {
        MaskSpec {
            kind: MaskKind::CenterSquare,
            size,
            source_path: None,
        }
    }

    pub fn random(size: usize) -> Self {
        MaskSpec {
            kind: MaskKind::RandomSquare,
            size,
            source_path: None,
        }
    }

    pub fn irregular(path: impl Into<PathBuf>) -> Self {
        MaskSpec {
            kind: MaskKind::IrregularFile,
            size: 0,
            source_path: Some(path.into()),
        }
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        match self.kind {
            MaskKind::CenterSquare | MaskKind::RandomSquare if self.size > resolution => Err(
                Error::config(format!("mask size {} exceeds resolution {resolution}", self.size)),
            ),
            MaskKind::IrregularFile if self.source_path.is_none() => {
                Err(Error::config("irregular masks need a source path"))
            }
            _ => Ok(()),
        }
    }

    /// Files an irregular spec draws from, sorted by name.
    pub fn mask_files(&self) -> Result<Vec<PathBuf>> {
        let path = self
            .source_path
            .as_ref()
            .ok_or_else(|| Error::config("irregular masks need a source path"))?;
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Dataset(format!("no mask files in {}", path.display())));
            }
            Ok(files)
        } else {
            Ok(vec![path.clone()])
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, resolution: usize, rng: &mut R) -> Result<BinaryMask> {
        match self.kind {
            MaskKind::CenterSquare => make_center_mask_sized(self.size, resolution),
            MaskKind::RandomSquare => make_random_square_mask_sized(self.size, resolution, rng),
            MaskKind::IrregularFile => {
                let files = self.mask_files()?;
                let pick = &files[rng.random_range(0..files.len())];
                load_irregular_mask_sized(pick, resolution)
            }
        }
    }
}

/// Images `[N, 3, R, R]` with one mask each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<BinaryMask>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn mask_refs(&self) -> Vec<&BinaryMask> {
        self.masks.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Endless batches over in-memory samples, reshuffled without replacement
/// every epoch. Deterministic for a fixed seed.
pub struct Batcher {
    samples: Vec<ImageSample>,
    mask_spec: MaskSpec,
    batch_size: usize,
    resolution: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl Batcher {
    pub fn new(
        samples: Vec<ImageSample>,
        mask_spec: MaskSpec,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dataset("cannot batch an empty dataset".into()))?;
        let resolution = first.height();
        if samples
            .iter()
            .any(|s| s.height() != resolution || s.width() != resolution)
        {
            return Err(Error::shape("all samples must share one square size"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        mask_spec.validate(resolution)?;
        let mut b = Batcher {
            order: Vec::new(),
            samples,
            mask_spec,
            batch_size,
            resolution,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            epoch: 0,
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.samples.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut images = Vec::with_capacity(self.batch_size);
        let mut masks = Vec::with_capacity(self.batch_size);
        let mut ids = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let sample = &self.samples[self.order[self.cursor]];
            self.cursor += 1;
            images.push(sample.pixels().clone());
            ids.push(sample.id.clone());
            masks.push(self.mask_spec.generate(self.resolution, &mut self.rng)?);
        }
        Ok(Batch {
            images: Tensor::stack_batch(&images)?,
            masks,
            ids,
        })
    }
}

/// Loads the training split of `manifest` and draws one batch.
pub fn make_batch(
    manifest: &DatasetManifest,
    mask_spec: &MaskSpec,
    batch_size: usize,
    resolution: usize,
    seed: u64,
) -> Result<Batch> {
    let paths: Vec<PathBuf> = manifest
        .split(Split::Train)
        .into_iter()
        .map(|e| e.path.clone())
        .collect();
    if paths.is_empty() {
        return Err(Error::Dataset("manifest has no training entries".into()));
    }
    let samples = load_images(&paths, resolution, 1);
    Batcher::new(samples, mask_spec.clone(), batch_size, seed)?.next_batch()
}
