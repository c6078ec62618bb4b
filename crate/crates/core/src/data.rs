//! Canonical data types, mask algebra and the compositing convention.
//!
//! Masks follow one polarity everywhere, on disk included: `1` marks a known
//! pixel and `0` marks a hole (a removal or restoration target).

use std::collections::BTreeMap;
use std::path::Path;

use decouple_tensor::Tensor;
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, stored channel-planar (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Validates length, finiteness and range.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be nonzero".into()));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image data has {} values, expected 3×{height}×{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Self::new(height, width, data)
    }

    /// From interleaved 8-bit RGB bytes.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Shape("rgb8 buffer length mismatch".into()));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Self::new(height, width, data)
    }

    /// Interleaved 8-bit RGB, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone())
    }

    /// Batch item `n` of a `[N, 3, H, W]` tensor. Values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        if t.c() != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", t.c())));
        }
        let data = t.item(n).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(t.h(), t.w(), data)
    }

    /// `I ⊙ m`: holes set to zero.
    pub fn masked(&self, mask: &Mask) -> Result<Image> {
        check_dims(self.dims(), mask.dims(), "image and mask")?;
        let plane = self.height * self.width;
        let mut data = self.data.clone();
        for c in 0..3 {
            for (v, &m) in data[c * plane..(c + 1) * plane].iter_mut().zip(&mask.data) {
                if m == 0 {
                    *v = 0.0;
                }
            }
        }
        Ok(Image { data, ..*self })
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| codec_err(path, e))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
                .expect("buffer sized from dimensions");
        buf.save(path).map_err(|e| codec_err(path, e))
    }
}

/// Binary mask: `1` = known pixel, `0` = hole.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {height}×{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::InvalidValue(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// The all-ones mask `𝟙_m` (no holes).
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// `known(y, x)` decides each pixel.
    pub fn from_fn(height: usize, width: usize, known: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(known(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, known: bool) {
        self.data[y * self.width + x] = u8::from(known);
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Logical complement: holes become known and vice versa.
    pub fn complement(&self) -> Mask {
        Mask {
            data: self.data.iter().map(|v| 1 - v).collect(),
            ..*self
        }
    }

    /// Pixelwise AND of known regions (union of holes).
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        check_dims(self.dims(), other.dims(), "masks")?;
        Ok(Mask {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
            ..*self
        })
    }

    /// Nearest-neighbour resampling; the result stays binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        if (height, width) == self.dims() {
            return self.clone();
        }
        Mask::from_fn(height, width, |y, x| {
            let sy = ((2 * y + 1) * self.height / (2 * height)).min(self.height - 1);
            let sx = ((2 * x + 1) * self.width / (2 * width)).min(self.width - 1);
            self.is_known(sy, sx)
        })
    }

    /// Shifts holes by `(dy, dx)`; pixels shifted in from outside are known.
    pub fn translate(&self, dy: isize, dx: isize) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                true
            } else {
                self.is_known(sy as usize, sx as usize)
            }
        })
    }

    /// `[1, 1, H, W]` tensor of `m`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// `[1, 1, H, W]` tensor of `1 − m`.
    pub fn hole_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| f64::from(1 - v)).collect(),
        )
    }

    /// Stored as 8-bit grayscale with 255 for known pixels and 0 for holes.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.data.iter().map(|&v| v * 255).collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
                .expect("buffer sized from dimensions");
        buf.save(path).map_err(|e| codec_err(path, e))
    }

    /// Values above 127 read as known.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| codec_err(path, e))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| u8::from(v > 127)).collect();
        Mask::new(h as usize, w as usize, data)
    }
}

/// Per-pixel class ids; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape("segmentation map length mismatch".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Fails when a pixel carries an id absent from `class_table`.
    pub fn validate_classes(&self, class_table: &BTreeMap<u16, String>) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&c| c != 0 && !class_table.contains_key(&c))
        {
            Some(c) => Err(Error::InvalidValue(format!("class id {c} not in class table"))),
            None => Ok(()),
        }
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let (h, w, data) = read_u16_png(path)?;
        Self::new(h, w, data)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_u16_png(path, self.height, self.width, &self.data)
    }
}

/// Per-pixel instance ids (`0` = none) with an id → class side table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
    classes: BTreeMap<u16, u16>,
}

impl InstanceMap {
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<u16>,
        classes: BTreeMap<u16, u16>,
    ) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape("instance map length mismatch".into()));
        }
        if let Some(id) = data.iter().find(|&&id| id != 0 && !classes.contains_key(&id)) {
            return Err(Error::InvalidValue(format!(
                "instance id {id} missing from side table"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            classes,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn classes(&self) -> &BTreeMap<u16, u16> {
        &self.classes
    }

    pub fn class_of(&self, id: u16) -> Option<u16> {
        self.classes.get(&id).copied()
    }

    /// Instance ids of `class`, ascending.
    pub fn instances_of_class(&self, class: u16) -> Vec<u16> {
        self.classes
            .iter()
            .filter(|(_, &c)| c == class)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Flat pixel indices of one instance.
    pub fn pixels_of(&self, id: u16) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn read_png(path: &Path, classes: BTreeMap<u16, u16>) -> Result<Self> {
        let (h, w, data) = read_u16_png(path)?;
        Self::new(h, w, data, classes)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_u16_png(path, self.height, self.width, &self.data)
    }
}

/// One scene with its annotations and, for paired data, the object-free counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub seg: SegmentationMap,
    pub inst: InstanceMap,
    pub gt_removal: Option<Image>,
    pub id: String,
    pub source: String,
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        let d = self.image.dims();
        check_dims(d, self.seg.dims(), "image and segmentation")?;
        check_dims(d, self.inst.dims(), "image and instance map")?;
        if let Some(gt) = &self.gt_removal {
            check_dims(d, gt.dims(), "image and removal ground truth")?;
        }
        Ok(())
    }
}

/// Known pixels from `original`, holes from `raw_output`.
pub fn composite(original: &Image, raw_output: &Image, mask: &Mask) -> Result<Image> {
    check_dims(original.dims(), raw_output.dims(), "original and output")?;
    check_dims(original.dims(), mask.dims(), "image and mask")?;
    let plane = original.height * original.width;
    let mut data = original.data.clone();
    for c in 0..3 {
        let range = c * plane..(c + 1) * plane;
        for ((v, &r), &m) in data[range.clone()]
            .iter_mut()
            .zip(&raw_output.data[range])
            .zip(&mask.data)
        {
            if m == 0 {
                *v = r;
            }
        }
    }
    Ok(Image { data, ..*original })
}

/// Fraction of hole pixels.
pub fn mask_coverage(mask: &Mask) -> f64 {
    mask.hole_count() as f64 / mask.data.len() as f64
}

/// Fraction of an instance's pixels that are holes in `mask`.
pub fn instance_occlusion(inst: &InstanceMap, instance_id: u16, mask: &Mask) -> Result<f64> {
    check_dims(inst.dims(), mask.dims(), "instance map and mask")?;
    if instance_id == 0 || !inst.classes.contains_key(&instance_id) {
        return Err(Error::UnknownInstance(instance_id));
    }
    let mut total = 0usize;
    let mut hidden = 0usize;
    for (&id, &m) in inst.data.iter().zip(&mask.data) {
        if id == instance_id {
            total += 1;
            hidden += usize::from(m == 0);
        }
    }
    if total == 0 {
        return Err(Error::UnknownInstance(instance_id));
    }
    Ok(hidden as f64 / total as f64)
}

pub fn class_pixel_count(seg: &SegmentationMap, class_id: u16) -> usize {
    seg.data.iter().filter(|&&c| c == class_id).count()
}

/// Fraction of pixels labelled `class_id`; `0.0` when the class is absent.
pub fn class_pixel_fraction(seg: &SegmentationMap, class_id: u16) -> f64 {
    class_pixel_count(seg, class_id) as f64 / seg.data.len() as f64
}

/// Mask whose holes are exactly the pixels of `class_id` (class-wise removal mask).
pub fn class_mask(seg: &SegmentationMap, class_id: u16) -> Mask {
    Mask {
        height: seg.height,
        width: seg.width,
        data: seg.data.iter().map(|&c| u8::from(c != class_id)).collect(),
    }
}

pub(crate) fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: {}×{} vs {}×{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

fn codec_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn read_u16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)
        .map_err(|e| codec_err(path, e))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn write_u16_png(path: &Path, height: usize, width: usize, data: &[u16]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data.to_vec())
            .expect("buffer sized from dimensions");
    buf.save(path).map_err(|e| codec_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, v: f64) -> Image {
        Image::filled(h, w, [v, v, v]).unwrap()
    }

    #[test]
    fn composite_selects_per_pixel() {
        let original = grid(2, 2, 0.5);
        let raw = grid(2, 2, 0.9);
        let mask = Mask::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        let out = composite(&original, &raw, &mask).unwrap();
        for c in 0..3 {
            assert_eq!(out.get(c, 0, 0), 0.5);
            assert_eq!(out.get(c, 0, 1), 0.9);
            assert_eq!(out.get(c, 1, 0), 0.5);
            assert_eq!(out.get(c, 1, 1), 0.5);
        }
    }

    #[test]
    fn composite_identity_cases() {
        let original = grid(4, 4, 0.25);
        let raw = grid(4, 4, 0.75);
        assert_eq!(composite(&original, &raw, &Mask::ones(4, 4)).unwrap(), original);
        assert_eq!(composite(&original, &raw, &Mask::zeros(4, 4)).unwrap(), raw);
    }

    #[test]
    fn composite_rejects_shape_mismatch() {
        let err = composite(&grid(4, 4, 0.0), &grid(4, 5, 0.0), &Mask::ones(4, 4));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn coverage_counts_holes() {
        assert_eq!(mask_coverage(&Mask::ones(7, 3)), 0.0);
        assert_eq!(mask_coverage(&Mask::zeros(7, 3)), 1.0);
        let m = Mask::from_fn(10, 10, |y, x| y * 10 + x >= 25);
        assert_eq!(mask_coverage(&m), 0.25);
    }

    fn single_instance(h: usize, w: usize, pixels: &[usize]) -> InstanceMap {
        let mut data = vec![0u16; h * w];
        for &p in pixels {
            data[p] = 1;
        }
        InstanceMap::new(h, w, data, BTreeMap::from([(1, 1)])).unwrap()
    }

    #[test]
    fn occlusion_of_instance() {
        let pixels: Vec<usize> = (0..100).collect();
        let inst = single_instance(20, 20, &pixels);
        assert_eq!(instance_occlusion(&inst, 1, &Mask::ones(20, 20)).unwrap(), 0.0);
        let full = Mask::from_fn(20, 20, |y, x| y * 20 + x >= 100);
        assert_eq!(instance_occlusion(&inst, 1, &full).unwrap(), 1.0);
        let part = Mask::from_fn(20, 20, |y, x| y * 20 + x >= 47);
        assert_eq!(instance_occlusion(&inst, 1, &part).unwrap(), 0.47);
        assert!(matches!(
            instance_occlusion(&inst, 9, &part),
            Err(Error::UnknownInstance(9))
        ));
    }

    #[test]
    fn class_fraction_counts_pixels() {
        let seg = SegmentationMap::new(64, 64, vec![0; 4096]).unwrap();
        assert_eq!(class_pixel_fraction(&seg, 1), 0.0);
        let seg = SegmentationMap::new(64, 64, vec![1; 4096]).unwrap();
        assert_eq!(class_pixel_fraction(&seg, 1), 1.0);
        let seg =
            SegmentationMap::new(64, 64, (0..4096).map(|i| u16::from(i < 1024)).collect()).unwrap();
        assert_eq!(class_pixel_fraction(&seg, 1), 0.25);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..3 * 40 * 33).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(40, 33, &bytes).unwrap();
        let p = dir.path().join("a.png");
        img.write_png(&p).unwrap();
        assert_eq!(Image::read_png(&p).unwrap(), img);

        let mask = Mask::from_fn(40, 33, |y, x| (y + x) % 3 != 0);
        let p = dir.path().join("m.png");
        mask.write_png(&p).unwrap();
        assert_eq!(Mask::read_png(&p).unwrap(), mask);

        let seg = SegmentationMap::new(4, 4, (0..16).map(|i| i * 1000).collect()).unwrap();
        let p = dir.path().join("s.png");
        seg.write_png(&p).unwrap();
        assert_eq!(SegmentationMap::read_png(&p).unwrap(), seg);
    }

    proptest! {
        #[test]
        fn coverage_of_complement_sums_to_one(bits in proptest::collection::vec(0u8..2, 1..300)) {
            let n = bits.len();
            let m = Mask::new(1, n, bits).unwrap();
            prop_assert_eq!(mask_coverage(&m) + mask_coverage(&m.complement()), 1.0);
        }

        #[test]
        fn occlusion_is_monotone(
            inst_bits in proptest::collection::vec(0u16..2, 64),
            mask_bits in proptest::collection::vec(0u8..2, 64),
            extra in proptest::collection::vec(0usize..64, 0..10),
        ) {
            prop_assume!(inst_bits.contains(&1));
            let inst = InstanceMap::new(8, 8, inst_bits, BTreeMap::from([(1, 3)])).unwrap();
            let m = Mask::new(8, 8, mask_bits).unwrap();
            let mut more = m.clone();
            for i in extra {
                more.set(i / 8, i % 8, false);
            }
            prop_assert!(
                instance_occlusion(&inst, 1, &more).unwrap()
                    >= instance_occlusion(&inst, 1, &m).unwrap()
            );
        }

        #[test]
        fn composite_with_all_ones_is_exact(vals in proptest::collection::vec(0.0f64..=1.0, 3 * 6)) {
            let a = Image::new(2, 3, vals.clone()).unwrap();
            let b = Image::new(2, 3, vals.iter().map(|v| 1.0 - v).collect()).unwrap();
            prop_assert_eq!(composite(&a, &b, &Mask::ones(2, 3)).unwrap(), a);
        }
    }
}
