//! Images, semantic masks, the raw-label remapping and training batches.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of working semantic classes.
pub const NUM_CLASSES: usize = 5;

/// Working semantic classes; the discriminant is the channel index and the
/// value stored in wire/dataset masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum SemanticClass {
    Background = 0,
    Skin = 1,
    Eyes = 2,
    Nose = 3,
    Mouth = 4,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        SemanticClass::Background,
        SemanticClass::Skin,
        SemanticClass::Eyes,
        SemanticClass::Nose,
        SemanticClass::Mouth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }
}

/// Attributes that can be masked out and re-inpainted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttributeId {
    Eyes,
    Nose,
    Mouth,
}

impl AttributeId {
    pub const ALL: [AttributeId; 3] = [AttributeId::Eyes, AttributeId::Nose, AttributeId::Mouth];

    pub fn class(self) -> SemanticClass {
        match self {
            AttributeId::Eyes => SemanticClass::Eyes,
            AttributeId::Nose => SemanticClass::Nose,
            AttributeId::Mouth => SemanticClass::Mouth,
        }
    }

    pub fn channel(self) -> usize {
        self.class().index()
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeId::Eyes => "eyes",
            AttributeId::Nose => "nose",
            AttributeId::Mouth => "mouth",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum DomainLabel {
    #[default]
    Female = 0,
    Male = 1,
}

impl DomainLabel {
    pub const ALL: [DomainLabel; 2] = [DomainLabel::Female, DomainLabel::Male];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn toggled(self) -> Self {
        match self {
            DomainLabel::Female => DomainLabel::Male,
            DomainLabel::Male => DomainLabel::Female,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainLabel::Female => "female",
            DomainLabel::Male => "male",
        }
    }
}

/// RGB image in `[-1, 1]`, stored channel-major (`3 x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// From interleaved 8-bit RGB, mapping `0..=255` onto `[-1, 1]`.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {height}x{width} RGB image",
                rgb.len()
            )));
        }
        let hw = height * width;
        let mut data = vec![0.0f32; 3 * hw];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * hw + i] = px[ch] as f32 / 127.5 - 1.0;
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Interleaved 8-bit RGB with rounding and saturation.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = vec![0u8; 3 * hw];
        for i in 0..hw {
            for ch in 0..3 {
                let v = (self.data[ch * hw + i] + 1.0) * 127.5;
                out[3 * i + ch] = libm::roundf(v).clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    /// Clamp arbitrary values into range; used for network outputs.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if n != 1 || c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 1x3xHxW, got {:?}", t.shape())));
        }
        Ok(Self {
            height: h,
            width: w,
            data: t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone())
    }

    pub fn batch(images: &[&Image]) -> Tensor<f32> {
        let parts: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
        Tensor::stack_batch(&parts)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Per-pixel class labels. One-hot completeness holds by construction:
/// every pixel carries exactly one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::BadMask(format!("class index {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: SemanticClass) -> Self {
        Self {
            height,
            width,
            labels: vec![class as u8; height * width],
        }
    }

    /// From a `C x H x W` (or `1 x C x H x W`) tensor that must be exactly
    /// one-hot.
    pub fn from_one_hot(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            s => return Err(Error::ShapeMismatch(format!("one-hot tensor of shape {s:?}"))),
        };
        if c != NUM_CLASSES {
            return Err(Error::BadMask(format!("{c} channels, expected {NUM_CLASSES}")));
        }
        let hw = h * w;
        let mut labels = vec![0u8; hw];
        for (i, label) in labels.iter_mut().enumerate() {
            let mut hot = None;
            for ch in 0..c {
                match t.data()[ch * hw + i] {
                    v if v == 1.0 && hot.is_none() => hot = Some(ch as u8),
                    v if v == 0.0 => {}
                    _ => {
                        return Err(Error::BadMask(format!(
                            "pixel ({}, {}) is not one-hot",
                            i / w,
                            i % w
                        )))
                    }
                }
            }
            *label = hot.ok_or_else(|| {
                Error::BadMask(format!("pixel ({}, {}) has no class", i / w, i % w))
            })?;
        }
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }

    /// Argmax over channels of a `1 x C x H x W` probability tensor; ties go
    /// to the lowest channel.
    pub fn argmax(t: &Tensor<f32>) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if n != 1 || c != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!("expected 1x{NUM_CLASSES}xHxW, got {:?}", t.shape())));
        }
        let hw = h * w;
        let labels = (0..hw)
            .map(|i| {
                let mut best = 0;
                for ch in 1..c {
                    if t.data()[ch * hw + i] > t.data()[best * hw + i] {
                        best = ch;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> SemanticClass {
        SemanticClass::from_index(self.labels[y * self.width + x]).unwrap()
    }

    pub fn set(&mut self, y: usize, x: usize, class: SemanticClass) {
        self.labels[y * self.width + x] = class as u8;
    }

    /// Binary support of one class.
    pub fn channel(&self, class: SemanticClass) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class as u8).collect()
    }

    pub fn count(&self, class: SemanticClass) -> usize {
        self.labels.iter().filter(|&&l| l == class as u8).count()
    }

    /// `C x H x W` one-hot encoding flattened channel-major.
    pub fn one_hot(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; NUM_CLASSES * hw];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * hw + i] = 1.0;
        }
        out
    }

    /// `1 x C x H x W` one-hot tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, NUM_CLASSES, self.height, self.width], self.one_hot())
    }

    pub fn batch(masks: &[&SegMask]) -> Tensor<f32> {
        let parts: Vec<Tensor<f32>> = masks.iter().map(|m| m.to_tensor()).collect();
        Tensor::stack_batch(&parts)
    }
}

/// Raw face-parsing labels as numbered in CelebAMask-HQ.
pub mod raw {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const NOSE: u8 = 2;
    pub const EYE_GLASSES: u8 = 3;
    pub const L_EYE: u8 = 4;
    pub const R_EYE: u8 = 5;
    pub const L_BROW: u8 = 6;
    pub const R_BROW: u8 = 7;
    pub const L_EAR: u8 = 8;
    pub const R_EAR: u8 = 9;
    pub const MOUTH: u8 = 10;
    pub const U_LIP: u8 = 11;
    pub const L_LIP: u8 = 12;
    pub const HAIR: u8 = 13;
    pub const HAT: u8 = 14;
    pub const EAR_RING: u8 = 15;
    pub const NECKLACE: u8 = 16;
    pub const NECK: u8 = 17;
    pub const CLOTH: u8 = 18;
    pub const NUM_RAW: usize = 19;
}

/// Working class of a raw label.
pub fn remap_class(raw_label: u8) -> Result<SemanticClass> {
    use raw::*;
    Ok(match raw_label {
        L_EYE | R_EYE | L_BROW | R_BROW => SemanticClass::Eyes,
        NOSE => SemanticClass::Nose,
        MOUTH | U_LIP | L_LIP => SemanticClass::Mouth,
        SKIN => SemanticClass::Skin,
        v if (v as usize) < NUM_RAW => SemanticClass::Background,
        v => return Err(Error::UnknownClass(v)),
    })
}

/// Map a raw label grid onto the working classes.
pub fn remap_classes(height: usize, width: usize, raw_mask: &[u8]) -> Result<SegMask> {
    if raw_mask.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "{} raw labels for a {height}x{width} mask",
            raw_mask.len()
        )));
    }
    let labels = raw_mask
        .iter()
        .map(|&r| remap_class(r).map(|c| c as u8))
        .collect::<Result<Vec<_>>>()?;
    SegMask::from_labels(height, width, labels)
}

/// Nearest-neighbour resampling of a label grid (pixel-centre alignment).
pub fn resize_nearest(src: &[u8], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<u8> {
    assert_eq!(src.len(), h * w);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((2 * y + 1) * h / (2 * oh)).min(h - 1);
        for x in 0..ow {
            let sx = ((2 * x + 1) * w / (2 * ow)).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Copy of `x` with every pixel of attribute `c` set to mid-grey (0.0).
pub fn mask_attribute(x: &Image, m: &SegMask, c: AttributeId) -> Result<Image> {
    check_pair(x, m)?;
    let hw = x.height * x.width;
    let class = c.class() as u8;
    let mut data = x.data.clone();
    for (i, &l) in m.labels.iter().enumerate() {
        if l == class {
            for ch in 0..3 {
                data[ch * hw + i] = 0.0;
            }
        }
    }
    Ok(Image {
        height: x.height,
        width: x.width,
        data,
    })
}

pub(crate) fn check_pair(x: &Image, m: &SegMask) -> Result<()> {
    if (x.height, x.width) != (m.height, m.width) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            x.height, x.width, m.height, m.width
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: SegMask,
    pub gender: DomainLabel,
}

/// Random-access collection of decoded samples.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<Sample>;

    /// Domain of sample `index`; sources with an attribute table override
    /// this to avoid decoding the image.
    fn gender(&self, index: usize) -> Result<DomainLabel> {
        Ok(self.get(index)?.gender)
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub samples: Vec<Sample>,
}

impl MemorySource {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }
}

impl SampleSource for MemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Source(format!("index {index} out of range")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub indices: Vec<usize>,
    /// `N x 3 x H x W`.
    pub x: Tensor<f32>,
    /// `N x C x H x W` one-hot.
    pub m: Tensor<f32>,
    pub masks: Vec<SegMask>,
    pub gender: Vec<DomainLabel>,
    pub c_masked: Vec<AttributeId>,
    /// `N x 3 x H x W`, `x` with attribute `c_masked[i]` zeroed per sample.
    pub x_masked: Tensor<f32>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draw `batch_size` samples with replacement and one masked attribute per
/// sample, both from a generator seeded with `seed`.
pub fn make_batch<S: SampleSource + ?Sized>(
    source: &S,
    batch_size: usize,
    seed: u64,
) -> Result<TrainingBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_batch_with(source, batch_size, &mut rng)
}

pub fn make_batch_with<S: SampleSource + ?Sized, R: Rng>(
    source: &S,
    batch_size: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if source.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..source.len())).collect();
    let c_masked: Vec<AttributeId> = (0..batch_size)
        .map(|_| AttributeId::ALL[rng.gen_range(0..AttributeId::ALL.len())])
        .collect();
    let samples = indices
        .iter()
        .map(|&i| source.get(i))
        .collect::<Result<Vec<_>>>()?;
    let masked = samples
        .iter()
        .zip(&c_masked)
        .map(|(s, &c)| mask_attribute(&s.image, &s.mask, c))
        .collect::<Result<Vec<_>>>()?;
    let x = Image::batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
    let masks: Vec<SegMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let m = SegMask::batch(&masks.iter().collect::<Vec<_>>());
    let x_masked = Image::batch(&masked.iter().collect::<Vec<_>>());
    Ok(TrainingBatch {
        indices,
        x,
        m,
        masks,
        gender: samples.iter().map(|s| s.gender).collect(),
        c_masked,
        x_masked,
    })
}
