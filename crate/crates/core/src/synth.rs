//! Single-image synthesis from a source face, an optional edited mask and a
//! style taken from a latent seed or a reference face.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{AttributeId, DomainLabel, Image, SegMask};
use crate::error::{Error, Result};
use crate::networks::{sample_latent, Inference, NetworkParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleMode {
    Latent,
    Reference,
}

impl StyleMode {
    pub fn name(self) -> &'static str {
        match self {
            StyleMode::Latent => "latent",
            StyleMode::Reference => "reference",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "latent" => Some(StyleMode::Latent),
            "reference" => Some(StyleMode::Reference),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub source: Image,
    /// Target layout; the segmenter's parse of `source` when absent.
    pub mask: Option<SegMask>,
    pub mode: StyleMode,
    pub domain: DomainLabel,
    /// Seed of the latent code in latent mode.
    pub seed: u64,
    pub reference: Option<Image>,
    /// Attributes to re-inpaint; defaults to those whose region in `mask`
    /// differs from the parse of `source`.
    pub masked_attributes: Option<Vec<AttributeId>>,
}

impl SynthesisRequest {
    pub fn latent(source: Image, domain: DomainLabel, seed: u64) -> Self {
        Self {
            source,
            mask: None,
            mode: StyleMode::Latent,
            domain,
            seed,
            reference: None,
            masked_attributes: None,
        }
    }

    pub fn reference(source: Image, domain: DomainLabel, reference: Image) -> Self {
        Self {
            mode: StyleMode::Reference,
            reference: Some(reference),
            ..Self::latent(source, domain, 0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub image: Image,
    /// Segmenter parse of `image`.
    pub predicted_mask: SegMask,
    /// Layout the generator was conditioned on.
    pub mask: SegMask,
    pub masked_attributes: Vec<AttributeId>,
}

/// Segmenter parse of one image.
pub fn parse(params: &NetworkParams<f32>, image: &Image) -> Result<SegMask> {
    SegMask::argmax(&Inference::new(params).segment(&image.to_tensor())?)
}

/// Attributes whose support differs between two masks.
pub fn changed_attributes(a: &SegMask, b: &SegMask) -> Vec<AttributeId> {
    AttributeId::ALL
        .into_iter()
        .filter(|c| {
            let class = c.class() as u8;
            a.labels()
                .iter()
                .zip(b.labels())
                .any(|(&x, &y)| (x == class) != (y == class))
        })
        .collect()
}

/// `1 x d_s` style code for `domain`.
pub fn style_code(params: &NetworkParams<f32>, req: &SynthesisRequest) -> Result<Tensor<f32>> {
    let inf = Inference::new(params);
    match req.mode {
        StyleMode::Latent => {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            let z = sample_latent(&mut rng, 1, params.config.latent_dim);
            inf.map(&z, &[req.domain])
        }
        StyleMode::Reference => {
            let r = req.reference.as_ref().ok_or(Error::MissingReference)?;
            check_size(params, r, "reference")?;
            inf.encode(&r.to_tensor(), &[req.domain])
        }
    }
}

fn check_size(params: &NetworkParams<f32>, img: &Image, what: &str) -> Result<()> {
    let s = params.config.image_size;
    if img.height() != s || img.width() != s {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{what} is {}x{}, model expects {s}x{s}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Generate a face following `req.mask` with the requested style. Pixels of
/// each masked attribute, in either the source parse or the target mask,
/// are blanked before generation.
pub fn synthesize(params: &NetworkParams<f32>, req: &SynthesisRequest) -> Result<Synthesis> {
    check_size(params, &req.source, "source")?;
    let source_parse = parse(params, &req.source)?;
    let mask = match &req.mask {
        Some(m) => {
            if (m.height(), m.width()) != (req.source.height(), req.source.width()) {
                return Err(Error::BadMask(alloc::format!(
                    "mask is {}x{}, source is {}x{}",
                    m.height(),
                    m.width(),
                    req.source.height(),
                    req.source.width()
                )));
            }
            m.clone()
        }
        None => source_parse.clone(),
    };
    let masked = match &req.masked_attributes {
        Some(a) => a.clone(),
        None => changed_attributes(&source_parse, &mask),
    };
    let s = style_code(params, req)?;

    let hw = req.source.height() * req.source.width();
    let mut data = req.source.data().to_vec();
    for c in &masked {
        let class = c.class() as u8;
        for (i, (&a, &b)) in source_parse.labels().iter().zip(mask.labels()).enumerate() {
            if a == class || b == class {
                for ch in 0..3 {
                    data[ch * hw + i] = 0.0;
                }
            }
        }
    }
    let x_masked = Image::new(req.source.height(), req.source.width(), data)?;
    let out = Inference::new(params).generate(&x_masked.to_tensor(), &mask.to_tensor(), &s)?;
    let image = Image::from_tensor(&out)?;
    let predicted_mask = parse(params, &image)?;
    Ok(Synthesis {
        image,
        predicted_mask,
        mask,
        masked_attributes: masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::SemanticClass;
    use crate::networks::NetConfig;
    use alloc::vec;
    use rand::Rng;

    fn setup() -> (NetworkParams<f32>, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = NetworkParams::init(NetConfig::desk(16), &mut rng).unwrap();
        let img = Image::new(16, 16, (0..3 * 256).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap();
        (params, img)
    }

    #[test]
    fn deterministic_given_seed() {
        let (params, img) = setup();
        let req = SynthesisRequest::latent(img.clone(), DomainLabel::Male, 5);
        let a = synthesize(&params, &req).unwrap();
        let b = synthesize(&params, &req).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&params, &SynthesisRequest { seed: 6, ..req }).unwrap();
        assert_ne!(a.image, c.image);
        assert_eq!(a.predicted_mask, parse(&params, &a.image).unwrap());
        assert!(a.masked_attributes.is_empty());
        assert_eq!(a.image.height(), 16);
    }

    #[test]
    fn reference_mode_needs_reference() {
        let (params, img) = setup();
        let mut req = SynthesisRequest::reference(img.clone(), DomainLabel::Female, img.clone());
        assert!(synthesize(&params, &req).is_ok());
        req.reference = None;
        assert_eq!(synthesize(&params, &req).unwrap_err(), Error::MissingReference);
    }

    #[test]
    fn bad_mask_size_rejected() {
        let (params, img) = setup();
        let mut req = SynthesisRequest::latent(img, DomainLabel::Male, 0);
        req.mask = Some(SegMask::filled(8, 8, SemanticClass::Skin));
        assert!(matches!(synthesize(&params, &req), Err(Error::BadMask(_))));
    }

    #[test]
    fn edited_attributes_default_to_changed_regions() {
        let (params, img) = setup();
        let base = parse(&params, &img).unwrap();
        let mut edited = base.clone();
        for y in 0..16 {
            for x in 0..16 {
                let old = base.label(y, x);
                let in_box = (6..9).contains(&y) && (4..12).contains(&x);
                let class = match old {
                    SemanticClass::Eyes | SemanticClass::Nose => old,
                    _ if in_box => SemanticClass::Mouth,
                    SemanticClass::Mouth => SemanticClass::Skin,
                    _ => old,
                };
                edited.set(y, x, class);
            }
        }
        let mut req = SynthesisRequest::latent(img, DomainLabel::Male, 0);
        req.mask = Some(edited.clone());
        let out = synthesize(&params, &req).unwrap();
        assert_eq!(out.mask, edited);
        assert_eq!(out.masked_attributes, vec![AttributeId::Mouth]);
    }

    #[test]
    fn changed_attributes_examples() {
        let a = SegMask::from_labels(1, 4, vec![0, 2, 3, 4]).unwrap();
        assert!(changed_attributes(&a, &a).is_empty());
        let b = SegMask::from_labels(1, 4, vec![0, 2, 1, 1]).unwrap();
        assert_eq!(changed_attributes(&a, &b), vec![AttributeId::Nose, AttributeId::Mouth]);
        let c = SegMask::from_labels(1, 4, vec![2, 1, 3, 4]).unwrap();
        assert_eq!(changed_attributes(&a, &c), vec![AttributeId::Eyes]);
    }
}
