//! Procedural cartoon faces with exact raw label maps.
//!
//! Each face is an ellipse of skin with eyes, brows, nose and lips at
//! jittered positions over a shaded background, hair and neck. Labels use
//! the raw 19-class table so the output can be written in the on-disk
//! dataset layout and re-read through the ordinary loader. Pixel values are
//! quantised to 8 bits, so a PNG round trip is lossless.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{raw, remap_classes, DomainLabel, Image, MemorySource, Sample};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyFace {
    pub size: usize,
    /// Interleaved RGB, `size * size * 3` bytes.
    pub rgb: Vec<u8>,
    /// Raw class ids, `size * size`.
    pub raw_labels: Vec<u8>,
    pub gender: DomainLabel,
}

impl ToyFace {
    pub fn to_sample(&self, id: impl Into<alloc::string::String>) -> Result<Sample> {
        Ok(Sample {
            id: id.into(),
            image: Image::from_rgb8(self.size, self.size, &self.rgb)?,
            mask: remap_classes(self.size, self.size, &self.raw_labels)?,
            gender: self.gender,
        })
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn value(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.value(x, y) <= 1.0
    }
}

fn jitter<R: Rng>(rng: &mut R, base: f64, spread: f64) -> f64 {
    base + rng.gen_range(-spread..=spread)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Face number `index` of the set generated from `seed`. Even-numbered and
/// odd-numbered faces differ in expected gender only through the draw.
pub fn toy_face(size: usize, seed: u64, index: u64) -> ToyFace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;
    let gender = if rng.gen_bool(0.5) {
        DomainLabel::Male
    } else {
        DomainLabel::Female
    };
    let male = gender == DomainLabel::Male;

    let face = Ellipse {
        cx: jitter(&mut rng, 0.5, 0.03) * s,
        cy: jitter(&mut rng, 0.52, 0.03) * s,
        rx: jitter(&mut rng, if male { 0.30 } else { 0.27 }, 0.02) * s,
        ry: jitter(&mut rng, 0.36, 0.02) * s,
    };
    let hair = Ellipse {
        cx: face.cx,
        cy: face.cy - if male { 0.10 } else { 0.04 } * s,
        rx: face.rx * if male { 1.08 } else { 1.25 },
        ry: face.ry * if male { 0.95 } else { 1.2 },
    };
    let eye_y = face.cy + jitter(&mut rng, -0.08, 0.02) * s;
    let eye_dx = jitter(&mut rng, 0.12, 0.015) * s;
    let eye_rx = jitter(&mut rng, 0.055, 0.012) * s;
    let eye_ry = jitter(&mut rng, 0.03, 0.008) * s;
    let eyes = [
        Ellipse { cx: face.cx - eye_dx, cy: eye_y, rx: eye_rx, ry: eye_ry },
        Ellipse { cx: face.cx + eye_dx, cy: eye_y, rx: eye_rx, ry: eye_ry },
    ];
    let brow_y = eye_y - jitter(&mut rng, 0.07, 0.01) * s;
    let brows = [
        Ellipse { cx: face.cx - eye_dx, cy: brow_y, rx: eye_rx * 1.2, ry: 0.015 * s + 0.5 },
        Ellipse { cx: face.cx + eye_dx, cy: brow_y, rx: eye_rx * 1.2, ry: 0.015 * s + 0.5 },
    ];
    let nose = Ellipse {
        cx: face.cx + jitter(&mut rng, 0.0, 0.01) * s,
        cy: face.cy + jitter(&mut rng, 0.05, 0.015) * s,
        rx: jitter(&mut rng, 0.04, 0.01) * s,
        ry: jitter(&mut rng, 0.07, 0.015) * s,
    };
    let mouth = Ellipse {
        cx: face.cx + jitter(&mut rng, 0.0, 0.01) * s,
        cy: face.cy + jitter(&mut rng, 0.2, 0.02) * s,
        rx: jitter(&mut rng, 0.1, 0.03) * s,
        ry: jitter(&mut rng, 0.04, 0.015) * s,
    };
    let mouth_open = rng.gen_range(0.0..0.5);
    let neck_half = face.rx * 0.45;

    let tone = rng.gen_range(0.0..1.0);
    let skin = mix([0.95, 0.78, 0.65], [0.55, 0.36, 0.25], tone);
    let nose_col = mix(skin, [0.4, 0.2, 0.15], 0.25);
    let hair_col = mix([0.1, 0.07, 0.05], [0.75, 0.6, 0.3], rng.gen_range(0.0..1.0));
    let bg_a = if male { [0.35, 0.45, 0.7] } else { [0.7, 0.45, 0.55] };
    let bg_b = mix(bg_a, [rng.gen(), rng.gen(), rng.gen()], 0.4);
    let lip_col = mix([0.8, 0.2, 0.25], [0.55, 0.25, 0.25], rng.gen_range(0.0..1.0));
    let eye_col = mix([0.05, 0.05, 0.1], [0.2, 0.35, 0.5], rng.gen_range(0.0..1.0));
    let cloth_col: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];

    let mut rgb = Vec::with_capacity(size * size * 3);
    let mut labels = Vec::with_capacity(size * size);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let (label, col) = if eyes.iter().any(|e| e.contains(x, y)) {
                let l = if x < face.cx { raw::L_EYE } else { raw::R_EYE };
                (l, eye_col)
            } else if brows.iter().any(|e| e.contains(x, y)) {
                let l = if x < face.cx { raw::L_BROW } else { raw::R_BROW };
                (l, mix(hair_col, [0.0; 3], 0.3))
            } else if mouth.contains(x, y) {
                let inner = Ellipse { ry: mouth.ry * mouth_open, rx: mouth.rx * 0.8, ..mouth };
                if mouth_open > 0.1 && inner.contains(x, y) {
                    (raw::MOUTH, [0.25, 0.05, 0.08])
                } else if y < mouth.cy {
                    (raw::U_LIP, lip_col)
                } else {
                    (raw::L_LIP, mix(lip_col, [1.0; 3], 0.1))
                }
            } else if nose.contains(x, y) {
                (raw::NOSE, nose_col)
            } else if face.contains(x, y) {
                let shade = 1.0 - 0.15 * face.value(x, y);
                (raw::SKIN, [skin[0] * shade, skin[1] * shade, skin[2] * shade])
            } else if hair.contains(x, y) && y < face.cy + 0.15 * s {
                (raw::HAIR, hair_col)
            } else if y > face.cy + face.ry * 0.8 && (x - face.cx).abs() < neck_half {
                (raw::NECK, mix(skin, [0.0; 3], 0.15))
            } else if y > face.cy + face.ry * 0.95 {
                (raw::CLOTH, cloth_col)
            } else {
                (raw::BACKGROUND, mix(bg_a, bg_b, y / s))
            };
            labels.push(label);
            for c in col {
                rgb.push(libm::round(c.clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
    }
    ToyFace {
        size,
        rgb,
        raw_labels: labels,
        gender,
    }
}

/// `n` toy faces in memory, identified `toy-00000`, `toy-00001`, ...
pub fn toy_source(n: usize, size: usize, seed: u64) -> Result<MemorySource> {
    let samples = (0..n)
        .map(|i| toy_face(size, seed, i as u64).to_sample(format!("toy-{i:05}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(MemorySource::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{SampleSource, SemanticClass};

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(toy_face(32, 1, 0), toy_face(32, 1, 0));
        assert_ne!(toy_face(32, 1, 0).rgb, toy_face(32, 1, 1).rgb);
        assert_ne!(toy_face(32, 1, 0).rgb, toy_face(32, 2, 0).rgb);
    }

    #[test]
    fn every_working_class_present() {
        let src = toy_source(12, 64, 3).unwrap();
        let mut genders = [0usize; 2];
        for i in 0..src.len() {
            let s = src.get(i).unwrap();
            for c in SemanticClass::ALL {
                assert!(s.mask.count(c) > 0, "sample {i} lacks {c:?}");
            }
            genders[s.gender.index()] += 1;
        }
        assert!(genders[0] > 0 && genders[1] > 0);
    }

    #[test]
    fn small_sizes_still_have_attributes() {
        let f = toy_face(16, 0, 0).to_sample("x").unwrap();
        assert!(f.mask.count(SemanticClass::Eyes) > 0);
        assert!(f.mask.count(SemanticClass::Mouth) > 0);
    }
}
