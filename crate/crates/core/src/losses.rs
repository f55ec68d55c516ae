//! The five training objectives and their weighted combination.
//!
//! Graph-level functions take and return [`Var`]s so they compose with the
//! networks for back-propagation. All terms are batch means.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datapipe::{AttributeId, SegMask};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub sty: f64,
    pub ds: f64,
    pub cyc: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            sty: 1.0,
            ds: 1.0,
            cyc: 1.0,
            seg: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.sty, self.ds, self.cyc, self.seg];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar values of the five generator-side terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub adv: f64,
    pub sty: f64,
    pub ds: f64,
    pub cyc: f64,
    pub seg: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("L_adv", self.adv),
            ("L_sty", self.sty),
            ("L_ds", self.ds),
            ("L_cyc", self.cyc),
            ("L_seg", self.seg),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFiniteTerm(name)),
            None => Ok(()),
        }
    }
}

/// `λ_adv L_adv + λ_sty L_sty + λ_ds L_ds + λ_cyc L_cyc + λ_seg L_seg`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    terms.check_finite()?;
    Ok(weights.adv * terms.adv
        + weights.sty * terms.sty
        + weights.ds * terms.ds
        + weights.cyc * terms.cyc
        + weights.seg * terms.seg)
}

/// Discriminator objective: `-[log σ(real) + log(1 - σ(fake))]`, each side
/// averaged over the batch.
pub fn adv_loss_d<T: Scalar>(g: &mut Graph<T>, real_logit: Var, fake_logit: Var) -> Var {
    let neg_real = g.scale(real_logit, -1.0);
    let a = g.softplus(neg_real);
    let a = g.mean(a);
    let b = g.softplus(fake_logit);
    let b = g.mean(b);
    g.add(a, b)
}

/// Non-saturating generator objective `-log σ(fake)`.
pub fn adv_loss_g<T: Scalar>(g: &mut Graph<T>, fake_logit: Var) -> Var {
    let neg = g.scale(fake_logit, -1.0);
    let l = g.softplus(neg);
    g.mean(l)
}

fn mean_abs_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, what: &str) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean absolute difference between the target style code and the code
/// re-extracted from the generated image.
pub fn style_loss<T: Scalar>(g: &mut Graph<T>, s_target: Var, s_rec: Var) -> Result<Var> {
    let (a, b) = (g.value(s_target).numel(), g.value(s_rec).numel());
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    mean_abs_diff(g, s_target, s_rec, "style codes")
}

/// Negative mean absolute difference of two outputs; minimising it pushes
/// the outputs apart.
pub fn ds_loss<T: Scalar>(g: &mut Graph<T>, x1: Var, x2: Var) -> Result<Var> {
    let d = mean_abs_diff(g, x1, x2, "diversity pair")?;
    Ok(g.scale(d, -1.0))
}

/// Mean absolute reconstruction error.
pub fn cyc_loss<T: Scalar>(g: &mut Graph<T>, x: Var, x_rec: Var) -> Result<Var> {
    mean_abs_diff(g, x, x_rec, "cycle reconstruction")
}

/// Binary pixel set of one attribute, possibly dilated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeRegion {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl AttributeRegion {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Support of attribute `c` in `m` dilated by a `(2k+1) x (2k+1)` square.
pub fn attribute_region(m: &SegMask, c: AttributeId, k: usize) -> AttributeRegion {
    let (h, w) = (m.height(), m.width());
    let support = m.channel(c.class());
    AttributeRegion {
        height: h,
        width: w,
        pixels: dilate(&support, h, w, k),
    }
}

/// Square dilation, separable into a horizontal and a vertical pass.
pub fn dilate(support: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    if k == 0 {
        return support.to_vec();
    }
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(k);
            let hi = (x + k).min(w - 1);
            rows[y * w + x] = support[y * w + lo..=y * w + hi].iter().any(|&p| p);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(k);
        let hi = (y + k).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Dilation radius used at a given resolution: four pixels at 256, scaled
/// proportionally.
pub fn dilation_radius(image_size: usize) -> usize {
    (4 * image_size + 128) / 256
}

/// Binary cross-entropy between `m[:, c]` and `s_pred[:, c]`, restricted to
/// the dilated region of `c` and normalised by its area. `s_pred` is
/// `N x C x H x W` probabilities, one attribute per sample. Samples whose
/// region is empty contribute zero.
pub fn local_seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    masks: &[SegMask],
    s_pred: Var,
    attributes: &[AttributeId],
    k: usize,
) -> Result<Var> {
    let (n, _, h, w) = g.value(s_pred).dims4();
    if masks.len() != n || attributes.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "local seg loss: {n} predictions, {} masks, {} attributes",
            masks.len(),
            attributes.len()
        )));
    }
    let hw = h * w;
    let mut target = Vec::with_capacity(n * hw);
    let mut weight = Vec::with_capacity(n * hw);
    for (m, &c) in masks.iter().zip(attributes) {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs prediction {h}x{w}",
                m.height(),
                m.width()
            )));
        }
        let region = attribute_region(m, c, k);
        let area = region.len();
        let wv = if area == 0 {
            T::zero()
        } else {
            T::one() / T::from_usize(area * n).unwrap()
        };
        let class = c.class() as u8;
        target.extend(m.labels().iter().map(|&l| if l == class { T::one() } else { T::zero() }));
        weight.extend(region.pixels().iter().map(|&p| if p { wv } else { T::zero() }));
    }
    let channels: Vec<usize> = attributes.iter().map(|c| c.channel()).collect();
    let p = g.channel_pick(s_pred, &channels);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p);
    let one_minus = g.affine(p, -1.0, 1.0);
    let log_q = g.log(one_minus);
    let target_t = Tensor::new(&[n, 1, h, w], target);
    let inv_target = target_t.map(|t| T::one() - t);
    let t = g.constant(target_t);
    let ti = g.constant(inv_target);
    let a = g.mul(t, log_p);
    let b = g.mul(ti, log_q);
    let ll = g.add(a, b);
    let wt = g.constant(Tensor::new(&[n, 1, h, w], weight));
    let weighted = g.mul(wt, ll);
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0))
}

/// Full-image cross-entropy `-mean_pixels Σ_c m_c log softmax(logits)_c`
/// used to train the segmenter.
pub fn seg_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, one_hot: Var) -> Result<Var> {
    if g.shape(logits) != g.shape(one_hot) {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy: {:?} vs {:?}",
            g.shape(logits),
            g.shape(one_hot)
        )));
    }
    let (n, _, h, w) = g.value(logits).dims4();
    let lp = g.log_softmax(logits);
    let prod = g.mul(lp, one_hot);
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / (n * h * w) as f64))
}

/// Graph handles of the five terms, for weighting and reporting.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub adv: Var,
    pub sty: Var,
    pub ds: Var,
    pub cyc: Var,
    pub seg: Var,
}

impl TermVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossTerms {
            adv: v(self.adv),
            sty: v(self.sty),
            ds: v(self.ds),
            cyc: v(self.cyc),
            seg: v(self.seg),
        }
    }

    /// Weighted sum on the graph.
    pub fn weighted<T: Scalar>(&self, g: &mut Graph<T>, w: &LossWeights) -> Var {
        let parts = [
            (self.adv, w.adv),
            (self.sty, w.sty),
            (self.ds, w.ds),
            (self.cyc, w.cyc),
            (self.seg, w.seg),
        ];
        let mut acc = g.scale(parts[0].0, parts[0].1);
        for &(v, wt) in &parts[1..] {
            let s = g.scale(v, wt);
            acc = g.add(acc, s);
        }
        acc
    }
}
