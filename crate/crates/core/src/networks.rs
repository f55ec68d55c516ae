//! Generator, mapping network, style encoder, segmenter and discriminator as
//! forward functions over explicit parameter sources.
//!
//! All image-shaped values are NCHW. Style codes and noise are `N x D`.
//! Per-domain outputs are computed for every head and the row matching each
//! sample's domain is selected, so a batch may mix domains.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::datapipe::{DomainLabel, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{
    conv, conv3, instance_norm_affine, linear, lrelu, Binder, Initializer, ParamSource, ParamStore,
    NORM_EPS,
};
use crate::tensor::{Scalar, Tensor};

/// Sizes shared by all networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub image_size: usize,
    pub classes: usize,
    pub style_dim: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub mlp_hidden: usize,
    pub mlp_shared_layers: usize,
    pub mlp_head_layers: usize,
    pub res_blocks: usize,
}

impl NetConfig {
    /// Widths used at full resolution.
    pub fn full(image_size: usize) -> Self {
        Self {
            image_size,
            classes: NUM_CLASSES,
            style_dim: 64,
            latent_dim: 16,
            base_channels: (16384 / image_size).max(8),
            max_channels: 512,
            mlp_hidden: 512,
            mlp_shared_layers: 4,
            mlp_head_layers: 4,
            res_blocks: 2,
        }
    }

    /// Narrow networks for CPU-scale experiments.
    pub fn desk(image_size: usize) -> Self {
        Self {
            image_size,
            classes: NUM_CLASSES,
            style_dim: 64,
            latent_dim: 16,
            base_channels: 8,
            max_channels: 32,
            mlp_hidden: 64,
            mlp_shared_layers: 2,
            mlp_head_layers: 2,
            res_blocks: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a power of two >= 8",
                self.image_size
            )));
        }
        if self.classes != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!("classes must be {NUM_CLASSES}")));
        }
        if self.style_dim == 0 || self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("zero-sized network dimension".into()));
        }
        if self.mlp_head_layers == 0 || self.max_channels < self.base_channels {
            return Err(Error::InvalidConfig("inconsistent widths".into()));
        }
        Ok(())
    }

    /// Down-sampling stages of the encoder, discriminator and segmenter:
    /// their bottleneck is always 4x4.
    pub fn stages(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 2
    }

    /// Down/up stages of the generator. It keeps a 16x16 bottleneck (8x8 at
    /// 16 px) so that mask geometry survives the encoder.
    pub fn generator_stages(&self) -> usize {
        (self.image_size.trailing_zeros() as usize).saturating_sub(4).max(1)
    }

    /// Channel width at stage `i` (0 = full resolution).
    pub fn channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }
}

/// Standardise each channel over space, then scale by `gamma` and shift by
/// `beta` (both `N x ch`).
pub fn adain<T: Scalar>(g: &mut Graph<T>, features: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let n = g.instance_norm(features, eps);
    g.channel_affine(n, gamma, beta)
}

/// AdaIN whose scale and shift are affine maps of the style code; the scale
/// is parameterised as `1 + W s` so a zero map is the identity.
fn style_adain<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    name: &str,
    h: Var,
    s: Var,
) -> Var {
    let ch = g.shape(h)[1];
    let gamma = linear(g, p, &format!("{name}.gamma"), s, ch);
    let gamma = g.affine(gamma, 1.0, 1.0);
    let beta = linear(g, p, &format!("{name}.beta"), s, ch);
    adain(g, h, gamma, beta, NORM_EPS)
}

fn domain_indices(domains: &[DomainLabel]) -> Vec<usize> {
    domains.iter().map(|d| d.index()).collect()
}

fn check_image<T: Scalar>(g: &Graph<T>, cfg: &NetConfig, x: Var, ch: usize, what: &str) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1] != ch || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected Nx{ch}x{s}x{s}, got {shape:?}",
            s = cfg.image_size
        )));
    }
    Ok(())
}

/// `G(x_masked, m, s)`: encoder over `[x_masked ‖ m]`, style injected by
/// AdaIN through the decoder, `tanh` output.
pub fn generator<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    cfg: &NetConfig,
    x_masked: Var,
    m: Var,
    s: Var,
) -> Result<Var> {
    check_image(g, cfg, x_masked, 3, "generator image")?;
    check_image(g, cfg, m, cfg.classes, "generator mask")?;
    let n = g.shape(x_masked)[0];
    if g.shape(m)[0] != n || g.shape(s) != [n, cfg.style_dim] {
        return Err(Error::ShapeMismatch(format!(
            "generator batch: image {n}, mask {}, style {:?}",
            g.shape(m)[0],
            g.shape(s)
        )));
    }
    let stages = cfg.generator_stages();
    let inp = g.concat_channels(&[x_masked, m]);
    let mut h = conv3(g, p, "G.stem", inp, cfg.channels(0));
    for i in 0..stages {
        h = instance_norm_affine(g, p, &format!("G.enc.{i}.norm"), h);
        h = lrelu(g, h);
        h = g.avg_pool2(h);
        h = conv3(g, p, &format!("G.enc.{i}.conv"), h, cfg.channels(i + 1));
    }
    let ch = cfg.channels(stages);
    for j in 0..cfg.res_blocks {
        let mut r = instance_norm_affine(g, p, &format!("G.res.{j}.norm1"), h);
        r = lrelu(g, r);
        r = conv3(g, p, &format!("G.res.{j}.conv1"), r, ch);
        r = instance_norm_affine(g, p, &format!("G.res.{j}.norm2"), r);
        r = lrelu(g, r);
        r = conv3(g, p, &format!("G.res.{j}.conv2"), r, ch);
        h = g.add(h, r);
    }
    for j in 0..cfg.res_blocks {
        let mut r = style_adain(g, p, &format!("G.sres.{j}.style1"), h, s);
        r = lrelu(g, r);
        r = conv3(g, p, &format!("G.sres.{j}.conv1"), r, ch);
        r = style_adain(g, p, &format!("G.sres.{j}.style2"), r, s);
        r = lrelu(g, r);
        r = conv3(g, p, &format!("G.sres.{j}.conv2"), r, ch);
        h = g.add(h, r);
    }
    for i in (0..stages).rev() {
        h = g.upsample2(h);
        h = conv3(g, p, &format!("G.dec.{i}.conv"), h, cfg.channels(i));
        h = style_adain(g, p, &format!("G.dec.{i}.style"), h, s);
        h = lrelu(g, h);
    }
    let out = conv(g, p, "G.out", h, 3, 1, 1, 0);
    Ok(g.tanh(out))
}

/// `F(z, domain)`: shared MLP trunk followed by one head per domain.
pub fn mapping<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    cfg: &NetConfig,
    z: Var,
    domains: &[DomainLabel],
) -> Result<Var> {
    let shape = g.shape(z);
    if shape.len() != 2 || shape[1] != cfg.latent_dim || shape[0] != domains.len() {
        return Err(Error::ShapeMismatch(format!(
            "mapping: expected {}x{}, got {shape:?}",
            domains.len(),
            cfg.latent_dim
        )));
    }
    let mut h = z;
    for k in 0..cfg.mlp_shared_layers {
        h = linear(g, p, &format!("F.shared.{k}"), h, cfg.mlp_hidden);
        h = lrelu(g, h);
    }
    let heads: Vec<Var> = DomainLabel::ALL
        .iter()
        .map(|d| {
            let mut t = h;
            for k in 0..cfg.mlp_head_layers - 1 {
                t = linear(g, p, &format!("F.head.{}.{k}", d.index()), t, cfg.mlp_hidden);
                t = lrelu(g, t);
            }
            linear(g, p, &format!("F.head.{}.out", d.index()), t, cfg.style_dim)
        })
        .collect();
    Ok(g.pick_rows(&heads, &domain_indices(domains)))
}

/// Convolutional trunk shared by the style encoder, the discriminator and
/// the attribute classifier: global-average-pooled `N x ch` features.
pub fn conv_trunk<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    cfg: &NetConfig,
    prefix: &str,
    x: Var,
    stages: usize,
) -> Var {
    let mut h = conv3(g, p, &format!("{prefix}.stem"), x, cfg.channels(0));
    for i in 0..stages {
        h = lrelu(g, h);
        h = g.avg_pool2(h);
        h = conv3(g, p, &format!("{prefix}.blk.{i}.conv"), h, cfg.channels(i + 1));
    }
    h = lrelu(g, h);
    g.global_avg_pool(h)
}

/// `E(y, domain)`: style code extracted from an image.
pub fn encoder<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    cfg: &NetConfig,
    y: Var,
    domains: &[DomainLabel],
) -> Result<Var> {
    check_image(g, cfg, y, 3, "encoder")?;
    if g.shape(y)[0] != domains.len() {
        return Err(Error::ShapeMismatch("encoder: one domain per image".into()));
    }
    let h = conv_trunk(g, p, cfg, "E", y, cfg.stages());
    let heads: Vec<Var> = DomainLabel::ALL
        .iter()
        .map(|d| linear(g, p, &format!("E.head.{}", d.index()), h, cfg.style_dim))
        .collect();
    Ok(g.pick_rows(&heads, &domain_indices(domains)))
}

/// `D(x, domain)`: one real/fake logit per sample (`N x 1`) from the branch
/// of that sample's domain.
pub fn discriminator<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    cfg: &NetConfig,
    x: Var,
    domains: &[DomainLabel],
) -> Result<Var> {
    check_image(g, cfg, x, 3, "discriminator")?;
    if g.shape(x)[0] != domains.len() {
        return Err(Error::ShapeMismatch("discriminator: one domain per image".into()));
    }
    let h = conv_trunk(g, p, cfg, "D", x, cfg.stages());
    let heads: Vec<Var> = DomainLabel::ALL
        .iter()
        .map(|d| linear(g, p, &format!("D.head.{}", d.index()), h, 1))
        .collect();
    Ok(g.pick_rows(&heads, &domain_indices(domains)))
}

/// Segmenter outputs: class logits and the bottleneck activations.
pub struct SegmenterOutput {
    /// `N x C x H x W`.
    pub logits: Var,
    /// `N x ch x 4 x 4`.
    pub bottleneck: Var,
}

/// U-Net encoder/decoder with skip connections.
pub fn segmenter_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    cfg: &NetConfig,
    x: Var,
) -> Result<SegmenterOutput> {
    check_image(g, cfg, x, 3, "segmenter")?;
    let stages = cfg.stages();
    let block = |g: &mut Graph<T>, p: &mut _, name: &str, h: Var, ch: usize| {
        let h = conv3(g, p, &format!("{name}.conv"), h, ch);
        let h = instance_norm_affine(g, p, &format!("{name}.norm"), h);
        lrelu(g, h)
    };
    let mut skips = Vec::with_capacity(stages + 1);
    let mut h = block(g, p, "S.enc.0", x, cfg.channels(0));
    skips.push(h);
    for i in 1..=stages {
        let pooled = g.avg_pool2(h);
        h = block(g, p, &format!("S.enc.{i}"), pooled, cfg.channels(i));
        skips.push(h);
    }
    let bottleneck = h;
    for i in (0..stages).rev() {
        let up = g.upsample2(h);
        let cat = g.concat_channels(&[up, skips[i]]);
        h = block(g, p, &format!("S.dec.{i}"), cat, cfg.channels(i));
    }
    let logits = conv(g, p, "S.out", h, cfg.classes, 1, 1, 0);
    Ok(SegmenterOutput { logits, bottleneck })
}

/// Per-pixel class probabilities (softmax over channels).
pub fn segmenter<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    cfg: &NetConfig,
    x: Var,
) -> Result<Var> {
    let out = segmenter_logits(g, p, cfg, x)?;
    Ok(g.softmax(out.logits))
}

/// The five parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetConfig,
    pub generator: ParamStore<T>,
    pub mapping: ParamStore<T>,
    pub encoder: ParamStore<T>,
    pub segmenter: ParamStore<T>,
    pub discriminator: ParamStore<T>,
}

/// Network identifiers, also the parameter-name prefixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NetId {
    Generator,
    Mapping,
    Encoder,
    Segmenter,
    Discriminator,
}

impl NetId {
    pub const ALL: [NetId; 5] = [
        NetId::Generator,
        NetId::Mapping,
        NetId::Encoder,
        NetId::Segmenter,
        NetId::Discriminator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            NetId::Generator => "G",
            NetId::Mapping => "F",
            NetId::Encoder => "E",
            NetId::Segmenter => "S",
            NetId::Discriminator => "D",
        }
    }

    pub fn from_prefix(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.prefix() == s)
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// Fresh He-uniform weights and zero biases.
    pub fn init<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut out = Self {
            generator: ParamStore::new(),
            mapping: ParamStore::new(),
            encoder: ParamStore::new(),
            segmenter: ParamStore::new(),
            discriminator: ParamStore::new(),
            config,
        };
        let cfg = out.config.clone();
        let size = cfg.image_size;
        let domains = [DomainLabel::Female];
        let image = || Tensor::<T>::zeros(&[1, 3, size, size]);
        {
            let mut g = Graph::new();
            let mut p = Initializer::new(&mut out.mapping, rng);
            let z = g.constant(Tensor::zeros(&[1, cfg.latent_dim]));
            mapping(&mut g, &mut p, &cfg, z, &domains)?;
        }
        {
            let mut g = Graph::new();
            let mut p = Initializer::new(&mut out.generator, rng);
            let x = g.constant(image());
            let m = g.constant(Tensor::zeros(&[1, cfg.classes, size, size]));
            let s = g.constant(Tensor::zeros(&[1, cfg.style_dim]));
            generator(&mut g, &mut p, &cfg, x, m, s)?;
        }
        {
            let mut g = Graph::new();
            let mut p = Initializer::new(&mut out.encoder, rng);
            let x = g.constant(image());
            encoder(&mut g, &mut p, &cfg, x, &domains)?;
        }
        {
            let mut g = Graph::new();
            let mut p = Initializer::new(&mut out.segmenter, rng);
            let x = g.constant(image());
            segmenter(&mut g, &mut p, &cfg, x)?;
        }
        {
            let mut g = Graph::new();
            let mut p = Initializer::new(&mut out.discriminator, rng);
            let x = g.constant(image());
            discriminator(&mut g, &mut p, &cfg, x, &domains)?;
        }
        Ok(out)
    }

    pub fn net(&self, id: NetId) -> &ParamStore<T> {
        match id {
            NetId::Generator => &self.generator,
            NetId::Mapping => &self.mapping,
            NetId::Encoder => &self.encoder,
            NetId::Segmenter => &self.segmenter,
            NetId::Discriminator => &self.discriminator,
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut ParamStore<T> {
        match id {
            NetId::Generator => &mut self.generator,
            NetId::Mapping => &mut self.mapping,
            NetId::Encoder => &mut self.encoder,
            NetId::Segmenter => &mut self.segmenter,
            NetId::Discriminator => &mut self.discriminator,
        }
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config.clone(),
            generator: self.generator.cast(),
            mapping: self.mapping.cast(),
            encoder: self.encoder.cast(),
            segmenter: self.segmenter.cast(),
            discriminator: self.discriminator.cast(),
        }
    }

    /// Check that every network has exactly the layout `config` implies.
    pub fn validate_layout<R: Rng>(&self, rng: &mut R) -> Result<()> {
        let reference = NetworkParams::<T>::init(self.config.clone(), rng)?;
        for id in NetId::ALL {
            self.net(id).check_layout(reference.net(id))?;
            if !self.net(id).is_finite() {
                return Err(Error::Param(format!("{} holds non-finite values", id.prefix())));
            }
        }
        Ok(())
    }
}

/// Gradient-free forward passes over a parameter set.
pub struct Inference<'a> {
    pub params: &'a NetworkParams<f32>,
}

impl<'a> Inference<'a> {
    pub fn new(params: &'a NetworkParams<f32>) -> Self {
        Self { params }
    }

    fn cfg(&self) -> &NetConfig {
        &self.params.config
    }

    pub fn generate(&self, x_masked: &Tensor<f32>, m: &Tensor<f32>, s: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params.generator);
        let (x, m, s) = (g.constant(x_masked.clone()), g.constant(m.clone()), g.constant(s.clone()));
        let out = generator(&mut g, &mut p, self.cfg(), x, m, s)?;
        Ok(g.value(out).clone())
    }

    pub fn map(&self, z: &Tensor<f32>, domains: &[DomainLabel]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params.mapping);
        let z = g.constant(z.clone());
        let out = mapping(&mut g, &mut p, self.cfg(), z, domains)?;
        Ok(g.value(out).clone())
    }

    pub fn encode(&self, y: &Tensor<f32>, domains: &[DomainLabel]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params.encoder);
        let y = g.constant(y.clone());
        let out = encoder(&mut g, &mut p, self.cfg(), y, domains)?;
        Ok(g.value(out).clone())
    }

    pub fn segment(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params.segmenter);
        let x = g.constant(x.clone());
        let out = segmenter(&mut g, &mut p, self.cfg(), x)?;
        Ok(g.value(out).clone())
    }

    /// Global-average-pooled segmenter bottleneck, `N x ch`.
    pub fn segmenter_features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params.segmenter);
        let x = g.constant(x.clone());
        let out = segmenter_logits(&mut g, &mut p, self.cfg(), x)?;
        let pooled = g.global_avg_pool(out.bottleneck);
        Ok(g.value(pooled).clone())
    }

    pub fn discriminate(&self, x: &Tensor<f32>, domains: &[DomainLabel]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params.discriminator);
        let x = g.constant(x.clone());
        let out = discriminator(&mut g, &mut p, self.cfg(), x, domains)?;
        Ok(g.value(out).clone())
    }
}

/// Standard-normal latent codes, `n x latent_dim`.
pub fn sample_latent<R: Rng>(rng: &mut R, n: usize, latent_dim: usize) -> Tensor<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..n * latent_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(&[n, latent_dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn small() -> NetConfig {
        NetConfig::desk(16)
    }

    #[test]
    fn adain_standardises_then_modulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 3, 4, 4], -3.0, 5.0).cast());
        let one = g.constant(Tensor::full(&[2, 3], 1.0));
        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let y = adain(&mut g, x, one, zero, 1e-5);
        for pl in g.value(y).data().chunks(16) {
            let mean = pl.iter().sum::<f64>() / 16.0;
            let var = pl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-4);
            assert!((libm::sqrt(var) - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_constant_map_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 4.2));
        let gamma = g.constant(Tensor::new(&[1, 2], vec![7.0, -3.0]));
        let beta = g.constant(Tensor::new(&[1, 2], vec![0.5, -1.5]));
        let y = adain(&mut g, x, gamma, beta, 1e-5);
        let v = g.value(y).data();
        assert!(v[..9].iter().all(|&a| a == 0.5));
        assert!(v[9..].iter().all(|&a| a == -1.5));
    }

    #[test]
    fn adain_two_by_two_hand_computed() {
        // Features [1 2; 3 4]: mean 2.5, biased variance 1.25.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = g.constant(Tensor::new(&[1, 1], vec![2.0]));
        let beta = g.constant(Tensor::new(&[1, 1], vec![1.0]));
        let y = adain(&mut g, x, gamma, beta, 1e-5);
        let denom = libm::sqrt(1.25 + 1e-5);
        for (got, f) in g.value(y).data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            let want = 2.0 * (f - 2.5) / denom + 1.0;
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn parameter_names_follow_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NetworkParams::<f32>::init(small(), &mut rng).unwrap();
        assert!(p.generator.get("G.enc.0.conv.w").is_some());
        assert!(p.generator.get("G.dec.0.style.gamma.w").is_some());
        assert!(p.mapping.get("F.head.1.out.w").is_some());
        assert!(p.encoder.get("E.head.0.w").is_some());
        assert!(p.segmenter.get("S.out.w").is_some());
        assert!(p.discriminator.get("D.head.1.b").is_some());
        for id in NetId::ALL {
            assert!(p.net(id).names().all(|n| n.starts_with(&format!("{}.", id.prefix()))));
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert!(p.validate_layout(&mut rng2).is_ok());
    }

    #[test]
    fn generator_shapes_range_style_and_purity() {
        let cfg = NetConfig::desk(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = NetworkParams::<f32>::init(cfg.clone(), &mut rng).unwrap();
        let inf = Inference::new(&params);
        let x = rand_tensor(&mut rng, &[8, 3, 64, 64], -1.0, 1.0);
        let m = rand_tensor(&mut rng, &[8, 5, 64, 64], 0.0, 1.0);
        let s1 = rand_tensor(&mut rng, &[8, 64], -1.0, 1.0);
        let s2 = rand_tensor(&mut rng, &[8, 64], -1.0, 1.0);
        let a = inf.generate(&x, &m, &s1).unwrap();
        assert_eq!(a.shape(), &[8, 3, 64, 64]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = inf.generate(&x, &m, &s2).unwrap();
        let l1: f32 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
        assert!(l1 > 0.0);
        let again = inf.generate(&x, &m, &s1).unwrap();
        assert_eq!(a, again);
        let bad = rand_tensor(&mut rng, &[8, 5, 32, 32], 0.0, 1.0);
        assert!(matches!(inf.generate(&x, &bad, &s1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn generator_range_holds_for_extreme_inputs() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = NetworkParams::<f32>::init(cfg, &mut rng).unwrap();
        let inf = Inference::new(&params);
        let x = rand_tensor(&mut rng, &[2, 3, 16, 16], -1e4, 1e4);
        let m = rand_tensor(&mut rng, &[2, 5, 16, 16], -1e4, 1e4);
        let s = rand_tensor(&mut rng, &[2, 64], -1e3, 1e3);
        let out = inf.generate(&x, &m, &s).unwrap();
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn domain_heads_are_distinct_and_batch_consistent() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = NetworkParams::<f32>::init(cfg.clone(), &mut rng).unwrap();
        let inf = Inference::new(&params);
        let z = sample_latent(&mut rng, 4, cfg.latent_dim);
        let y = rand_tensor(&mut rng, &[4, 3, 16, 16], -1.0, 1.0);
        let domains = [DomainLabel::Female, DomainLabel::Male, DomainLabel::Male, DomainLabel::Female];
        let f_batch = inf.map(&z, &domains).unwrap();
        let e_batch = inf.encode(&y, &domains).unwrap();
        let d_batch = inf.discriminate(&y, &domains).unwrap();
        assert_eq!(f_batch.shape(), &[4, cfg.style_dim]);
        assert_eq!(e_batch.shape(), &[4, cfg.style_dim]);
        assert_eq!(d_batch.shape(), &[4, 1]);
        assert!(d_batch.is_finite());
        for i in 0..4 {
            let zi = z.batch_item(i);
            let yi = y.batch_item(i);
            let di = [domains[i]];
            // Per-row oracle: a single-sample call reproduces row i.
            let f1 = inf.map(&zi, &di).unwrap();
            let e1 = inf.encode(&yi, &di).unwrap();
            let d1 = inf.discriminate(&yi, &di).unwrap();
            for (a, b) in f1.data().iter().zip(f_batch.batch_item(i).data()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
            for (a, b) in e1.data().iter().zip(e_batch.batch_item(i).data()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
            assert!((d1.item() - d_batch.batch_item(i).item()).abs() <= 1e-6);
            // Toggling the domain selects the other head.
            let other = [domains[i].toggled()];
            assert_ne!(inf.map(&zi, &other).unwrap(), f1);
            assert_ne!(inf.encode(&yi, &other).unwrap(), e1);
            assert_ne!(inf.discriminate(&yi, &other).unwrap(), d1);
        }
    }

    #[test]
    fn segmenter_outputs_distribution() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = NetworkParams::<f32>::init(cfg, &mut rng).unwrap();
        let inf = Inference::new(&params);
        let x = rand_tensor(&mut rng, &[2, 3, 16, 16], -1.0, 1.0);
        let probs = inf.segment(&x).unwrap();
        assert_eq!(probs.shape(), &[2, 5, 16, 16]);
        let hw = 256;
        for s in 0..2 {
            for i in 0..hw {
                let sum: f32 = (0..5).map(|c| probs.data()[(s * 5 + c) * hw + i]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
                assert!((0..5).all(|c| {
                    let v = probs.data()[(s * 5 + c) * hw + i];
                    v > 0.0 && v < 1.0
                }));
            }
        }
        assert_eq!(inf.segmenter_features(&x).unwrap().shape(), &[2, 32]);
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::desk(48).validate().is_err());
        assert!(NetConfig::desk(4).validate().is_err());
        assert_eq!(NetConfig::desk(64).stages(), 4);
        assert_eq!(NetConfig::full(256).stages(), 6);
        assert_eq!(NetConfig::desk(16).generator_stages(), 1);
        assert_eq!(NetConfig::desk(64).generator_stages(), 2);
        assert_eq!(NetConfig::full(256).generator_stages(), 4);
        assert_eq!(NetConfig::full(256).base_channels, 64);
    }
}
