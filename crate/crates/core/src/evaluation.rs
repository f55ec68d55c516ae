//! Distribution, diversity, segmentation, attribute and identity metrics.
//!
//! Feature extractors and embedders are traits so that the small networks
//! shipped here and externally trained backbones run through the same code.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{AttributeId, Image, SegMask};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::{conv_trunk, Inference, NetConfig, NetworkParams};
use crate::optim::{Adam, AdamConfig};
use crate::params::{conv3, linear, lrelu, Binder, Initializer, ParamSource, ParamStore};
use crate::tensor::Tensor;

/// Eigenvalues more negative than this make the distance undefined.
pub const EIGEN_TOLERANCE: f64 = 1e-6;

/// Fixed-length feature vectors for a batch of images.
pub trait FeatureExtractor {
    /// `N x F` matrix, one row per image.
    fn extract(&self, images: &[Image]) -> Result<DMatrix<f64>>;

    /// Name and version, recorded in reports.
    fn name(&self) -> String;
}

/// Multi-layer feature maps for perceptual distances.
pub trait LayeredExtractor {
    /// One `1 x C x H x W` tensor per tap layer.
    fn layers(&self, image: &Image) -> Result<Vec<Tensor<f32>>>;

    fn name(&self) -> String;
}

/// Face embeddings for verification.
pub trait Embedder {
    /// Unit-norm embedding.
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;

    /// Cosine similarity at or above which two faces share an identity.
    fn threshold(&self) -> f64 {
        0.5
    }

    fn name(&self) -> String;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let (n, f) = features.shape();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mean = DVector::from_fn(f, |j, _| features.column(j).sum() / n as f64);
    let mut centred = features.clone();
    for mut row in centred.row_iter_mut() {
        for j in 0..f {
            row[j] -= mean[j];
        }
    }
    let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
    symmetrize(&mut cov);
    Ok(GaussianStats { mean, cov, n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Eigenvalues of a symmetric matrix with tiny negatives clipped to zero.
fn checked_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite eigenvalue in {what}")));
        }
        if *v < -EIGEN_TOLERANCE {
            return Err(Error::Numerical(format!("eigenvalue {v} of {what} is negative")));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = checked_eigen(m.clone(), "covariance")?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(libm::sqrt));
    let mut out = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// `|μa - μb|² + Tr(Σa + Σb - 2 (Σa Σb)^{1/2})`, with the trace of the
/// square root taken from the eigenvalues of `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let f = a.mean.len();
    if b.mean.len() != f {
        return Err(Error::DimMismatch(f, b.mean.len()));
    }
    let diff = &a.mean - &b.mean;
    let root_a = psd_sqrt(&a.cov)?;
    let mut inner = &root_a * &b.cov * &root_a;
    symmetrize(&mut inner);
    let eig = checked_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| libm::sqrt(*v)).sum();
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// FID between the feature distributions of two image sets.
pub fn fid(extractor: &dyn FeatureExtractor, real: &[Image], fake: &[Image]) -> Result<f64> {
    let a = fit_gaussian(&extractor.extract(real)?)?;
    let b = fit_gaussian(&extractor.extract(fake)?)?;
    frechet_distance(&a, &b)
}

/// Scale every pixel's channel vector to unit length.
fn unit_normalize(t: &Tensor<f32>) -> Vec<f64> {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for s in 0..n {
        for i in 0..hw {
            let base = s * c * hw + i;
            let norm: f64 = (0..c).map(|ch| {
                let v = d[base + ch * hw] as f64;
                v * v
            }).sum();
            let norm = libm::sqrt(norm) + 1e-10;
            for ch in 0..c {
                out[base + ch * hw] = d[base + ch * hw] as f64 / norm;
            }
        }
    }
    out
}

/// Sum over layers of the spatial mean of squared differences between
/// channel-normalised feature maps.
pub fn lpips_distance(extractor: &dyn LayeredExtractor, x: &Image, y: &Image) -> Result<f64> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::ShapeMismatch(format!(
            "lpips: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let fx = extractor.layers(x)?;
    let fy = extractor.layers(y)?;
    let mut total = 0.0;
    for (a, b) in fx.iter().zip(&fy) {
        let (_, _, h, w) = a.dims4();
        let na = unit_normalize(a);
        let nb = unit_normalize(b);
        let sq: f64 = na.iter().zip(&nb).map(|(p, q)| (p - q) * (p - q)).sum();
        total += sq / (h * w) as f64;
    }
    Ok(total)
}

/// Mean over sources of the mean pairwise distance between that source's
/// outputs. `outputs[i]` are the images generated for source `i`.
pub fn diversity_score(extractor: &dyn LayeredExtractor, outputs: &[Vec<Image>]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptySplit("diversity sources"));
    }
    let mut total = 0.0;
    for set in outputs {
        if set.len() < 2 {
            return Err(Error::InvalidConfig("diversity needs at least two styles".into()));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                sum += lpips_distance(extractor, &set[i], &set[j])?;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / outputs.len() as f64)
}

/// Pixels over which segmentation accuracy is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Attribute(AttributeId),
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Attribute(a) => a.name(),
        }
    }
}

/// Percentage of in-scope pixels where `pred` agrees with `target`.
/// Attribute scopes use the attribute's support in `target`.
pub fn pixel_accuracy(pred: &SegMask, target: &SegMask, scope: Scope) -> Result<f64> {
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(Error::ShapeMismatch("pixel accuracy: mask sizes differ".into()));
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for (&p, &t) in pred.labels().iter().zip(target.labels()) {
        let inside = match scope {
            Scope::All => true,
            Scope::Attribute(a) => t == a.class() as u8,
        };
        if inside {
            total += 1;
            hit += (p == t) as usize;
        }
    }
    if total == 0 {
        return Err(Error::EmptyScope);
    }
    Ok(100.0 * hit as f64 / total as f64)
}

/// Accuracy of the segmenter's parse of `generated` against `target`.
pub fn seg_pixel_accuracy(
    params: &NetworkParams<f32>,
    generated: &Image,
    target: &SegMask,
    scope: Scope,
) -> Result<f64> {
    let probs = Inference::new(params).segment(&generated.to_tensor())?;
    pixel_accuracy(&SegMask::argmax(&probs)?, target, scope)
}

/// Fixed-seed random convolution stack with three tap layers.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    params: ParamStore<f32>,
    widths: [usize; 3],
}

impl RandomConvExtractor {
    pub const VERSION: u32 = 1;

    pub fn new(seed: u64) -> Self {
        let widths = [16, 32, 64];
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let mut init = Initializer::new(&mut params, &mut rng);
        Self::forward(&mut g, &mut init, widths, x);
        Self { params, widths }
    }

    fn forward<P: ParamSource<f32>>(g: &mut Graph<f32>, p: &mut P, widths: [usize; 3], x: Var) -> Vec<Var> {
        let mut taps = Vec::with_capacity(3);
        let mut h = x;
        for (i, &w) in widths.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = conv3(g, p, &format!("L.{i}"), h, w);
            h = lrelu(g, h);
            taps.push(h);
        }
        taps
    }

    fn run(&self, image: &Image) -> Vec<Tensor<f32>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let x = g.constant(image.to_tensor());
        Self::forward(&mut g, &mut p, self.widths, x)
            .into_iter()
            .map(|v| g.value(v).clone())
            .collect()
    }
}

impl LayeredExtractor for RandomConvExtractor {
    fn layers(&self, image: &Image) -> Result<Vec<Tensor<f32>>> {
        Ok(self.run(image))
    }

    fn name(&self) -> String {
        format!("LPIPS-rand/v{}", Self::VERSION)
    }
}

/// Unit-normalised global-average-pooled last tap of a random conv stack.
#[derive(Clone, Debug)]
pub struct RandomEmbedder {
    stack: RandomConvExtractor,
    pub tau: f64,
}

impl RandomEmbedder {
    pub fn new(seed: u64, tau: f64) -> Self {
        Self {
            stack: RandomConvExtractor::new(seed),
            tau,
        }
    }
}

impl Embedder for RandomEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let last = self.stack.run(image).pop().unwrap();
        let (_, c, h, w) = last.dims4();
        let hw = h * w;
        let mut v: Vec<f64> = (0..c)
            .map(|ch| last.data()[ch * hw..(ch + 1) * hw].iter().map(|&x| x as f64).sum::<f64>() / hw as f64)
            .collect();
        normalize(&mut v);
        Ok(v)
    }

    fn threshold(&self) -> f64 {
        self.tau
    }

    fn name(&self) -> String {
        format!("embed-rand/v{}", RandomConvExtractor::VERSION)
    }
}

fn normalize(v: &mut [f64]) {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Global-average-pooled bottleneck of a trained segmenter.
pub struct SegmenterFeatures<'a> {
    pub params: &'a NetworkParams<f32>,
    pub batch_size: usize,
}

impl FeatureExtractor for SegmenterFeatures<'_> {
    fn extract(&self, images: &[Image]) -> Result<DMatrix<f64>> {
        let inf = Inference::new(self.params);
        let mut rows: Vec<f32> = Vec::new();
        let mut dim = 0;
        for chunk in images.chunks(self.batch_size.max(1)) {
            let x = Image::batch(&chunk.iter().collect::<Vec<_>>());
            let f = inf.segmenter_features(&x)?;
            dim = f.dims2().1;
            rows.extend_from_slice(f.data());
        }
        Ok(DMatrix::from_row_iterator(images.len(), dim, rows.into_iter().map(f64::from)))
    }

    fn name(&self) -> String {
        String::from("FID-seg/v1")
    }
}

/// Percentage of pairs whose embeddings have cosine similarity at least
/// the embedder's threshold.
pub fn identity_accuracy(embedder: &dyn Embedder, pairs: &[(Image, Image)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit("identity pairs"));
    }
    let tau = embedder.threshold();
    let mut hits = 0usize;
    for (a, b) in pairs {
        let ea = embedder.embed(a)?;
        let eb = embedder.embed(b)?;
        if ea.len() != eb.len() {
            return Err(Error::DimMismatch(ea.len(), eb.len()));
        }
        let cos: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        hits += (cos >= tau) as usize;
    }
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Downsampling stages of the trunk.
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            base_channels: 8,
            max_channels: 32,
            depth: 3,
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig::new(1e-3, 0.9, 0.999),
            seed: 0,
        }
    }

    fn net(&self) -> NetConfig {
        NetConfig {
            base_channels: self.base_channels,
            max_channels: self.max_channels,
            ..NetConfig::desk(self.image_size)
        }
    }
}

/// Binary attribute classifier: conv trunk and a single logit.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeClassifier {
    pub config: ClassifierConfig,
    pub params: ParamStore<f32>,
}

fn classifier_logits<P: ParamSource<f32>>(g: &mut Graph<f32>, p: &mut P, cfg: &ClassifierConfig, x: Var) -> Var {
    let h = conv_trunk(g, p, &cfg.net(), "A", x, cfg.depth);
    linear(g, p, "A.head", h, 1)
}

impl AttributeClassifier {
    /// `P(attribute = 1)`.
    pub fn classify(&self, image: &Image) -> Result<f64> {
        Ok(self.classify_batch(core::slice::from_ref(image))?[0])
    }

    pub fn classify_batch(&self, images: &[Image]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let x = g.constant(Image::batch(&images.iter().collect::<Vec<_>>()));
        let l = classifier_logits(&mut g, &mut p, &self.config, x);
        let s = g.sigmoid(l);
        Ok(g.value(s).data().iter().map(|&v| v as f64).collect())
    }
}

/// Train a classifier on `(image, label)` pairs with binary cross-entropy.
pub fn train_attr_classifier(cfg: &ClassifierConfig, data: &[(Image, bool)]) -> Result<AttributeClassifier> {
    cfg.adam.validate()?;
    let positives = data.iter().filter(|(_, l)| *l).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::DegenerateLabels);
    }
    for (img, _) in data {
        if img.height() != cfg.image_size || img.width() != cfg.image_size {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {0}x{0} images",
                cfg.image_size
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, cfg.image_size, cfg.image_size]));
        let mut init = Initializer::new(&mut params, &mut rng);
        classifier_logits(&mut g, &mut init, cfg, x);
    }
    let mut opt = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<f32> = chunk.iter().map(|&i| data[i].1 as u8 as f32).collect();
            let mut g = Graph::new();
            let mut p = Binder::trainable(&params);
            let x = g.constant(Image::batch(&imgs));
            let l = classifier_logits(&mut g, &mut p, cfg, x);
            let y = g.constant(Tensor::new(&[chunk.len(), 1], labels));
            // softplus(l) - y * l
            let sp = g.softplus(l);
            let yl = g.mul(y, l);
            let per = g.sub(sp, yl);
            let loss = g.mean(per);
            if !g.value(loss).item().is_finite() {
                return Err(Error::Divergence("attribute classifier loss".into()));
            }
            let grads = p.collect(&g.backward(loss));
            drop(p);
            opt.update(&mut params, &grads)?;
        }
    }
    Ok(AttributeClassifier {
        config: cfg.clone(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::NUM_CLASSES;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_rows(rng: &mut ChaCha8Rng, n: usize, f: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, f, |_, _| StandardNormal.sample(rng))
    }

    fn rand_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
        Image::new(size, size, (0..3 * size * size).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn gaussian_fit_examples() {
        let same = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let s = fit_gaussian(&same).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));

        let pair = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 5.0]);
        let s = fit_gaussian(&pair).unwrap();
        // Two points: cov = (a - b)(a - b)^T / 2.
        assert_eq!(s.mean.as_slice(), &[1.0, 3.0]);
        assert_eq!(s.cov.as_slice(), &[2.0, 4.0, 4.0, 8.0]);

        assert_eq!(fit_gaussian(&DMatrix::zeros(1, 3)).unwrap_err(), Error::TooFewSamples(1));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = fit_gaussian(&normal_rows(&mut rng, 10_000, 2)).unwrap();
        for i in 0..2 {
            assert!(s.mean[i].abs() < 0.05);
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s.cov[(i, j)] - want).abs() < 0.05);
            }
        }
    }

    fn stats_1d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_vec(vec![mu]),
            cov: DMatrix::from_vec(1, 1, vec![var]),
            n: 2,
        }
    }

    #[test]
    fn frechet_examples() {
        let a = stats_1d(0.0, 1.0);
        let b = stats_1d(1.0, 4.0);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);

        let diag = |m: [f64; 3], v: [f64; 3]| GaussianStats {
            mean: DVector::from_vec(m.to_vec()),
            cov: DMatrix::from_diagonal(&DVector::from_vec(v.to_vec())),
            n: 2,
        };
        let a = diag([0.0, 1.0, -2.0], [1.0, 0.5, 3.0]);
        let b = diag([1.0, 1.0, 0.0], [2.0, 0.5, 0.1]);
        let want: f64 = (0..3)
            .map(|i| {
                let dm = a.mean[i] - b.mean[i];
                let ds = libm::sqrt(a.cov[(i, i)]) - libm::sqrt(b.cov[(i, i)]);
                dm * dm + ds * ds
            })
            .sum();
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);

        let c = GaussianStats {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
            n: 2,
        };
        assert_eq!(frechet_distance(&a, &c).unwrap_err(), Error::DimMismatch(3, 2));

        let bad = GaussianStats {
            mean: DVector::zeros(1),
            cov: DMatrix::from_vec(1, 1, vec![-1.0]),
            n: 2,
        };
        assert!(matches!(frechet_distance(&bad, &stats_1d(0.0, 1.0)), Err(Error::Numerical(_))));
    }

    #[test]
    fn frechet_symmetric_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fa = normal_rows(&mut rng, 200, 3);
        let fb = normal_rows(&mut rng, 200, 3) * 1.5 + DMatrix::from_element(200, 3, 0.3);
        let a = fit_gaussian(&fa).unwrap();
        let b = fit_gaussian(&fb).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
        let q = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let q = DMatrix::from_iterator(3, 3, q.iter().copied());
        let ra = fit_gaussian(&(&fa * &q)).unwrap();
        let rb = fit_gaussian(&(&fb * &q)).unwrap();
        assert!((frechet_distance(&ra, &rb).unwrap() - d).abs() < 1e-6);
    }

    struct Identity;

    impl LayeredExtractor for Identity {
        fn layers(&self, image: &Image) -> Result<Vec<Tensor<f32>>> {
            Ok(vec![image.to_tensor()])
        }

        fn name(&self) -> String {
            String::from("identity")
        }
    }

    #[test]
    fn lpips_examples() {
        // 2x2 images; pixel channel vectors normalised then squared diff.
        let x = Image::new(2, 2, vec![1.0, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = Image::new(2, 2, vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 1.0]).unwrap();
        // pixel 0: (1,0,0) vs (0,1,0) -> 2; pixel 1: equal -> 0;
        // pixel 2: (0,0,1) vs (0,0,1) -> 0; pixel 3: (.5,.5,0)/|.| vs (.5,.5,1)/|.|.
        let a = [0.5f64, 0.5, 0.0];
        let b = [0.5f64, 0.5, 1.0];
        let na = libm::sqrt(0.5);
        let nb = libm::sqrt(1.5);
        let p3: f64 = (0..3).map(|i| (a[i] / na - b[i] / nb).powi(2)).sum();
        let want = (2.0 + p3) / 4.0;
        let got = lpips_distance(&Identity, &x, &y).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = RandomConvExtractor::new(7);
        for _ in 0..3 {
            let a = rand_image(&mut rng, 16);
            let b = rand_image(&mut rng, 16);
            assert_eq!(lpips_distance(&ex, &a, &a).unwrap(), 0.0);
            let ab = lpips_distance(&ex, &a, &b).unwrap();
            let ba = lpips_distance(&ex, &b, &a).unwrap();
            assert!(ab > 0.0 && (ab - ba).abs() < 1e-7);
        }
    }

    #[test]
    fn diversity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = RandomConvExtractor::new(1);
        let src = rand_image(&mut rng, 8);
        assert_eq!(diversity_score(&ex, &[vec![src.clone(); 4]]).unwrap(), 0.0);

        let sets: Vec<Vec<Image>> = (0..3)
            .map(|_| (0..4).map(|_| rand_image(&mut rng, 8)).collect())
            .collect();
        let mut want = 0.0;
        for set in &sets {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    if i < j {
                        s += lpips_distance(&ex, &set[i], &set[j]).unwrap();
                    }
                }
            }
            want += s / 6.0;
        }
        want /= 3.0;
        assert!((diversity_score(&ex, &sets).unwrap() - want).abs() < 1e-7);

        let two = vec![sets[0][..2].to_vec()];
        let one_pair = lpips_distance(&ex, &sets[0][0], &sets[0][1]).unwrap();
        assert_eq!(diversity_score(&ex, &two).unwrap(), one_pair);
    }

    fn mask(h: usize, w: usize, labels: &[u8]) -> SegMask {
        SegMask::from_labels(h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn pixel_accuracy_examples() {
        let t = mask(2, 2, &[0, 1, 2, 4]);
        assert_eq!(pixel_accuracy(&t, &t, Scope::All).unwrap(), 100.0);
        let p = mask(2, 2, &[0, 1, 3, 3]);
        assert_eq!(pixel_accuracy(&p, &t, Scope::All).unwrap(), 50.0);
        assert_eq!(pixel_accuracy(&p, &t, Scope::Attribute(AttributeId::Eyes)).unwrap(), 0.0);
        assert_eq!(
            pixel_accuracy(&p, &t, Scope::Attribute(AttributeId::Nose)),
            Err(Error::EmptyScope)
        );

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let perm = [3u8, 0, 4, 1, 2];
        for _ in 0..20 {
            let a: Vec<u8> = (0..64).map(|_| rng.gen_range(0..NUM_CLASSES as u8)).collect();
            let b: Vec<u8> = (0..64).map(|_| rng.gen_range(0..NUM_CLASSES as u8)).collect();
            let want = 100.0 * a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / 64.0;
            let got = pixel_accuracy(&mask(8, 8, &a), &mask(8, 8, &b), Scope::All).unwrap();
            assert_eq!(got, want);
            let pa: Vec<u8> = a.iter().map(|&v| perm[v as usize]).collect();
            let pb: Vec<u8> = b.iter().map(|&v| perm[v as usize]).collect();
            assert_eq!(pixel_accuracy(&mask(8, 8, &pa), &mask(8, 8, &pb), Scope::All).unwrap(), got);
        }
    }

    #[test]
    fn segmenter_agreeing_with_target_scores_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = NetworkParams::<f32>::init(NetConfig::desk(16), &mut rng).unwrap();
        let img = rand_image(&mut rng, 16);
        let parse = SegMask::argmax(&Inference::new(&params).segment(&img.to_tensor()).unwrap()).unwrap();
        assert_eq!(seg_pixel_accuracy(&params, &img, &parse, Scope::All).unwrap(), 100.0);
    }

    struct Fixed(Vec<Vec<f64>>, core::cell::Cell<usize>);

    impl Embedder for Fixed {
        fn embed(&self, _: &Image) -> Result<Vec<f64>> {
            let i = self.1.get();
            self.1.set(i + 1);
            Ok(self.0[i % self.0.len()].clone())
        }

        fn name(&self) -> String {
            String::from("fixed")
        }
    }

    #[test]
    fn identity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = RandomEmbedder::new(3, 0.5);
        let imgs: Vec<Image> = (0..4).map(|_| rand_image(&mut rng, 16)).collect();
        let same: Vec<_> = imgs.iter().map(|i| (i.clone(), i.clone())).collect();
        assert_eq!(identity_accuracy(&emb, &same).unwrap(), 100.0);
        let e = emb.embed(&imgs[0]).unwrap();
        assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-5);

        let ortho = Fixed(vec![vec![1.0, 0.0], vec![0.0, 1.0]], core::cell::Cell::new(0));
        assert_eq!(identity_accuracy(&ortho, &same).unwrap(), 0.0);

        // Random unit vectors against a loop oracle.
        let vecs: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let mut v: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize(&mut v);
                v
            })
            .collect();
        let want = 100.0
            * (0..10)
                .filter(|&k| {
                    let c: f64 = vecs[2 * k].iter().zip(&vecs[2 * k + 1]).map(|(a, b)| a * b).sum();
                    c >= 0.5
                })
                .count() as f64
            / 10.0;
        let stub = Fixed(vecs, core::cell::Cell::new(0));
        let pairs: Vec<_> = (0..10).map(|_| (imgs[0].clone(), imgs[1].clone())).collect();
        assert_eq!(identity_accuracy(&stub, &pairs).unwrap(), want);
    }

    fn flat(size: usize, v: f32, rng: &mut ChaCha8Rng) -> Image {
        Image::new(
            size,
            size,
            (0..3 * size * size).map(|_| (v + rng.gen_range(-0.2..0.2)).clamp(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn classifier_separates_bright_from_dark() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let size = 16;
        let mut make = |n: usize| -> Vec<(Image, bool)> {
            (0..n)
                .map(|i| {
                    let bright = i % 2 == 0;
                    let level = if bright { rng.gen_range(0.2..0.8) } else { rng.gen_range(-0.8..-0.2) };
                    (flat(size, level, &mut rng), bright)
                })
                .collect()
        };
        let train = make(64);
        let test = make(100);
        let mut cfg = ClassifierConfig::new(size);
        cfg.epochs = 15;
        let clf = train_attr_classifier(&cfg, &train).unwrap();
        let correct = test
            .iter()
            .filter(|(img, l)| (clf.classify(img).unwrap() >= 0.5) == *l)
            .count();
        assert!(correct >= 99, "held-out accuracy {correct}/100");
        let p = clf.classify(&test[0].0).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(p, clf.classify(&test[0].0).unwrap());

        let one_class: Vec<_> = train.iter().map(|(i, _)| (i.clone(), true)).collect();
        assert_eq!(train_attr_classifier(&cfg, &one_class).unwrap_err(), Error::DegenerateLabels);
    }
}
