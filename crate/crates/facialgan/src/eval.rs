//! Evaluation of a trained checkpoint on a dataset split.

use std::collections::BTreeMap;

use facialgan_core::datapipe::{AttributeId, DomainLabel, Image, Sample, SampleSource};
use facialgan_core::evaluation::{
    diversity_score, fid, identity_accuracy, pixel_accuracy, train_attr_classifier, ClassifierConfig, Embedder,
    FeatureExtractor, LayeredExtractor, RandomConvExtractor, RandomEmbedder, Scope, SegmenterFeatures,
};
use facialgan_core::networks::NetworkParams;
use facialgan_core::synth::{parse, synthesize, StyleMode, SynthesisRequest};
use facialgan_core::training::iteration_rng;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

const SEGMENTER_NAME: &str = "segmenter-argmax/v1";
const CLASSIFIER_NAME: &str = "attr-cnn/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Fid,
    Lpips,
    SegAccuracy,
    Attribute,
    Identity,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Fid,
        Metric::Lpips,
        Metric::SegAccuracy,
        Metric::Attribute,
        Metric::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fid => "fid",
            Metric::Lpips => "lpips",
            Metric::SegAccuracy => "seg-acc",
            Metric::Attribute => "attr",
            Metric::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    /// How the style code of every generated image is obtained.
    pub mode: StyleMode,
    /// Styles per source for the diversity score.
    pub n_styles: usize,
    /// Sources used for the diversity score; `None` uses the whole split.
    pub diversity_sources: Option<usize>,
    pub seed: u64,
    pub extractor_seed: u64,
    pub identity_threshold: f64,
    pub classifier_epochs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            mode: StyleMode::Latent,
            n_styles: 10,
            diversity_sources: None,
            seed: 0,
            extractor_seed: 0,
            identity_threshold: 0.5,
            classifier_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricValue {
    pub value: f64,
    /// Number of scored items (images, pairs or sources).
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
    pub seed: u64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, serde_json::Value>,
}

/// Metric name to its value and provenance.
pub type Report = BTreeMap<String, MetricValue>;

/// One evaluation input: a test sample with the domain it is translated to.
struct Job<'a> {
    sample: &'a Sample,
    index: usize,
    domain: DomainLabel,
}

/// Output for test sample `i` conditioned on its own mask with attribute
/// `i mod 3` re-inpainted. `variant` selects the latent seed or the reference.
fn generate(
    params: &NetworkParams<f32>,
    samples: &[Sample],
    job: &Job<'_>,
    mode: StyleMode,
    seed: u64,
    variant: usize,
) -> Result<Image> {
    let s = job.sample;
    let mut req = match mode {
        StyleMode::Latent => SynthesisRequest::latent(s.image.clone(), job.domain, seed.wrapping_add(variant as u64)),
        StyleMode::Reference => {
            let r = &samples[(job.index + 1 + variant) % samples.len()];
            SynthesisRequest::reference(s.image.clone(), job.domain, r.image.clone())
        }
    };
    req.mask = Some(s.mask.clone());
    req.masked_attributes = Some(vec![AttributeId::ALL[job.index % AttributeId::ALL.len()]]);
    Ok(synthesize(params, &req)?.image)
}

pub fn evaluate<S, T>(params: &NetworkParams<f32>, test: &S, train: &T, opts: &EvalOptions) -> Result<Report>
where
    S: SampleSource + ?Sized,
    T: SampleSource + ?Sized,
{
    if test.is_empty() {
        return Err(Error::Core(facialgan_core::Error::EmptySplit("test")));
    }
    let samples = (0..test.len()).map(|i| test.get(i)).collect::<facialgan_core::Result<Vec<_>>>()?;
    let mut rng = iteration_rng(opts.seed, 0);
    let jobs: Vec<Job<'_>> = samples
        .iter()
        .enumerate()
        .map(|(index, sample)| Job {
            sample,
            index,
            domain: DomainLabel::ALL[rng.gen_range(0..2)],
        })
        .collect();
    let job_seed = |j: &Job<'_>| opts.seed.wrapping_add((j.index as u64) << 20);
    let fakes = jobs
        .iter()
        .map(|j| generate(params, &samples, j, opts.mode, job_seed(j), 0))
        .collect::<Result<Vec<_>>>()?;
    let entry = |value: f64, n: usize, extractor: Option<String>| MetricValue {
        value,
        n,
        extractor,
        seed: opts.seed,
        settings: BTreeMap::from([("mode".to_string(), opts.mode.name().into())]),
    };
    let mut report = Report::new();

    for m in &opts.metrics {
        match m {
            Metric::Fid => {
                let ex = SegmenterFeatures {
                    params,
                    batch_size: 16,
                };
                let real: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
                let v = fid(&ex, &real, &fakes)?;
                report.insert("fid".into(), entry(v, fakes.len(), Some(FeatureExtractor::name(&ex))));
            }
            Metric::Lpips => {
                let ex = RandomConvExtractor::new(opts.extractor_seed);
                let n_sources = opts.diversity_sources.unwrap_or(jobs.len()).clamp(1, jobs.len());
                let outputs = jobs[..n_sources]
                    .iter()
                    .map(|j| {
                        (0..opts.n_styles)
                            .map(|k| generate(params, &samples, j, opts.mode, job_seed(j), k))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut e = entry(
                    diversity_score(&ex, &outputs)?,
                    n_sources,
                    Some(LayeredExtractor::name(&ex).into()),
                );
                e.settings.insert("n_styles".into(), opts.n_styles.into());
                e.settings.insert("extractor_seed".into(), opts.extractor_seed.into());
                report.insert("lpips".into(), e);
            }
            Metric::SegAccuracy => {
                let parses = fakes
                    .iter()
                    .map(|f| parse(params, f))
                    .collect::<facialgan_core::Result<Vec<_>>>()?;
                let mut scopes = vec![Scope::All];
                scopes.extend(AttributeId::ALL.map(Scope::Attribute));
                for scope in scopes {
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for (p, s) in parses.iter().zip(&samples) {
                        match pixel_accuracy(p, &s.mask, scope) {
                            Ok(v) => {
                                sum += v;
                                n += 1;
                            }
                            Err(facialgan_core::Error::EmptyScope) => {}
                            Err(e) => return Err(e.into()),
                        }
                    }
                    if n > 0 {
                        let name = format!("seg-acc.{}", scope.name());
                        report.insert(name, entry(sum / n as f64, n, Some(SEGMENTER_NAME.into())));
                    }
                }
            }
            Metric::Attribute => {
                let data = (0..train.len())
                    .map(|i| {
                        let s = train.get(i)?;
                        Ok((s.image, s.gender == DomainLabel::Male))
                    })
                    .collect::<facialgan_core::Result<Vec<_>>>()?;
                let cfg = ClassifierConfig {
                    epochs: opts.classifier_epochs,
                    seed: opts.seed,
                    ..ClassifierConfig::new(params.config.image_size)
                };
                let clf = train_attr_classifier(&cfg, &data)?;
                let probs = clf.classify_batch(&fakes)?;
                let hits = probs
                    .iter()
                    .zip(&jobs)
                    .filter(|(p, j)| (**p >= 0.5) == (j.domain == DomainLabel::Male))
                    .count();
                let mut e = entry(100.0 * hits as f64 / fakes.len() as f64, fakes.len(), Some(CLASSIFIER_NAME.into()));
                e.settings.insert("classifier_epochs".into(), opts.classifier_epochs.into());
                e.settings.insert("classifier_train_size".into(), data.len().into());
                report.insert("attr".into(), e);
            }
            Metric::Identity => {
                let emb = RandomEmbedder::new(opts.extractor_seed, opts.identity_threshold);
                let pairs: Vec<(Image, Image)> = samples
                    .iter()
                    .zip(&fakes)
                    .map(|(s, f)| (s.image.clone(), f.clone()))
                    .collect();
                let mut e = entry(identity_accuracy(&emb, &pairs)?, pairs.len(), Some(Embedder::name(&emb).into()));
                e.settings.insert("threshold".into(), opts.identity_threshold.into());
                report.insert("identity".into(), e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facialgan_core::networks::NetConfig;
    use facialgan_core::toyset::toy_source;
    use rand::SeedableRng;

    #[test]
    fn report_has_every_metric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = NetConfig {
            base_channels: 4,
            max_channels: 8,
            ..NetConfig::desk(16)
        };
        let params = NetworkParams::<f32>::init(net, &mut rng).unwrap();
        let test = toy_source(6, 16, 1).unwrap();
        let train = toy_source(8, 16, 2).unwrap();
        let opts = EvalOptions {
            n_styles: 2,
            diversity_sources: Some(2),
            classifier_epochs: 1,
            ..EvalOptions::default()
        };
        for mode in [StyleMode::Latent, StyleMode::Reference] {
            let opts = EvalOptions { mode, ..opts.clone() };
            let r = evaluate(&params, &test, &train, &opts).unwrap();
            for key in ["fid", "lpips", "seg-acc.all", "attr", "identity"] {
                let v = r[key].value;
                assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
            }
            assert_eq!(r["fid"].n, 6);
            assert_eq!(r["lpips"].n, 2);
            let again = evaluate(&params, &test, &train, &opts).unwrap();
            assert_eq!(again, r);
        }
    }
}
