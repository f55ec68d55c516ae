//! Two-stage training: a supervised segmenter, then adversarial training of
//! G, F, E and D against the frozen segmenter.
//!
//! Every iteration draws its inputs from a generator keyed by
//! `(seed, iteration)`, so a run resumed from a checkpoint at iteration `k`
//! replays exactly the batches an uninterrupted run would have seen.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{
    make_batch_with, AttributeId, DomainLabel, Image, SampleSource, SegMask, TrainingBatch,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    adv_loss_d, adv_loss_g, cyc_loss, dilation_radius, ds_loss, local_seg_loss, seg_cross_entropy,
    style_loss, LossTerms, LossWeights, TermVars,
};
use crate::networks::{
    discriminator, encoder, generator, mapping, sample_latent, segmenter, segmenter_logits,
    NetConfig, NetId, NetworkParams,
};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Decay of the diversity weight: `init * (1 - iter / total)`.
pub fn lambda_ds_schedule(iter: u64, total_iters: u64, lambda_ds_init: f64) -> f64 {
    let iter = iter.min(total_iters);
    lambda_ds_init * (1.0 - iter as f64 / total_iters as f64)
}

/// Random stream of one iteration of a run.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_e: f64,
    pub lr_f: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `weights.ds` is the initial diversity weight; the applied value
    /// follows [`lambda_ds_schedule`].
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Run the reference-guided D and G updates after the latent ones.
    pub dual_pass: bool,
    /// Exponential moving average of generator weights.
    pub ema_decay: Option<f64>,
    /// Per-network joint gradient-norm bound.
    pub grad_clip: Option<f64>,
    /// Dilation radius of the local segmentation region; defaults to the
    /// value for `net.image_size`.
    pub seg_dilation: Option<usize>,
}

impl TrainConfig {
    pub fn new(net: NetConfig) -> Self {
        Self {
            net,
            batch_size: 8,
            total_iters: 200_000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_e: 1e-4,
            lr_f: 1e-6,
            beta1: 0.0,
            beta2: 0.99,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 10_000,
            log_every: 100,
            dual_pass: true,
            ema_decay: None,
            grad_clip: None,
            seg_dilation: None,
        }
    }

    pub fn lambda_ds_init(&self) -> f64 {
        self.weights.ds
    }

    pub fn dilation(&self) -> usize {
        self.seg_dilation.unwrap_or_else(|| dilation_radius(self.net.image_size))
    }

    /// Optimiser settings of a trained network; `None` for the segmenter.
    pub fn adam(&self, id: NetId) -> Option<AdamConfig> {
        let lr = match id {
            NetId::Generator => self.lr_g,
            NetId::Discriminator => self.lr_d,
            NetId::Encoder => self.lr_e,
            NetId::Mapping => self.lr_f,
            NetId::Segmenter => return None,
        };
        Some(AdamConfig::new(lr, self.beta1, self.beta2))
    }

    fn adam_of(&self, id: NetId) -> AdamConfig {
        self.adam(id).expect("trained network")
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        for id in [NetId::Generator, NetId::Discriminator, NetId::Encoder, NetId::Mapping] {
            self.adam_of(id).validate()?;
        }
        if self.total_iters == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("total_iters and batch_size must be >= 1".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("log_every and checkpoint_every must be >= 1".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidConfig(format!("ema_decay {d} must be in [0, 1)")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("grad_clip {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams<f32>,
    pub opt_g: Adam<f32>,
    pub opt_f: Adam<f32>,
    pub opt_e: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Completed iterations.
    pub iteration: u64,
    pub ema: Option<ParamStore<f32>>,
}

impl TrainState {
    /// Fresh G/F/E/D around an already trained segmenter.
    pub fn new(cfg: &TrainConfig, segmenter: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let mut params = NetworkParams::init(cfg.net.clone(), &mut rng)?;
        segmenter.check_layout(&params.segmenter)?;
        params.segmenter = segmenter;
        Ok(Self {
            ema: cfg.ema_decay.map(|_| params.generator.clone()),
            params,
            opt_g: Adam::new(cfg.adam_of(NetId::Generator)),
            opt_f: Adam::new(cfg.adam_of(NetId::Mapping)),
            opt_e: Adam::new(cfg.adam_of(NetId::Encoder)),
            opt_d: Adam::new(cfg.adam_of(NetId::Discriminator)),
            iteration: 0,
        })
    }

    pub fn optimizer(&self, id: NetId) -> Option<&Adam<f32>> {
        match id {
            NetId::Generator => Some(&self.opt_g),
            NetId::Mapping => Some(&self.opt_f),
            NetId::Encoder => Some(&self.opt_e),
            NetId::Discriminator => Some(&self.opt_d),
            NetId::Segmenter => None,
        }
    }

    fn optimizer_mut(&mut self, id: NetId) -> Result<(&mut Adam<f32>, &mut ParamStore<f32>)> {
        let p = &mut self.params;
        match id {
            NetId::Generator => Ok((&mut self.opt_g, &mut p.generator)),
            NetId::Mapping => Ok((&mut self.opt_f, &mut p.mapping)),
            NetId::Encoder => Ok((&mut self.opt_e, &mut p.encoder)),
            NetId::Discriminator => Ok((&mut self.opt_d, &mut p.discriminator)),
            NetId::Segmenter => Err(Error::Param("the segmenter is frozen".into())),
        }
    }
}

/// Loss values reported for one iteration. Generator-side terms are the
/// mean over the latent and reference passes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Iteration number, counting from 1.
    pub iter: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub sty: f64,
    pub ds: f64,
    pub cyc: f64,
    pub seg: f64,
    pub lambda_ds: f64,
}

/// Source of the style codes of one pass.
#[derive(Clone, Debug)]
pub enum StyleInputs<T> {
    /// Two latent batches for `F`.
    Latent { z1: Tensor<T>, z2: Tensor<T> },
    /// Two reference batches for `E`.
    Reference { y1: Tensor<T>, y2: Tensor<T> },
}

/// Inputs shared by the discriminator and generator objectives of a pass.
#[derive(Clone, Debug)]
pub struct PassInputs<T> {
    pub x: Tensor<T>,
    pub x_masked: Tensor<T>,
    pub m: Tensor<T>,
    pub masks: Vec<SegMask>,
    pub gender: Vec<DomainLabel>,
    pub c_masked: Vec<AttributeId>,
    /// Domain of the style codes, and of the generated images.
    pub target: Vec<DomainLabel>,
    pub style: StyleInputs<T>,
}

impl<T: Scalar> PassInputs<T> {
    /// Build from a training batch with style inputs drawn from `rng`:
    /// random target domains for the latent pass, and for the reference
    /// pass two images sharing the domain of the first.
    pub fn draw<S: SampleSource + ?Sized, R: Rng>(
        batch: &TrainingBatch,
        source: &S,
        domains: &DomainIndex,
        cfg: &NetConfig,
        reference: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let n = batch.len();
        let (target, style) = if reference {
            let mut target = Vec::with_capacity(n);
            let mut y1 = Vec::with_capacity(n);
            let mut y2 = Vec::with_capacity(n);
            for _ in 0..n {
                let i1 = rng.gen_range(0..source.len());
                let d = domains.gender[i1];
                let pool = &domains.members[d.index()];
                let i2 = pool[rng.gen_range(0..pool.len())];
                target.push(d);
                y1.push(source.get(i1)?.image);
                y2.push(source.get(i2)?.image);
            }
            let y1 = Image::batch(&y1.iter().collect::<Vec<_>>()).cast();
            let y2 = Image::batch(&y2.iter().collect::<Vec<_>>()).cast();
            (target, StyleInputs::Reference { y1, y2 })
        } else {
            let target = (0..n)
                .map(|_| DomainLabel::ALL[rng.gen_range(0..2)])
                .collect();
            let z1 = sample_latent(rng, n, cfg.latent_dim).cast();
            let z2 = sample_latent(rng, n, cfg.latent_dim).cast();
            (target, StyleInputs::Latent { z1, z2 })
        };
        Ok(Self {
            x: batch.x.cast(),
            x_masked: batch.x_masked.cast(),
            m: batch.m.cast(),
            masks: batch.masks.clone(),
            gender: batch.gender.clone(),
            c_masked: batch.c_masked.clone(),
            target,
            style,
        })
    }

    pub fn len(&self) -> usize {
        self.gender.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gender.is_empty()
    }
}

/// Sample indices grouped by domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainIndex {
    pub gender: Vec<DomainLabel>,
    pub members: [Vec<usize>; 2],
}

impl DomainIndex {
    pub fn build<S: SampleSource + ?Sized>(source: &S) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let gender = (0..source.len())
            .map(|i| source.gender(i))
            .collect::<Result<Vec<_>>>()?;
        let mut members = [Vec::new(), Vec::new()];
        for (i, d) in gender.iter().enumerate() {
            members[d.index()].push(i);
        }
        Ok(Self { gender, members })
    }
}

/// All random inputs of one iteration.
#[derive(Clone, Debug)]
pub struct IterationInputs {
    pub latent: PassInputs<f32>,
    pub reference: Option<PassInputs<f32>>,
}

/// Inputs of iteration `iter` (0-based) of a run with `cfg`.
pub fn draw_iteration<S: SampleSource + ?Sized>(
    source: &S,
    domains: &DomainIndex,
    cfg: &TrainConfig,
    iter: u64,
) -> Result<IterationInputs> {
    let mut rng = iteration_rng(cfg.seed, iter);
    let batch = make_batch_with(source, cfg.batch_size, &mut rng)?;
    let latent = PassInputs::draw(&batch, source, domains, &cfg.net, false, &mut rng)?;
    let reference = if cfg.dual_pass {
        Some(PassInputs::draw(&batch, source, domains, &cfg.net, true, &mut rng)?)
    } else {
        None
    };
    Ok(IterationInputs { latent, reference })
}

/// Multiplier that zeroes attribute `c[i]` of sample `i` across the three
/// colour channels.
pub fn keep_mask<T: Scalar>(masks: &[SegMask], c: &[AttributeId]) -> Tensor<T> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut data = Vec::with_capacity(masks.len() * 3 * h * w);
    for (m, a) in masks.iter().zip(c) {
        let class = a.class() as u8;
        let plane: Vec<T> = m
            .labels()
            .iter()
            .map(|&l| if l == class { T::zero() } else { T::one() })
            .collect();
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
    }
    Tensor::new(&[masks.len(), 3, h, w], data)
}

/// Style codes of a pass, computed through `F` or `E`.
fn style_codes<T: Scalar>(
    g: &mut Graph<T>,
    f: &mut Binder<'_, T>,
    e: &mut Binder<'_, T>,
    cfg: &NetConfig,
    inp: &PassInputs<T>,
) -> Result<(Var, Var)> {
    match &inp.style {
        StyleInputs::Latent { z1, z2 } => {
            let z1 = g.constant(z1.clone());
            let z2 = g.constant(z2.clone());
            Ok((
                mapping(g, f, cfg, z1, &inp.target)?,
                mapping(g, f, cfg, z2, &inp.target)?,
            ))
        }
        StyleInputs::Reference { y1, y2 } => {
            let y1 = g.constant(y1.clone());
            let y2 = g.constant(y2.clone());
            Ok((
                encoder(g, e, cfg, y1, &inp.target)?,
                encoder(g, e, cfg, y2, &inp.target)?,
            ))
        }
    }
}

/// Fake images `G(x_masked, m, s1)` with every network frozen.
pub fn fake_images<T: Scalar>(params: &NetworkParams<T>, inp: &PassInputs<T>) -> Result<Tensor<T>> {
    let cfg = &params.config;
    let mut g = Graph::new();
    let mut bf = Binder::frozen(&params.mapping);
    let mut be = Binder::frozen(&params.encoder);
    let mut bg = Binder::frozen(&params.generator);
    let (s1, _) = style_codes(&mut g, &mut bf, &mut be, cfg, inp)?;
    let xm = g.constant(inp.x_masked.clone());
    let m = g.constant(inp.m.clone());
    let out = generator(&mut g, &mut bg, cfg, xm, m, s1)?;
    Ok(g.value(out).clone())
}

pub type NetGrads<T> = BTreeMap<NetId, BTreeMap<String, Tensor<T>>>;

/// Discriminator objective on real `x` and a detached `fake`, with its
/// gradients. Only `D` is bound as trainable.
pub fn discriminator_objective<T: Scalar>(
    params: &NetworkParams<T>,
    inp: &PassInputs<T>,
    fake: &Tensor<T>,
) -> Result<(f64, NetGrads<T>)> {
    let cfg = &params.config;
    let mut g = Graph::new();
    let mut bd = Binder::trainable(&params.discriminator);
    let x = g.constant(inp.x.clone());
    let fake = g.constant(fake.clone());
    let real_logit = discriminator(&mut g, &mut bd, cfg, x, &inp.gender)?;
    let fake_logit = discriminator(&mut g, &mut bd, cfg, fake, &inp.target)?;
    let loss = adv_loss_d(&mut g, real_logit, fake_logit);
    let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::NonFiniteTerm("L_adv_d"));
    }
    let grads = g.backward(loss);
    let mut out = BTreeMap::new();
    out.insert(NetId::Discriminator, bd.collect(&grads));
    Ok((value, out))
}

/// Graph of the generator-side objective of one pass.
pub struct GeneratorGraph<'a, T> {
    pub graph: Graph<T>,
    pub terms: TermVars,
    pub total: Var,
    pub binders: Vec<(NetId, Binder<'a, T>)>,
}

/// Build the five generator-side terms for a pass. `F` is trainable only in
/// the latent pass; `D` and `S` are always constants.
pub fn generator_graph<'a, T: Scalar>(
    params: &'a NetworkParams<T>,
    inp: &PassInputs<T>,
    weights: &LossWeights,
    dilation: usize,
) -> Result<GeneratorGraph<'a, T>> {
    let cfg = &params.config;
    let latent = matches!(inp.style, StyleInputs::Latent { .. });
    let mut g = Graph::new();
    let mut bg = Binder::trainable(&params.generator);
    let mut bf = Binder::trainable(&params.mapping);
    let mut be = Binder::trainable(&params.encoder);
    let mut bd = Binder::frozen(&params.discriminator);
    let mut bs = Binder::frozen(&params.segmenter);

    let (s1, s2) = style_codes(&mut g, &mut bf, &mut be, cfg, inp)?;
    let xm = g.constant(inp.x_masked.clone());
    let m = g.constant(inp.m.clone());
    let x1 = generator(&mut g, &mut bg, cfg, xm, m, s1)?;
    let x2 = generator(&mut g, &mut bg, cfg, xm, m, s2)?;
    let x2 = g.detach(x2);

    let logit = discriminator(&mut g, &mut bd, cfg, x1, &inp.target)?;
    let adv = adv_loss_g(&mut g, logit);

    let s_rec = encoder(&mut g, &mut be, cfg, x1, &inp.target)?;
    let sty = style_loss(&mut g, s1, s_rec)?;

    let ds = ds_loss(&mut g, x1, x2)?;

    let keep = g.constant(keep_mask(&inp.masks, &inp.c_masked));
    let x1_masked = g.mul(x1, keep);
    let x = g.constant(inp.x.clone());
    let s_orig = encoder(&mut g, &mut be, cfg, x, &inp.gender)?;
    let x_rec = generator(&mut g, &mut bg, cfg, x1_masked, m, s_orig)?;
    let cyc = cyc_loss(&mut g, x, x_rec)?;

    let probs = segmenter(&mut g, &mut bs, cfg, x1)?;
    let seg = local_seg_loss(&mut g, &inp.masks, probs, &inp.c_masked, dilation)?;

    let terms = TermVars { adv, sty, ds, cyc, seg };
    let total = terms.weighted(&mut g, weights);
    let mut binders = vec![(NetId::Generator, bg), (NetId::Encoder, be)];
    if latent {
        binders.push((NetId::Mapping, bf));
    }
    binders.push((NetId::Discriminator, bd));
    binders.push((NetId::Segmenter, bs));
    Ok(GeneratorGraph {
        graph: g,
        terms,
        total,
        binders,
    })
}

/// Generator-side terms and gradients of every trainable network.
pub fn generator_objective<T: Scalar>(
    params: &NetworkParams<T>,
    inp: &PassInputs<T>,
    weights: &LossWeights,
    dilation: usize,
) -> Result<(LossTerms, NetGrads<T>)> {
    let gg = generator_graph(params, inp, weights, dilation)?;
    let terms = gg.terms.values(&gg.graph);
    terms.check_finite()?;
    let grads = gg.graph.backward(gg.total);
    let mut out = BTreeMap::new();
    for (id, b) in &gg.binders {
        let collected = b.collect(&grads);
        if !collected.is_empty() {
            out.insert(*id, collected);
        }
    }
    Ok((terms, out))
}

fn apply(
    state: &mut TrainState,
    cfg: &TrainConfig,
    grads: NetGrads<f32>,
    allowed: &[NetId],
) -> Result<()> {
    for (id, mut grads) in grads {
        if !allowed.contains(&id) {
            return Err(Error::Param(format!("{} received gradients in this update", id.prefix())));
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let (opt, params) = state.optimizer_mut(id)?;
        opt.update(params, &grads)?;
    }
    Ok(())
}

fn update_ema(state: &mut TrainState, cfg: &TrainConfig) {
    let (Some(decay), Some(ema)) = (cfg.ema_decay, state.ema.as_mut()) else {
        return;
    };
    let d = decay as f32;
    for (name, t) in ema.iter_mut() {
        let src = state.params.generator.get(name).unwrap();
        for (e, &s) in t.data_mut().iter_mut().zip(src.data()) {
            *e = d * *e + (1.0 - d) * s;
        }
    }
}

/// One iteration: D on the latent fake, D on the reference fake, then the
/// latent-guided G/F/E update and the reference-guided G/E update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, inputs: &IterationInputs) -> Result<StepReport> {
    let iter = state.iteration + 1;
    let lambda_ds = lambda_ds_schedule(iter, cfg.total_iters, cfg.lambda_ds_init());
    let weights = LossWeights {
        ds: lambda_ds,
        ..cfg.weights
    };
    let k = cfg.dilation();
    let passes: Vec<&PassInputs<f32>> = core::iter::once(&inputs.latent)
        .chain(inputs.reference.as_ref())
        .collect();

    let mut adv_d = 0.0;
    for inp in &passes {
        let fake = fake_images(&state.params, inp)?;
        let (loss, grads) = discriminator_objective(&state.params, inp, &fake)?;
        apply(state, cfg, grads, &[NetId::Discriminator])?;
        adv_d += loss;
    }

    let mut sum = LossTerms::default();
    for inp in &passes {
        let latent = matches!(inp.style, StyleInputs::Latent { .. });
        let (terms, grads) = generator_objective(&state.params, inp, &weights, k)?;
        let allowed: &[NetId] = if latent {
            &[NetId::Generator, NetId::Mapping, NetId::Encoder]
        } else {
            &[NetId::Generator, NetId::Encoder]
        };
        apply(state, cfg, grads, allowed)?;
        update_ema(state, cfg);
        sum.adv += terms.adv;
        sum.sty += terms.sty;
        sum.ds += terms.ds;
        sum.cyc += terms.cyc;
        sum.seg += terms.seg;
    }
    let n = passes.len() as f64;
    state.iteration = iter;
    Ok(StepReport {
        iter,
        adv_d: adv_d / n,
        adv_g: sum.adv / n,
        sty: sum.sty / n,
        ds: sum.ds / n,
        cyc: sum.cyc / n,
        seg: sum.seg / n,
        lambda_ds,
    })
}

/// What the driver should do after a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Run steps from `state.iteration` up to `cfg.total_iters`, handing every
/// report to `observe` (which decides about logging and checkpoints).
pub fn train_facialgan<S, O>(
    state: &mut TrainState,
    cfg: &TrainConfig,
    source: &S,
    mut observe: O,
) -> Result<()>
where
    S: SampleSource + ?Sized,
    O: FnMut(&TrainState, &StepReport) -> Result<Control>,
{
    cfg.validate()?;
    let domains = DomainIndex::build(source)?;
    while state.iteration < cfg.total_iters {
        let inputs = draw_iteration(source, &domains, cfg, state.iteration)?;
        let report = train_step(state, cfg, &inputs)?;
        if observe(state, &report)? == Control::Stop {
            break;
        }
    }
    Ok(())
}

/// Whether iteration `iter` (1-based) is a logging or checkpoint point.
pub fn is_due(iter: u64, every: u64, total: u64) -> bool {
    iter % every == 0 || iter == total
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl SegTrainConfig {
    /// 50 epochs of batch 32 with Adam at learning rate 1e-2.
    pub fn new(net: NetConfig) -> Self {
        Self {
            net,
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::new(1e-2, 0.9, 0.999),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.adam.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: usize,
    pub step_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

impl SegEpoch {
    pub fn mean_loss(&self) -> f64 {
        self.step_losses.iter().sum::<f64>() / self.step_losses.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainResult {
    /// Parameters of the epoch with the best validation accuracy (training
    /// accuracy when no validation split is given).
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    /// Parameters after the last epoch.
    pub last: ParamStore<f32>,
    pub epochs: Vec<SegEpoch>,
}

/// Batch assembly order for `epoch`: a permutation of `0..n` derived from
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = iteration_rng(seed, epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Percentage of pixels where the segmenter's arg-max matches the mask.
pub fn segmenter_accuracy<S: SampleSource + ?Sized>(
    params: &ParamStore<f32>,
    cfg: &NetConfig,
    source: &S,
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let idx: Vec<usize> = (0..source.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| source.get(i)).collect::<Result<Vec<_>>>()?;
        let x = Image::batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
        let mut g = Graph::new();
        let mut p = Binder::frozen(params);
        let xv = g.constant(x);
        let out = segmenter_logits(&mut g, &mut p, cfg, xv)?;
        let logits = g.value(out.logits);
        for (b, s) in samples.iter().enumerate() {
            let pred = SegMask::argmax(&logits.batch_item(b))?;
            correct += pred
                .labels()
                .iter()
                .zip(s.mask.labels())
                .filter(|(a, b)| a == b)
                .count();
            total += pred.labels().len();
        }
    }
    if total == 0 {
        return Err(Error::EmptySplit("evaluation"));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Supervised segmenter training with full-image cross-entropy.
/// `on_epoch` sees each finished epoch and the current parameters.
pub fn train_segmenter<S, V, O>(
    cfg: &SegTrainConfig,
    train: &S,
    val: Option<&V>,
    mut on_epoch: O,
) -> Result<SegTrainResult>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
    O: FnMut(&SegEpoch, &ParamStore<f32>) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut params = NetworkParams::<f32>::init(cfg.net.clone(), &mut rng)?.segmenter;
    let mut opt = Adam::new(cfg.adam);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut step_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk.iter().map(|&i| train.get(i)).collect::<Result<Vec<_>>>()?;
            let x = Image::batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
            let m = SegMask::batch(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>());
            let mut g = Graph::new();
            let mut p = Binder::trainable(&params);
            let xv = g.constant(x);
            let mv = g.constant(m);
            let out = segmenter_logits(&mut g, &mut p, &cfg.net, xv)?;
            let loss = seg_cross_entropy(&mut g, out.logits, mv)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "segmenter loss is {value} at epoch {epoch}"
                )));
            }
            let grads = p.collect(&g.backward(loss));
            drop(p);
            opt.update(&mut params, &grads)?;
            step_losses.push(value);
        }
        let train_accuracy = segmenter_accuracy(&params, &cfg.net, train, cfg.batch_size)?;
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(segmenter_accuracy(&params, &cfg.net, v, cfg.batch_size)?),
            _ => None,
        };
        let score = val_accuracy.unwrap_or(train_accuracy);
        let stats = SegEpoch {
            epoch,
            step_losses,
            train_accuracy,
            val_accuracy,
        };
        on_epoch(&stats, &params)?;
        if best.as_ref().map_or(true, |(_, b, _)| score > *b) {
            best = Some((epoch, score, params.clone()));
        }
        epochs.push(stats);
    }
    let (best_epoch, best_accuracy, best) = best.unwrap();
    Ok(SegTrainResult {
        best,
        best_epoch,
        best_accuracy,
        last: params,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::MemorySource;
    use crate::toyset::toy_source;

    fn small_net() -> NetConfig {
        NetConfig {
            base_channels: 4,
            max_channels: 8,
            mlp_hidden: 16,
            style_dim: 8,
            latent_dim: 4,
            mlp_shared_layers: 1,
            mlp_head_layers: 1,
            ..NetConfig::desk(16)
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_iters: 10,
            seed: 3,
            ..TrainConfig::new(small_net())
        }
    }

    fn small_state(cfg: &TrainConfig) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seg = NetworkParams::<f32>::init(cfg.net.clone(), &mut rng).unwrap().segmenter;
        TrainState::new(cfg, seg).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lambda_ds_schedule(0, 100, 1.0), 1.0);
        assert_eq!(lambda_ds_schedule(100, 100, 1.0), 0.0);
        assert_eq!(lambda_ds_schedule(50, 100, 1.0), 0.5);
        let mut prev = f64::INFINITY;
        for i in 0..=37 {
            let v = lambda_ds_schedule(i, 37, 2.0);
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn defaults_follow_training_recipe() {
        let c = TrainConfig::new(NetConfig::full(256));
        assert_eq!((c.total_iters, c.batch_size), (200_000, 8));
        assert_eq!((c.lr_g, c.lr_d, c.lr_e, c.lr_f), (1e-4, 1e-4, 1e-4, 1e-6));
        assert_eq!((c.beta1, c.beta2), (0.0, 0.99));
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.lambda_ds_init(), 1.0);
        assert_eq!(c.dilation(), 4);
        let s = SegTrainConfig::new(NetConfig::full(256));
        assert_eq!((s.epochs, s.batch_size, s.adam.lr), (50, 32, 1e-2));
        assert!(c.validate().is_ok() && s.validate().is_ok());
    }

    #[test]
    fn step_updates_only_owned_networks() {
        let cfg = small_cfg();
        let src = toy_source(4, 16, 1).unwrap();
        let dom = DomainIndex::build(&src).unwrap();
        let mut state = small_state(&cfg);
        let before = state.clone();
        let inputs = draw_iteration(&src, &dom, &cfg, 0).unwrap();
        let report = train_step(&mut state, &cfg, &inputs).unwrap();
        assert_eq!(report.iter, 1);
        assert_eq!(state.iteration, 1);
        assert_eq!(state.params.segmenter.checksum(), before.params.segmenter.checksum());
        for id in [NetId::Generator, NetId::Encoder, NetId::Discriminator, NetId::Mapping] {
            assert_ne!(state.params.net(id), before.params.net(id), "{id:?} unchanged");
        }
        assert_eq!(state.opt_d.step, 2);
        assert_eq!(state.opt_g.step, 2);
        assert_eq!(state.opt_e.step, 2);
        assert_eq!(state.opt_f.step, 1);
        for id in [NetId::Generator, NetId::Encoder, NetId::Discriminator, NetId::Mapping] {
            let own = state.optimizer(id).unwrap();
            assert!(own.m.names().all(|n| n.starts_with(&format!("{}.", id.prefix()))));
        }
    }

    #[test]
    fn discriminator_update_has_no_generator_gradients() {
        let cfg = small_cfg();
        let src = toy_source(4, 16, 1).unwrap();
        let dom = DomainIndex::build(&src).unwrap();
        let state = small_state(&cfg);
        let inputs = draw_iteration(&src, &dom, &cfg, 0).unwrap();
        let fake = fake_images(&state.params, &inputs.latent).unwrap();
        let (_, grads) = discriminator_objective(&state.params, &inputs.latent, &fake).unwrap();
        assert_eq!(grads.keys().copied().collect::<Vec<_>>(), vec![NetId::Discriminator]);
    }

    #[test]
    fn generator_objective_leaves_frozen_networks_alone() {
        let cfg = small_cfg();
        let src = toy_source(4, 16, 1).unwrap();
        let dom = DomainIndex::build(&src).unwrap();
        let state = small_state(&cfg);
        let inputs = draw_iteration(&src, &dom, &cfg, 0).unwrap();
        let w = LossWeights::default();
        let (_, latent) = generator_objective(&state.params, &inputs.latent, &w, 1).unwrap();
        let mut ids: Vec<_> = latent.keys().copied().collect();
        ids.sort();
        assert_eq!(ids, vec![NetId::Generator, NetId::Mapping, NetId::Encoder]);
        let (_, reference) =
            generator_objective(&state.params, inputs.reference.as_ref().unwrap(), &w, 1).unwrap();
        let ids: Vec<_> = reference.keys().copied().collect();
        assert_eq!(ids, vec![NetId::Generator, NetId::Encoder]);
    }

    #[test]
    fn reference_pairs_share_a_domain() {
        let src = toy_source(12, 16, 2).unwrap();
        let dom = DomainIndex::build(&src).unwrap();
        let mut cfg = small_cfg();
        cfg.batch_size = 6;
        let inputs = draw_iteration(&src, &dom, &cfg, 5).unwrap();
        let r = inputs.reference.unwrap();
        let StyleInputs::Reference { y1, y2 } = &r.style else {
            panic!("reference pass without references")
        };
        for i in 0..6 {
            let find = |t: &Tensor<f32>| {
                (0..src.len())
                    .find(|&j| src.get(j).unwrap().image.to_tensor() == t.batch_item(i))
                    .unwrap()
            };
            assert_eq!(dom.gender[find(y1)], r.target[i]);
            assert_eq!(dom.gender[find(y2)], r.target[i]);
        }
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let cfg = small_cfg();
        let src = toy_source(4, 16, 1).unwrap();
        let run = || {
            let mut state = small_state(&cfg);
            let mut log = Vec::new();
            train_facialgan(&mut state, &cfg, &src, |_, r| {
                log.push(*r);
                Ok(Control::Continue)
            })
            .unwrap();
            (log, state)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.last().unwrap().lambda_ds, 0.0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_cfg();
        let src = toy_source(4, 16, 1).unwrap();
        let mut full = small_state(&cfg);
        let mut full_log = Vec::new();
        train_facialgan(&mut full, &cfg, &src, |_, r| {
            full_log.push(*r);
            Ok(Control::Continue)
        })
        .unwrap();

        let mut part = small_state(&cfg);
        let mut log = Vec::new();
        train_facialgan(&mut part, &cfg, &src, |s, r| {
            log.push(*r);
            Ok(if s.iteration == 4 { Control::Stop } else { Control::Continue })
        })
        .unwrap();
        let mut resumed = part.clone();
        train_facialgan(&mut resumed, &cfg, &src, |_, r| {
            log.push(*r);
            Ok(Control::Continue)
        })
        .unwrap();
        assert_eq!(log, full_log);
        assert_eq!(resumed, full);
    }

    #[test]
    fn ema_tracks_generator_when_enabled() {
        let mut cfg = small_cfg();
        cfg.ema_decay = Some(0.5);
        cfg.total_iters = 2;
        let src = toy_source(4, 16, 1).unwrap();
        let mut state = small_state(&cfg);
        let g0 = state.params.generator.clone();
        train_facialgan(&mut state, &cfg, &src, |_, _| Ok(Control::Continue)).unwrap();
        let ema = state.ema.as_ref().unwrap();
        assert_ne!(ema, &g0);
        assert_ne!(ema, &state.params.generator);
    }

    #[test]
    fn single_pass_skips_reference_updates() {
        let mut cfg = small_cfg();
        cfg.dual_pass = false;
        let src = toy_source(4, 16, 1).unwrap();
        let dom = DomainIndex::build(&src).unwrap();
        let mut state = small_state(&cfg);
        let inputs = draw_iteration(&src, &dom, &cfg, 0).unwrap();
        assert!(inputs.reference.is_none());
        train_step(&mut state, &cfg, &inputs).unwrap();
        assert_eq!((state.opt_d.step, state.opt_g.step), (1, 1));
    }

    #[test]
    fn keep_mask_zeroes_attribute_only() {
        let src = toy_source(1, 16, 0).unwrap();
        let s = src.get(0).unwrap();
        let k = keep_mask::<f32>(&[s.mask.clone()], &[AttributeId::Mouth]);
        let mut x = s.image.to_tensor();
        for (v, kv) in x.data_mut().iter_mut().zip(k.data()) {
            *v *= kv;
        }
        let want = crate::datapipe::mask_attribute(&s.image, &s.mask, AttributeId::Mouth).unwrap();
        assert_eq!(x, want.to_tensor());
    }

    #[test]
    fn segmenter_loss_decreases_on_one_sample() {
        // One epoch over five copies of a single sample, one per step.
        let one = toy_source(1, 16, 4).unwrap().get(0).unwrap();
        let src = MemorySource::new(vec![one; 5]);
        let cfg = SegTrainConfig {
            epochs: 1,
            batch_size: 1,
            adam: AdamConfig::new(1e-3, 0.9, 0.999),
            ..SegTrainConfig::new(small_net())
        };
        let r = train_segmenter(&cfg, &src, None::<&MemorySource>, |_, _| Ok(())).unwrap();
        let losses = &r.epochs[0].step_losses;
        assert_eq!(losses.len(), 5);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(20, 1, 0);
        assert_eq!(a, epoch_order(20, 1, 0));
        assert_ne!(a, epoch_order(20, 1, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }
}
