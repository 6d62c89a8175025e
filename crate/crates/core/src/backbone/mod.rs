//! Stage 1: the self deep matching network.
//!
//! ```text
//! image ─ extractor ─┬─ F3 ─ L2 ─ attention ─ Gram ─ top-T ─ relu+L2 ─┐
//!                    ├─ F4 ─ ...                                     ├─ concat ─ ASPP ─ decoder ─ score
//!                    └─ F5 ─ ...                                     ┘
//! ```
//!
//! The extractor keeps a stride of 8: pooling is removed from blocks 4 and 5
//! and block 5 uses atrous rate 2, so all three tapped maps share one size.

mod correlation;
mod head;
mod layers;
mod params;

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use correlation::{
    attention_weights, l2_normalize_descriptors, self_correlation, skip_match_concat,
    spatial_attention, top_t_pool, zero_out_normalize, AttentionParams,
};
pub use layers::{atrous_conv2d, FilterBank};
pub use params::{Adadelta, ParamTensor, Params};

use self::correlation::{AttnGrads, AttnView, LevelCache};
use self::head::{Head, HeadCache};
use self::layers::Conv2d;
use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, RgbImage, ScoreMap};
use crate::math;
use crate::tensor::Tensor;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Feature extractor family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ExtractorKind {
    /// VGG16 blocks 1-5, pooling removed after blocks 4 and 5, block 5 at
    /// atrous rate 2.
    Vgg16,
    /// Same topology with one convolution of `tiny_width` channels per block.
    /// Meant for tests and desk-scale training.
    Tiny,
    Resnet50,
    Resnet101,
    Mobilenetv2,
    Mobilenetv3,
    Shufflenetv2,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BackboneConfig {
    /// Number of correlation values kept per position.
    pub top_t: usize,
    pub attention: bool,
    pub extractor: ExtractorKind,
    pub tiny_width: usize,
    pub aspp_rates: [usize; 3],
    pub aspp_channels: usize,
    pub decoder_channels: usize,
    /// Whether `c(m, m)` competes for the top-T slots.
    pub include_self_match: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            top_t: 48,
            attention: true,
            extractor: ExtractorKind::Vgg16,
            tiny_width: 32,
            aspp_rates: [6, 12, 18],
            aspp_channels: 48,
            decoder_channels: 48,
            include_self_match: true,
        }
    }
}

impl BackboneConfig {
    /// The small configuration used for desk-scale experiments.
    pub fn tiny(top_t: usize) -> Self {
        Self {
            top_t,
            extractor: ExtractorKind::Tiny,
            tiny_width: 32,
            aspp_channels: 16,
            decoder_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_t == 0 {
            return Err(invalid!("top_t must be positive"));
        }
        if self.aspp_rates.contains(&0) {
            return Err(invalid!("ASPP rates must be positive"));
        }
        if self.aspp_channels == 0 || self.decoder_channels == 0 {
            return Err(invalid!("ASPP and decoder widths must be positive"));
        }
        match self.extractor {
            ExtractorKind::Vgg16 => Ok(()),
            ExtractorKind::Tiny => {
                if self.tiny_width == 0 || (self.attention && self.tiny_width % 8 != 0) {
                    Err(invalid!("tiny_width must be a positive multiple of 8"))
                } else {
                    Ok(())
                }
            }
            other => Err(Error::NotImplemented(format!("{other:?} feature extractor"))),
        }
    }

    /// Total downsampling of the extractor.
    pub fn stride(&self) -> usize {
        8
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        match self.extractor {
            ExtractorKind::Tiny => {
                let w = self.tiny_width;
                vec![
                    BlockSpec::new(&[w / 2], 1, true),
                    BlockSpec::new(&[w], 1, true),
                    BlockSpec::new(&[w], 1, true),
                    BlockSpec::new(&[w], 1, false),
                    BlockSpec::new(&[w], 2, false),
                ]
            }
            _ => vec![
                BlockSpec::new(&[64, 64], 1, true),
                BlockSpec::new(&[128, 128], 1, true),
                BlockSpec::new(&[256, 256, 256], 1, true),
                BlockSpec::new(&[512, 512, 512], 1, false),
                BlockSpec::new(&[512, 512, 512], 2, false),
            ],
        }
    }
}

struct BlockSpec {
    widths: Vec<usize>,
    dilation: usize,
    pool: bool,
}

impl BlockSpec {
    fn new(widths: &[usize], dilation: usize, pool: bool) -> Self {
        Self {
            widths: widths.to_vec(),
            dilation,
            pool,
        }
    }
}

struct Block {
    convs: Vec<Conv2d>,
    pool: bool,
}

/// Blocks whose outputs feed the correlation module (F3, F4, F5).
const TAPS: [usize; 3] = [2, 3, 4];

struct AttnLayer {
    c: usize,
    wf: usize,
    bf: usize,
    wg: usize,
    bg: usize,
    wh: usize,
    bh: usize,
    lambda: usize,
}

impl AttnLayer {
    fn new(params: &mut Params, level: usize, c: usize) -> Self {
        let c8 = c / 8;
        let name = |s: &str| format!("attention.level{level}.{s}");
        Self {
            c,
            wf: params.register(name("wf"), vec![c8, c]),
            bf: params.register(name("bf"), vec![c8]),
            wg: params.register(name("wg"), vec![c8, c]),
            bg: params.register(name("bg"), vec![c8]),
            wh: params.register(name("wh"), vec![c, c]),
            bh: params.register(name("bh"), vec![c]),
            lambda: params.register(name("lambda"), vec![1]),
        }
    }

    fn view<'a>(&self, p: &'a Params) -> AttnView<'a> {
        AttnView {
            c: self.c,
            wf: p.get(self.wf),
            bf: p.get(self.bf),
            wg: p.get(self.wg),
            bg: p.get(self.bg),
            wh: p.get(self.wh),
            bh: p.get(self.bh),
            lambda: p.get(self.lambda)[0],
        }
    }

    fn accumulate(&self, g: &mut Params, d: &AttnGrads) {
        let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        add(g.get_mut(self.wf), &d.wf);
        add(g.get_mut(self.bf), &d.bf);
        add(g.get_mut(self.wg), &d.wg);
        add(g.get_mut(self.bg), &d.bg);
        add(g.get_mut(self.wh), &d.wh);
        add(g.get_mut(self.bh), &d.bh);
        g.get_mut(self.lambda)[0] += d.lambda;
    }
}

/// The backbone network together with its parameters.
///
/// Inference only reads the parameters, so one instance can be shared
/// across threads.
pub struct Backbone {
    config: BackboneConfig,
    params: Params,
    initialized: bool,
    blocks: Vec<Block>,
    attention: Vec<AttnLayer>,
    head: Head,
}

impl core::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Backbone")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .field("initialized", &self.initialized)
            .finish()
    }
}

struct ConvRecord {
    input: Tensor,
    output: Tensor,
}

struct BlockRecord {
    convs: Vec<ConvRecord>,
    pool: Option<(Vec<u32>, usize, usize)>,
}

struct ForwardCache {
    blocks: Vec<BlockRecord>,
    levels: Vec<LevelCache>,
    head: HeadCache,
}

impl Backbone {
    /// Builds the graph with zero-filled, *uninitialized* parameters; run
    /// [`Backbone::init_random`] or load parameters before inference.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        let mut level_channels = Vec::new();
        for (bi, spec) in config.blocks().into_iter().enumerate() {
            let mut convs = Vec::new();
            for (ci, &out) in spec.widths.iter().enumerate() {
                let name = format!("extractor.block{}.conv{}", bi + 1, ci + 1);
                convs.push(Conv2d::new(&mut params, &name, in_ch, out, 3, spec.dilation));
                in_ch = out;
            }
            if TAPS.contains(&bi) {
                level_channels.push(in_ch);
            }
            blocks.push(Block {
                convs,
                pool: spec.pool,
            });
        }
        let attention = if config.attention {
            level_channels
                .iter()
                .zip([3, 4, 5])
                .map(|(&c, level)| AttnLayer::new(&mut params, level, c))
                .collect()
        } else {
            Vec::new()
        };
        let head = Head::new(
            &mut params,
            3 * config.top_t,
            config.aspp_rates,
            config.aspp_channels,
            config.decoder_channels,
        );
        Ok(Self {
            config,
            params,
            initialized: false,
            blocks,
            attention,
            head,
        })
    }

    pub fn with_random_init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut b = Self::new(config)?;
        b.init_random(seed);
        Ok(b)
    }

    /// Builds the graph and loads `params`, which must match its layout.
    pub fn from_params(config: BackboneConfig, params: &Params) -> Result<Self> {
        let mut b = Self::new(config)?;
        b.params.load_from(params)?;
        b.initialized = true;
        Ok(b)
    }

    /// He-uniform convolution weights, zero biases, attention projections
    /// uniform in `±1/√c` and `λ = 0`.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs: Vec<(usize, usize, f64)> = self
            .blocks
            .iter()
            .flat_map(|b| b.convs.iter())
            .chain(self.head.convs())
            .map(|c| (c.weight, c.bias, math::sqrt(6.0 / c.fan_in() as f64)))
            .collect();
        for (w, b, bound) in convs {
            for v in self.params.get_mut(w) {
                *v = rng.gen_range(-bound..bound);
            }
            self.params.get_mut(b).iter_mut().for_each(|v| *v = 0.0);
        }
        let cls = self.head.classifier.weight;
        self.params.get_mut(cls).iter_mut().for_each(|v| *v *= 0.1);
        for layer in &self.attention {
            let s = 1.0 / math::sqrt(layer.c as f64);
            for idx in [layer.wf, layer.wg, layer.wh] {
                for v in self.params.get_mut(idx) {
                    *v = rng.gen_range(-s..s);
                }
            }
            for idx in [layer.bf, layer.bg, layer.bh, layer.lambda] {
                self.params.get_mut(idx).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.initialized = true;
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable parameter access; counts as initialization.
    pub fn params_mut(&mut self) -> &mut Params {
        self.initialized = true;
        &mut self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Current residual scales `λ` of the three attention blocks.
    pub fn attention_scales(&self) -> Vec<f64> {
        self.attention.iter().map(|a| self.params.get(a.lambda)[0]).collect()
    }

    fn ensure_ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::State("backbone parameters were never initialized".to_string()))
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = self.config.stride();
        if image.channels() != 3 {
            return Err(invalid!("expected a 3-channel image, got {}", image.channels()));
        }
        if image.height() == 0 || image.height() % s != 0 || image.width() % s != 0 || image.width() == 0 {
            return Err(invalid!(
                "image size {}x{} is not divisible by the extractor stride {s}",
                image.width(),
                image.height()
            ));
        }
        Ok(())
    }

    fn run_extractor(&self, image: &Tensor, mut records: Option<&mut Vec<BlockRecord>>) -> [Tensor; 3] {
        let p = &self.params;
        let mut x = image.clone();
        let mut taps = Vec::with_capacity(3);
        for (bi, block) in self.blocks.iter().enumerate() {
            let mut rec = BlockRecord {
                convs: Vec::new(),
                pool: None,
            };
            for conv in &block.convs {
                let mut y = conv.forward(p, &x);
                layers::relu_inplace(&mut y);
                if records.is_some() {
                    rec.convs.push(ConvRecord {
                        input: x,
                        output: y.clone(),
                    });
                }
                x = y;
            }
            if block.pool {
                let (h, w) = (x.height(), x.width());
                let (y, idx) = layers::maxpool2(&x);
                rec.pool = Some((idx, h, w));
                x = y;
            }
            if TAPS.contains(&bi) {
                taps.push(x.clone());
            }
            if let Some(r) = records.as_deref_mut() {
                r.push(rec);
            }
        }
        let mut it = taps.into_iter();
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    }

    /// Feature maps F3, F4 and F5, each `c × H/8 × W/8`.
    pub fn extract_features(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        self.ensure_ready()?;
        self.check_input(image)?;
        Ok(self.run_extractor(image, None))
    }

    fn attn_view(&self, level: usize) -> Option<AttnView<'_>> {
        self.attention.get(level).map(|a| a.view(&self.params))
    }

    /// Skip matching: normalized top-T correlation tensors of the three
    /// levels, concatenated to `3T` channels.
    pub fn correlate(&self, features: &[Tensor; 3]) -> Result<Tensor> {
        self.ensure_ready()?;
        let mut outs = Vec::with_capacity(3);
        for (l, f) in features.iter().enumerate() {
            let (out, _) = correlation::level_forward(
                f,
                self.attn_view(l),
                self.config.top_t,
                self.config.include_self_match,
            )?;
            outs.push(out);
        }
        skip_match_concat([&outs[0], &outs[1], &outs[2]])
    }

    fn check_head_input(&self, corr: &Tensor) -> Result<()> {
        if corr.channels() != 3 * self.config.top_t {
            return Err(invalid!(
                "decoder expects {} channels, got {}",
                3 * self.config.top_t,
                corr.channels()
            ));
        }
        Ok(())
    }

    /// ASPP and decoder: `3T × h × w` → score map of `8h × 8w`.
    pub fn decode(&self, corr: &Tensor) -> Result<ScoreMap> {
        self.ensure_ready()?;
        self.check_head_input(corr)?;
        let (logits, _) = self.head.forward(&self.params, corr, false)?;
        scores_from_logits(&logits)
    }

    /// Full stage-1 inference on a stride-divisible image tensor.
    pub fn forward(&self, image: &Tensor) -> Result<ScoreMap> {
        let feats = self.extract_features(image)?;
        let corr = self.correlate(&feats)?;
        self.decode(&corr)
    }

    /// Runs on an RGB image of any size by resizing to `side × side`
    /// (`side` must be stride-divisible) and resizing the scores back.
    pub fn forward_image(&self, image: &RgbImage, side: usize) -> Result<ScoreMap> {
        let resized = image.resize(side, side);
        let scores = self.forward(&resized.to_tensor())?;
        Ok(scores.resize(image.width(), image.height()))
    }

    fn forward_train(&self, image: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.ensure_ready()?;
        self.check_input(image)?;
        let mut blocks = Vec::new();
        let feats = self.run_extractor(image, Some(&mut blocks));
        let mut outs = Vec::with_capacity(3);
        let mut levels = Vec::with_capacity(3);
        for (l, f) in feats.iter().enumerate() {
            let (out, cache) = correlation::level_forward(
                f,
                self.attn_view(l),
                self.config.top_t,
                self.config.include_self_match,
            )?;
            outs.push(out);
            levels.push(cache);
        }
        let corr = skip_match_concat([&outs[0], &outs[1], &outs[2]])?;
        let (logits, head) = self.head.forward(&self.params, &corr, true)?;
        Ok((
            logits,
            ForwardCache {
                blocks,
                levels,
                head: head.expect("cache requested"),
            },
        ))
    }

    /// Mean per-pixel two-class cross-entropy against `target` and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, image: &Tensor, target: &BinaryMask) -> Result<(f64, Params)> {
        if target.width() != image.width() || target.height() != image.height() {
            return Err(invalid!("target mask size differs from the image"));
        }
        let (logits, cache) = self.forward_train(image)?;
        let (loss, dlogits) = spatial_cross_entropy(&logits, target);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let dcorr = self.head.backward(p, &cache.head, &dlogits, &mut g);
        let t = self.config.top_t;
        let mut dfeat = Vec::with_capacity(3);
        for (l, lc) in cache.levels.iter().enumerate() {
            let dout = dcorr.channel_slice(l * t, (l + 1) * t)?;
            let (df, ag) = correlation::level_backward(lc, self.attn_view(l), &dout);
            if let (Some(layer), Some(ag)) = (self.attention.get(l), ag) {
                layer.accumulate(&mut g, &ag);
            }
            dfeat.push(df);
        }
        let mut grad: Option<Tensor> = None;
        for (bi, (block, rec)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some(l) = TAPS.iter().position(|&b| b == bi) {
                match grad.as_mut() {
                    Some(gx) => gx.add_assign(&dfeat[l]),
                    None => grad = Some(dfeat[l].clone()),
                }
            }
            let mut gx = grad.take().expect("gradient reaches every block");
            if let Some((idx, h, w)) = &rec.pool {
                gx = layers::maxpool2_backward(&gx, idx, *h, *w);
            }
            for (ci, (conv, r)) in block.convs.iter().zip(&rec.convs).enumerate().rev() {
                layers::relu_backward(&r.output, &mut gx);
                let need_dx = !(bi == 0 && ci == 0);
                match conv.backward(p, &r.input, &gx, &mut g, need_dx) {
                    Some(dx) => gx = dx,
                    None => break,
                }
            }
            grad = Some(gx);
        }
        Ok((loss, g))
    }
}

/// Forged-class probability `softmax(z)[1] = σ(z1 − z0)` per pixel.
fn scores_from_logits(logits: &Tensor) -> Result<ScoreMap> {
    let n = logits.spatial();
    let z = logits.data();
    let data: Vec<f64> = (0..n).map(|i| math::sigmoid(z[n + i] - z[i])).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score map".to_string()));
    }
    ScoreMap::from_vec(logits.width(), logits.height(), data)
}

/// Mean two-class cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn spatial_cross_entropy(logits: &Tensor, target: &BinaryMask) -> (f64, Tensor) {
    let n = logits.spatial();
    let z = logits.data();
    let t = target.as_slice();
    let mut loss = 0.0;
    let mut d = Tensor::zeros(2, logits.height(), logits.width());
    for i in 0..n {
        let diff = z[n + i] - z[i];
        let y = t[i] as f64;
        // −log σ(diff) = softplus(−diff), −log(1 − σ(diff)) = softplus(diff)
        loss += if y > 0.5 { softplus(-diff) } else { softplus(diff) };
        let g = (math::sigmoid(diff) - y) / n as f64;
        d.data_mut()[n + i] = g;
        d.data_mut()[i] = -g;
    }
    (loss / n as f64, d)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        math::ln(1.0 + math::exp(x))
    }
}

/// Optimization settings for [`train`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rho: f64,
    pub eps: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 6,
            rho: 0.95,
            eps: 1e-6,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

/// One optimizer plus the model it updates. `step` averages gradients over a
/// batch; callers that compute gradients elsewhere (e.g. in parallel) use
/// [`Trainer::apply`].
pub struct Trainer {
    model: Backbone,
    optimizer: Adadelta,
    loss_trace: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Backbone, config: &TrainConfig) -> Result<Self> {
        model.ensure_ready()?;
        let optimizer = Adadelta::new(model.params(), config.rho, config.eps, config.learning_rate);
        Ok(Self {
            model,
            optimizer,
            loss_trace: Vec::new(),
        })
    }

    pub fn model(&self) -> &Backbone {
        &self.model
    }

    pub fn into_model(self) -> Backbone {
        self.model
    }

    /// Mean batch loss of every step so far.
    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn step(&mut self, batch: &[(Tensor, BinaryMask)]) -> Result<f64> {
        let mut results = Vec::with_capacity(batch.len());
        for (image, mask) in batch {
            results.push(self.model.loss_and_gradients(image, mask)?);
        }
        self.apply(results)
    }

    /// Averages per-sample `(loss, gradient)` pairs and takes one optimizer
    /// step.
    pub fn apply(&mut self, results: Vec<(f64, Params)>) -> Result<f64> {
        if results.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let k = results.len() as f64;
        let mut iter = results.into_iter();
        let (mut loss, mut grads) = iter.next().unwrap();
        for (l, g) in iter {
            loss += l;
            grads.add_scaled(&g, 1.0)?;
        }
        loss /= k;
        grads.scale(1.0 / k);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: batch loss {loss}, previous loss {:?}",
                self.loss_trace.len(),
                self.loss_trace.last()
            )));
        }
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.loss_trace.push(loss);
        Ok(loss)
    }
}

/// Trains `model` on in-memory samples for `config.epochs` epochs, shuffling
/// with `config.seed`. Returns the trained model and the per-step loss trace.
pub fn train(
    model: Backbone,
    dataset: &[(Tensor, BinaryMask)],
    config: &TrainConfig,
) -> Result<(Backbone, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::new(model, config)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Tensor, BinaryMask)> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            trainer.step(&batch)?;
        }
    }
    let trace = trainer.loss_trace.clone();
    Ok((trainer.into_model(), trace))
}
