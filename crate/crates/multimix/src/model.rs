//! The shared encoder-decoder network: U-Net-style backbone, classification
//! branch off the bottleneck, input-gradient saliency, and the saliency
//! bridge that feeds the first decoder stage.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn;
use crate::scalar::Scalar;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters. Baselines are flag combinations of one
/// model: encoder-only (classifier), U-Net (decoder), multitask (both),
/// multitask + bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub lrelu_slope: f64,
    pub dropout_rate: f64,
    pub bridge_enabled: bool,
    pub classifier_enabled: bool,
    pub decoder_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 256,
            input_width: 256,
            input_channels: 1,
            num_classes: 2,
            depth: 4,
            base_channels: 32,
            lrelu_slope: 0.2,
            dropout_rate: 0.25,
            bridge_enabled: true,
            classifier_enabled: true,
            decoder_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::config(m.to_string()));
        if self.depth == 0 {
            return err("depth must be >= 1");
        }
        let f = 1usize << self.depth;
        if self.input_height % f != 0 || self.input_width % f != 0 {
            return err("input_height and input_width must be divisible by 2^depth");
        }
        if self.input_channels == 0 {
            return err("input_channels must be >= 1");
        }
        if self.num_classes < 2 {
            return err("num_classes must be >= 2");
        }
        if self.base_channels == 0 {
            return err("base_channels must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err("dropout_rate must satisfy 0 <= rate < 1");
        }
        if !self.lrelu_slope.is_finite() {
            return err("lrelu_slope must be finite");
        }
        if !self.classifier_enabled && !self.decoder_enabled {
            return err("at least one of classifier_enabled, decoder_enabled must be true");
        }
        if self.bridge_enabled && !(self.classifier_enabled && self.decoder_enabled) {
            return err("bridge_enabled requires classifier_enabled and decoder_enabled");
        }
        Ok(())
    }

    /// Output channels of encoder stage `i` (0-based).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (
            self.input_height >> self.depth,
            self.input_width >> self.depth,
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams<S: Scalar> {
    pub weight: Array4<S>,
    pub bias: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct NormParams<S: Scalar> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockParams<S: Scalar> {
    pub conv: ConvParams<S>,
    pub norm: NormParams<S>,
}

/// Two conv blocks (conv -> instance norm -> leaky ReLU -> dropout).
#[derive(Debug, Clone)]
pub struct StageParams<S: Scalar> {
    pub block1: ConvBlockParams<S>,
    pub block2: ConvBlockParams<S>,
}

#[derive(Debug, Clone)]
pub struct LinearParams<S: Scalar> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams<S: Scalar> {
    /// In execution order: stages[0] consumes the bottleneck.
    pub stages: Vec<StageParams<S>>,
    /// Final 1x1 projection to a single foreground-logit channel.
    pub head: ConvParams<S>,
}

/// All trainable weights, grouped by subsystem. The same struct doubles as
/// the container for gradients and optimizer moments (identical tree).
#[derive(Debug, Clone)]
pub struct ParameterSet<S: Scalar> {
    pub config: ModelConfig,
    pub encoder: Vec<StageParams<S>>,
    pub bottleneck: StageParams<S>,
    pub classifier: Option<LinearParams<S>>,
    pub bridge: Option<ConvParams<S>>,
    pub decoder: Option<DecoderParams<S>>,
}

fn push_block<'a, S: Scalar>(
    out: &mut Vec<(String, ArrayViewD<'a, S>)>,
    prefix: &str,
    b: &'a ConvBlockParams<S>,
) {
    out.push((format!("{prefix}.conv.weight"), b.conv.weight.view().into_dyn()));
    out.push((format!("{prefix}.conv.bias"), b.conv.bias.view().into_dyn()));
    out.push((format!("{prefix}.norm.gamma"), b.norm.gamma.view().into_dyn()));
    out.push((format!("{prefix}.norm.beta"), b.norm.beta.view().into_dyn()));
}

fn push_block_mut<'a, S: Scalar>(
    out: &mut Vec<(String, ArrayViewMutD<'a, S>)>,
    prefix: &str,
    b: &'a mut ConvBlockParams<S>,
) {
    out.push((
        format!("{prefix}.conv.weight"),
        b.conv.weight.view_mut().into_dyn(),
    ));
    out.push((format!("{prefix}.conv.bias"), b.conv.bias.view_mut().into_dyn()));
    out.push((
        format!("{prefix}.norm.gamma"),
        b.norm.gamma.view_mut().into_dyn(),
    ));
    out.push((format!("{prefix}.norm.beta"), b.norm.beta.view_mut().into_dyn()));
}

impl<S: Scalar> ParameterSet<S> {
    /// Named views over every tensor, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, S>)> {
        let mut out = Vec::new();
        for (i, st) in self.encoder.iter().enumerate() {
            push_block(&mut out, &format!("encoder.stage{i}.block1"), &st.block1);
            push_block(&mut out, &format!("encoder.stage{i}.block2"), &st.block2);
        }
        push_block(&mut out, "bottleneck.block1", &self.bottleneck.block1);
        push_block(&mut out, "bottleneck.block2", &self.bottleneck.block2);
        if let Some(fc) = &self.classifier {
            out.push(("classifier.fc.weight".into(), fc.weight.view().into_dyn()));
            out.push(("classifier.fc.bias".into(), fc.bias.view().into_dyn()));
        }
        if let Some(br) = &self.bridge {
            out.push(("bridge.proj.weight".into(), br.weight.view().into_dyn()));
            out.push(("bridge.proj.bias".into(), br.bias.view().into_dyn()));
        }
        if let Some(dec) = &self.decoder {
            for (i, st) in dec.stages.iter().enumerate() {
                push_block(&mut out, &format!("decoder.stage{i}.block1"), &st.block1);
                push_block(&mut out, &format!("decoder.stage{i}.block2"), &st.block2);
            }
            out.push(("decoder.head.weight".into(), dec.head.weight.view().into_dyn()));
            out.push(("decoder.head.bias".into(), dec.head.bias.view().into_dyn()));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, S>)> {
        let mut out = Vec::new();
        for (i, st) in self.encoder.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("encoder.stage{i}.block1"), &mut st.block1);
            push_block_mut(&mut out, &format!("encoder.stage{i}.block2"), &mut st.block2);
        }
        push_block_mut(&mut out, "bottleneck.block1", &mut self.bottleneck.block1);
        push_block_mut(&mut out, "bottleneck.block2", &mut self.bottleneck.block2);
        if let Some(fc) = &mut self.classifier {
            out.push(("classifier.fc.weight".into(), fc.weight.view_mut().into_dyn()));
            out.push(("classifier.fc.bias".into(), fc.bias.view_mut().into_dyn()));
        }
        if let Some(br) = &mut self.bridge {
            out.push(("bridge.proj.weight".into(), br.weight.view_mut().into_dyn()));
            out.push(("bridge.proj.bias".into(), br.bias.view_mut().into_dyn()));
        }
        if let Some(dec) = &mut self.decoder {
            for (i, st) in dec.stages.iter_mut().enumerate() {
                push_block_mut(&mut out, &format!("decoder.stage{i}.block1"), &mut st.block1);
                push_block_mut(&mut out, &format!("decoder.stage{i}.block2"), &mut st.block2);
            }
            out.push(("decoder.head.weight".into(), dec.head.weight.view_mut().into_dyn()));
            out.push(("decoder.head.bias".into(), dec.head.bias.view_mut().into_dyn()));
        }
        out
    }

    /// Same tree with every tensor zeroed; gradient/moment container.
    pub fn zeroed(&self) -> Self {
        let mut c = self.clone();
        for (_, mut t) in c.named_tensors_mut() {
            t.fill(S::zero());
        }
        c
    }

    /// SHA-256 over names, shapes, and little-endian element bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.len() * S::BYTES);
            for &v in t.iter() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex_string(&hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn init_conv<S: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> ConvParams<S> {
    let fan_in = (c_in * k * k) as f64;
    let limit = (6.0 / fan_in).sqrt();
    let weight = Array4::from_shape_fn((c_out, c_in, k, k), |_| {
        S::of_f64(rng.random_range(-limit..limit))
    });
    ConvParams {
        weight,
        bias: Array1::zeros(c_out),
    }
}

fn init_block<S: Scalar>(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> ConvBlockParams<S> {
    ConvBlockParams {
        conv: init_conv(rng, c_out, c_in, 3),
        norm: NormParams {
            gamma: Array1::ones(c_out),
            beta: Array1::zeros(c_out),
        },
    }
}

fn init_stage<S: Scalar>(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> StageParams<S> {
    StageParams {
        block1: init_block(rng, c_in, c_out),
        block2: init_block(rng, c_out, c_out),
    }
}

/// Deterministic parameter initialization: fan-in-scaled uniform weights
/// drawn from a ChaCha stream keyed by `seed`, zero biases, unit norm scale.
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<S>> {
    config.validate()?;
    let mut rng = crate::rng::stream(seed, "model.init", &[]);
    let mut encoder = Vec::with_capacity(config.depth);
    let mut c_in = config.input_channels;
    for i in 0..config.depth {
        let c_out = config.stage_channels(i);
        encoder.push(init_stage(&mut rng, c_in, c_out));
        c_in = c_out;
    }
    let cb = config.bottleneck_channels();
    let bottleneck = init_stage(&mut rng, c_in, cb);
    let classifier = config.classifier_enabled.then(|| {
        let fan_in = cb as f64;
        let limit = (6.0 / fan_in).sqrt();
        LinearParams {
            weight: Array2::from_shape_fn((config.num_classes, cb), |_| {
                S::of_f64(rng.random_range(-limit..limit))
            }),
            bias: Array1::zeros(config.num_classes),
        }
    });
    let bridge = config
        .bridge_enabled
        .then(|| init_conv(&mut rng, cb, config.input_channels + 1, 1));
    let decoder = config.decoder_enabled.then(|| {
        let mut stages = Vec::with_capacity(config.depth);
        for i in (0..config.depth).rev() {
            let skip_ch = config.stage_channels(i);
            let in_ch = config.stage_channels(i + 1) + skip_ch;
            stages.push(init_stage(&mut rng, in_ch, skip_ch));
        }
        DecoderParams {
            stages,
            head: init_conv(&mut rng, 1, config.base_channels, 1),
        }
    });
    Ok(ParameterSet {
        config: config.clone(),
        encoder,
        bottleneck,
        classifier,
        bridge,
        decoder,
    })
}

/// Forward mode: inference is deterministic; training draws dropout masks
/// from the step's RNG stream.
pub enum Mode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

pub(crate) struct BlockCache<S: Scalar> {
    x: Array4<S>,
    norm: nn::NormCache<S>,
    /// Combined leaky-ReLU slope factor and (inverted) dropout mask.
    act_factor: Array4<S>,
}

fn conv_block_forward<S: Scalar>(
    p: &ConvBlockParams<S>,
    x: Array4<S>,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> (Array4<S>, BlockCache<S>) {
    let pad = p.conv.weight.dim().3 / 2;
    let pre = nn::conv2d(&x, &p.conv.weight, &p.conv.bias, pad);
    let (normed, norm) = nn::instance_norm(
        &pre,
        &p.norm.gamma,
        &p.norm.beta,
        S::of_f64(INSTANCE_NORM_EPS),
    );
    let slope = S::of_f64(config.lrelu_slope);
    let mut act_factor = normed.mapv(|v| if v > S::zero() { S::one() } else { slope });
    if let Mode::Train(rng) = mode {
        let rate = config.dropout_rate;
        if rate > 0.0 {
            let keep_scale = S::of_f64(1.0 / (1.0 - rate));
            act_factor.mapv_inplace(|f| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    f * keep_scale
                }
            });
        }
    }
    let y = &normed * &act_factor;
    (
        y,
        BlockCache {
            x,
            norm,
            act_factor,
        },
    )
}

fn accumulate_conv<S: Scalar>(g: &mut ConvParams<S>, d: nn::ConvGrads<S>) {
    g.weight.zip_mut_with(&d.weight, |a, &b| *a += b);
    g.bias.zip_mut_with(&d.bias, |a, &b| *a += b);
}

fn conv_block_backward<S: Scalar>(
    p: &ConvBlockParams<S>,
    grads: Option<&mut ConvBlockParams<S>>,
    cache: &BlockCache<S>,
    dy: &Array4<S>,
    need_input_grad: bool,
) -> Option<Array4<S>> {
    let d_norm_out = dy * &cache.act_factor;
    let (d_pre, norm_grads) = nn::instance_norm_backward(&d_norm_out, &p.norm.gamma, &cache.norm);
    let pad = p.conv.weight.dim().3 / 2;
    let need_params = grads.is_some();
    let (conv_grads, dx) = nn::conv2d_backward(
        &cache.x,
        &p.conv.weight,
        &d_pre,
        pad,
        need_params,
        need_input_grad,
    );
    if let Some(g) = grads {
        g.norm.gamma.zip_mut_with(&norm_grads.gamma, |a, &b| *a += b);
        g.norm.beta.zip_mut_with(&norm_grads.beta, |a, &b| *a += b);
        accumulate_conv(&mut g.conv, conv_grads.expect("param grads requested"));
    }
    dx
}

pub(crate) struct StageCache<S: Scalar> {
    b1: BlockCache<S>,
    b2: BlockCache<S>,
    pool_idx: Array4<u8>,
}

pub(crate) struct EncoderCaches<S: Scalar> {
    stages: Vec<StageCache<S>>,
    bott1: BlockCache<S>,
    bott2: BlockCache<S>,
}

fn check_image_shape<S: Scalar>(config: &ModelConfig, images: &Array4<S>) -> Result<()> {
    let (_, c, h, w) = images.dim();
    if c != config.input_channels || h != config.input_height || w != config.input_width {
        return Err(Error::input(format!(
            "image batch shape (.,{c},{h},{w}) does not match configured (.,{},{},{})",
            config.input_channels, config.input_height, config.input_width
        )));
    }
    Ok(())
}

pub(crate) fn encoder_forward<S: Scalar>(
    params: &ParameterSet<S>,
    images: &Array4<S>,
    mode: &mut Mode<'_>,
) -> Result<(Vec<Array4<S>>, Array4<S>, EncoderCaches<S>)> {
    check_image_shape(&params.config, images)?;
    let mut skips = Vec::with_capacity(params.config.depth);
    let mut stages = Vec::with_capacity(params.config.depth);
    let mut x = images.clone();
    for st in &params.encoder {
        let (y1, b1) = conv_block_forward(&st.block1, x, &params.config, mode);
        let (y2, b2) = conv_block_forward(&st.block2, y1, &params.config, mode);
        let (pooled, pool_idx) = nn::maxpool2(&y2);
        skips.push(y2);
        stages.push(StageCache { b1, b2, pool_idx });
        x = pooled;
    }
    let (y1, bott1) = conv_block_forward(&params.bottleneck.block1, x, &params.config, mode);
    let (bott, bott2) = conv_block_forward(&params.bottleneck.block2, y1, &params.config, mode);
    Ok((
        skips,
        bott,
        EncoderCaches {
            stages,
            bott1,
            bott2,
        },
    ))
}

/// Backward through bottleneck and encoder stages. `dskips[i]` is the
/// gradient arriving at stage i's skip output (from the decoder), if any.
pub(crate) fn encoder_backward<S: Scalar>(
    params: &ParameterSet<S>,
    mut grads: Option<&mut ParameterSet<S>>,
    caches: &EncoderCaches<S>,
    dskips: Vec<Option<Array4<S>>>,
    dbottleneck: &Array4<S>,
    need_input_grad: bool,
) -> Option<Array4<S>> {
    let gb2 = grads.as_deref_mut().map(|g| &mut g.bottleneck.block2);
    let d = conv_block_backward(&params.bottleneck.block2, gb2, &caches.bott2, dbottleneck, true)
        .expect("input grad requested");
    let gb1 = grads.as_deref_mut().map(|g| &mut g.bottleneck.block1);
    let mut d = conv_block_backward(&params.bottleneck.block1, gb1, &caches.bott1, &d, true)
        .expect("input grad requested");
    let mut dskips = dskips;
    for i in (0..params.encoder.len()).rev() {
        let cache = &caches.stages[i];
        let mut d_stage_out = nn::maxpool2_backward(&d, &cache.pool_idx);
        if let Some(ds) = dskips[i].take() {
            d_stage_out.zip_mut_with(&ds, |a, &b| *a += b);
        }
        let g2 = grads.as_deref_mut().map(|g| &mut g.encoder[i].block2);
        let d1 = conv_block_backward(&params.encoder[i].block2, g2, &cache.b2, &d_stage_out, true)
            .expect("input grad requested");
        let g1 = grads.as_deref_mut().map(|g| &mut g.encoder[i].block1);
        let want_dx = i > 0 || need_input_grad;
        match conv_block_backward(&params.encoder[i].block1, g1, &cache.b1, &d1, want_dx) {
            Some(dx) => d = dx,
            None => return None,
        }
    }
    Some(d)
}

pub(crate) struct ClsCache<S: Scalar> {
    feat: Array2<S>,
    pooled_hw: (usize, usize),
    used_pool: bool,
}

pub(crate) fn classifier_forward<S: Scalar>(
    fc: &LinearParams<S>,
    bottleneck: &Array4<S>,
) -> (Array2<S>, ClsCache<S>) {
    let (_, _, h, w) = bottleneck.dim();
    let used_pool = h >= 2 && w >= 2;
    let pooled = if used_pool {
        nn::avgpool(bottleneck, 2)
    } else {
        bottleneck.clone()
    };
    let (_, _, ph, pw) = pooled.dim();
    let feat = nn::global_avgpool(&pooled);
    let logits = nn::linear(&feat, &fc.weight, &fc.bias);
    (
        logits,
        ClsCache {
            feat,
            pooled_hw: (ph, pw),
            used_pool,
        },
    )
}

pub(crate) fn classifier_backward<S: Scalar>(
    fc: &LinearParams<S>,
    grads: Option<&mut LinearParams<S>>,
    cache: &ClsCache<S>,
    dlogits: &Array2<S>,
) -> Array4<S> {
    let (dfeat, fc_grads) = nn::linear_backward(&cache.feat, &fc.weight, dlogits, grads.is_some());
    if let Some(g) = grads {
        let fg = fc_grads.expect("param grads requested");
        g.weight.zip_mut_with(&fg.weight, |a, &b| *a += b);
        g.bias.zip_mut_with(&fg.bias, |a, &b| *a += b);
    }
    let d_pooled = nn::global_avgpool_backward(&dfeat, cache.pooled_hw.0, cache.pooled_hw.1);
    if cache.used_pool {
        nn::avgpool_backward(&d_pooled, 2)
    } else {
        d_pooled
    }
}

/// Per-sample batch of classification predictions, segmentation probability
/// maps, and saliency maps. Fields are absent when the model variant lacks
/// the corresponding branch.
#[derive(Debug, Clone)]
pub struct PredictionBundle<S: Scalar> {
    pub class_logits: Option<Array2<S>>,
    pub seg_probs: Option<Array3<S>>,
    pub saliency: Option<Array3<S>>,
}

/// Run the encoder in inference mode; returns per-stage skip features and
/// the bottleneck map.
pub fn encode<S: Scalar>(
    params: &ParameterSet<S>,
    images: &Array4<S>,
) -> Result<(Vec<Array4<S>>, Array4<S>)> {
    let (skips, bott, _) = encoder_forward(params, images, &mut Mode::Infer)?;
    Ok((skips, bott))
}

/// Classification branch over the bottleneck: 2x2 average pool, global
/// average pool, fully connected layer.
pub fn classify<S: Scalar>(params: &ParameterSet<S>, bottleneck: &Array4<S>) -> Result<Array2<S>> {
    let fc = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::unsupported("classify requires classifier_enabled"))?;
    let cb = params.config.bottleneck_channels();
    if bottleneck.dim().1 != cb {
        return Err(Error::input(format!(
            "bottleneck has {} channels, config expects {cb}",
            bottleneck.dim().1
        )));
    }
    Ok(classifier_forward(fc, bottleneck).0)
}

/// Gradient magnitude of the winning class logit with respect to the input
/// pixels, per-image max-normalized to [0,1]. Dropout is disabled and the
/// result carries no gradient (the bridge treats it as a constant input).
pub fn compute_saliency<S: Scalar>(
    params: &ParameterSet<S>,
    images: &Array4<S>,
) -> Result<Array3<S>> {
    let fc = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::unsupported("compute_saliency requires classifier_enabled"))?;
    let (_, bott, caches) = encoder_forward(params, images, &mut Mode::Infer)?;
    let (logits, cls_cache) = classifier_forward(fc, &bott);
    let (n, k) = logits.dim();
    let mut dlogits = Array2::<S>::zeros((n, k));
    for ni in 0..n {
        let row = logits.row(ni);
        let mut best = 0;
        for ci in 1..k {
            if row[ci] > row[best] {
                best = ci;
            }
        }
        dlogits[(ni, best)] = S::one();
    }
    let dbott = classifier_backward(fc, None, &cls_cache, &dlogits);
    let dskips = vec![None; params.config.depth];
    let dx = encoder_backward(params, None, &caches, dskips, &dbott, true)
        .expect("input grad requested");
    let (_, c, h, w) = dx.dim();
    let cinv = S::of_f64(1.0 / c as f64);
    let mut sal = Array3::<S>::zeros((n, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut acc = S::zero();
                for ci in 0..c {
                    acc += dx[(ni, ci, i, j)].abs();
                }
                sal[(ni, i, j)] = acc * cinv;
            }
        }
        let max = sal
            .slice(ndarray::s![ni, .., ..])
            .iter()
            .cloned()
            .fold(S::zero(), S::max);
        if max > S::zero() {
            sal.slice_mut(ndarray::s![ni, .., ..])
                .mapv_inplace(|v| v / max);
        }
    }
    Ok(sal)
}

pub(crate) struct BridgeCache<S: Scalar> {
    pooled: Array4<S>,
}

fn bridge_forward<S: Scalar>(
    proj: &ConvParams<S>,
    saliency: &Array3<S>,
    images: &Array4<S>,
    bottleneck: &Array4<S>,
    depth: usize,
) -> Result<(Array4<S>, BridgeCache<S>)> {
    let (n, h, w) = saliency.dim();
    if images.dim().0 != n || images.dim().2 != h || images.dim().3 != w {
        return Err(Error::input(
            "saliency and image batches must agree in count and spatial size",
        ));
    }
    let sal4 = saliency
        .view()
        .into_shape_with_order((n, 1, h, w))
        .expect("contiguous saliency")
        .to_owned();
    let cat = nn::concat_channels(&sal4, images);
    let factor = 1usize << depth;
    let pooled = nn::avgpool(&cat, factor);
    let (nb, _, bh, bw) = bottleneck.dim();
    if nb != n || (bh, bw) != (pooled.dim().2, pooled.dim().3) {
        return Err(Error::input(
            "bottleneck shape inconsistent with pooled saliency/image stack",
        ));
    }
    let proj_out = nn::conv2d(&pooled, &proj.weight, &proj.bias, 0);
    let injected = bottleneck + &proj_out;
    Ok((injected, BridgeCache { pooled }))
}

fn bridge_backward<S: Scalar>(
    proj: &ConvParams<S>,
    grads: Option<&mut ConvParams<S>>,
    cache: &BridgeCache<S>,
    dinjected: &Array4<S>,
) -> Array4<S> {
    if let Some(g) = grads {
        let (conv_grads, _) =
            nn::conv2d_backward(&cache.pooled, &proj.weight, dinjected, 0, true, false);
        accumulate_conv(g, conv_grads.expect("param grads requested"));
    }
    // the add is an identity path back to the bottleneck; saliency and image
    // receive no gradient (stop-gradient)
    dinjected.clone()
}

/// Concatenate saliency with the input image, average-pool down to the
/// bottleneck resolution, apply the learned 1x1 projection, and add the
/// result to the bottleneck.
pub fn bridge_inject<S: Scalar>(
    params: &ParameterSet<S>,
    saliency: &Array3<S>,
    images: &Array4<S>,
    bottleneck: &Array4<S>,
) -> Result<Array4<S>> {
    let proj = params
        .bridge
        .as_ref()
        .ok_or_else(|| Error::unsupported("bridge_inject requires bridge_enabled"))?;
    let (injected, _) = bridge_forward(proj, saliency, images, bottleneck, params.config.depth)?;
    Ok(injected)
}

pub(crate) struct DecStageCache<S: Scalar> {
    b1: BlockCache<S>,
    b2: BlockCache<S>,
    up_channels: usize,
}

pub(crate) struct DecoderCaches<S: Scalar> {
    stages: Vec<DecStageCache<S>>,
    head_in: Array4<S>,
    probs: Array3<S>,
}

pub(crate) fn decoder_forward<S: Scalar>(
    dec: &DecoderParams<S>,
    skips: &[Array4<S>],
    bottleneck: &Array4<S>,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<(Array3<S>, DecoderCaches<S>)> {
    if skips.len() != config.depth {
        return Err(Error::input(format!(
            "expected {} skip feature maps, got {}",
            config.depth,
            skips.len()
        )));
    }
    let mut x = bottleneck.clone();
    let mut stages = Vec::with_capacity(config.depth);
    for (stage_idx, skip_idx) in (0..config.depth).rev().enumerate() {
        let up = nn::upsample2(&x);
        let up_channels = up.dim().1;
        let cat = nn::concat_channels(&up, &skips[skip_idx]);
        let st = &dec.stages[stage_idx];
        let (y1, b1) = conv_block_forward(&st.block1, cat, config, mode);
        let (y2, b2) = conv_block_forward(&st.block2, y1, config, mode);
        stages.push(DecStageCache {
            b1,
            b2,
            up_channels,
        });
        x = y2;
    }
    let z = nn::conv2d(&x, &dec.head.weight, &dec.head.bias, 0);
    let (n, _, h, w) = z.dim();
    let probs3 = Array3::from_shape_fn((n, h, w), |(ni, i, j)| nn::sigmoid_scalar(z[(ni, 0, i, j)]));
    Ok((
        probs3.clone(),
        DecoderCaches {
            stages,
            head_in: x,
            probs: probs3,
        },
    ))
}

pub(crate) fn decoder_backward<S: Scalar>(
    dec: &DecoderParams<S>,
    mut grads: Option<&mut DecoderParams<S>>,
    caches: &DecoderCaches<S>,
    dprobs: &Array3<S>,
    depth: usize,
) -> (Vec<Option<Array4<S>>>, Array4<S>) {
    let (n, h, w) = dprobs.dim();
    let mut dz = Array4::<S>::zeros((n, 1, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = caches.probs[(ni, i, j)];
                dz[(ni, 0, i, j)] = dprobs[(ni, i, j)] * p * (S::one() - p);
            }
        }
    }
    let need_params = grads.is_some();
    let (head_grads, dx) =
        nn::conv2d_backward(&caches.head_in, &dec.head.weight, &dz, 0, need_params, true);
    if let Some(g) = grads.as_deref_mut() {
        accumulate_conv(&mut g.head, head_grads.expect("param grads requested"));
    }
    let mut d = dx.expect("input grad requested");
    let mut dskips: Vec<Option<Array4<S>>> = (0..depth).map(|_| None).collect();
    for (stage_idx, skip_idx) in (0..depth).rev().enumerate().collect::<Vec<_>>().into_iter().rev()
    {
        let st = &dec.stages[stage_idx];
        let cache = &caches.stages[stage_idx];
        let g2 = grads.as_deref_mut().map(|g| &mut g.stages[stage_idx].block2);
        let d1 = conv_block_backward(&st.block2, g2, &cache.b2, &d, true)
            .expect("input grad requested");
        let g1 = grads.as_deref_mut().map(|g| &mut g.stages[stage_idx].block1);
        let dcat = conv_block_backward(&st.block1, g1, &cache.b1, &d1, true)
            .expect("input grad requested");
        let (dup, dskip) = nn::split_channels(&dcat, cache.up_channels);
        dskips[skip_idx] = Some(dskip);
        d = nn::upsample2_backward(&dup);
    }
    (dskips, d)
}

/// Decode segmentation probabilities from skip features and the (optionally
/// bridge-injected) bottleneck. Inference mode.
pub fn decode<S: Scalar>(
    params: &ParameterSet<S>,
    skips: &[Array4<S>],
    bottleneck: &Array4<S>,
) -> Result<Array3<S>> {
    let dec = params
        .decoder
        .as_ref()
        .ok_or_else(|| Error::unsupported("decode requires decoder_enabled"))?;
    let (probs, _) = decoder_forward(dec, skips, bottleneck, &params.config, &mut Mode::Infer)?;
    Ok(probs)
}

/// Full multitask forward: encode, classify, saliency, bridge, decode.
/// Inference mode is deterministic; train mode draws dropout from `mode`.
pub fn forward_multitask<S: Scalar>(
    params: &ParameterSet<S>,
    images: &Array4<S>,
    mode: &mut Mode<'_>,
) -> Result<PredictionBundle<S>> {
    let (skips, bott, _) = encoder_forward(params, images, mode)?;
    let mut bundle = PredictionBundle {
        class_logits: None,
        seg_probs: None,
        saliency: None,
    };
    if let Some(fc) = &params.classifier {
        bundle.class_logits = Some(classifier_forward(fc, &bott).0);
        bundle.saliency = Some(compute_saliency(params, images)?);
    }
    if let Some(dec) = &params.decoder {
        let injected = match (&params.bridge, &bundle.saliency) {
            (Some(proj), Some(sal)) => {
                bridge_forward(proj, sal, images, &bott, params.config.depth)?.0
            }
            _ => bott,
        };
        let (probs, _) = decoder_forward(dec, &skips, &injected, &params.config, mode)?;
        bundle.seg_probs = Some(probs);
    }
    Ok(bundle)
}

/// Cached classification-path forward for training.
pub(crate) struct ClsPass<S: Scalar> {
    enc: EncoderCaches<S>,
    cls: ClsCache<S>,
    pub logits: Array2<S>,
}

pub(crate) fn cls_forward_train<S: Scalar>(
    params: &ParameterSet<S>,
    images: &Array4<S>,
    mode: &mut Mode<'_>,
) -> Result<ClsPass<S>> {
    let fc = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::unsupported("classification pass requires classifier_enabled"))?;
    let (_, bott, enc) = encoder_forward(params, images, mode)?;
    let (logits, cls) = classifier_forward(fc, &bott);
    Ok(ClsPass { enc, cls, logits })
}

pub(crate) fn cls_backward_train<S: Scalar>(
    params: &ParameterSet<S>,
    grads: &mut ParameterSet<S>,
    pass: &ClsPass<S>,
    dlogits: &Array2<S>,
) {
    let fc = params.classifier.as_ref().expect("classifier present");
    let dbott = classifier_backward(fc, grads.classifier.as_mut(), &pass.cls, dlogits);
    let dskips = vec![None; params.config.depth];
    encoder_backward(params, Some(grads), &pass.enc, dskips, &dbott, false);
}

/// Cached segmentation-path forward for training. Saliency is recomputed in
/// inference mode (no dropout) and enters the bridge as a constant.
pub(crate) struct SegPass<S: Scalar> {
    enc: EncoderCaches<S>,
    bridge: Option<BridgeCache<S>>,
    dec: DecoderCaches<S>,
    pub seg_probs: Array3<S>,
    pub saliency: Option<Array3<S>>,
}

pub(crate) fn seg_forward_train<S: Scalar>(
    params: &ParameterSet<S>,
    images: &Array4<S>,
    mode: &mut Mode<'_>,
    saliency_override: Option<Array3<S>>,
) -> Result<SegPass<S>> {
    let dec = params
        .decoder
        .as_ref()
        .ok_or_else(|| Error::unsupported("segmentation pass requires decoder_enabled"))?;
    let (skips, bott, enc) = encoder_forward(params, images, mode)?;
    let (injected, bridge_cache, saliency) = match &params.bridge {
        Some(proj) => {
            let sal = match saliency_override {
                Some(s) => s,
                None => compute_saliency(params, images)?,
            };
            let (injected, cache) = bridge_forward(proj, &sal, images, &bott, params.config.depth)?;
            (injected, Some(cache), Some(sal))
        }
        None => (bott, None, None),
    };
    let (seg_probs, dec_caches) = decoder_forward(dec, &skips, &injected, &params.config, mode)?;
    Ok(SegPass {
        enc,
        bridge: bridge_cache,
        dec: dec_caches,
        seg_probs,
        saliency,
    })
}

pub(crate) fn seg_backward_train<S: Scalar>(
    params: &ParameterSet<S>,
    grads: &mut ParameterSet<S>,
    pass: &SegPass<S>,
    dprobs: &Array3<S>,
) {
    let dec = params.decoder.as_ref().expect("decoder present");
    let (dskips, dinjected) = decoder_backward(
        dec,
        grads.decoder.as_mut(),
        &pass.dec,
        dprobs,
        params.config.depth,
    );
    let dbott = match (&params.bridge, &pass.bridge) {
        (Some(proj), Some(cache)) => bridge_backward(proj, grads.bridge.as_mut(), cache, &dinjected),
        _ => dinjected,
    };
    encoder_backward(params, Some(grads), &pass.enc, dskips, &dbott, false);
}
