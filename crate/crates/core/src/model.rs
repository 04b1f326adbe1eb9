//! End-to-end classifier: convolutional backbone → region-affinity attention
//! → flatten → two-layer head.

use rand::Rng;

use crate::error::{RaaError, Result};
use crate::par;
use crate::raa::{self, kaiming_uniform, Fnv, Mode, RaaConfig, RaaForwardCache, RaaGrads, RaaParams};
use crate::tensor::{gemm, gemm_nt, gemm_tn, NamedTensorSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
    /// Square kernel side; padding is `kernel / 2`.
    pub kernel: usize,
}

impl ConvStage {
    pub fn new(out_channels: usize, stride: usize) -> Self {
        ConvStage {
            out_channels,
            stride,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stages: Vec<ConvStage>,
    pub target_grid: usize,
}

impl BackboneConfig {
    /// Spatial size after each stage, starting with the input.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size];
        let mut s = self.input_size;
        for st in &self.stages {
            let pad = st.kernel / 2;
            s = (s + 2 * pad).saturating_sub(st.kernel) / st.stride.max(1) + 1;
            sizes.push(s);
        }
        sizes
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.iter().any(|s| s.out_channels == 0 || s.stride == 0 || s.kernel % 2 == 0) {
            return Err(RaaError::Config("backbone channels/strides must be >= 1 and kernels odd".into()));
        }
        let stride_product: usize = self.stages.iter().map(|s| s.stride).product();
        if stride_product * self.target_grid != self.input_size || *self.sizes().last().unwrap() != self.target_grid {
            return Err(RaaError::Config(format!(
                "backbone maps {} to {:?}, expected grid {}",
                self.input_size,
                self.sizes().last(),
                self.target_grid
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub raa: RaaConfig,
    pub head_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    /// 64×64×3 → (16,s2)(32,s2)(32,s2) → 8×8×32 → attention (d'=32) → head 512 → 2.
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                input_size: 64,
                stages: vec![ConvStage::new(16, 2), ConvStage::new(32, 2), ConvStage::new(32, 2)],
                target_grid: 8,
            },
            raa: RaaConfig::new(32, 32),
            head_hidden: 512,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for finite-difference checks:
    /// 16×16×3 input, 4×4×6 grid, d'=8, MLP hidden 4, head hidden 10.
    pub fn tiny() -> Self {
        let mut raa = RaaConfig::new(6, 8);
        raa.mlp_hidden = 4;
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                input_size: 16,
                stages: vec![ConvStage::new(4, 2), ConvStage::new(6, 2)],
                target_grid: 4,
            },
            raa,
            head_hidden: 10,
            n_classes: 2,
        }
    }

    pub fn grid(&self) -> usize {
        self.backbone.target_grid
    }

    pub fn feature_len(&self) -> usize {
        self.grid() * self.grid() * self.raa.d_proj
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.raa.validate()?;
        if self.raa.d_in != self.backbone.out_channels() {
            return Err(RaaError::Config(format!(
                "attention d_in {} != backbone channels {}",
                self.raa.d_in,
                self.backbone.out_channels()
            )));
        }
        if self.head_hidden == 0 || self.n_classes < 2 {
            return Err(RaaError::Config("head_hidden >= 1 and n_classes >= 2 required".into()));
        }
        Ok(())
    }

    /// 52-bit architecture fingerprint; exactly representable as an `f64`.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(format!("{self:?}").as_bytes());
        h.finish() & ((1 << 52) - 1)
    }
}

/// One convolution: weights `[k, k, c_in, c_out]`, bias `[c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_h1: Tensor,
    pub b_h1: Tensor,
    pub w_h2: Tensor,
    pub b_h2: Tensor,
}

impl HeadParams {
    fn zeros_like(&self) -> HeadParams {
        HeadParams {
            w_h1: Tensor::zeros(self.w_h1.shape()),
            b_h1: Tensor::zeros(self.b_h1.shape()),
            w_h2: Tensor::zeros(self.w_h2.shape()),
            b_h2: Tensor::zeros(self.b_h2.shape()),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w_h1", &self.w_h1), ("b_h1", &self.b_h1), ("w_h2", &self.w_h2), ("b_h2", &self.b_h2)]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_h1", &mut self.w_h1),
            ("b_h1", &mut self.b_h1),
            ("w_h2", &mut self.w_h2),
            ("b_h2", &mut self.b_h2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<ConvParams>,
    pub raa: RaaParams,
    pub head: HeadParams,
}

/// Gradients for every learnable entry of [`ModelParams`], same naming.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub backbone: Vec<ConvParams>,
    pub raa: RaaGrads,
    pub head: HeadParams,
}

fn conv_names(i: usize) -> (String, String) {
    (format!("backbone.conv{i}.w"), format!("backbone.conv{i}.b"))
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.backbone.in_channels;
        let mut backbone = Vec::new();
        for st in &config.backbone.stages {
            let fan_in = st.kernel * st.kernel * c_in;
            backbone.push(ConvParams {
                w: kaiming_uniform(&[st.kernel, st.kernel, c_in, st.out_channels], fan_in, rng),
                b: Tensor::zeros(&[st.out_channels]),
            });
            c_in = st.out_channels;
        }
        let raa = RaaParams::init(&config.raa, rng)?;
        let f = config.feature_len();
        let head = HeadParams {
            w_h1: kaiming_uniform(&[f, config.head_hidden], f, rng),
            b_h1: Tensor::zeros(&[config.head_hidden]),
            w_h2: kaiming_uniform(&[config.head_hidden, config.n_classes], config.head_hidden, rng),
            b_h2: Tensor::zeros(&[config.n_classes]),
        };
        Ok(ModelParams { backbone, raa, head })
    }

    /// Every learnable tensor with its checkpoint name, in a fixed order.
    pub fn learnable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            let (wn, bn) = conv_names(i);
            out.push((wn, &c.w));
            out.push((bn, &c.b));
        }
        for (n, t) in self.raa.learnable() {
            out.push((format!("raa.{n}"), t));
        }
        for (n, t) in self.head.tensors() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter_mut().enumerate() {
            let (wn, bn) = conv_names(i);
            out.push((wn, &mut c.w));
            out.push((bn, &mut c.b));
        }
        for (n, t) in self.raa.learnable_mut() {
            out.push((format!("raa.{n}"), t));
        }
        for (n, t) in self.head.tensors_mut() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Checkpoint layout: `backbone.*`, `raa.*` (including running stats),
    /// `head.*`, and `meta.config_hash`.
    pub fn to_named_set(&self, config: &ModelConfig) -> NamedTensorSet {
        let mut set = NamedTensorSet::new();
        for (i, c) in self.backbone.iter().enumerate() {
            let (wn, bn) = conv_names(i);
            set.insert(wn, c.w.clone()).expect("unique");
            set.insert(bn, c.b.clone()).expect("unique");
        }
        set.extend_prefixed("raa.", self.raa.to_named_set()).expect("unique");
        for (n, t) in self.head.tensors() {
            set.insert(format!("head.{n}"), t.clone()).expect("unique");
        }
        set.insert("meta.config_hash", Tensor::scalar(config.fingerprint() as f64))
            .expect("unique");
        set
    }

    pub fn from_named_set(set: &NamedTensorSet, config: &ModelConfig) -> Result<Self> {
        let hash = set.require("meta.config_hash")?.data()[0];
        if hash != config.fingerprint() as f64 {
            return Err(RaaError::State("checkpoint/config mismatch".into()));
        }
        let mut backbone = Vec::new();
        for i in 0..config.backbone.stages.len() {
            let (wn, bn) = conv_names(i);
            backbone.push(ConvParams {
                w: set.require(&wn)?.clone(),
                b: set.require(&bn)?.clone(),
            });
        }
        let raa = RaaParams::from_named_set(set, "raa.", &config.raa)?;
        let head = HeadParams {
            w_h1: set.require("head.w_h1")?.clone(),
            b_h1: set.require("head.b_h1")?.clone(),
            w_h2: set.require("head.w_h2")?.clone(),
            b_h2: set.require("head.b_h2")?.clone(),
        };
        let p = ModelParams { backbone, raa, head };
        p.check(config)?;
        Ok(p)
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if self.backbone.len() != config.backbone.stages.len() {
            return Err(RaaError::dim("ModelParams", "backbone stage count"));
        }
        let mut c_in = config.backbone.in_channels;
        for (p, st) in self.backbone.iter().zip(&config.backbone.stages) {
            if p.w.shape() != [st.kernel, st.kernel, c_in, st.out_channels] || p.b.shape() != [st.out_channels] {
                return Err(RaaError::dim("ModelParams", format!("conv weight {:?}", p.w.shape())));
            }
            c_in = st.out_channels;
        }
        self.raa.check(&config.raa)?;
        let (f, dh, c) = (config.feature_len(), config.head_hidden, config.n_classes);
        if self.head.w_h1.shape() != [f, dh]
            || self.head.b_h1.shape() != [dh]
            || self.head.w_h2.shape() != [dh, c]
            || self.head.b_h2.shape() != [c]
        {
            return Err(RaaError::dim("ModelParams", "head shapes disagree with config"));
        }
        Ok(())
    }
}

impl ModelGrads {
    pub fn learnable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            let (wn, bn) = conv_names(i);
            out.push((wn, &c.w));
            out.push((bn, &c.b));
        }
        for (n, t) in self.raa.learnable() {
            out.push((format!("raa.{n}"), t));
        }
        for (n, t) in self.head.tensors() {
            out.push((format!("head.{n}"), t));
        }
        out
    }
}

struct ConvCache {
    cols: Vec<f64>,
    out: Vec<f64>,
}

/// Per-sample activations of the backbone.
pub struct BackboneCache {
    stages: Vec<ConvCache>,
}

fn im2col(input: &[f64], size: usize, c: usize, st: &ConvStage, out_size: usize) -> Vec<f64> {
    let k = st.kernel;
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    let mut cols = vec![0.0; out_size * out_size * row_len];
    for oy in 0..out_size {
        for ox in 0..out_size {
            let row = &mut cols[(oy * out_size + ox) * row_len..][..row_len];
            for ky in 0..k {
                let iy = (oy * st.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= size as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * st.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= size as isize {
                        continue;
                    }
                    let src = (iy as usize * size + ix as usize) * c;
                    row[(ky * k + kx) * c..][..c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(g_cols: &[f64], size: usize, c: usize, st: &ConvStage, out_size: usize) -> Vec<f64> {
    let k = st.kernel;
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    let mut g = vec![0.0; size * size * c];
    for oy in 0..out_size {
        for ox in 0..out_size {
            let row = &g_cols[(oy * out_size + ox) * row_len..][..row_len];
            for ky in 0..k {
                let iy = (oy * st.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= size as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * st.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= size as isize {
                        continue;
                    }
                    let dst = (iy as usize * size + ix as usize) * c;
                    for (d, &v) in g[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *d += v;
                    }
                }
            }
        }
    }
    g
}

fn backbone_sample(x: &[f64], params: &[ConvParams], config: &BackboneConfig) -> BackboneCache {
    let sizes = config.sizes();
    let mut c_in = config.in_channels;
    let mut stages = Vec::with_capacity(params.len());
    for (s, (st, p)) in config.stages.iter().zip(params).enumerate() {
        let input: &[f64] = if s == 0 { x } else { &stages.last().map(|c: &ConvCache| c.out.as_slice()).unwrap() };
        let (size, out_size) = (sizes[s], sizes[s + 1]);
        let cols = im2col(input, size, c_in, st, out_size);
        let pixels = out_size * out_size;
        let mut out = vec![0.0; pixels * st.out_channels];
        for row in out.chunks_exact_mut(st.out_channels) {
            row.copy_from_slice(p.b.data());
        }
        gemm(&cols, p.w.data(), &mut out, pixels, st.kernel * st.kernel * c_in, st.out_channels);
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        stages.push(ConvCache { cols, out });
        c_in = st.out_channels;
    }
    BackboneCache { stages }
}

fn split_batch(x: &Tensor, size: usize, c: usize, op: &'static str) -> Result<usize> {
    match *x.shape() {
        [h, w, ch] if h == size && w == size && ch == c => Ok(1),
        [n, h, w, ch] if h == size && w == size && ch == c => Ok(n),
        _ => Err(RaaError::dim(
            op,
            format!("expected [n,] {size}x{size}x{c} input, got {:?}", x.shape()),
        )),
    }
}

/// Stand-in feature extractor: stacked strided convolutions with ReLU.
/// Accepts `[H,W,C]` or `[N,H,W,C]`; returns the matching `[.., h, w, d]`.
pub fn backbone_forward(x: &Tensor, params: &[ConvParams], config: &BackboneConfig) -> Result<Tensor> {
    Ok(backbone_with_cache(x, params, config)?.0)
}

fn backbone_with_cache(x: &Tensor, params: &[ConvParams], config: &BackboneConfig) -> Result<(Tensor, Vec<BackboneCache>)> {
    config.validate()?;
    let n = split_batch(x, config.input_size, config.in_channels, "backbone_forward")?;
    let per = config.input_size * config.input_size * config.in_channels;
    let caches = par::map_indexed(n, |s| backbone_sample(&x.data()[s * per..(s + 1) * per], params, config));
    let g = config.target_grid;
    let d = config.out_channels();
    let mut data = Vec::with_capacity(n * g * g * d);
    for c in &caches {
        match c.stages.last() {
            Some(last) => data.extend_from_slice(&last.out),
            None => data.extend_from_slice(x.data()),
        }
    }
    let shape = if x.rank() == 3 { vec![g, g, d] } else { vec![n, g, g, d] };
    Ok((Tensor::new(shape, data)?, caches))
}

/// Raw logits `W₂ᵀ·ReLU(W₁ᵀ·v + b₁) + b₂` for each row `v` of `[N×F]` features.
pub fn head_forward(features: &Tensor, params: &HeadParams) -> Result<Tensor> {
    Ok(head_with_hidden(features, params)?.0)
}

fn head_with_hidden(features: &Tensor, params: &HeadParams) -> Result<(Tensor, Vec<f64>)> {
    let (f, dh) = (params.w_h1.shape()[0], params.w_h1.shape()[1]);
    let c = params.w_h2.shape()[1];
    let n = match *features.shape() {
        [len] if len == f => 1,
        [n, len] if len == f => n,
        [h, w, d] if h * w * d == f => 1,
        _ => {
            return Err(RaaError::dim(
                "head_forward",
                format!("features {:?} do not flatten to {f}", features.shape()),
            ))
        }
    };
    let mut hidden = vec![0.0; n * dh];
    par::for_each_chunk_mut(&mut hidden, dh, |r, row| {
        row.copy_from_slice(params.b_h1.data());
        gemm(&features.data()[r * f..(r + 1) * f], params.w_h1.data(), row, 1, f, dh);
        row.iter_mut().for_each(|v| *v = v.max(0.0));
    });
    let mut logits = vec![0.0; n * c];
    for row in logits.chunks_exact_mut(c) {
        row.copy_from_slice(params.b_h2.data());
    }
    gemm(&hidden, params.w_h2.data(), &mut logits, n, dh, c);
    Ok((Tensor::new(vec![n, c], logits)?, hidden))
}

/// Argmax with ties broken toward the lower index.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(RaaError::Eval("empty logits".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(RaaError::Eval("NaN logit".into()));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

pub struct ModelOutput {
    /// `[N × n_classes]` raw logits.
    pub logits: Tensor,
    /// `[N × h·w·d']`, the flattened attention output per sample.
    pub features: Tensor,
}

pub struct ModelCache {
    batch: usize,
    backbone: Vec<BackboneCache>,
    pub raa: RaaForwardCache,
    features: Tensor,
    hidden: Vec<f64>,
}

impl ModelCache {
    /// Smallest distance of any ReLU or `|·|` argument on the forward path
    /// to its kink. Self pairs are skipped for `|·|` since their difference
    /// is identically zero.
    pub fn kink_margin(&self, params: &ModelParams, config: &ModelConfig) -> f64 {
        let mut m = f64::INFINITY;
        let mut c_in = config.backbone.in_channels;
        for (s, st) in config.backbone.stages.iter().enumerate() {
            let row_len = st.kernel * st.kernel * c_in;
            for bc in &self.backbone {
                let cols = &bc.stages[s].cols;
                let pixels = cols.len() / row_len;
                let mut pre = vec![0.0; pixels * st.out_channels];
                for row in pre.chunks_exact_mut(st.out_channels) {
                    row.copy_from_slice(params.backbone[s].b.data());
                }
                gemm(cols, params.backbone[s].w.data(), &mut pre, pixels, row_len, st.out_channels);
                m = pre.iter().fold(m, |m, v| m.min(v.abs()));
            }
            c_in = st.out_channels;
        }
        m = m.min(self.raa.kink_margin());
        let (f, dh) = (config.feature_len(), config.head_hidden);
        for s in 0..self.batch {
            let mut pre = params.head.b_h1.data().to_vec();
            gemm(&self.features.data()[s * f..(s + 1) * f], params.head.w_h1.data(), &mut pre, 1, f, dh);
            m = pre.iter().fold(m, |m, v| m.min(v.abs()));
        }
        m
    }
}

pub fn model_forward(x: &Tensor, params: &ModelParams, config: &ModelConfig, mode: Mode) -> Result<(ModelOutput, ModelCache)> {
    params.check(config)?;
    let (fmap, backbone) = backbone_with_cache(x, &params.backbone, &config.backbone)?;
    let fmap = if fmap.rank() == 3 {
        let s = fmap.shape().to_vec();
        fmap.reshape(&[1, s[0], s[1], s[2]])?
    } else {
        fmap
    };
    let n = fmap.shape()[0];
    let (fe, raa_cache) = raa::raa_forward(&fmap, &params.raa, &config.raa, mode)?;
    let features = fe.reshape(&[n, config.feature_len()])?;
    let (logits, hidden) = head_with_hidden(&features, &params.head)?;
    let cache = ModelCache {
        batch: n,
        backbone,
        raa: raa_cache,
        features: features.clone(),
        hidden,
    };
    Ok((ModelOutput { logits, features }, cache))
}

/// Gradients of a scalar loss given `∂L/∂logits` and optionally `∂L/∂features`.
/// Returns parameter gradients and `∂L/∂x` shaped `[N,H,W,C]`.
pub fn model_backward(
    grad_logits: &Tensor,
    grad_features: Option<&Tensor>,
    cache: &ModelCache,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(ModelGrads, Tensor)> {
    let n = cache.batch;
    let (f, dh, c) = (config.feature_len(), config.head_hidden, config.n_classes);
    if grad_logits.shape() != [n, c] {
        return Err(RaaError::State(format!("logit gradient {:?} vs batch {n}", grad_logits.shape())));
    }
    let mut head = params.head.zeros_like();
    // output layer
    gemm_tn(&cache.hidden, grad_logits.data(), head.w_h2.data_mut(), n, dh, c);
    for row in grad_logits.data().chunks_exact(c) {
        for (b, &g) in head.b_h2.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut g_hidden = vec![0.0; n * dh];
    gemm_nt(grad_logits.data(), params.head.w_h2.data(), &mut g_hidden, n, dh, c);
    for (g, &h) in g_hidden.iter_mut().zip(&cache.hidden) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    for row in g_hidden.chunks_exact(dh) {
        for (b, &g) in head.b_h1.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    // W₁ gradient, one output row per feature index
    let feats = cache.features.data();
    par::for_each_chunk_mut(head.w_h1.data_mut(), dh, |p, row| {
        for s in 0..n {
            let v = feats[s * f + p];
            if v == 0.0 {
                continue;
            }
            for (o, &g) in row.iter_mut().zip(&g_hidden[s * dh..(s + 1) * dh]) {
                *o += v * g;
            }
        }
    });
    let mut g_feat = vec![0.0; n * f];
    par::for_each_chunk_mut(&mut g_feat, f, |s, row| {
        gemm_nt(&g_hidden[s * dh..(s + 1) * dh], params.head.w_h1.data(), row, 1, f, dh);
    });
    if let Some(gf) = grad_features {
        if gf.shape() != [n, f] {
            return Err(RaaError::State(format!("feature gradient {:?} vs [{n}, {f}]", gf.shape())));
        }
        for (a, b) in g_feat.iter_mut().zip(gf.data()) {
            *a += b;
        }
    }

    let g = config.grid();
    let g_fe = Tensor::new(vec![n, g, g, config.raa.d_proj], g_feat)?;
    let (g_fmap, raa_grads) = raa::raa_backward(&g_fe, &cache.raa, &params.raa, &config.raa)?;

    let bb = &config.backbone;
    let sizes = bb.sizes();
    let per_map = g * g * bb.out_channels();
    let parts = par::map_indexed(n, |s| {
        backbone_sample_backward(&g_fmap.data()[s * per_map..(s + 1) * per_map], &cache.backbone[s], params, bb, &sizes)
    });
    let mut backbone: Vec<ConvParams> = params
        .backbone
        .iter()
        .map(|p| ConvParams {
            w: Tensor::zeros(p.w.shape()),
            b: Tensor::zeros(p.b.shape()),
        })
        .collect();
    let mut g_input = Vec::with_capacity(n * bb.input_size * bb.input_size * bb.in_channels);
    for (convs, gin) in parts {
        for (acc, part) in backbone.iter_mut().zip(convs) {
            for (a, b) in acc.w.data_mut().iter_mut().zip(part.w.data()) {
                *a += b;
            }
            for (a, b) in acc.b.data_mut().iter_mut().zip(part.b.data()) {
                *a += b;
            }
        }
        g_input.extend_from_slice(&gin);
    }
    let grads = ModelGrads {
        backbone,
        raa: raa_grads,
        head,
    };
    let s = bb.input_size;
    Ok((grads, Tensor::new(vec![n, s, s, bb.in_channels], g_input)?))
}

fn backbone_sample_backward(
    g_out: &[f64],
    cache: &BackboneCache,
    params: &ModelParams,
    config: &BackboneConfig,
    sizes: &[usize],
) -> (Vec<ConvParams>, Vec<f64>) {
    let mut grads = Vec::with_capacity(config.stages.len());
    let mut g = g_out.to_vec();
    for s in (0..config.stages.len()).rev() {
        let st = &config.stages[s];
        let c_in = if s == 0 { config.in_channels } else { config.stages[s - 1].out_channels };
        let cc = &cache.stages[s];
        for (gv, &o) in g.iter_mut().zip(&cc.out) {
            if o <= 0.0 {
                *gv = 0.0;
            }
        }
        let pixels = sizes[s + 1] * sizes[s + 1];
        let row_len = st.kernel * st.kernel * c_in;
        let mut gw = vec![0.0; row_len * st.out_channels];
        gemm_tn(&cc.cols, &g, &mut gw, pixels, row_len, st.out_channels);
        let mut gb = vec![0.0; st.out_channels];
        for row in g.chunks_exact(st.out_channels) {
            for (b, &v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }
        let mut g_cols = vec![0.0; pixels * row_len];
        gemm_nt(&g, params.backbone[s].w.data(), &mut g_cols, pixels, row_len, st.out_channels);
        g = col2im(&g_cols, sizes[s], c_in, st, sizes[s + 1]);
        grads.push(ConvParams {
            w: Tensor::new(params.backbone[s].w.shape().to_vec(), gw).expect("shape"),
            b: Tensor::from_vec(gb),
        });
    }
    grads.reverse();
    (grads, g)
}
