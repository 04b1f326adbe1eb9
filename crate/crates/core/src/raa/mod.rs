//! Region-affinity attention layer.
//!
//! Per sample, with `F` the `h×w×d_in` input:
//!
//! 1. `F^m = F·W_p + b_p` (1×1 projection to `d_proj` channels)
//! 2. `D_ij = mean_c |F^m_ic − F^m_jc|` over the local window `K(i)`
//! 3. `D'_ij = outer(w_mlp2ᵀ·inner(w_mlp1·D_ij + b_mlp1) + b_mlp2)`
//! 4. `A_ij = softmax_j(−γ·D'_ij)` with `γ = softplus(gamma_raw)`
//! 5. `F̃_i = Σ_j A_ij F^m_j`
//! 6. `F^e = ReLU(BN(F̃ + F^m))`, batch norm pooled over batch and pixels.

mod backward;
mod forward;
mod neighborhood;
mod summary;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use backward::{raa_backward, RaaGrads};
pub use forward::{
    affinity_pipeline, affinity_softmax, distance_mlp, pairwise_distance, project, raa_forward,
    reconstruct, residual_bn_relu, AffinityField, BnCache, OpCounter, RaaForwardCache,
    SampleCache,
};
pub use neighborhood::{build_neighborhoods, Neighborhoods};
pub use summary::summarize_affinity;

use crate::error::{RaaError, Result};
use crate::tensor::{gelu, gelu_grad, NamedTensorSet, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// `softplus(0.5413) ≈ 1.0`.
pub const DEFAULT_GAMMA_INIT: f64 = 0.5413;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activation pair of the distance MLP, `(inner, outer)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MlpActivation {
    #[default]
    GeluRelu,
    ReluRelu,
    GeluGelu,
}

impl MlpActivation {
    #[inline]
    pub fn inner(self, x: f64) -> f64 {
        match self {
            MlpActivation::ReluRelu => x.max(0.0),
            _ => gelu(x),
        }
    }

    #[inline]
    pub fn inner_grad(self, x: f64) -> f64 {
        match self {
            MlpActivation::ReluRelu => relu_grad(x),
            _ => gelu_grad(x),
        }
    }

    #[inline]
    pub fn outer(self, x: f64) -> f64 {
        match self {
            MlpActivation::GeluGelu => gelu(x),
            _ => x.max(0.0),
        }
    }

    #[inline]
    pub fn outer_grad(self, x: f64) -> f64 {
        match self {
            MlpActivation::GeluGelu => gelu_grad(x),
            _ => relu_grad(x),
        }
    }

    pub fn inner_is_relu(self) -> bool {
        self == MlpActivation::ReluRelu
    }

    pub fn outer_is_relu(self) -> bool {
        self != MlpActivation::GeluGelu
    }
}

#[inline]
pub(crate) fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl FromStr for MlpActivation {
    type Err = RaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu_relu" => Ok(MlpActivation::GeluRelu),
            "relu_relu" => Ok(MlpActivation::ReluRelu),
            "gelu_gelu" => Ok(MlpActivation::GeluGelu),
            other => Err(RaaError::Config(format!("unknown mlp activation `{other}`"))),
        }
    }
}

impl fmt::Display for MlpActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MlpActivation::GeluRelu => "gelu_relu",
            MlpActivation::ReluRelu => "relu_relu",
            MlpActivation::GeluGelu => "gelu_gelu",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaaConfig {
    pub d_in: usize,
    pub d_proj: usize,
    /// Odd side length of the square neighborhood.
    pub window: usize,
    pub include_self: bool,
    pub mlp_hidden: usize,
    pub mlp_activation: MlpActivation,
    pub gamma_init: f64,
    /// When false, batch norm is skipped: `F^e = ReLU(F̃ + F^m)`.
    pub batch_norm: bool,
}

impl RaaConfig {
    pub fn new(d_in: usize, d_proj: usize) -> Self {
        RaaConfig {
            d_in,
            d_proj,
            window: 3,
            include_self: true,
            mlp_hidden: 16,
            mlp_activation: MlpActivation::GeluRelu,
            gamma_init: DEFAULT_GAMMA_INIT,
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(RaaError::Config(format!(
                "window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if self.d_in == 0 || self.d_proj == 0 || self.mlp_hidden == 0 {
            return Err(RaaError::Config(
                "d_in, d_proj and mlp_hidden must be >= 1".into(),
            ));
        }
        if !self.gamma_init.is_finite() {
            return Err(RaaError::Config("gamma_init must be finite".into()));
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RaaParams {
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
    /// `γ = softplus(gamma_raw)`.
    pub gamma_raw: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_run_mean: Tensor,
    pub bn_run_var: Tensor,
    /// Number of running-stat updates applied; zero means uninitialized.
    pub bn_batches: u64,
}

pub const RAA_LEARNABLE: [&str; 9] = [
    "w_proj", "b_proj", "w_mlp1", "b_mlp1", "w_mlp2", "b_mlp2", "gamma_raw", "bn_gamma", "bn_beta",
];

impl RaaParams {
    /// Kaiming-uniform (fan-in) weights, zero biases, unit BN scale.
    pub fn init<R: Rng + ?Sized>(config: &RaaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d_in, d_p, hid) = (config.d_in, config.d_proj, config.mlp_hidden);
        Ok(RaaParams {
            w_proj: kaiming_uniform(&[d_in, d_p], d_in, rng),
            b_proj: Tensor::zeros(&[d_p]),
            w_mlp1: kaiming_uniform(&[1, hid], 1, rng),
            b_mlp1: Tensor::zeros(&[hid]),
            w_mlp2: kaiming_uniform(&[hid, 1], hid, rng),
            b_mlp2: Tensor::zeros(&[1]),
            gamma_raw: Tensor::scalar(config.gamma_init),
            bn_gamma: Tensor::full(&[d_p], 1.0),
            bn_beta: Tensor::zeros(&[d_p]),
            bn_run_mean: Tensor::zeros(&[d_p]),
            bn_run_var: Tensor::full(&[d_p], 1.0),
            bn_batches: 0,
        })
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.gamma_raw.data()[0])
    }

    pub fn check(&self, config: &RaaConfig) -> Result<()> {
        let (d_in, d_p, hid) = (config.d_in, config.d_proj, config.mlp_hidden);
        let expect: [(&str, &Tensor, Vec<usize>); 11] = [
            ("w_proj", &self.w_proj, vec![d_in, d_p]),
            ("b_proj", &self.b_proj, vec![d_p]),
            ("w_mlp1", &self.w_mlp1, vec![1, hid]),
            ("b_mlp1", &self.b_mlp1, vec![hid]),
            ("w_mlp2", &self.w_mlp2, vec![hid, 1]),
            ("b_mlp2", &self.b_mlp2, vec![1]),
            ("gamma_raw", &self.gamma_raw, vec![1]),
            ("bn_gamma", &self.bn_gamma, vec![d_p]),
            ("bn_beta", &self.bn_beta, vec![d_p]),
            ("bn_run_mean", &self.bn_run_mean, vec![d_p]),
            ("bn_run_var", &self.bn_run_var, vec![d_p]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(RaaError::dim(
                    "RaaParams",
                    format!("{name} has shape {:?}, config expects {shape:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn learnable(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
            ("w_mlp1", &self.w_mlp1),
            ("b_mlp1", &self.b_mlp1),
            ("w_mlp2", &self.w_mlp2),
            ("b_mlp2", &self.b_mlp2),
            ("gamma_raw", &self.gamma_raw),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
        ]
    }

    pub fn learnable_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
            ("w_mlp1", &mut self.w_mlp1),
            ("b_mlp1", &mut self.b_mlp1),
            ("w_mlp2", &mut self.w_mlp2),
            ("b_mlp2", &mut self.b_mlp2),
            ("gamma_raw", &mut self.gamma_raw),
            ("bn_gamma", &mut self.bn_gamma),
            ("bn_beta", &mut self.bn_beta),
        ]
    }

    /// FNV-1a over the bit patterns of every learnable tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in self.learnable() {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Set running statistics directly and mark them initialized.
    pub fn set_running_stats(&mut self, mean: Tensor, var: Tensor) -> Result<()> {
        if mean.shape() != self.bn_run_mean.shape() || var.shape() != self.bn_run_var.shape() {
            return Err(RaaError::shapes("set_running_stats", mean.shape(), self.bn_run_mean.shape()));
        }
        if var.data().iter().any(|&v| v < 0.0) {
            return Err(RaaError::State("running variance must be >= 0".into()));
        }
        self.bn_run_mean = mean;
        self.bn_run_var = var;
        self.bn_batches = self.bn_batches.max(1);
        Ok(())
    }

    /// Fold a train-mode batch's statistics into the running estimates
    /// (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, cache: &RaaForwardCache) -> Result<()> {
        let bn = &cache.bn;
        if !bn.enabled {
            return Ok(());
        }
        if cache.mode != Mode::Train {
            return Err(RaaError::State("running stats need a train-mode cache".into()));
        }
        let m = bn.count as f64;
        let unbias = if bn.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.bn_run_mean.len() {
            let rm = &mut self.bn_run_mean.data_mut()[c];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bn.mean[c];
            let rv = &mut self.bn_run_var.data_mut()[c];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bn.var[c] * unbias;
        }
        self.bn_batches += 1;
        Ok(())
    }

    pub fn to_named_set(&self) -> NamedTensorSet {
        let mut set = NamedTensorSet::new();
        for (name, t) in self.learnable() {
            set.insert(name, t.clone()).expect("unique names");
        }
        set.insert("bn_run_mean", self.bn_run_mean.clone()).expect("unique");
        set.insert("bn_run_var", self.bn_run_var.clone()).expect("unique");
        set.insert("bn_batches", Tensor::scalar(self.bn_batches as f64))
            .expect("unique");
        set
    }

    /// Read back from a set whose names carry `prefix` (e.g. `"raa."`).
    pub fn from_named_set(set: &NamedTensorSet, prefix: &str, config: &RaaConfig) -> Result<Self> {
        let get = |n: &str| set.require(&format!("{prefix}{n}")).cloned();
        let params = RaaParams {
            w_proj: get("w_proj")?,
            b_proj: get("b_proj")?,
            w_mlp1: get("w_mlp1")?,
            b_mlp1: get("b_mlp1")?,
            w_mlp2: get("w_mlp2")?,
            b_mlp2: get("b_mlp2")?,
            gamma_raw: get("gamma_raw")?,
            bn_gamma: get("bn_gamma")?,
            bn_beta: get("bn_beta")?,
            bn_run_mean: get("bn_run_mean")?,
            bn_run_var: get("bn_run_var")?,
            bn_batches: get("bn_batches")?.data()[0] as u64,
        };
        params.check(config)?;
        Ok(params)
    }
}

pub(crate) fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
