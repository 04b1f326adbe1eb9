use std::sync::Arc;

use super::{MlpActivation, Mode, Neighborhoods, RaaConfig, RaaParams, BN_EPS};
use crate::error::{RaaError, Result};
use crate::par;
use crate::tensor::{gemm, Tensor};

/// Instrumented floating-point operation counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub flops: u64,
}

impl OpCounter {
    #[inline]
    pub fn add(&mut self, n: u64) {
        self.flops += n;
    }
}

/// Normalized neighbor weights for every pixel, aligned with the
/// neighborhood's pair slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    pub neighbors: Arc<Neighborhoods>,
    pub weights: Vec<f64>,
    pub distances_raw: Vec<f64>,
    pub distances_mlp: Vec<f64>,
}

impl AffinityField {
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.neighbors.row_range(i);
        (self.neighbors.neighbors(i), &self.weights[r])
    }
}

/// Per-sample intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleCache {
    pub input: Vec<f64>,
    pub fm: Vec<f64>,
    /// Hidden pre-activations of the distance MLP, `pairs × mlp_hidden`.
    pub mlp_hidden_pre: Vec<f64>,
    /// Output pre-activations of the distance MLP, one per pair.
    pub mlp_out_pre: Vec<f64>,
    pub affinity: AffinityField,
    pub f_tilde: Vec<f64>,
    /// Instrumented operations of distances, MLP, softmax and reconstruction.
    pub flops: u64,
}

/// Batch-norm statistics and the pre-ReLU values of the residual stage.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub enabled: bool,
    pub mode: Mode,
    /// Number of pooled rows, `batch·h·w`.
    pub count: usize,
    pub mean: Vec<f64>,
    /// Biased batch variance (train) or running variance (eval).
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Vec<f64>,
    pub pre_relu: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RaaForwardCache {
    pub mode: Mode,
    pub config: RaaConfig,
    pub fingerprint: u64,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    /// Rank of the tensor passed to `raa_forward` (3 = single map, 4 = batch).
    pub input_rank: usize,
    pub neighbors: Arc<Neighborhoods>,
    pub samples: Vec<SampleCache>,
    pub bn: BnCache,
}

impl RaaForwardCache {
    pub fn flops(&self) -> u64 {
        self.samples.iter().map(|s| s.flops).sum()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let d = self.config.d_proj;
        if self.input_rank == 3 {
            vec![self.h, self.w, d]
        } else {
            vec![self.batch, self.h, self.w, d]
        }
    }
}

impl RaaForwardCache {
    /// Smallest `|x|` over every kinked argument: per-channel differences of
    /// distinct pairs, ReLU stages of the distance MLP, and the final ReLU.
    pub fn kink_margin(&self) -> f64 {
        let d_p = self.config.d_proj;
        let act = self.config.mlp_activation;
        let nb = &self.neighbors;
        let mut m = f64::INFINITY;
        for s in &self.samples {
            for i in 0..nb.pixels() {
                for &j in nb.neighbors(i) {
                    if j == i {
                        continue;
                    }
                    for c in 0..d_p {
                        m = m.min((s.fm[i * d_p + c] - s.fm[j * d_p + c]).abs());
                    }
                }
            }
            if act.inner_is_relu() {
                m = s.mlp_hidden_pre.iter().fold(m, |m, v| m.min(v.abs()));
            }
            if act.outer_is_relu() {
                m = s.mlp_out_pre.iter().fold(m, |m, v| m.min(v.abs()));
            }
        }
        self.bn.pre_relu.iter().fold(m, |m, v| m.min(v.abs()))
    }
}

fn grid_of(t: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] if c == channels => Ok((1, h, w)),
        [n, h, w, c] if c == channels => Ok((n, h, w)),
        _ => Err(RaaError::dim(
            op,
            format!("expected [h, w, {channels}] or [n, h, w, {channels}], got {:?}", t.shape()),
        )),
    }
}

pub(crate) fn project_into(f: &[f64], params: &RaaParams, d_in: usize, d_p: usize, out: &mut [f64]) {
    let pixels = f.len() / d_in;
    for row in out.chunks_exact_mut(d_p) {
        row.copy_from_slice(params.b_proj.data());
    }
    gemm(f, params.w_proj.data(), out, pixels, d_in, d_p);
}

/// Per-pixel 1×1 projection `F^m_i = W_pᵀ F_i + b_p`.
pub fn project(f: &Tensor, params: &RaaParams) -> Result<Tensor> {
    let (d_in, d_p) = (params.w_proj.shape()[0], params.w_proj.shape()[1]);
    let (n, h, w) = grid_of(f, d_in, "project")?;
    let mut out = vec![0.0; n * h * w * d_p];
    project_into(f.data(), params, d_in, d_p, &mut out);
    let mut shape = f.shape().to_vec();
    *shape.last_mut().unwrap() = d_p;
    Tensor::new(shape, out)
}

pub(crate) fn distances_into(fm: &[f64], d_p: usize, nb: &Neighborhoods, ops: &mut OpCounter) -> Vec<f64> {
    let inv = 1.0 / d_p as f64;
    let mut out = Vec::with_capacity(nb.pair_count());
    for i in 0..nb.pixels() {
        let fi = &fm[i * d_p..(i + 1) * d_p];
        for &j in nb.neighbors(i) {
            let fj = &fm[j * d_p..(j + 1) * d_p];
            let s: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b).abs()).sum();
            out.push(s * inv);
            ops.add(3 * d_p as u64 + 1);
        }
    }
    out
}

/// Mean absolute channel difference `D_ij` for every pair slot.
pub fn pairwise_distance(fm: &Tensor, neighbors: &Neighborhoods) -> Result<Vec<f64>> {
    match *fm.shape() {
        [h, w, d] if h == neighbors.h && w == neighbors.w => {
            Ok(distances_into(fm.data(), d, neighbors, &mut OpCounter::default()))
        }
        _ => Err(RaaError::dim(
            "pairwise_distance",
            format!("feature map {:?} vs grid {}x{}", fm.shape(), neighbors.h, neighbors.w),
        )),
    }
}

/// Scalar two-layer MLP over every distance. Writes hidden pre-activations
/// into `hidden` when given; returns `(output pre-activations, D')`.
pub(crate) fn mlp_eval(
    d: &[f64],
    params: &RaaParams,
    act: MlpActivation,
    ops: &mut OpCounter,
    mut hidden: Option<&mut Vec<f64>>,
) -> (Vec<f64>, Vec<f64>) {
    let w1 = params.w_mlp1.data();
    let b1 = params.b_mlp1.data();
    let w2 = params.w_mlp2.data();
    let b2 = params.b_mlp2.data()[0];
    let hid = w1.len();
    let mut pre = Vec::with_capacity(d.len());
    let mut out = Vec::with_capacity(d.len());
    if let Some(h) = hidden.as_deref_mut() {
        h.clear();
        h.reserve(d.len() * hid);
    }
    for &x in d {
        let mut z2 = b2;
        for k in 0..hid {
            let z1 = w1[k] * x + b1[k];
            if let Some(h) = hidden.as_deref_mut() {
                h.push(z1);
            }
            z2 += w2[k] * act.inner(z1);
        }
        pre.push(z2);
        out.push(act.outer(z2));
        ops.add(5 * hid as u64 + 2);
    }
    (pre, out)
}

pub fn distance_mlp(d: &[f64], params: &RaaParams, activation: MlpActivation) -> Result<Vec<f64>> {
    let hid = params.w_mlp1.len();
    if params.w_mlp1.shape() != [1, hid] || params.b_mlp1.len() != hid || params.w_mlp2.shape() != [hid, 1] || params.b_mlp2.len() != 1 {
        return Err(RaaError::dim("distance_mlp", "MLP parameter shapes disagree on hidden width"));
    }
    Ok(mlp_eval(d, params, activation, &mut OpCounter::default(), None).1)
}

pub(crate) fn softmax_rows(dprime: &[f64], gamma: f64, nb: &Neighborhoods, ops: &mut OpCounter) -> Result<Vec<f64>> {
    let mut weights = vec![0.0; dprime.len()];
    for i in 0..nb.pixels() {
        let r = nb.row_range(i);
        if r.is_empty() {
            return Err(RaaError::Invariant(format!("pixel {i} has an empty neighborhood")));
        }
        let row = &dprime[r.clone()];
        let out = &mut weights[r];
        // logits are −γ·D'; the max logit is at the smallest D'
        let min_d = row.iter().copied().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (o, &d) in out.iter_mut().zip(row) {
            *o = (-gamma * (d - min_d)).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        ops.add(6 * row.len() as u64);
    }
    Ok(weights)
}

/// `A_ij = exp(−γ D'_ij) / Σ_j' exp(−γ D'_ij')` with max-logit subtraction.
pub fn affinity_softmax(dprime: &[f64], gamma: f64, neighbors: &Arc<Neighborhoods>) -> Result<AffinityField> {
    if !(gamma > 0.0) {
        return Err(RaaError::Config(format!("gamma must be > 0, got {gamma}")));
    }
    if dprime.len() != neighbors.pair_count() {
        return Err(RaaError::dim(
            "affinity_softmax",
            format!("{} distances for {} pairs", dprime.len(), neighbors.pair_count()),
        ));
    }
    let weights = softmax_rows(dprime, gamma, neighbors, &mut OpCounter::default())?;
    Ok(AffinityField {
        neighbors: Arc::clone(neighbors),
        weights,
        distances_raw: Vec::new(),
        distances_mlp: dprime.to_vec(),
    })
}

pub(crate) fn reconstruct_into(fm: &[f64], weights: &[f64], nb: &Neighborhoods, d_p: usize, ops: &mut OpCounter) -> Vec<f64> {
    let mut out = vec![0.0; fm.len()];
    for (i, out_i) in out.chunks_exact_mut(d_p).enumerate() {
        let r = nb.row_range(i);
        for (&j, &a) in nb.neighbors(i).iter().zip(&weights[r]) {
            let fj = &fm[j * d_p..(j + 1) * d_p];
            for (o, &v) in out_i.iter_mut().zip(fj) {
                *o += a * v;
            }
            ops.add(2 * d_p as u64);
        }
    }
    out
}

/// `F̃_i = Σ_j A_ij F^m_j`.
pub fn reconstruct(fm: &Tensor, affinity: &AffinityField) -> Result<Tensor> {
    let nb = &affinity.neighbors;
    match *fm.shape() {
        [h, w, d] if h == nb.h && w == nb.w => {
            let out = reconstruct_into(fm.data(), &affinity.weights, nb, d, &mut OpCounter::default());
            Tensor::new(fm.shape().to_vec(), out)
        }
        _ => Err(RaaError::dim(
            "reconstruct",
            format!("feature map {:?} vs affinity grid {}x{}", fm.shape(), nb.h, nb.w),
        )),
    }
}

/// Distances, MLP, softmax and reconstruction for one map, counting operations.
pub fn affinity_pipeline(
    fm: &Tensor,
    params: &RaaParams,
    activation: MlpActivation,
    neighbors: &Neighborhoods,
    ops: &mut OpCounter,
) -> Result<Tensor> {
    let d_p = match *fm.shape() {
        [h, w, d] if h == neighbors.h && w == neighbors.w => d,
        _ => return Err(RaaError::dim("affinity_pipeline", format!("{:?}", fm.shape()))),
    };
    let d = distances_into(fm.data(), d_p, neighbors, ops);
    let (_, dprime) = mlp_eval(&d, params, activation, ops, None);
    let weights = softmax_rows(&dprime, params.gamma(), neighbors, ops)?;
    let out = reconstruct_into(fm.data(), &weights, neighbors, d_p, ops);
    Tensor::new(fm.shape().to_vec(), out)
}

/// Batch-norm over `rows × channels` followed by ReLU.
fn bn_relu(u: &[f64], channels: usize, params: &RaaParams, mode: Mode, enabled: bool) -> Result<(Vec<f64>, BnCache)> {
    let count = u.len() / channels;
    if !enabled {
        return Ok((
            u.iter().map(|v| v.max(0.0)).collect(),
            BnCache {
                enabled,
                mode,
                count,
                mean: Vec::new(),
                var: Vec::new(),
                inv_std: Vec::new(),
                xhat: Vec::new(),
                pre_relu: u.to_vec(),
            },
        ));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; channels];
            for row in u.chunks_exact(channels) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; channels];
            for row in u.chunks_exact(channels) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= count as f64);
            (mean, var)
        }
        Mode::Eval => {
            if params.bn_batches == 0 {
                return Err(RaaError::State(
                    "batch-norm running statistics are uninitialized; run a train step first".into(),
                ));
            }
            (params.bn_run_mean.data().to_vec(), params.bn_run_var.data().to_vec())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let g = params.bn_gamma.data();
    let b = params.bn_beta.data();
    let mut xhat = vec![0.0; u.len()];
    let mut pre = vec![0.0; u.len()];
    for ((urow, xrow), prow) in u
        .chunks_exact(channels)
        .zip(xhat.chunks_exact_mut(channels))
        .zip(pre.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            xrow[c] = (urow[c] - mean[c]) * inv_std[c];
            prow[c] = g[c] * xrow[c] + b[c];
        }
    }
    let out = pre.iter().map(|v| v.max(0.0)).collect();
    Ok((
        out,
        BnCache {
            enabled,
            mode,
            count,
            mean,
            var,
            inv_std,
            xhat,
            pre_relu: pre,
        },
    ))
}

/// `F^e = ReLU(BN(F̃ + F^m))` over a single map `[h,w,d]` or a batch `[n,h,w,d]`.
pub fn residual_bn_relu(
    f_tilde: &Tensor,
    fm: &Tensor,
    params: &RaaParams,
    mode: Mode,
    batch_norm: bool,
) -> Result<(Tensor, BnCache)> {
    if f_tilde.shape() != fm.shape() {
        return Err(RaaError::shapes("residual_bn_relu", f_tilde.shape(), fm.shape()));
    }
    let d_p = params.bn_gamma.len();
    grid_of(fm, d_p, "residual_bn_relu")?;
    let u = f_tilde.add(fm)?;
    let (out, cache) = bn_relu(u.data(), d_p, params, mode, batch_norm)?;
    Ok((Tensor::new(fm.shape().to_vec(), out)?, cache))
}

fn sample_forward(
    f: &[f64],
    params: &RaaParams,
    config: &RaaConfig,
    nb: &Arc<Neighborhoods>,
    gamma: f64,
) -> Result<SampleCache> {
    let (d_in, d_p) = (config.d_in, config.d_proj);
    let mut ops = OpCounter::default();
    let mut fm = vec![0.0; nb.pixels() * d_p];
    project_into(f, params, d_in, d_p, &mut fm);
    let d = distances_into(&fm, d_p, nb, &mut ops);
    let mut hidden = Vec::new();
    let (mlp_out_pre, dprime) = mlp_eval(&d, params, config.mlp_activation, &mut ops, Some(&mut hidden));
    let weights = softmax_rows(&dprime, gamma, nb, &mut ops)?;
    let f_tilde = reconstruct_into(&fm, &weights, nb, d_p, &mut ops);
    Ok(SampleCache {
        input: f.to_vec(),
        fm,
        mlp_hidden_pre: hidden,
        mlp_out_pre,
        affinity: AffinityField {
            neighbors: Arc::clone(nb),
            weights,
            distances_raw: d,
            distances_mlp: dprime,
        },
        f_tilde,
        flops: ops.flops,
    })
}

/// Full layer forward for a map `[h,w,d_in]` or batch `[n,h,w,d_in]`.
pub fn raa_forward(f: &Tensor, params: &RaaParams, config: &RaaConfig, mode: Mode) -> Result<(Tensor, RaaForwardCache)> {
    config.validate()?;
    params.check(config)?;
    let (n, h, w) = grid_of(f, config.d_in, "raa_forward")?;
    if config.batch_norm && mode == Mode::Eval && params.bn_batches == 0 {
        return Err(RaaError::State(
            "batch-norm running statistics are uninitialized; run a train step first".into(),
        ));
    }
    let nb = Arc::new(super::build_neighborhoods(h, w, config.window, config.include_self)?);
    let gamma = params.gamma();
    let per = h * w * config.d_in;
    let samples = par::try_map_indexed(n, |s| {
        sample_forward(&f.data()[s * per..(s + 1) * per], params, config, &nb, gamma)
    })?;

    let d_p = config.d_proj;
    let mut u = Vec::with_capacity(n * h * w * d_p);
    for s in &samples {
        u.extend(s.f_tilde.iter().zip(&s.fm).map(|(a, b)| a + b));
    }
    let (out, bn) = bn_relu(&u, d_p, params, mode, config.batch_norm)?;
    let mut shape = f.shape().to_vec();
    *shape.last_mut().unwrap() = d_p;
    let cache = RaaForwardCache {
        mode,
        config: config.clone(),
        fingerprint: params.fingerprint(),
        batch: n,
        h,
        w,
        input_rank: f.rank(),
        neighbors: nb,
        samples,
        bn,
    };
    Ok((Tensor::new(shape, out)?, cache))
}
