use super::forward::{RaaForwardCache, SampleCache};
use super::{relu_grad, sigmoid, Mode, RaaConfig, RaaParams};
use crate::error::{RaaError, Result};
use crate::par;
use crate::tensor::{gemm_nt, gemm_tn, NamedTensorSet, Tensor};

/// Gradients of every learnable tensor of [`RaaParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct RaaGrads {
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
    pub gamma_raw: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
}

impl RaaGrads {
    pub fn zeros(config: &RaaConfig) -> Self {
        let (d_in, d_p, hid) = (config.d_in, config.d_proj, config.mlp_hidden);
        RaaGrads {
            w_proj: Tensor::zeros(&[d_in, d_p]),
            b_proj: Tensor::zeros(&[d_p]),
            w_mlp1: Tensor::zeros(&[1, hid]),
            b_mlp1: Tensor::zeros(&[hid]),
            w_mlp2: Tensor::zeros(&[hid, 1]),
            b_mlp2: Tensor::zeros(&[1]),
            gamma_raw: Tensor::zeros(&[1]),
            bn_gamma: Tensor::zeros(&[d_p]),
            bn_beta: Tensor::zeros(&[d_p]),
        }
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

    pub fn to_named_set(&self) -> NamedTensorSet {
        let mut set = NamedTensorSet::new();
        for (name, t) in self.learnable() {
            set.insert(name, t.clone()).expect("unique names");
        }
        set
    }
}

struct SampleGrads {
    input: Vec<f64>,
    w_proj: Vec<f64>,
    b_proj: Vec<f64>,
    w_mlp1: Vec<f64>,
    b_mlp1: Vec<f64>,
    w_mlp2: Vec<f64>,
    b_mlp2: f64,
    gamma: f64,
}

fn sample_backward(g_u: &[f64], s: &SampleCache, params: &RaaParams, config: &RaaConfig, gamma: f64) -> SampleGrads {
    let (d_in, d_p, hid) = (config.d_in, config.d_proj, config.mlp_hidden);
    let act = config.mlp_activation;
    let nb = &s.affinity.neighbors;
    let pixels = nb.pixels();
    let a = &s.affinity.weights;
    let fm = &s.fm;

    // residual: u = F̃ + F^m
    let mut g_fm = g_u.to_vec();
    let g_ft = g_u;

    // F̃_i = Σ_j A_ij F^m_j
    let mut g_a = vec![0.0; a.len()];
    for i in 0..pixels {
        let gi = &g_ft[i * d_p..(i + 1) * d_p];
        for p in nb.row_range(i) {
            let j = nb.ids()[p];
            let fj = &fm[j * d_p..(j + 1) * d_p];
            g_a[p] = gi.iter().zip(fj).map(|(x, y)| x * y).sum();
            let w = a[p];
            for (g, &x) in g_fm[j * d_p..(j + 1) * d_p].iter_mut().zip(gi) {
                *g += w * x;
            }
        }
    }

    // softmax over logits s = −γ·D'
    let mut g_dprime = vec![0.0; a.len()];
    let mut g_gamma = 0.0;
    for i in 0..pixels {
        let r = nb.row_range(i);
        let dot: f64 = a[r.clone()].iter().zip(&g_a[r.clone()]).map(|(x, y)| x * y).sum();
        for p in r {
            let g_logit = a[p] * (g_a[p] - dot);
            g_dprime[p] = -gamma * g_logit;
            g_gamma -= s.affinity.distances_mlp[p] * g_logit;
        }
    }

    // distance MLP
    let w1 = params.w_mlp1.data();
    let w2 = params.w_mlp2.data();
    let mut g_w1 = vec![0.0; hid];
    let mut g_b1 = vec![0.0; hid];
    let mut g_w2 = vec![0.0; hid];
    let mut g_b2 = 0.0;
    let mut g_d = vec![0.0; a.len()];
    for p in 0..a.len() {
        let g_z2 = g_dprime[p] * act.outer_grad(s.mlp_out_pre[p]);
        if g_z2 == 0.0 {
            continue;
        }
        g_b2 += g_z2;
        let d = s.affinity.distances_raw[p];
        let z1 = &s.mlp_hidden_pre[p * hid..(p + 1) * hid];
        let mut gd = 0.0;
        for k in 0..hid {
            g_w2[k] += g_z2 * act.inner(z1[k]);
            let g_z1 = g_z2 * w2[k] * act.inner_grad(z1[k]);
            g_w1[k] += g_z1 * d;
            g_b1[k] += g_z1;
            gd += g_z1 * w1[k];
        }
        g_d[p] = gd;
    }

    // D_ij = (1/d') Σ_c |F^m_ic − F^m_jc|, sign(0) = 0
    let inv = 1.0 / d_p as f64;
    for i in 0..pixels {
        for p in nb.row_range(i) {
            let gd = g_d[p] * inv;
            if gd == 0.0 {
                continue;
            }
            let j = nb.ids()[p];
            if i == j {
                continue;
            }
            for c in 0..d_p {
                let diff = fm[i * d_p + c] - fm[j * d_p + c];
                let sg = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g_fm[i * d_p + c] += gd * sg;
                g_fm[j * d_p + c] -= gd * sg;
            }
        }
    }

    // projection
    let mut g_wp = vec![0.0; d_in * d_p];
    gemm_tn(&s.input, &g_fm, &mut g_wp, pixels, d_in, d_p);
    let mut g_bp = vec![0.0; d_p];
    for row in g_fm.chunks_exact(d_p) {
        for (b, &g) in g_bp.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut g_in = vec![0.0; pixels * d_in];
    gemm_nt(&g_fm, params.w_proj.data(), &mut g_in, pixels, d_in, d_p);

    SampleGrads {
        input: g_in,
        w_proj: g_wp,
        b_proj: g_bp,
        w_mlp1: g_w1,
        b_mlp1: g_b1,
        w_mlp2: g_w2,
        b_mlp2: g_b2,
        gamma: g_gamma,
    }
}

/// Exact gradients of a downstream scalar with respect to the layer input and
/// every learnable parameter, given `∂L/∂F^e`.
pub fn raa_backward(
    grad_out: &Tensor,
    cache: &RaaForwardCache,
    params: &RaaParams,
    config: &RaaConfig,
) -> Result<(Tensor, RaaGrads)> {
    if cache.config != *config {
        return Err(RaaError::State("cache was produced under a different config".into()));
    }
    if cache.fingerprint != params.fingerprint() {
        return Err(RaaError::State("stale cache: parameters changed since forward".into()));
    }
    if grad_out.shape() != cache.output_shape().as_slice() {
        return Err(RaaError::State(format!(
            "upstream gradient {:?} does not match cached output {:?}",
            grad_out.shape(),
            cache.output_shape()
        )));
    }
    let d_p = config.d_proj;
    let bn = &cache.bn;
    let g_out = grad_out.data();
    let g_y: Vec<f64> = g_out
        .iter()
        .zip(&bn.pre_relu)
        .map(|(&g, &y)| g * relu_grad(y))
        .collect();

    let mut grads = RaaGrads::zeros(config);
    let g_u = if !bn.enabled {
        g_y
    } else {
        let mut sum_g = vec![0.0; d_p];
        let mut sum_gx = vec![0.0; d_p];
        for (grow, xrow) in g_y.chunks_exact(d_p).zip(bn.xhat.chunks_exact(d_p)) {
            for c in 0..d_p {
                sum_g[c] += grow[c];
                sum_gx[c] += grow[c] * xrow[c];
            }
        }
        grads.bn_gamma.data_mut().copy_from_slice(&sum_gx);
        grads.bn_beta.data_mut().copy_from_slice(&sum_g);
        let bg = params.bn_gamma.data();
        let m = bn.count as f64;
        let mut g_u = vec![0.0; g_y.len()];
        for ((urow, grow), xrow) in g_u
            .chunks_exact_mut(d_p)
            .zip(g_y.chunks_exact(d_p))
            .zip(bn.xhat.chunks_exact(d_p))
        {
            for c in 0..d_p {
                let scale = bg[c] * bn.inv_std[c];
                urow[c] = match bn.mode {
                    Mode::Train => scale * (grow[c] - sum_g[c] / m - xrow[c] * sum_gx[c] / m),
                    Mode::Eval => scale * grow[c],
                };
            }
        }
        g_u
    };

    let per = cache.h * cache.w * d_p;
    let gamma = params.gamma();
    let parts = par::map_indexed(cache.batch, |s| {
        sample_backward(&g_u[s * per..(s + 1) * per], &cache.samples[s], params, config, gamma)
    });

    let mut g_input = Vec::with_capacity(cache.batch * cache.h * cache.w * config.d_in);
    let mut g_gamma = 0.0;
    for part in parts {
        g_input.extend_from_slice(&part.input);
        add_into(&mut grads.w_proj, &part.w_proj);
        add_into(&mut grads.b_proj, &part.b_proj);
        add_into(&mut grads.w_mlp1, &part.w_mlp1);
        add_into(&mut grads.b_mlp1, &part.b_mlp1);
        add_into(&mut grads.w_mlp2, &part.w_mlp2);
        grads.b_mlp2.data_mut()[0] += part.b_mlp2;
        g_gamma += part.gamma;
    }
    grads.gamma_raw.data_mut()[0] = g_gamma * sigmoid(params.gamma_raw.data()[0]);

    let mut in_shape = cache.output_shape();
    *in_shape.last_mut().unwrap() = config.d_in;
    Ok((Tensor::new(in_shape, g_input)?, grads))
}

fn add_into(t: &mut Tensor, v: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(v) {
        *a += b;
    }
}
