//! Verification oracles: central finite differences, a brute-force
//! all-pairs attention reference, and kink-avoiding input sampling.

mod dd;
mod reference;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{RaaError, Result};
use crate::losses::{total_loss, LossConfig};
use crate::model::{model_backward, model_forward, ModelConfig, ModelParams};
use crate::raa::{softplus, MlpActivation, Mode, RaaConfig, RaaParams, BN_EPS};
use crate::tensor::{gelu, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Absolute floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;
/// Minimum `|x|` for every ReLU / `|·|` argument of an accepted draw.
pub const KINK_MARGIN: f64 = 1e-3;
pub const MAX_DRAWS: usize = 1000;
/// Largest grid the all-pairs oracle accepts.
pub const ORACLE_MAX_PIXELS: usize = 64;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences `(f(x+εe) − f(x−εe)) / 2ε` for every coordinate.
pub fn finite_diff<F>(mut f: F, at: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut x = at.clone();
    let mut grad = vec![0.0; at.len()];
    for (k, g) in grad.iter_mut().enumerate() {
        let orig = at.data()[k];
        x.data_mut()[k] = orig + eps;
        let plus = f(&x)?;
        x.data_mut()[k] = orig - eps;
        let minus = f(&x)?;
        x.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(RaaError::NonFinite { coord: k });
        }
        *g = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(at.shape().to_vec(), grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Multi-index of the worst relative error.
    pub argmax: Vec<usize>,
    pub passed: bool,
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (i, &d) in shape.iter().enumerate().rev() {
        idx[i] = flat % d;
        flat /= d;
    }
    idx
}

pub fn compare(name: &str, analytic: &Tensor, numeric: &Tensor, tolerance: f64) -> Result<GroupReport> {
    if analytic.shape() != numeric.shape() {
        return Err(RaaError::shapes("compare", analytic.shape(), numeric.shape()));
    }
    let (mut max_rel, mut max_abs, mut worst) = (0.0f64, 0.0f64, 0);
    for (k, (&a, &b)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let r = rel_error(a, b);
        if r > max_rel {
            max_rel = r;
            worst = k;
        }
        max_abs = max_abs.max((a - b).abs());
    }
    Ok(GroupReport {
        name: name.to_string(),
        count: analytic.len(),
        max_rel,
        max_abs,
        argmax: unravel(worst, analytic.shape()),
        passed: max_rel <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub mode: Mode,
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
    /// Input draws consumed by rejection sampling.
    pub draws: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Errors if any expected group is absent.
    pub fn require_groups<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for n in names {
            if self.group(n).is_none() {
                return Err(RaaError::Invariant(format!("gradient group `{n}` missing from report")));
            }
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>6} {:>12} {:>12}  {:<16} {}", "group", "n", "max_rel", "max_abs", "argmax", "status");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>12.3e} {:>12.3e}  {:<16} {}",
                g.name,
                g.count,
                g.max_rel,
                g.max_abs,
                format!("{:?}", g.argmax),
                if g.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} statistics, tolerance {:.0e}, draws {}, {}",
            match self.mode {
                Mode::Train => "batch",
                Mode::Eval => "running",
            },
            self.tolerance,
            self.draws,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Distances, distance MLP, softmax and reconstruction with every pixel
/// attending to every pixel (self included), by direct double loops over an
/// `[h,w,d']` map. Returns `F̃`.
pub fn global_attention_oracle(fm: &Tensor, params: &RaaParams, activation: MlpActivation) -> Result<Tensor> {
    let [h, w, d] = *fm.shape() else {
        return Err(RaaError::dim("global_attention_oracle", format!("{:?}", fm.shape())));
    };
    let p = h * w;
    if p > ORACLE_MAX_PIXELS {
        return Err(RaaError::Config(format!(
            "all-pairs oracle refuses {h}x{w} grids (limit {ORACLE_MAX_PIXELS} pixels)"
        )));
    }
    let x = fm.data();
    let gamma = softplus(params.gamma_raw.data()[0]);
    let w1 = params.w_mlp1.data();
    let b1 = params.b_mlp1.data();
    let w2 = params.w_mlp2.data();
    let b2 = params.b_mlp2.data()[0];
    let (inner, outer): (fn(f64) -> f64, fn(f64) -> f64) = match activation {
        MlpActivation::GeluRelu => (gelu, |v| if v > 0.0 { v } else { 0.0 }),
        MlpActivation::ReluRelu => (|v| if v > 0.0 { v } else { 0.0 }, |v| if v > 0.0 { v } else { 0.0 }),
        MlpActivation::GeluGelu => (gelu, gelu),
    };
    let mut out = vec![0.0; p * d];
    for i in 0..p {
        let mut logits = vec![0.0; p];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut dist = 0.0;
            for c in 0..d {
                dist += (x[i * d + c] - x[j * d + c]).abs();
            }
            dist /= d as f64;
            let mut z = b2;
            for k in 0..w1.len() {
                z += w2[k] * inner(w1[k] * dist + b1[k]);
            }
            *l = -gamma * outer(z);
        }
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..p {
            for c in 0..d {
                out[i * d + c] += e[j] / z * x[j * d + c];
            }
        }
    }
    Tensor::new(vec![h, w, d], out)
}

/// The whole layer for `[h,w,d]` or `[n,h,w,d]` input with global attention,
/// written independently of it: projection, all-pairs attention,
/// residual, batch norm (batch statistics in train mode, running statistics
/// in eval mode, skipped when disabled), ReLU.
pub fn global_forward_oracle(f: &Tensor, params: &RaaParams, config: &RaaConfig, mode: Mode) -> Result<Tensor> {
    let (n, h, w, d_in) = match *f.shape() {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(RaaError::dim("global_forward_oracle", format!("{:?}", f.shape()))),
    };
    if d_in != config.d_in {
        return Err(RaaError::dim("global_forward_oracle", "channel count"));
    }
    let d = config.d_proj;
    let p = h * w;
    let wp = params.w_proj.data();
    let bp = params.b_proj.data();
    let mut u = vec![0.0; n * p * d];
    for s in 0..n {
        let mut fm = vec![0.0; p * d];
        for i in 0..p {
            for c in 0..d {
                let mut acc = bp[c];
                for k in 0..d_in {
                    acc += f.data()[(s * p + i) * d_in + k] * wp[k * d + c];
                }
                fm[i * d + c] = acc;
            }
        }
        let fm_t = Tensor::new(vec![h, w, d], fm)?;
        let ft = global_attention_oracle(&fm_t, params, config.mlp_activation)?;
        for k in 0..p * d {
            u[s * p * d + k] = ft.data()[k] + fm_t.data()[k];
        }
    }
    let rows = n * p;
    let mut out = u.clone();
    if config.batch_norm {
        for c in 0..d {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = (0..rows).map(|r| u[r * d + c]).sum::<f64>() / rows as f64;
                    let var = (0..rows).map(|r| (u[r * d + c] - mean).powi(2)).sum::<f64>() / rows as f64;
                    (mean, var)
                }
                Mode::Eval => (params.bn_run_mean.data()[c], params.bn_run_var.data()[c]),
            };
            for r in 0..rows {
                let xhat = (u[r * d + c] - mean) / (var + BN_EPS).sqrt();
                out[r * d + c] = params.bn_gamma.data()[c] * xhat + params.bn_beta.data()[c];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut shape = f.shape().to_vec();
    *shape.last_mut().unwrap() = d;
    Tensor::new(shape, out)
}

/// Standard-normal inputs `[batch,H,W,C]` whose forward pass keeps every
/// ReLU and `|·|` argument at least [`KINK_MARGIN`] from zero, in train mode
/// and, once running statistics exist, in eval mode. Returns the accepted
/// input and the number of draws used.
pub fn rejection_sample_inputs(
    seed: u64,
    config: &ModelConfig,
    params: &ModelParams,
    batch: usize,
) -> Result<(Tensor, usize)> {
    let s = config.backbone.input_size;
    let shape = vec![batch, s, s, config.backbone.in_channels];
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for draw in 1..=MAX_DRAWS {
        let data: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(shape.clone(), data)?;
        let mut margin = f64::INFINITY;
        for mode in [Mode::Train, Mode::Eval] {
            if mode == Mode::Eval && config.raa.batch_norm && params.raa.bn_batches == 0 {
                continue;
            }
            let (_, cache) = model_forward(&x, params, config, mode)?;
            margin = margin.min(cache.kink_margin(params, config));
        }
        if margin >= KINK_MARGIN {
            return Ok((x, draw));
        }
    }
    Err(RaaError::Eval(format!(
        "no input cleared the {KINK_MARGIN:e} kink margin in {MAX_DRAWS} draws; use a larger margin or different parameters"
    )))
}

/// Everything needed to re-run one end-to-end check.
#[derive(Debug, Clone)]
pub struct GradcheckSetup {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub input: Tensor,
    pub labels: Vec<usize>,
    pub loss: LossConfig,
    pub draws: usize,
}

/// Batch-norm scale multiplier and shift of the check setup.
const FEATURE_SCALE: f64 = 0.1;
const FEATURE_OFFSET: f64 = 0.3;

/// Tiny configuration, batch of four with both classes, parameters from the
/// `seed + 1` stream. Biases and batch-norm terms are randomized so that no
/// kink sits at a structural zero (a self-pair distance of 0 feeding a
/// zero-bias ReLU), the distance-MLP output bias is lifted so the affinities
/// are not uniform, the output scale and shift put pair distances between
/// the two contrastive margins, and running statistics are drawn so eval mode has a
/// nontrivial affine map.
pub fn gradcheck_setup(seed: u64) -> Result<GradcheckSetup> {
    gradcheck_setup_with(seed, &[0, 1, 0, 1])
}

/// [`gradcheck_setup`] with an explicit label batch.
pub fn gradcheck_setup_with(seed: u64, labels: &[usize]) -> Result<GradcheckSetup> {
    let config = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut params = ModelParams::init(&config, &mut rng)?;
    let jitter = Normal::new(0.0, 0.2).expect("valid sigma");
    for (name, t) in params.learnable_mut() {
        let is_bias = name.ends_with(".b") || name.contains(".b_") || name.starts_with("raa.bn_");
        if is_bias || name == "raa.gamma_raw" {
            for v in t.data_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
    }
    params.raa.b_mlp2.data_mut()[0] += 0.5;
    // small positive features: pair distances fall between m1 and m2 and the
    // final ReLU stays clear of its kink
    params.raa.bn_gamma.data_mut().iter_mut().for_each(|g| *g *= FEATURE_SCALE);
    params.raa.bn_beta.data_mut().iter_mut().for_each(|b| *b = FEATURE_OFFSET + FEATURE_SCALE * *b);
    let d_p = config.raa.d_proj;
    let mean: Vec<f64> = (0..d_p).map(|_| jitter.sample(&mut rng)).collect();
    let var: Vec<f64> = (0..d_p).map(|_| 0.5 + jitter.sample(&mut rng).abs()).collect();
    params.raa.set_running_stats(Tensor::from_vec(mean), Tensor::from_vec(var))?;
    let (input, draws) = rejection_sample_inputs(seed, &config, &params, labels.len())?;
    let labels = labels.to_vec();
    Ok(GradcheckSetup {
        config,
        params,
        input,
        labels,
        loss: LossConfig::default(),
        draws,
    })
}

/// Total loss of `setup` evaluated in double-double precision.
pub fn reference_loss(setup: &GradcheckSetup, mode: Mode) -> Result<f64> {
    Ok(reference::Reference::new(setup, mode)?.loss().to_f64())
}

/// Analytic gradients of the total loss versus central differences for
/// every learnable group and the input, with batch norm in `mode`. The
/// differenced loss is evaluated in double-double precision so that
/// cancellation in `f(x+ε) − f(x−ε)` does not swamp small entries.
pub fn check_setup(setup: &GradcheckSetup, mode: Mode, eps: f64, tolerance: f64) -> Result<GradReport> {
    let (out, cache) = model_forward(&setup.input, &setup.params, &setup.config, mode)?;
    let tl = total_loss(&out.logits, &out.features, &setup.labels, &setup.loss)?;
    let (grads, g_input) = model_backward(
        &tl.grad_logits,
        Some(&tl.grad_features),
        &cache,
        &setup.params,
        &setup.config,
    )?;
    let (numeric, numeric_input) = reference::Reference::new(setup, mode)?.numeric_gradients(eps)?;
    let mut groups = Vec::new();
    for ((name, analytic), numeric) in grads.learnable().into_iter().zip(&numeric) {
        groups.push(compare(&name, analytic, numeric, tolerance)?);
    }
    groups.push(compare("input", &g_input, &numeric_input, tolerance)?);
    let report = GradReport {
        mode,
        groups,
        tolerance,
        draws: setup.draws,
    };
    let expected: Vec<String> = setup.params.learnable().into_iter().map(|(n, _)| n).collect();
    report.require_groups(expected.iter().map(String::as_str).chain(["input"]))?;
    Ok(report)
}

/// Both passes of the suite on one setup.
#[derive(Debug, Clone)]
pub struct GradcheckSuite {
    pub running: GradReport,
    pub batch: GradReport,
}

impl GradcheckSuite {
    pub fn passed(&self) -> bool {
        self.running.passed() && self.batch.passed()
    }

    pub fn table(&self) -> String {
        format!("{}\n{}", self.running.table(), self.batch.table())
    }
}

pub fn run_gradcheck(seed: u64, eps: f64, tolerance: f64) -> Result<GradcheckSuite> {
    let setup = gradcheck_setup(seed)?;
    Ok(GradcheckSuite {
        running: check_setup(&setup, Mode::Eval, eps, tolerance)?,
        batch: check_setup(&setup, Mode::Train, eps, tolerance)?,
    })
}
