//! Model and loss re-evaluated in double-double arithmetic by direct loops,
//! sharing no code with the `f64` forward pass. Central differences of this
//! evaluation carry ~1e-27 roundoff instead of ~1e-11, so tiny gradient
//! entries can be judged at the same relative tolerance as large ones.

use crate::error::{RaaError, Result};
use crate::losses::PairSemantics;
use crate::raa::{MlpActivation, Mode, BN_EPS};
use crate::tensor::Tensor;

use super::dd::Dd;
use super::GradcheckSetup;

/// Which cached intermediate a perturbation invalidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Backbone,
    Attention,
    Tail,
}

/// Positions of each tensor in `ModelParams::learnable` order.
struct Layout {
    conv: Vec<(usize, usize)>,
    w_proj: usize,
    b_proj: usize,
    w_mlp1: usize,
    b_mlp1: usize,
    w_mlp2: usize,
    b_mlp2: usize,
    gamma_raw: usize,
    bn_gamma: usize,
    bn_beta: usize,
    w_h1: usize,
    b_h1: usize,
    w_h2: usize,
    b_h2: usize,
}

pub(crate) struct Reference<'a> {
    setup: &'a GradcheckSetup,
    mode: Mode,
    groups: Vec<Vec<Dd>>,
    shapes: Vec<Vec<usize>>,
    stage: Vec<Stage>,
    at: Layout,
    input: Vec<Dd>,
    per_sample: usize,
}

fn to_dd(t: &Tensor) -> Vec<Dd> {
    t.data().iter().map(|&v| Dd::from(v)).collect()
}

fn refs(v: &[Vec<Dd>]) -> Vec<&[Dd]> {
    v.iter().map(Vec::as_slice).collect()
}

impl<'a> Reference<'a> {
    pub fn new(setup: &'a GradcheckSetup, mode: Mode) -> Result<Self> {
        let config = &setup.config;
        setup.params.check(config)?;
        if mode == Mode::Eval && config.raa.batch_norm && setup.params.raa.bn_batches == 0 {
            return Err(RaaError::State("eval mode needs running statistics".into()));
        }
        let learnable = setup.params.learnable();
        let find = |name: &str| -> Result<usize> {
            learnable
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| RaaError::Invariant(format!("no parameter `{name}`")))
        };
        let conv = (0..config.backbone.stages.len())
            .map(|i| Ok((find(&format!("backbone.conv{i}.w"))?, find(&format!("backbone.conv{i}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        let at = Layout {
            conv,
            w_proj: find("raa.w_proj")?,
            b_proj: find("raa.b_proj")?,
            w_mlp1: find("raa.w_mlp1")?,
            b_mlp1: find("raa.b_mlp1")?,
            w_mlp2: find("raa.w_mlp2")?,
            b_mlp2: find("raa.b_mlp2")?,
            gamma_raw: find("raa.gamma_raw")?,
            bn_gamma: find("raa.bn_gamma")?,
            bn_beta: find("raa.bn_beta")?,
            w_h1: find("head.w_h1")?,
            b_h1: find("head.b_h1")?,
            w_h2: find("head.w_h2")?,
            b_h2: find("head.b_h2")?,
        };
        let stage = learnable
            .iter()
            .map(|(n, _)| {
                if n.starts_with("backbone.") {
                    Stage::Backbone
                } else if n.starts_with("head.") || n == "raa.bn_gamma" || n == "raa.bn_beta" {
                    Stage::Tail
                } else {
                    Stage::Attention
                }
            })
            .collect();
        let bb = &config.backbone;
        let per_sample = bb.input_size * bb.input_size * bb.in_channels;
        if setup.input.len() != per_sample * setup.labels.len() {
            return Err(RaaError::dim("reference", "input does not match the label batch"));
        }
        Ok(Reference {
            setup,
            mode,
            groups: learnable.iter().map(|(_, t)| to_dd(t)).collect(),
            shapes: learnable.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            stage,
            at,
            input: to_dd(&setup.input),
            per_sample,
        })
    }

    fn batch(&self) -> usize {
        self.setup.labels.len()
    }

    fn sample(&self, s: usize) -> &[Dd] {
        &self.input[s * self.per_sample..(s + 1) * self.per_sample]
    }

    fn backbone(&self, x: &[Dd]) -> Vec<Dd> {
        let bb = &self.setup.config.backbone;
        let sizes = bb.sizes();
        let mut cur = x.to_vec();
        let mut c_in = bb.in_channels;
        for (s, st) in bb.stages.iter().enumerate() {
            let (w, b) = (&self.groups[self.at.conv[s].0], &self.groups[self.at.conv[s].1]);
            let (size, out, k, co) = (sizes[s] as isize, sizes[s + 1], st.kernel, st.out_channels);
            let pad = (k / 2) as isize;
            let mut next = vec![Dd::ZERO; out * out * co];
            for oy in 0..out {
                for ox in 0..out {
                    for o in 0..co {
                        let mut acc = b[o];
                        for ky in 0..k {
                            let iy = (oy * st.stride) as isize + ky as isize - pad;
                            for kx in 0..k {
                                let ix = (ox * st.stride) as isize + kx as isize - pad;
                                if iy < 0 || iy >= size || ix < 0 || ix >= size {
                                    continue;
                                }
                                let src = (iy * size + ix) as usize * c_in;
                                for ci in 0..c_in {
                                    acc += w[((ky * k + kx) * c_in + ci) * co + o] * cur[src + ci];
                                }
                            }
                        }
                        next[(oy * out + ox) * co + o] = acc.relu();
                    }
                }
            }
            cur = next;
            c_in = co;
        }
        cur
    }

    /// `F̃ + F^m` for one sample's feature map.
    fn attention(&self, f: &[Dd]) -> Vec<Dd> {
        let cfg = &self.setup.config.raa;
        let g = self.setup.config.grid() as isize;
        let (d_in, d) = (cfg.d_in, cfg.d_proj);
        let p = (g * g) as usize;
        let (wp, bp) = (&self.groups[self.at.w_proj], &self.groups[self.at.b_proj]);
        let mut fm = vec![Dd::ZERO; p * d];
        for i in 0..p {
            for c in 0..d {
                let mut acc = bp[c];
                for k in 0..d_in {
                    acc += f[i * d_in + k] * wp[k * d + c];
                }
                fm[i * d + c] = acc;
            }
        }
        let (w1, b1) = (&self.groups[self.at.w_mlp1], &self.groups[self.at.b_mlp1]);
        let (w2, b2) = (&self.groups[self.at.w_mlp2], self.groups[self.at.b_mlp2][0]);
        let gamma = self.groups[self.at.gamma_raw][0].softplus();
        let inner = |z: Dd| if cfg.mlp_activation == MlpActivation::ReluRelu { z.relu() } else { z.gelu() };
        let outer = |z: Dd| if cfg.mlp_activation == MlpActivation::GeluGelu { z.gelu() } else { z.relu() };
        let r = (cfg.window / 2) as isize;
        let mut u = fm.clone();
        for y in 0..g {
            for x in 0..g {
                let i = (y * g + x) as usize;
                let mut nbrs = Vec::new();
                let mut logits = Vec::new();
                for ny in (y - r).max(0)..=(y + r).min(g - 1) {
                    for nx in (x - r).max(0)..=(x + r).min(g - 1) {
                        if !cfg.include_self && (ny, nx) == (y, x) {
                            continue;
                        }
                        let j = (ny * g + nx) as usize;
                        let mut dist = Dd::ZERO;
                        for c in 0..d {
                            dist += (fm[i * d + c] - fm[j * d + c]).abs();
                        }
                        let dist = dist / d as f64;
                        let mut z = b2;
                        for h in 0..w1.len() {
                            z += w2[h] * inner(w1[h] * dist + b1[h]);
                        }
                        nbrs.push(j);
                        logits.push(-(gamma * outer(z)));
                    }
                }
                let top = logits.iter().copied().fold(logits[0], |m, l| if l > m { l } else { m });
                let e: Vec<Dd> = logits.iter().map(|&l| (l - top).exp()).collect();
                let z = e.iter().fold(Dd::ZERO, |s, &v| s + v);
                for (&j, &ej) in nbrs.iter().zip(&e) {
                    let a = ej / z;
                    for c in 0..d {
                        u[i * d + c] += a * fm[j * d + c];
                    }
                }
            }
        }
        u
    }

    /// Batch norm, ReLU, head and total loss from every sample's `F̃ + F^m`.
    fn tail(&self, us: &[&[Dd]]) -> Dd {
        let config = &self.setup.config;
        let d = config.raa.d_proj;
        let n = us.len();
        let rows = n * config.grid() * config.grid();
        let mut feats: Vec<Vec<Dd>> = us.iter().map(|u| u.to_vec()).collect();
        if config.raa.batch_norm {
            let (gam, beta) = (&self.groups[self.at.bn_gamma], &self.groups[self.at.bn_beta]);
            let raa = &self.setup.params.raa;
            for c in 0..d {
                let (mean, var) = match self.mode {
                    Mode::Train => {
                        let mut sum = Dd::ZERO;
                        for u in us {
                            for r in 0..u.len() / d {
                                sum += u[r * d + c];
                            }
                        }
                        let mean = sum / rows as f64;
                        let mut sq = Dd::ZERO;
                        for u in us {
                            for r in 0..u.len() / d {
                                let dv = u[r * d + c] - mean;
                                sq += dv * dv;
                            }
                        }
                        (mean, sq / rows as f64)
                    }
                    Mode::Eval => (Dd::from(raa.bn_run_mean.data()[c]), Dd::from(raa.bn_run_var.data()[c])),
                };
                let std = (var + BN_EPS).sqrt();
                for f in feats.iter_mut() {
                    for r in 0..f.len() / d {
                        let v = &mut f[r * d + c];
                        *v = gam[c] * ((*v - mean) / std) + beta[c];
                    }
                }
            }
        }
        for f in feats.iter_mut() {
            f.iter_mut().for_each(|v| *v = v.relu());
        }

        let (w1, b1) = (&self.groups[self.at.w_h1], &self.groups[self.at.b_h1]);
        let (w2, b2) = (&self.groups[self.at.w_h2], &self.groups[self.at.b_h2]);
        let (dh, classes) = (config.head_hidden, config.n_classes);
        let mut ce = Dd::ZERO;
        for (f, &y) in feats.iter().zip(&self.setup.labels) {
            let hidden: Vec<Dd> = (0..dh)
                .map(|k| {
                    let mut acc = b1[k];
                    for (p, &v) in f.iter().enumerate() {
                        acc += v * w1[p * dh + k];
                    }
                    acc.relu()
                })
                .collect();
            let logits: Vec<Dd> = (0..classes)
                .map(|c| {
                    let mut acc = b2[c];
                    for (k, &h) in hidden.iter().enumerate() {
                        acc += h * w2[k * classes + c];
                    }
                    acc
                })
                .collect();
            let top = logits.iter().copied().fold(logits[0], |m, l| if l > m { l } else { m });
            let sum = logits.iter().fold(Dd::ZERO, |s, &l| s + (l - top).exp());
            ce += top + sum.ln() - logits[y];
        }
        let ce = ce / n as f64;

        let loss = &self.setup.loss;
        if loss.lambda == 0.0 || n < 2 {
            return ce;
        }
        let labels = &self.setup.labels;
        let mut cl = Dd::ZERO;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut sq = Dd::ZERO;
                for (&a, &b) in feats[i].iter().zip(&feats[j]) {
                    sq += (a - b) * (a - b);
                }
                let dist = sq.sqrt();
                let same = match loss.pair_semantics {
                    PairSemantics::Product => labels[i] * labels[j] == 1,
                    PairSemantics::Indicator => labels[i] == labels[j],
                };
                let term = if same { (dist - loss.m1).relu() } else { (-dist + loss.m2).relu() };
                cl += term * term;
            }
        }
        ce + cl / n as f64 * loss.lambda
    }

    pub fn loss(&self) -> Dd {
        let us: Vec<Vec<Dd>> = (0..self.batch()).map(|s| self.attention(&self.backbone(self.sample(s)))).collect();
        self.tail(&refs(&us))
    }

    /// Central differences with step `eps` for every learnable group and
    /// the input, recomputing only the stages a coordinate reaches.
    pub fn numeric_gradients(&mut self, eps: f64) -> Result<(Vec<Tensor>, Tensor)> {
        let n = self.batch();
        let fmaps: Vec<Vec<Dd>> = (0..n).map(|s| self.backbone(self.sample(s))).collect();
        let us: Vec<Vec<Dd>> = fmaps.iter().map(|f| self.attention(f)).collect();
        let central = |plus: Dd, minus: Dd, coord: usize| -> Result<f64> {
            let g = ((plus - minus) / (2.0 * eps)).to_f64();
            if g.is_finite() {
                Ok(g)
            } else {
                Err(RaaError::NonFinite { coord })
            }
        };

        let mut out = Vec::with_capacity(self.groups.len());
        for gi in 0..self.groups.len() {
            let mut grad = vec![0.0; self.groups[gi].len()];
            for (k, gk) in grad.iter_mut().enumerate() {
                let orig = self.groups[gi][k];
                let mut at = [Dd::ZERO; 2];
                for (v, step) in at.iter_mut().zip([eps, -eps]) {
                    self.groups[gi][k] = orig + step;
                    *v = match self.stage[gi] {
                        Stage::Backbone => {
                            let u: Vec<Vec<Dd>> =
                                (0..n).map(|s| self.attention(&self.backbone(self.sample(s)))).collect();
                            self.tail(&refs(&u))
                        }
                        Stage::Attention => {
                            let u: Vec<Vec<Dd>> = fmaps.iter().map(|f| self.attention(f)).collect();
                            self.tail(&refs(&u))
                        }
                        Stage::Tail => self.tail(&refs(&us)),
                    };
                }
                self.groups[gi][k] = orig;
                *gk = central(at[0], at[1], k)?;
            }
            out.push(Tensor::new(self.shapes[gi].clone(), grad)?);
        }

        let mut grad = vec![0.0; self.input.len()];
        for (k, gk) in grad.iter_mut().enumerate() {
            let s = k / self.per_sample;
            let mut x = self.sample(s).to_vec();
            let orig = x[k % self.per_sample];
            let mut at = [Dd::ZERO; 2];
            for (v, step) in at.iter_mut().zip([eps, -eps]) {
                x[k % self.per_sample] = orig + step;
                let u_s = self.attention(&self.backbone(&x));
                let mut parts = refs(&us);
                parts[s] = &u_s;
                *v = self.tail(&parts);
            }
            *gk = central(at[0], at[1], k)?;
        }
        Ok((out, Tensor::new(self.setup.input.shape().to_vec(), grad)?))
    }
}
