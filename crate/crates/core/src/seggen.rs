//! Unconditional discrete segmentation-map generator and its WGAN-GP critic.
//!
//! The generator emits per-pixel class logits. A Gumbel-softmax relaxation
//! turns them into a soft sample `S`; the forward pass then takes the hard
//! argmax of `S` (so the critic only ever sees discrete maps) while the
//! backward pass treats the argmax as the identity on `S`.

use crate::autograd::{Tensor, Var};
use crate::data::{self, Dataset, SegMap};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{all_finite, Adam, AdamConfig, Conv2d, Leaves, Linear, ParamStore};
use crate::rng::{self, Rng};
use ndarray::{Axis, IxDyn, Zip};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GumbelConfig {
    pub tau: f64,
    pub eps: f64,
    /// Diagnostic switch: when false the straight-through backward is zero,
    /// cutting every gradient path from the discrete map to the generator.
    #[serde(default = "yes")]
    pub straight_through_backward: bool,
}

fn yes() -> bool {
    true
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { tau: 1.0, eps: 1e-20, straight_through_backward: true }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("gumbel eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// `-ln(-ln(u + eps) + eps)`.
pub fn gumbel_transform(u: f64, eps: f64) -> f64 {
    -(-(u + eps).ln() + eps).ln()
}

/// Standard Gumbel noise of `shape`, a pure function of `seed`.
pub fn sample_gumbel(shape: &[usize], seed: u64, eps: f64) -> Tensor {
    let mut r = rng::stream(seed, &[rng::tag("gumbel")]);
    gumbel_from_rng(shape, &mut r, eps)
}

pub fn gumbel_from_rng(shape: &[usize], r: &mut Rng, eps: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| gumbel_transform(r.random::<f64>(), eps)).collect();
    Tensor::from_shape_vec(IxDyn(shape), v).expect("shape")
}

/// Class axis convention: `[K]`, `[K, H, W]` or `[N, K, H, W]`.
pub fn class_axis(ndim: usize) -> usize {
    match ndim {
        4 => 1,
        1 | 3 => 0,
        n => panic!("unsupported rank {n} for a class-probability tensor"),
    }
}

fn check_simplex(p: &Tensor, axis: usize) -> Result<()> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Argument("probability map has negative or non-finite entries".into()));
    }
    for s in p.sum_axis(Axis(axis)).iter() {
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Argument(format!("probability map sums to {s} at some pixel")));
        }
    }
    Ok(())
}

/// Relaxed sample `S = softmax((log P + G) / τ)` along the class axis.
pub fn gumbel_softmax(p: &Var, g: &Tensor, cfg: &GumbelConfig) -> Result<Var> {
    cfg.validate()?;
    let axis = class_axis(p.shape().len());
    check_simplex(p.value(), axis)?;
    if g.shape() != p.shape() {
        return Err(Error::Argument(format!("noise shape {:?} vs P {:?}", g.shape(), p.shape())));
    }
    Ok(gumbel_softmax_log(&p.clamp_min(f64::MIN_POSITIVE).ln(), g, cfg.tau))
}

/// Same relaxation starting from log-probabilities (numerically safer).
pub fn gumbel_softmax_log(log_p: &Var, g: &Tensor, tau: f64) -> Var {
    let axis = class_axis(log_p.shape().len());
    log_p.add(&Var::constant(g.clone())).scale(1.0 / tau).softmax(axis)
}

/// One-hot of the per-pixel argmax; ties go to the smallest index.
pub fn hard_one_hot(t: &Tensor, axis: usize) -> Tensor {
    let mut out = Tensor::zeros(t.raw_dim());
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(t.lanes(Axis(axis)))
        .for_each(|mut o, l| {
            let mut best = 0;
            for (i, &v) in l.iter().enumerate().skip(1) {
                if v > l[best] {
                    best = i;
                }
            }
            o[best] = 1.0;
        });
    out
}

/// Forward: exact one-hot argmax of `s`. Backward: identity onto `s`
/// (or zero when `backward` is false).
pub fn straight_through_discretize(s: &Var, backward: bool) -> Var {
    let hard = hard_one_hot(s.value(), class_axis(s.shape().len()));
    s.straight_through(hard, if backward { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// progressive schedule
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSchedule {
    pub stage_resolutions: Vec<(usize, usize)>,
    pub steps_per_stage: u64,
    pub fadein_fraction: f64,
}

impl ProgressiveSchedule {
    /// Doubling stages from `base` up to `final_res`.
    pub fn doubling(base: (usize, usize), final_res: (usize, usize), steps_per_stage: u64, fadein_fraction: f64) -> Result<Self> {
        let mut stage_resolutions = vec![base];
        let mut cur = base;
        while cur.0 < final_res.0 || cur.1 < final_res.1 {
            cur = (cur.0 * 2, cur.1 * 2);
            stage_resolutions.push(cur);
        }
        let s = ProgressiveSchedule { stage_resolutions, steps_per_stage, fadein_fraction };
        s.validate()?;
        if cur != final_res {
            return Err(Error::Config(format!(
                "final resolution {final_res:?} is not base {base:?} times a power of two"
            )));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_resolutions.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        for w in self.stage_resolutions.windows(2) {
            if w[1] != (w[0].0 * 2, w[0].1 * 2) {
                return Err(Error::Config(format!("stage {:?} does not double {:?}", w[1], w[0])));
            }
        }
        if !(0.0..=1.0).contains(&self.fadein_fraction) {
            return Err(Error::Config(format!("fadein_fraction {} outside [0, 1]", self.fadein_fraction)));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_resolutions.len()
    }

    pub fn final_resolution(&self) -> (usize, usize) {
        *self.stage_resolutions.last().unwrap()
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_stage * self.num_stages() as u64
    }

    /// (stage, alpha) used by training step `step`.
    pub fn stage_at(&self, step: u64) -> (usize, f64) {
        if self.steps_per_stage == 0 {
            return (self.num_stages() - 1, 1.0);
        }
        let stage = ((step / self.steps_per_stage) as usize).min(self.num_stages() - 1);
        let local = step - stage as u64 * self.steps_per_stage;
        let fade = self.fadein_fraction * self.steps_per_stage as f64;
        let alpha = if stage == 0 || fade <= 0.0 { 1.0 } else { (local as f64 / fade).min(1.0) };
        (stage, alpha)
    }
}

// ---------------------------------------------------------------------------
// networks
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub k: usize,
    pub latent_dim: usize,
    pub base: (usize, usize),
    /// Feature width per stage; its length fixes the number of stages.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl SegNetConfig {
    pub fn resolution(&self, stage: usize) -> (usize, usize) {
        (self.base.0 << stage, self.base.1 << stage)
    }
}

fn lrelu(x: &Var) -> Var {
    x.leaky_relu(0.2)
}

fn pixel_norm(x: &Var) -> Var {
    x.div(&x.square().mean_axes_keep(&[1]).add_scalar(1e-8).sqrt())
}

/// Progressive generator emitting `K`-channel logits at the current stage.
#[derive(Clone, Debug)]
pub struct SegGenerator {
    pub cfg: SegNetConfig,
    pub store: ParamStore,
    fc: Linear,
    conv0: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    heads: Vec<Conv2d>,
    stage: usize,
    alpha: f64,
}

impl SegGenerator {
    pub fn new(cfg: SegNetConfig) -> Self {
        let mut r = rng::stream(cfg.seed, &[rng::tag("seg-generator")]);
        let mut store = ParamStore::new();
        let c0 = cfg.channels[0];
        let fc = Linear::new(&mut store, "fc", cfg.latent_dim, c0 * cfg.base.0 * cfg.base.1, &mut r);
        let conv0 = Conv2d::new(&mut store, "conv0", c0, c0, 3, &mut r);
        let mut blocks = Vec::new();
        for s in 1..cfg.channels.len() {
            let (ci, co) = (cfg.channels[s - 1], cfg.channels[s]);
            blocks.push((
                Conv2d::new(&mut store, &format!("block{s}.a"), ci, co, 3, &mut r),
                Conv2d::new(&mut store, &format!("block{s}.b"), co, co, 3, &mut r),
            ));
        }
        let heads = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(s, &c)| Conv2d::with_gain(&mut store, &format!("head{s}"), c, cfg.k, 1, 0.5, &mut r))
            .collect();
        SegGenerator { cfg, store, fc, conv0, blocks, heads, stage: 0, alpha: 1.0 }
    }

    pub fn num_stages(&self) -> usize {
        self.cfg.channels.len()
    }

    pub fn stage(&self) -> (usize, f64) {
        (self.stage, self.alpha)
    }

    pub fn set_stage(&mut self, stage: usize, alpha: f64) -> Result<()> {
        check_stage(stage, alpha, self.num_stages())?;
        self.stage = stage;
        self.alpha = alpha;
        Ok(())
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.cfg.resolution(self.stage)
    }

    /// `[N, latent] -> [N, K, H_s, W_s]` logits.
    pub fn logits(&self, p: &Leaves, z: &Var) -> Result<Var> {
        check_stage(self.stage, self.alpha, self.num_stages())?;
        let n = z.shape()[0];
        if z.shape() != [n, self.cfg.latent_dim] {
            return Err(Error::Argument(format!(
                "latent has shape {:?}, expected [N, {}]",
                z.shape(),
                self.cfg.latent_dim
            )));
        }
        let (h0, w0) = self.cfg.base;
        let mut x = lrelu(&self.fc.forward(p, z)).reshape(&[n, self.cfg.channels[0], h0, w0]);
        x = pixel_norm(&x);
        x = pixel_norm(&lrelu(&self.conv0.forward(p, &x)));
        let mut prev = x.clone();
        for (a, b) in &self.blocks[..self.stage] {
            prev = x.clone();
            let up = x.upsample(2);
            x = pixel_norm(&lrelu(&a.forward(p, &up)));
            x = pixel_norm(&lrelu(&b.forward(p, &x)));
        }
        let out = self.heads[self.stage].forward(p, &x);
        if self.stage == 0 || self.alpha >= 1.0 {
            return Ok(out);
        }
        let skip = self.heads[self.stage - 1].forward(p, &prev).upsample(2);
        Ok(out.scale(self.alpha).add(&skip.scale(1.0 - self.alpha)))
    }
}

fn check_stage(stage: usize, alpha: f64, n: usize) -> Result<()> {
    if stage >= n || !(0.0..=1.0).contains(&alpha) || (stage == 0 && alpha < 1.0) {
        return Err(Error::State(format!(
            "stage {stage} / alpha {alpha} inconsistent with a {n}-stage schedule"
        )));
    }
    Ok(())
}

/// Output of [`generate_segmap`] for a batch.
pub struct SegSample {
    pub maps: Vec<SegMap>,
    /// straight-through one-hot (forward exact, backward soft)
    pub hard: Var,
    /// relaxed Gumbel-softmax sample S
    pub soft: Var,
    /// per-pixel class probabilities P
    pub probs: Var,
}

/// Sample maps: `P = softmax(logits)`, `S` by Gumbel-softmax with noise from
/// `seed`, maps by straight-through argmax of `S`.
pub fn generate_segmap(gen: &SegGenerator, p: &Leaves, z: &Var, cfg: &GumbelConfig, seed: u64) -> Result<SegSample> {
    cfg.validate()?;
    let log_p = gen.logits(p, z)?.log_softmax(1);
    let g = sample_gumbel(log_p.shape(), seed, cfg.eps);
    let soft = gumbel_softmax_log(&log_p, &g, cfg.tau);
    let hard = straight_through_discretize(&soft, cfg.straight_through_backward);
    let maps = data::argmax_maps(hard.value());
    Ok(SegSample { maps, hard, soft, probs: log_p.exp() })
}

/// Standard-normal latents, a pure function of `seed`.
pub fn sample_latent(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[rng::tag("latent")]);
    // Box-Muller
    let v = (0..n * dim)
        .map(|_| {
            let u1: f64 = r.random::<f64>().max(1e-300);
            let u2: f64 = r.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(&[n, dim]), v).expect("shape")
}

/// Progressive critic over `K`-channel maps; scalar, unsquashed score.
#[derive(Clone, Debug)]
pub struct SegCritic {
    pub cfg: SegNetConfig,
    pub store: ParamStore,
    from: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    conv_final: Conv2d,
    fc: Linear,
    stage: usize,
    alpha: f64,
}

impl SegCritic {
    pub fn new(cfg: SegNetConfig) -> Self {
        let mut r = rng::stream(cfg.seed, &[rng::tag("seg-critic")]);
        let mut store = ParamStore::new();
        let from = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(s, &c)| Conv2d::new(&mut store, &format!("from{s}"), cfg.k, c, 1, &mut r))
            .collect();
        let mut blocks = Vec::new();
        for s in 1..cfg.channels.len() {
            let (co, ci) = (cfg.channels[s - 1], cfg.channels[s]);
            blocks.push((
                Conv2d::new(&mut store, &format!("block{s}.a"), ci, ci, 3, &mut r),
                Conv2d::new(&mut store, &format!("block{s}.b"), ci, co, 3, &mut r),
            ));
        }
        let c0 = cfg.channels[0];
        let conv_final = Conv2d::new(&mut store, "final", c0, c0, 3, &mut r);
        let fc = Linear::new(&mut store, "fc", c0 * cfg.base.0 * cfg.base.1, 1, &mut r);
        SegCritic { cfg, store, from, blocks, conv_final, fc, stage: 0, alpha: 1.0 }
    }

    pub fn set_stage(&mut self, stage: usize, alpha: f64) -> Result<()> {
        check_stage(stage, alpha, self.cfg.channels.len())?;
        self.stage = stage;
        self.alpha = alpha;
        Ok(())
    }

    pub fn stage(&self) -> (usize, f64) {
        (self.stage, self.alpha)
    }

    /// `[N, K, H_s, W_s] -> [N, 1]`.
    pub fn forward(&self, p: &Leaves, x: &Var) -> Var {
        let s = self.stage;
        let mut h = lrelu(&self.from[s].forward(p, x));
        if s > 0 {
            let (a, b) = &self.blocks[s - 1];
            h = lrelu(&b.forward(p, &lrelu(&a.forward(p, &h)))).avg_pool(2);
            if self.alpha < 1.0 {
                let skip = lrelu(&self.from[s - 1].forward(p, &x.avg_pool(2)));
                h = h.scale(self.alpha).add(&skip.scale(1.0 - self.alpha));
            }
            for (a, b) in self.blocks[..s - 1].iter().rev() {
                h = lrelu(&b.forward(p, &lrelu(&a.forward(p, &h)))).avg_pool(2);
            }
        }
        let h = lrelu(&self.conv_final.forward(p, &h));
        let n = h.shape()[0];
        let flat = h.reshape(&[n, h.value().len() / n]);
        self.fc.forward(p, &flat)
    }
}

/// Anything that maps a batch to per-sample scores (`[N]` or `[N, 1]`).
pub trait Critic {
    fn score(&self, x: &Var) -> Var;
}

/// A critic bound to one set of graph leaves.
pub struct BoundCritic<'a> {
    pub critic: &'a SegCritic,
    pub leaves: &'a Leaves,
}

impl Critic for BoundCritic<'_> {
    fn score(&self, x: &Var) -> Var {
        self.critic.forward(self.leaves, x)
    }
}

impl<F: Fn(&Var) -> Var> Critic for F {
    fn score(&self, x: &Var) -> Var {
        self(x)
    }
}

pub struct WganLosses {
    pub critic_loss: Var,
    pub gen_loss: Var,
    pub gp: Var,
}

/// Gradient penalty `mean_i (‖∇ critic(x̂_i)‖₂ − 1)²` with
/// `x̂_i = ε_i real_i + (1 − ε_i) fake_i`. The result is differentiable with
/// respect to the critic's parameters.
pub fn gradient_penalty<C: Critic + ?Sized>(critic: &C, real: &Var, fake: &Var, eps: &[f64]) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::Argument(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let n = real.shape()[0];
    if eps.len() != n {
        return Err(Error::Argument(format!("{} interpolation weights for batch {n}", eps.len())));
    }
    let mut eshape = vec![1; real.shape().len()];
    eshape[0] = n;
    let e = Tensor::from_shape_vec(IxDyn(&eshape), eps.to_vec()).expect("shape");
    let mix = real.value() * &e + fake.value() * &(1.0 - &e);
    let xhat = Var::param(mix);
    let score = critic.score(&xhat).sum();
    let grads = score.backward_with_graph();
    let g = match grads.get(&xhat) {
        Some(g) => g.clone(),
        None => Var::constant(Tensor::zeros(xhat.value().raw_dim())),
    };
    let axes: Vec<usize> = (1..g.shape().len()).collect();
    let norm = g.square().sum_axes_keep(&axes).add_scalar(1e-16).sqrt();
    Ok(norm.add_scalar(-1.0).square().mean())
}

/// WGAN-GP objectives. `critic_loss = E[c(fake)] − E[c(real)] + w·gp`,
/// `gen_loss = −E[c(fake)]`.
pub fn wgan_gp_losses<C: Critic + ?Sized>(critic: &C, real: &Var, fake: &Var, gp_weight: f64, eps: &[f64]) -> Result<WganLosses> {
    if real.shape() != fake.shape() {
        return Err(Error::Argument(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    if !(gp_weight >= 0.0) {
        return Err(Error::Argument(format!("gp_weight must be >= 0, got {gp_weight}")));
    }
    let fake_mean = critic.score(fake).mean();
    let real_mean = critic.score(real).mean();
    let gp = gradient_penalty(critic, real, fake, eps)?;
    Ok(WganLosses {
        critic_loss: fake_mean.sub(&real_mean).add(&gp.scale(gp_weight)),
        gen_loss: fake_mean.neg(),
        gp,
    })
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub batch_size: usize,
    pub adam_g: AdamConfig,
    pub adam_c: AdamConfig,
    pub gp_weight: f64,
    /// critic updates per generator update
    pub n_critic: usize,
    pub gumbel: GumbelConfig,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            batch_size: 16,
            adam_g: AdamConfig::new(1e-3, 0.0, 0.99),
            adam_c: AdamConfig::new(1e-3, 0.0, 0.99),
            gp_weight: 10.0,
            n_critic: 1,
            gumbel: GumbelConfig::default(),
            eval_interval: 100,
            eval_samples: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetricsRow {
    pub step: u64,
    pub stage: usize,
    pub alpha: f64,
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub gp: f64,
    pub hist_kl: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegStepLosses {
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub gp: f64,
}

/// Random mini-batch indices for one step.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64, purpose: &str) -> Vec<usize> {
    let mut r = rng::stream(seed, &[rng::tag(purpose), step]);
    if batch <= n {
        sample(&mut r, n, batch).into_vec()
    } else {
        (0..batch).map(|_| r.random_range(0..n)).collect()
    }
}

/// Interpolation weights for the gradient penalty at one step.
pub fn interp_weights(n: usize, seed: u64, step: u64, purpose: &str) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::tag(purpose), step]);
    (0..n).map(|_| r.random::<f64>()).collect()
}

/// Real one-hot maps for a batch, resized to the stage resolution.
pub fn real_batch(data: &Dataset, idx: &[usize], res: (usize, usize)) -> Result<Tensor> {
    let maps: Vec<&SegMap> = idx.iter().map(|&i| &data.samples[i].segmap).collect();
    data::one_hot_at(&maps, res.0, res.1)
}

/// Owns both networks and optimizers; one call to [`SegTrainer::step`] runs
/// the critic update(s) and one generator update.
#[derive(Clone, Debug)]
pub struct SegTrainer {
    pub gen: SegGenerator,
    pub critic: SegCritic,
    pub opt_g: Adam,
    pub opt_c: Adam,
    pub schedule: ProgressiveSchedule,
    pub cfg: SegTrainConfig,
    pub step: u64,
}

impl SegTrainer {
    pub fn new(gen: SegGenerator, critic: SegCritic, schedule: ProgressiveSchedule, cfg: SegTrainConfig) -> Result<Self> {
        schedule.validate()?;
        cfg.gumbel.validate()?;
        if schedule.num_stages() != gen.num_stages() || gen.cfg != critic.cfg {
            return Err(Error::Config(format!(
                "schedule has {} stages, networks have {}",
                schedule.num_stages(),
                gen.num_stages()
            )));
        }
        if schedule.stage_resolutions[0] != gen.cfg.base {
            return Err(Error::Config("schedule base resolution differs from network base".into()));
        }
        let opt_g = Adam::new(cfg.adam_g, &gen.store);
        let opt_c = Adam::new(cfg.adam_c, &critic.store);
        Ok(SegTrainer { gen, critic, opt_g, opt_c, schedule, cfg, step: 0 })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps()
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let fin = self.schedule.final_resolution();
        if data.k != self.gen.cfg.k || (data.h, data.w) != fin {
            return Err(Error::Argument(format!(
                "dataset K={} {}x{} incompatible with schedule final {:?} and K={}",
                data.k, data.h, data.w, fin, self.gen.cfg.k
            )));
        }
        Ok(())
    }

    /// Move both networks to the stage/alpha of the current step.
    pub fn sync_stage(&mut self) -> Result<(usize, f64)> {
        let (s, a) = self.schedule.stage_at(self.step);
        self.gen.set_stage(s, a)?;
        self.critic.set_stage(s, a)?;
        Ok((s, a))
    }

    pub fn step(&mut self, data: &Dataset) -> Result<SegStepLosses> {
        let (stage, _) = self.sync_stage()?;
        let res = self.schedule.stage_resolutions[stage];
        let seed = self.cfg.seed;
        let bs = self.cfg.batch_size;
        let mut out = SegStepLosses::default();
        for c in 0..self.cfg.n_critic.max(1) {
            let sub = self.step * 1000 + c as u64;
            let real = Var::constant(real_batch(data, &batch_indices(data.len(), bs, seed, sub, "seg-real"), res)?);
            let gl = self.gen.store.leaves(false);
            let z = Var::constant(sample_latent(bs, self.gen.cfg.latent_dim, rng::derive_seed(seed, &[rng::tag("seg-z-c"), sub])));
            let fake = generate_segmap(&self.gen, &gl, &z, &self.cfg.gumbel, rng::derive_seed(seed, &[rng::tag("seg-g-c"), sub]))?
                .hard
                .detach();
            let cl = self.critic.store.leaves(true);
            let bound = BoundCritic { critic: &self.critic, leaves: &cl };
            let eps = interp_weights(bs, seed, sub, "seg-interp");
            let l = wgan_gp_losses(&bound, &real, &fake, self.cfg.gp_weight, &eps)?;
            let grads = cl.grads(&l.critic_loss.backward());
            if !all_finite(&grads) || !l.critic_loss.item().is_finite() {
                return Err(Error::Numeric(format!("non-finite critic loss at step {}", self.step)));
            }
            self.opt_c.step(&mut self.critic.store, &grads);
            out.critic_loss = l.critic_loss.item();
            out.gp = l.gp.item();
        }
        let gl = self.gen.store.leaves(true);
        let cl = self.critic.store.leaves(false);
        let z = Var::constant(sample_latent(bs, self.gen.cfg.latent_dim, rng::derive_seed(seed, &[rng::tag("seg-z-g"), self.step])));
        let fake = generate_segmap(&self.gen, &gl, &z, &self.cfg.gumbel, rng::derive_seed(seed, &[rng::tag("seg-g-g"), self.step]))?;
        let gen_loss = self.critic.forward(&cl, &fake.hard).mean().neg();
        let grads = gl.grads(&gen_loss.backward());
        if !all_finite(&grads) {
            return Err(Error::Numeric(format!("non-finite generator gradient at step {}", self.step)));
        }
        self.opt_g.step(&mut self.gen.store, &grads);
        out.gen_loss = gen_loss.item();
        self.step += 1;
        Ok(out)
    }

    /// Sample `n` maps at the current stage (eval mode: fixed seed stream).
    pub fn sample_maps(&self, n: usize, seed: u64) -> Result<Vec<SegMap>> {
        sample_maps(&self.gen, n, seed, &self.cfg.gumbel)
    }

    /// KL(generated ‖ real) of class frequencies at the current stage.
    pub fn hist_kl(&self, data: &Dataset) -> Result<f64> {
        let res = self.gen.resolution();
        let gen = self.sample_maps(self.cfg.eval_samples, rng::derive_seed(self.cfg.seed, &[rng::tag("seg-eval")]))?;
        let factor = data.h / res.0;
        let real: Vec<SegMap> = data
            .samples
            .iter()
            .map(|s| data::downsample_labels(&s.segmap, factor))
            .collect::<Result<_>>()?;
        let g: Vec<&SegMap> = gen.iter().collect();
        let r: Vec<&SegMap> = real.iter().collect();
        Ok(eval::layout_divergence(&g, &r)?.kl_class_freq)
    }

    pub fn metrics_row(&self, losses: &SegStepLosses, data: &Dataset) -> Result<SegMetricsRow> {
        let (stage, alpha) = self.gen.stage();
        Ok(SegMetricsRow {
            step: self.step,
            stage,
            alpha,
            critic_loss: losses.critic_loss,
            gen_loss: losses.gen_loss,
            gp: losses.gp,
            hist_kl: self.hist_kl(data)?,
        })
    }

    /// Put the networks at the final stage with alpha = 1.
    pub fn finish(&mut self) -> Result<()> {
        let last = self.schedule.num_stages() - 1;
        self.gen.set_stage(last, 1.0)?;
        self.critic.set_stage(last, 1.0)
    }
}

/// Sample `n` maps from `gen` at its current stage, in batches.
pub fn sample_maps(gen: &SegGenerator, n: usize, seed: u64, cfg: &GumbelConfig) -> Result<Vec<SegMap>> {
    let leaves = gen.store.leaves(false);
    let mut out = Vec::with_capacity(n);
    let mut b = 0u64;
    while out.len() < n {
        let m = (n - out.len()).min(64);
        let z = Var::constant(sample_latent(m, gen.cfg.latent_dim, rng::derive_seed(seed, &[rng::tag("z"), b])));
        let s = generate_segmap(gen, &leaves, &z, cfg, rng::derive_seed(seed, &[rng::tag("g"), b]))?;
        out.extend(s.maps);
        b += 1;
    }
    Ok(out)
}

/// Run the full schedule, logging one row every `eval_interval` steps and at
/// the end.
pub fn train_seg(
    gen: SegGenerator,
    critic: SegCritic,
    data: &Dataset,
    schedule: ProgressiveSchedule,
    cfg: SegTrainConfig,
) -> Result<(SegGenerator, SegCritic, Vec<SegMetricsRow>)> {
    let mut t = SegTrainer::new(gen, critic, schedule, cfg)?;
    t.check_data(data)?;
    let mut log = Vec::new();
    let total = t.total_steps();
    while t.step < total {
        let l = t.step(data)?;
        if t.step % t.cfg.eval_interval.max(1) == 0 || t.step == total {
            log.push(t.metrics_row(&l, data)?);
        }
    }
    t.finish()?;
    Ok((t.gen, t.critic, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_err, numeric_grad};
    use ndarray::arr1;

    #[test]
    fn gumbel_fixed_point_and_determinism() {
        assert_eq!(gumbel_transform((-1.0f64).exp(), 1e-20), 0.0);
        assert_eq!(sample_gumbel(&[3, 4], 5, 1e-20), sample_gumbel(&[3, 4], 5, 1e-20));
        assert_ne!(sample_gumbel(&[3, 4], 5, 1e-20), sample_gumbel(&[3, 4], 6, 1e-20));
        // u = 0 stays finite thanks to eps
        assert!(gumbel_transform(0.0, 1e-20).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let g = sample_gumbel(&[1_000_000], 1, 1e-20);
        let mean = g.mean().unwrap();
        assert!((mean - 0.5772156649).abs() < 0.01, "{mean}");
    }

    #[test]
    fn zero_noise_unit_temperature_is_identity() {
        let p = Var::constant(arr1(&[0.2, 0.3, 0.5]).into_dyn());
        let s = gumbel_softmax(&p, &Tensor::zeros(IxDyn(&[3])), &GumbelConfig::default()).unwrap();
        for (a, b) in s.value().iter().zip(p.value().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_two_class_case() {
        let p = Var::constant(arr1(&[0.5, 0.5]).into_dyn());
        let g = arr1(&[3f64.ln(), 0.0]).into_dyn();
        let s = gumbel_softmax(&p, &g, &GumbelConfig::default()).unwrap();
        assert!((s.value()[0] - 0.75).abs() < 1e-12);
        assert!((s.value()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_approaches_argmax() {
        let p = arr1(&[0.1, 0.25, 0.4, 0.25]).into_dyn();
        let g = arr1(&[0.3, -0.1, 0.0, 0.2]).into_dyn();
        let cfg = GumbelConfig { tau: 0.01, ..Default::default() };
        let s = gumbel_softmax(&Var::constant(p.clone()), &g, &cfg).unwrap();
        let direct = (&p.mapv(f64::ln) + &g).iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        let smax = s.value().iter().cloned().fold(0.0, f64::max);
        assert!(smax >= 0.99);
        assert_eq!(s.value()[direct], smax);
    }

    #[test]
    fn non_simplex_is_rejected() {
        let p = Var::constant(arr1(&[0.5, 0.6]).into_dyn());
        let g = Tensor::zeros(IxDyn(&[2]));
        assert!(matches!(gumbel_softmax(&p, &g, &GumbelConfig::default()), Err(Error::Argument(_))));
        let bad = GumbelConfig { tau: 0.0, ..Default::default() };
        let q = Var::constant(arr1(&[0.5, 0.5]).into_dyn());
        assert!(matches!(gumbel_softmax(&q, &g, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn relaxed_sample_rows_sum_to_one() {
        for tau in [0.05, 0.5, 1.0, 5.0] {
            let p = Var::constant(arr1(&[0.7, 0.2, 0.1]).into_dyn());
            let g = sample_gumbel(&[3], 9, 1e-20);
            let s = gumbel_softmax(&p, &g, &GumbelConfig { tau, ..Default::default() }).unwrap();
            assert!((s.value().sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gumbel_softmax_gradient_matches_finite_differences() {
        let g = sample_gumbel(&[3], 4, 1e-20);
        let w = arr1(&[1.0, -2.0, 0.5]).into_dyn();
        for seed in 0..5u64 {
            let logits = sample_gumbel(&[3], 100 + seed, 1e-20);
            let f = |x: &Var| {
                let p = x.softmax(0);
                gumbel_softmax(&p, &g, &GumbelConfig::default()).unwrap().mul(&Var::constant(w.clone())).sum()
            };
            let x = Var::param(logits.clone());
            let analytic = f(&x).backward().wrt(&x);
            let num = numeric_grad(&logits, 1e-5, |t| f(&Var::constant(t.clone())).item());
            assert!(max_rel_err(&analytic, &num, 1e-6) < 1e-3);
        }
    }

    #[test]
    fn straight_through_forward_backward_and_ties() {
        let s = Var::param(arr1(&[0.1, 0.7, 0.2]).into_dyn());
        let hard = straight_through_discretize(&s, true);
        assert_eq!(hard.value(), &arr1(&[0.0, 1.0, 0.0]).into_dyn());
        let w = arr1(&[3.0, -1.0, 2.0]).into_dyn();
        let g = hard.mul(&Var::constant(w.clone())).sum().backward().wrt(&s);
        assert_eq!(g, w);
        let tie = straight_through_discretize(&Var::constant(arr1(&[0.5, 0.5]).into_dyn()), true);
        assert_eq!(tie.value(), &arr1(&[1.0, 0.0]).into_dyn());
    }

    fn tiny_cfg() -> SegNetConfig {
        SegNetConfig { k: 3, latent_dim: 8, base: (4, 4), channels: vec![8, 8], seed: 1 }
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let mut gen = SegGenerator::new(tiny_cfg());
        let p = gen.store.leaves(false);
        let z = Var::constant(sample_latent(2, 8, 3));
        let a = generate_segmap(&gen, &p, &z, &GumbelConfig::default(), 5).unwrap();
        assert_eq!(a.probs.shape(), &[2, 3, 4, 4]);
        assert!(a.maps.iter().all(|m| m.labels().iter().all(|&l| l < 3)));
        let b = generate_segmap(&gen, &p, &z, &GumbelConfig::default(), 5).unwrap();
        assert_eq!(a.maps, b.maps);
        gen.set_stage(1, 0.5).unwrap();
        let c = generate_segmap(&gen, &p, &z, &GumbelConfig::default(), 5).unwrap();
        assert_eq!(c.soft.shape(), &[2, 3, 8, 8]);
        assert!(matches!(gen.set_stage(2, 1.0), Err(Error::State(_))));
        assert!(matches!(gen.set_stage(0, 0.5), Err(Error::State(_))));
    }

    #[test]
    fn fade_in_endpoints() {
        let mut gen = SegGenerator::new(tiny_cfg());
        let p = gen.store.leaves(false);
        let z = Var::constant(sample_latent(2, 8, 3));
        gen.set_stage(0, 1.0).unwrap();
        let prev = gen.logits(&p, &z).unwrap().upsample(2);
        gen.set_stage(1, 0.0).unwrap();
        let at0 = gen.logits(&p, &z).unwrap();
        assert!(max_rel_err(at0.value(), prev.value(), 1e-9) < 1e-12);
        gen.set_stage(1, 1.0).unwrap();
        let at1 = gen.logits(&p, &z).unwrap();
        gen.set_stage(1, 0.999_999).unwrap();
        let near1 = gen.logits(&p, &z).unwrap();
        let gap = (at1.value() - near1.value()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(gap < 1e-5, "{gap}");
    }

    #[test]
    fn critic_is_scalar_per_sample_at_every_stage() {
        let mut c = SegCritic::new(tiny_cfg());
        let p = c.store.leaves(false);
        assert_eq!(c.forward(&p, &Var::full(&[3, 3, 4, 4], 0.3)).shape(), &[3, 1]);
        c.set_stage(1, 0.3).unwrap();
        assert_eq!(c.forward(&p, &Var::full(&[3, 3, 8, 8], 0.3)).shape(), &[3, 1]);
    }

    #[test]
    fn wgan_gp_constant_and_linear_critics() {
        let real = Var::constant(Tensor::from_elem(IxDyn(&[4, 2, 2, 2]), 1.0));
        let fake = Var::constant(Tensor::zeros(IxDyn(&[4, 2, 2, 2])));
        let eps = [0.1, 0.4, 0.6, 0.9];
        let c = 2.5;
        let constant = |x: &Var| Var::full(&[x.shape()[0], 1], c);
        let l = wgan_gp_losses(&constant, &real, &fake, 10.0, &eps).unwrap();
        assert!((l.critic_loss.item() - 10.0).abs() < 1e-6);
        assert!((l.gen_loss.item() + c).abs() < 1e-12);
        // <a, x> with ||a|| = 1
        let a = Var::constant(Tensor::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0 / 8f64.sqrt()));
        let linear = |x: &Var| x.mul(&a).sum_axes_keep(&[1, 2, 3]);
        let l = wgan_gp_losses(&linear, &real, &fake, 10.0, &eps).unwrap();
        assert!(l.gp.item().abs() < 1e-12);
        let same = wgan_gp_losses(&linear, &real, &real, 10.0, &eps).unwrap();
        assert!((same.critic_loss.item() - 10.0 * same.gp.item()).abs() < 1e-12);
        assert!(wgan_gp_losses(&linear, &real, &Var::full(&[4, 2, 2, 1], 0.0), 10.0, &eps).is_err());
    }

    #[test]
    fn zero_step_training_keeps_initial_weights() {
        let gen = SegGenerator::new(tiny_cfg());
        let critic = SegCritic::new(tiny_cfg());
        let spec = crate::data::ToyWorldSpec::street(3, (8, 8), 0);
        let ds = crate::data::generate_toy_dataset(&spec, 4, 0, crate::data::Split::Train).unwrap();
        let sched = ProgressiveSchedule::doubling((4, 4), (8, 8), 0, 0.5).unwrap();
        let (g2, c2, log) = train_seg(gen.clone(), critic.clone(), &ds, sched, SegTrainConfig::default()).unwrap();
        assert_eq!(g2.store, gen.store);
        assert_eq!(c2.store, critic.store);
        assert!(log.is_empty());
    }

    #[test]
    fn short_run_logs_monotone_complete_rows() {
        let spec = crate::data::ToyWorldSpec::street(3, (8, 8), 0);
        let ds = crate::data::generate_toy_dataset(&spec, 16, 0, crate::data::Split::Train).unwrap();
        let sched = ProgressiveSchedule::doubling((4, 4), (8, 8), 4, 0.5).unwrap();
        let cfg = SegTrainConfig { batch_size: 4, eval_interval: 2, eval_samples: 8, ..Default::default() };
        let (_, _, log) = train_seg(SegGenerator::new(tiny_cfg()), SegCritic::new(tiny_cfg()), &ds, sched, cfg).unwrap();
        let steps: Vec<u64> = log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![2, 4, 6, 8]);
        assert_eq!(log[2].stage, 1);
        assert!(log.iter().all(|r| r.critic_loss.is_finite() && r.hist_kl >= 0.0));
    }
}
