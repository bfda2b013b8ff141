//! Joint fine-tuning of the layout generator and the image synthesizer
//! against an unconditional image discriminator, plus the four-way
//! freeze/unfreeze ablation.

use crate::autograd::{Tensor, Var};
use crate::data::{self, Dataset, Image, SegMap};
use crate::error::{Error, Result};
use crate::eval::{self, EmbeddingModel};
use crate::imgsynth::{
    self, BoundCond, CondDiscriminator, DiscConfig, DiscOutput, PatchDiscriminator, SpadeGenerator, SpadeTrainConfig,
    SurrogateFeatureExtractor,
};
use crate::nn::{all_finite, Adam, AdamConfig, Leaves};
use crate::rng;
use crate::seggen::{
    self, batch_indices, generate_segmap, interp_weights, sample_latent, BoundCritic, GumbelConfig, SegCritic,
    SegGenerator, SegSample,
};
use serde::{Deserialize, Serialize};

/// Patch discriminator over RGB images only.
#[derive(Clone, Debug)]
pub struct UncondDiscriminator(pub PatchDiscriminator);

impl UncondDiscriminator {
    pub fn new(channels: Vec<usize>, num_scales: usize, seed: u64) -> Self {
        UncondDiscriminator(PatchDiscriminator::new(DiscConfig { in_channels: 3, channels, num_scales, seed }))
    }

    pub fn store(&self) -> &crate::nn::ParamStore {
        &self.0.store
    }

    pub fn store_mut(&mut self) -> &mut crate::nn::ParamStore {
        &mut self.0.store
    }

    pub fn forward(&self, p: &Leaves, x: &Var) -> Vec<DiscOutput> {
        assert_eq!(x.shape()[1], 3, "unconditional discriminator takes RGB images only");
        self.0.forward(p, x)
    }
}

/// Image-only scorer (implemented by closures for tests).
pub trait ImageDiscriminator {
    fn scores(&self, x: &Var) -> Vec<Var>;
}

pub struct BoundUncond<'a> {
    pub d: &'a UncondDiscriminator,
    pub leaves: &'a Leaves,
}

impl ImageDiscriminator for BoundUncond<'_> {
    fn scores(&self, x: &Var) -> Vec<Var> {
        self.d.forward(self.leaves, x).into_iter().map(|o| o.score).collect()
    }
}

impl<F: Fn(&Var) -> Vec<Var>> ImageDiscriminator for F {
    fn scores(&self, x: &Var) -> Vec<Var> {
        self(x)
    }
}

/// Hinge loss of the unconditional discriminator and the generator's
/// `−E[D2(x_fake)]`.
pub fn d2_losses<D: ImageDiscriminator + ?Sized>(d2: &D, x_real: &Var, x_fake: &Var) -> Result<(Var, Var)> {
    if x_real.shape()[1..] != x_fake.shape()[1..] {
        return Err(Error::Argument(format!("real {:?} vs fake {:?}", x_real.shape(), x_fake.shape())));
    }
    let real = d2.scores(x_real);
    let fake = d2.scores(x_fake);
    Ok((imgsynth::hinge_d_loss(&real, &fake), imgsynth::hinge_g_loss(&fake)))
}

/// `g_uncond + l_g_spd + λ · l_g_sb`.
pub fn joint_generator_loss(g_uncond: &Var, l_g_spd: &Var, l_g_sb: &Var, lambda_sb: f64) -> Result<Var> {
    for (name, v) in [("g_uncond", g_uncond), ("l_g_spd", l_g_spd), ("l_g_sb", l_g_sb)] {
        if !v.item().is_finite() {
            return Err(Error::Numeric(format!("{name} is {}", v.item())));
        }
    }
    if !lambda_sb.is_finite() {
        return Err(Error::Numeric(format!("lambda_sb is {lambda_sb}")));
    }
    Ok(g_uncond.add(l_g_spd).add(&l_g_sb.scale(lambda_sb)))
}

fn check_pair(g_sb: &SegGenerator, g_spd: &SpadeGenerator) -> Result<()> {
    if g_sb.cfg.k != g_spd.cfg.k {
        return Err(Error::Config(format!("layout generator K = {}, synthesizer K = {}", g_sb.cfg.k, g_spd.cfg.k)));
    }
    if g_sb.resolution() != g_spd.cfg.resolution {
        return Err(Error::Config(format!(
            "layout generator emits {:?}, synthesizer expects {:?}",
            g_sb.resolution(),
            g_spd.cfg.resolution
        )));
    }
    Ok(())
}

fn spd_latent(g_spd: &SpadeGenerator, n: usize, seed: u64) -> Option<Var> {
    g_spd
        .cfg
        .latent_dim
        .map(|d| Var::constant(sample_latent(n, d, rng::derive_seed(seed, &[rng::tag("spd-z")]))))
}

/// Graph-level composition: maps from `g_sb`, image from `g_spd` on the
/// straight-through one-hot, so image gradients reach `g_sb`.
pub fn compose_forward(
    g_sb: &SegGenerator,
    p_sb: &Leaves,
    g_spd: &SpadeGenerator,
    p_spd: &Leaves,
    z: &Var,
    gumbel: &GumbelConfig,
    seed: u64,
) -> Result<(Var, SegSample)> {
    check_pair(g_sb, g_spd)?;
    let seg = generate_segmap(g_sb, p_sb, z, gumbel, seed)?;
    let zs = spd_latent(g_spd, z.shape()[0], seed);
    let img = g_spd.forward(p_spd, &seg.hard, zs.as_ref())?;
    Ok((img, seg))
}

/// `G(z) = G_SPD(G_SB(z))` with frozen weights.
pub fn compose_generate(
    g_sb: &SegGenerator,
    g_spd: &SpadeGenerator,
    z: &Tensor,
    gumbel: &GumbelConfig,
    seed: u64,
) -> Result<(Vec<Image>, Vec<SegMap>)> {
    let (img, seg) = compose_forward(
        g_sb,
        &g_sb.store.leaves(false),
        g_spd,
        &g_spd.store.leaves(false),
        &Var::constant(z.clone()),
        gumbel,
        seed,
    )?;
    Ok((data::tensor_to_images(img.value()), seg.maps))
}

/// `n` composed samples, a pure function of the weights and `seed`.
pub fn sample_composed(
    g_sb: &SegGenerator,
    g_spd: &SpadeGenerator,
    n: usize,
    seed: u64,
    gumbel: &GumbelConfig,
) -> Result<(Vec<Image>, Vec<SegMap>)> {
    let mut imgs = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    let mut b = 0u64;
    while imgs.len() < n {
        let m = (n - imgs.len()).min(64);
        let z = sample_latent(m, g_sb.cfg.latent_dim, rng::derive_seed(seed, &[rng::tag("z"), b]));
        let (i, s) = compose_generate(g_sb, g_spd, &z, gumbel, rng::derive_seed(seed, &[rng::tag("g"), b]))?;
        imgs.extend(i);
        maps.extend(s);
        b += 1;
    }
    Ok((imgs, maps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub lambda_sb: f64,
    pub lr_sb: f64,
    pub lr_spd_g: f64,
    pub lr_spd_d: f64,
    pub lr_d2: f64,
    pub ft_sb: bool,
    pub ft_spade: bool,
    pub steps: u64,
    pub batch_size: usize,
    pub gp_weight: f64,
    pub gumbel: GumbelConfig,
    /// perceptual / feature-matching weights of the synthesizer term
    pub spade: SpadeTrainConfig,
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lambda_sb: 10.0,
            lr_sb: 1e-5,
            lr_spd_g: 1e-4,
            lr_spd_d: 4e-4,
            lr_d2: 4e-4,
            ft_sb: true,
            ft_spade: true,
            steps: 200,
            batch_size: 8,
            gp_weight: 10.0,
            gumbel: GumbelConfig::default(),
            spade: SpadeTrainConfig::default(),
            eval_interval: 50,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sb >= 0.0) {
            return Err(Error::Config(format!("lambda_sb must be >= 0, got {}", self.lambda_sb)));
        }
        for (n, v) in [("lr_sb", self.lr_sb), ("lr_spd_g", self.lr_spd_g), ("lr_spd_d", self.lr_spd_d), ("lr_d2", self.lr_d2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.gumbel.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRow {
    pub step: u64,
    pub d2_loss: f64,
    pub d_spd_loss: f64,
    pub d_sb_loss: f64,
    pub g_uncond: f64,
    pub l_g_spd: f64,
    pub l_g_sb: f64,
    pub l_g: f64,
}

/// The five components plus their optimizers.
#[derive(Clone, Debug)]
pub struct FineTuner {
    pub g_sb: SegGenerator,
    pub d_sb: SegCritic,
    pub g_spd: SpadeGenerator,
    pub d_spd: CondDiscriminator,
    pub d2: UncondDiscriminator,
    pub opt_g_sb: Adam,
    pub opt_d_sb: Adam,
    pub opt_g_spd: Adam,
    pub opt_d_spd: Adam,
    pub opt_d2: Adam,
    pub fx: SurrogateFeatureExtractor,
    pub cfg: FineTuneConfig,
    pub step: u64,
}

impl FineTuner {
    pub fn new(
        mut g_sb: SegGenerator,
        mut d_sb: SegCritic,
        g_spd: SpadeGenerator,
        d_spd: CondDiscriminator,
        d2: UncondDiscriminator,
        cfg: FineTuneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let last = g_sb.num_stages() - 1;
        g_sb.set_stage(last, 1.0)?;
        d_sb.set_stage(last, 1.0)?;
        check_pair(&g_sb, &g_spd)?;
        if d_spd.0.cfg.in_channels != g_spd.cfg.k + 3 {
            return Err(Error::Config("synthesizer discriminator must take K + 3 channels".into()));
        }
        let sb = |lr| AdamConfig::new(lr, 0.0, 0.99);
        let spd = |lr| AdamConfig::new(lr, 0.0, 0.9);
        Ok(FineTuner {
            opt_g_sb: Adam::new(sb(cfg.lr_sb), &g_sb.store),
            opt_d_sb: Adam::new(sb(cfg.lr_sb), &d_sb.store),
            opt_g_spd: Adam::new(spd(cfg.lr_spd_g), &g_spd.store),
            opt_d_spd: Adam::new(spd(cfg.lr_spd_d), d_spd.store()),
            opt_d2: Adam::new(spd(cfg.lr_d2), d2.store()),
            fx: SurrogateFeatureExtractor::new(cfg.spade.surrogate_seed),
            g_sb,
            d_sb,
            g_spd,
            d_spd,
            d2,
            cfg,
            step: 0,
        })
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.k != self.g_spd.cfg.k || (data.h, data.w) != self.g_spd.cfg.resolution {
            return Err(Error::Argument(format!(
                "dataset K={} {}x{} incompatible with K={} {:?}",
                data.k, data.h, data.w, self.g_spd.cfg.k, self.g_spd.cfg.resolution
            )));
        }
        Ok(())
    }

    fn seed(&self, tag: &str) -> u64 {
        rng::derive_seed(self.cfg.seed, &[rng::tag(tag), self.step])
    }

    /// d2, d_spd, d_sb, then both generators on the joint loss.
    pub fn step(&mut self, data: &Dataset) -> Result<FineTuneRow> {
        let bs = self.cfg.batch_size;
        let idx = batch_indices(data.len(), bs, self.cfg.seed, self.step, "ft-batch");
        let batch = data.pick(&idx);
        let maps: Vec<&SegMap> = batch.iter().map(|s| &s.segmap).collect();
        let imgs: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let y_real = Var::constant(data::one_hot_batch(&maps));
        let x_real = Var::constant(data::images_to_tensor(&imgs));
        let numeric = |what: &str, step: u64| Error::Numeric(format!("non-finite {what} at fine-tune step {step}"));
        let mut row = FineTuneRow::default();

        // d2 on real images vs composed fakes
        let z = Var::constant(sample_latent(bs, self.g_sb.cfg.latent_dim, self.seed("ft-z-d")));
        let (x_comp, seg) = compose_forward(
            &self.g_sb,
            &self.g_sb.store.leaves(false),
            &self.g_spd,
            &self.g_spd.store.leaves(false),
            &z,
            &self.cfg.gumbel,
            self.seed("ft-gumbel-d"),
        )?;
        let l = self.d2.store().leaves(true);
        let (d2_loss, _) = d2_losses(&BoundUncond { d: &self.d2, leaves: &l }, &x_real, &x_comp.detach())?;
        let g = l.grads(&d2_loss.backward());
        if !all_finite(&g) || !d2_loss.item().is_finite() {
            return Err(numeric("d2 loss", self.step));
        }
        self.opt_d2.step(self.d2.store_mut(), &g);
        row.d2_loss = d2_loss.item();

        // d_spd on real pairs
        let x_pair = self.g_spd.forward(&self.g_spd.store.leaves(false), &y_real, spd_latent(&self.g_spd, bs, self.seed("ft-spd-d")).as_ref())?;
        let l = self.d_spd.store().leaves(true);
        let (d_spd_loss, _) = imgsynth::hinge_losses(&BoundCond { d: &self.d_spd, leaves: &l }, &y_real, &x_real, &x_pair.detach());
        let g = l.grads(&d_spd_loss.backward());
        if !all_finite(&g) || !d_spd_loss.item().is_finite() {
            return Err(numeric("synthesizer discriminator loss", self.step));
        }
        self.opt_d_spd.step(self.d_spd.store_mut(), &g);
        row.d_spd_loss = d_spd_loss.item();

        // d_sb on real vs generated maps
        let l = self.d_sb.store.leaves(true);
        let eps = interp_weights(bs, self.cfg.seed, self.step, "ft-interp");
        let w = seggen::wgan_gp_losses(
            &BoundCritic { critic: &self.d_sb, leaves: &l },
            &y_real,
            &seg.hard.detach(),
            self.cfg.gp_weight,
            &eps,
        )?;
        let g = l.grads(&w.critic_loss.backward());
        if !all_finite(&g) || !w.critic_loss.item().is_finite() {
            return Err(numeric("layout critic loss", self.step));
        }
        self.opt_d_sb.step(&mut self.d_sb.store, &g);
        row.d_sb_loss = w.critic_loss.item();

        // generators
        let p_sb = self.g_sb.store.leaves(self.cfg.ft_sb);
        let p_spd = self.g_spd.store.leaves(self.cfg.ft_spade);
        let z = Var::constant(sample_latent(bs, self.g_sb.cfg.latent_dim, self.seed("ft-z-g")));
        let (x_comp, seg) = compose_forward(&self.g_sb, &p_sb, &self.g_spd, &p_spd, &z, &self.cfg.gumbel, self.seed("ft-gumbel-g"))?;
        let l2 = self.d2.store().leaves(false);
        let (_, g_uncond) = d2_losses(&BoundUncond { d: &self.d2, leaves: &l2 }, &x_real, &x_comp)?;
        let ls = self.d_spd.store().leaves(false);
        let x_pair = self.g_spd.forward(&p_spd, &y_real, spd_latent(&self.g_spd, bs, self.seed("ft-spd-g")).as_ref())?;
        let spd_terms = imgsynth::spade_generator_loss(
            &BoundCond { d: &self.d_spd, leaves: &ls },
            &self.fx,
            &y_real,
            &x_pair,
            &x_real,
            &self.cfg.spade,
        )?;
        let lc = self.d_sb.store.leaves(false);
        let l_g_sb = self.d_sb.forward(&lc, &seg.hard).mean().neg();
        let l_g = joint_generator_loss(&g_uncond, &spd_terms.total, &l_g_sb, self.cfg.lambda_sb)?;
        if self.cfg.ft_sb || self.cfg.ft_spade {
            let grads = l_g.backward();
            if self.cfg.ft_sb {
                let g = p_sb.grads(&grads);
                if !all_finite(&g) {
                    return Err(numeric("layout generator gradient", self.step));
                }
                self.opt_g_sb.step(&mut self.g_sb.store, &g);
            }
            if self.cfg.ft_spade {
                let g = p_spd.grads(&grads);
                if !all_finite(&g) {
                    return Err(numeric("synthesizer gradient", self.step));
                }
                self.opt_g_spd.step(&mut self.g_spd.store, &g);
            }
        }
        row.g_uncond = g_uncond.item();
        row.l_g_spd = spd_terms.total.item();
        row.l_g_sb = l_g_sb.item();
        row.l_g = l_g.item();
        self.step += 1;
        row.step = self.step;
        Ok(row)
    }
}

/// Run `cfg.steps` fine-tuning steps; one row every `eval_interval` steps
/// and at the end.
pub fn finetune(tuner: &mut FineTuner, data: &Dataset) -> Result<Vec<FineTuneRow>> {
    tuner.check_data(data)?;
    let mut log = Vec::new();
    while tuner.step < tuner.cfg.steps {
        let row = tuner.step(data)?;
        if tuner.step % tuner.cfg.eval_interval.max(1) == 0 || tuner.step == tuner.cfg.steps {
            log.push(row);
        }
    }
    Ok(log)
}

/// The four freeze settings, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationSetting {
    NoFt,
    FtSb,
    FtSpade,
    FtBoth,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 4] = [Self::NoFt, Self::FtSb, Self::FtSpade, Self::FtBoth];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::NoFt => (false, false),
            Self::FtSb => (true, false),
            Self::FtSpade => (false, true),
            Self::FtBoth => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NoFt => "No FT",
            Self::FtSb => "FT SB",
            Self::FtSpade => "FT SPADE",
            Self::FtBoth => "FT Both",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub fid: f64,
    pub hist_kl: f64,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEval {
    pub n_per_trial: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Composed-sample FID against `val` images and layout KL against `val` maps.
pub fn evaluate_composed(
    g_sb: &SegGenerator,
    g_spd: &SpadeGenerator,
    val: &Dataset,
    emb: &dyn EmbeddingModel,
    ev: &AblationEval,
    gumbel: &GumbelConfig,
) -> Result<(f64, f64)> {
    let real = val.images();
    let report = eval::evaluate_fid(
        |n, s| Ok(sample_composed(g_sb, g_spd, n, s, gumbel)?.0),
        &real,
        emb,
        ev.n_per_trial,
        ev.trials,
        ev.seed,
    )?;
    let (_, maps) = sample_composed(g_sb, g_spd, ev.n_per_trial, rng::derive_seed(ev.seed, &[rng::tag("layout")]), gumbel)?;
    let g: Vec<&SegMap> = maps.iter().collect();
    let kl = eval::layout_divergence(&g, &val.segmaps())?.kl_class_freq;
    Ok((report.mean, kl))
}

/// Fine-tune a fresh copy of the components under each of the four
/// settings with identical seeds, then evaluate.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    g_sb: &SegGenerator,
    d_sb: &SegCritic,
    g_spd: &SpadeGenerator,
    d_spd: &CondDiscriminator,
    d2: &UncondDiscriminator,
    train: &Dataset,
    val: &Dataset,
    cfg: &FineTuneConfig,
    emb: &dyn EmbeddingModel,
    ev: &AblationEval,
) -> Result<Vec<AblationRow>> {
    AblationSetting::ALL
        .iter()
        .map(|&s| {
            let (ft_sb, ft_spade) = s.flags();
            let c = FineTuneConfig { ft_sb, ft_spade, ..cfg.clone() };
            let mut t = FineTuner::new(g_sb.clone(), d_sb.clone(), g_spd.clone(), d_spd.clone(), d2.clone(), c)?;
            finetune(&mut t, train)?;
            let (fid, hist_kl) = evaluate_composed(&t.g_sb, &t.g_spd, val, emb, ev, &cfg.gumbel)?;
            log::info!("{}: fid {fid:.4} hist_kl {hist_kl:.4}", s.name());
            Ok(AblationRow { setting: s.name().to_string(), fid, hist_kl, steps: cfg.steps, seed: cfg.seed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, Split, ToyWorldSpec};
    use crate::imgsynth::SpadeConfig;
    use crate::seggen::SegNetConfig;

    fn parts(k: usize) -> (SegGenerator, SegCritic, SpadeGenerator, CondDiscriminator, UncondDiscriminator) {
        let sc = SegNetConfig { k, latent_dim: 8, base: (4, 4), channels: vec![8, 8], seed: 1 };
        let g_sb = SegGenerator::new(sc.clone());
        let d_sb = SegCritic::new(sc);
        let g_spd = SpadeGenerator::new(SpadeConfig {
            k,
            resolution: (8, 8),
            channels: vec![8, 4],
            hidden: 8,
            latent_dim: None,
            seed: 2,
        })
        .unwrap();
        let d_spd = CondDiscriminator::new(k, vec![8, 8], 1, 3);
        let d2 = UncondDiscriminator::new(vec![8, 8], 1, 4);
        (g_sb, d_sb, g_spd, d_spd, d2)
    }

    fn final_stage(mut g: SegGenerator) -> SegGenerator {
        let last = g.num_stages() - 1;
        g.set_stage(last, 1.0).unwrap();
        g
    }

    #[test]
    fn d2_loss_examples() {
        let zero = |x: &Var| vec![Var::full(&[x.shape()[0], 1, 2, 2], 0.0)];
        let x = Var::full(&[2, 3, 4, 4], 0.5);
        let (d, g) = d2_losses(&zero, &x, &x).unwrap();
        assert_eq!((d.item(), g.item()), (2.0, 0.0));
        let sep = |x: &Var| {
            let v = if x.value().iter().next().unwrap() > &0.5 { 1.5 } else { -2.0 };
            vec![Var::full(&[x.shape()[0], 1, 2, 2], v)]
        };
        let real = Var::full(&[2, 3, 4, 4], 1.0);
        let fake = Var::full(&[2, 3, 4, 4], 0.0);
        let (d, g) = d2_losses(&sep, &real, &fake).unwrap();
        assert_eq!((d.item(), g.item()), (0.0, 2.0));
    }

    #[test]
    fn joint_loss_arithmetic() {
        let s = Var::scalar;
        assert_eq!(joint_generator_loss(&s(1.0), &s(2.0), &s(3.0), 10.0).unwrap().item(), 33.0);
        assert_eq!(joint_generator_loss(&s(1.0), &s(2.0), &s(3.0), 0.0).unwrap().item(), 3.0);
        assert!(matches!(joint_generator_loss(&s(f64::NAN), &s(2.0), &s(3.0), 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn composition_contract_and_gradient_path() {
        let (g_sb, _, g_spd, _, _) = parts(3);
        let g_sb = final_stage(g_sb);
        let z = sample_latent(2, 8, 5);
        let (a, ma) = compose_generate(&g_sb, &g_spd, &z, &GumbelConfig::default(), 9).unwrap();
        let (b, mb) = compose_generate(&g_sb, &g_spd, &z, &GumbelConfig::default(), 9).unwrap();
        assert_eq!((a, ma.clone()), (b, mb));
        let direct = generate_segmap(&g_sb, &g_sb.store.leaves(false), &Var::constant(z.clone()), &GumbelConfig::default(), 9).unwrap();
        assert_eq!(ma, data::argmax_maps(direct.soft.value()));

        for (st, nonzero) in [(true, true), (false, false)] {
            let cfg = GumbelConfig { straight_through_backward: st, ..Default::default() };
            let p = g_sb.store.leaves(true);
            let (img, _) = compose_forward(&g_sb, &p, &g_spd, &g_spd.store.leaves(false), &Var::constant(z.clone()), &cfg, 9).unwrap();
            let grads = p.grads(&img.square().mean().backward());
            let norm: f64 = grads.iter().map(|g| g.mapv(|v| v * v).sum()).sum();
            assert_eq!(norm > 0.0, nonzero, "{norm}");
        }
    }

    #[test]
    fn k_mismatch_is_a_config_error() {
        let (g_sb, ..) = parts(3);
        let (_, _, g_spd, ..) = parts(4);
        let z = sample_latent(1, 8, 0);
        assert!(matches!(
            compose_generate(&final_stage(g_sb), &g_spd, &z, &GumbelConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    #[should_panic(expected = "RGB images only")]
    fn d2_rejects_label_channels() {
        let (.., d2) = parts(3);
        d2.forward(&d2.store().leaves(false), &Var::full(&[1, 6, 8, 8], 0.0));
    }

    #[test]
    fn freeze_flags_are_exact() {
        let spec = ToyWorldSpec::street(3, (8, 8), 0);
        let ds = generate_toy_dataset(&spec, 8, 0, Split::Train).unwrap();
        let (g_sb, d_sb, g_spd, d_spd, d2) = parts(3);
        for (ft_sb, ft_spade) in [(false, false), (true, false), (false, true)] {
            let cfg = FineTuneConfig { ft_sb, ft_spade, steps: 2, batch_size: 2, lr_sb: 1e-3, ..Default::default() };
            let mut t = FineTuner::new(g_sb.clone(), d_sb.clone(), g_spd.clone(), d_spd.clone(), d2.clone(), cfg).unwrap();
            let log = finetune(&mut t, &ds).unwrap();
            assert_eq!(t.g_sb.store == g_sb.store, !ft_sb);
            assert_eq!(t.g_spd.store == g_spd.store, !ft_spade);
            let r = log.last().unwrap();
            assert!((r.l_g - (r.g_uncond + r.l_g_spd + 10.0 * r.l_g_sb)).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let cfg = FineTuneConfig { lambda_sb: -1.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
