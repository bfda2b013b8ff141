//! Segmentation-to-image synthesis with spatially-adaptive normalization.

use crate::autograd::{Tensor, Var};
use crate::data::{self, Dataset, Image, SegMap};
use crate::error::{Error, Result};
use crate::eval::ConditionalSynth;
use crate::nn::{all_finite, Adam, AdamConfig, Conv2d, Leaves, Linear, ParamStore};
use crate::rng;
use crate::seggen::{batch_indices, sample_latent};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

fn lrelu(x: &Var) -> Var {
    x.leaky_relu(0.2)
}

// ---------------------------------------------------------------------------
// surrogate perceptual features
// ---------------------------------------------------------------------------

/// Widths of the three pyramid levels; pooled features have their sum as dim.
pub const SURROGATE_WIDTHS: [usize; 3] = [32, 64, 96];

/// Fixed random-weight convolutional pyramid. Never trained; weights depend
/// only on `seed`.
#[derive(Clone, Debug)]
pub struct SurrogateFeatureExtractor {
    pub seed: u64,
    store: ParamStore,
    levels: Vec<Conv2d>,
}

impl SurrogateFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag("surrogate-features")]);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let levels = SURROGATE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&mut store, &format!("level{i}"), cin, c, 3, &mut r);
                cin = c;
                conv
            })
            .collect();
        SurrogateFeatureExtractor { seed, store, levels }
    }

    pub fn dim(&self) -> usize {
        SURROGATE_WIDTHS.iter().sum()
    }

    pub fn weights(&self) -> &ParamStore {
        &self.store
    }

    /// Per-level feature maps for `[N, 3, H, W]` images in `[0, 1]`.
    pub fn features(&self, x: &Var) -> Vec<Var> {
        let p = self.store.leaves(false);
        let mut h = x.add_scalar(-0.5).scale(2.0);
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, conv) in self.levels.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool(2);
            }
            h = lrelu(&conv.forward(&p, &h));
            out.push(h.clone());
        }
        out
    }

    /// Global-average-pooled features, `[N, dim]`.
    pub fn pooled(&self, images: &Tensor) -> Array2<f64> {
        let feats = self.features(&Var::constant(images.clone()));
        let pooled: Vec<Tensor> = feats
            .iter()
            .map(|f| f.value().mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap())
            .collect();
        let views: Vec<_> = pooled.iter().map(|t| t.view()).collect();
        ndarray::concatenate(Axis(1), &views)
            .expect("pooled concat")
            .into_dimensionality()
            .expect("2-D")
    }
}

/// Default per-level weights of the perceptual term.
pub const PERCEPTUAL_WEIGHTS: [f64; 3] = [0.25, 0.5, 1.0];

/// `Σ_l w_l · mean |φ_l(x_fake) − φ_l(x_real)|`.
pub fn perceptual_l1(fx: &SurrogateFeatureExtractor, x_fake: &Var, x_real: &Var, layer_weights: &[f64]) -> Result<Var> {
    if x_fake.shape() != x_real.shape() {
        return Err(Error::Argument(format!("{:?} vs {:?}", x_fake.shape(), x_real.shape())));
    }
    let a = fx.features(x_fake);
    let b = fx.features(x_real);
    if layer_weights.len() != a.len() {
        return Err(Error::Argument(format!("{} layer weights for {} levels", layer_weights.len(), a.len())));
    }
    let mut total = Var::scalar(0.0);
    for ((fa, fb), &w) in a.iter().zip(&b).zip(layer_weights) {
        total = total.add(&fa.sub(fb).abs().mean().scale(w));
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// spatially-adaptive normalization
// ---------------------------------------------------------------------------

pub const NORM_VARIANCE_FLOOR: f64 = 1e-5;

/// Per-sample, per-channel standardization over spatial positions.
pub fn instance_normalize(x: &Var) -> Var {
    let mean = x.mean_axes_keep(&[2, 3]);
    let centered = x.sub(&mean);
    let var = centered.square().mean_axes_keep(&[2, 3]).clamp_min(NORM_VARIANCE_FLOOR);
    centered.div(&var.sqrt())
}

/// Resize `[N, K, H, W]` one-hot maps to `(h, w)` by nearest-neighbour
/// (top-left) subsampling.
pub fn resize_seg(seg: &Var, h: usize, w: usize) -> Result<Var> {
    let (sh, sw) = (seg.shape()[2], seg.shape()[3]);
    if sh % h != 0 || sw % w != 0 || sh / h != sw / w {
        return Err(Error::Argument(format!("cannot resize segmap {sh}x{sw} to {h}x{w}")));
    }
    Ok(seg.subsample(sh / h))
}

/// Modulation heads: a shared conv over the resized map, then separate
/// convs producing `γ = 1 + conv_γ(·)` and `β = conv_β(·)`.
#[derive(Clone, Debug)]
pub struct SpadeBlock {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
    pub channels: usize,
}

impl SpadeBlock {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, channels: usize, hidden: usize, r: &mut rng::Rng) -> Self {
        SpadeBlock {
            shared: Conv2d::new(store, &format!("{name}.shared"), k, hidden, 3, r),
            gamma: Conv2d::with_gain(store, &format!("{name}.gamma"), hidden, channels, 3, 0.5, r),
            beta: Conv2d::with_gain(store, &format!("{name}.beta"), hidden, channels, 3, 0.5, r),
            channels,
        }
    }

    /// (γ, β) grids for a one-hot map already at the activation resolution.
    pub fn modulation(&self, p: &Leaves, seg: &Var) -> (Var, Var) {
        let h = self.shared.forward(p, seg).relu();
        (self.gamma.forward(p, &h).add_scalar(1.0), self.beta.forward(p, &h))
    }

    pub fn gamma_conv(&self) -> &Conv2d {
        &self.gamma
    }

    pub fn beta_conv(&self) -> &Conv2d {
        &self.beta
    }
}

/// `γ(y) ⊙ normalize(act) + β(y)` with `y` resized to the activation size.
pub fn spade_normalize(block: &SpadeBlock, p: &Leaves, act: &Var, seg: &Var) -> Result<Var> {
    if act.shape()[1] != block.channels {
        return Err(Error::State(format!(
            "activation has {} channels, modulation heads produce {}",
            act.shape()[1],
            block.channels
        )));
    }
    let y = resize_seg(seg, act.shape()[2], act.shape()[3])?;
    let (gamma, beta) = block.modulation(p, &y);
    Ok(gamma.mul(&instance_normalize(act)).add(&beta))
}

#[derive(Clone, Debug)]
struct SpadeResBlock {
    norm1: SpadeBlock,
    conv1: Conv2d,
    norm2: SpadeBlock,
    conv2: Conv2d,
    shortcut: Option<(SpadeBlock, Conv2d)>,
}

impl SpadeResBlock {
    fn new(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, hidden: usize, r: &mut rng::Rng) -> Self {
        let cmid = cin.min(cout);
        let shortcut = (cin != cout).then(|| {
            (
                SpadeBlock::new(store, &format!("{name}.norm_s"), k, cin, hidden, r),
                Conv2d::new(store, &format!("{name}.conv_s"), cin, cout, 1, r),
            )
        });
        SpadeResBlock {
            norm1: SpadeBlock::new(store, &format!("{name}.norm1"), k, cin, hidden, r),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cmid, 3, r),
            norm2: SpadeBlock::new(store, &format!("{name}.norm2"), k, cmid, hidden, r),
            conv2: Conv2d::with_gain(store, &format!("{name}.conv2"), cmid, cout, 3, 0.5, r),
            shortcut,
        }
    }

    fn forward(&self, p: &Leaves, x: &Var, seg: &Var) -> Result<Var> {
        let dx = self.conv1.forward(p, &lrelu(&spade_normalize(&self.norm1, p, x, seg)?));
        let dx = self.conv2.forward(p, &lrelu(&spade_normalize(&self.norm2, p, &dx, seg)?));
        let xs = match &self.shortcut {
            Some((n, c)) => c.forward(p, &spade_normalize(n, p, x, seg)?),
            None => x.clone(),
        };
        Ok(xs.add(&dx))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpadeConfig {
    pub k: usize,
    /// Output resolution; must be divisible by `2^n_up`.
    pub resolution: (usize, usize),
    /// Channel width per resolution level, coarse to fine (`n_up + 1` entries).
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// Optional latent input, off by default.
    pub latent_dim: Option<usize>,
    pub seed: u64,
}

impl SpadeConfig {
    pub fn n_up(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn base(&self) -> (usize, usize) {
        (self.resolution.0 >> self.n_up(), self.resolution.1 >> self.n_up())
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.n_up();
        if self.channels.is_empty() || self.resolution.0 % f != 0 || self.resolution.1 % f != 0 {
            return Err(Error::Config(format!(
                "resolution {:?} not divisible by 2^{}",
                self.resolution,
                self.n_up()
            )));
        }
        Ok(())
    }
}

/// Generator: conv over the downsampled map, SPADE residual blocks with
/// nearest upsampling, 3-channel sigmoid head.
#[derive(Clone, Debug)]
pub struct SpadeGenerator {
    pub cfg: SpadeConfig,
    pub store: ParamStore,
    stem: Conv2d,
    latent: Option<Linear>,
    blocks: Vec<SpadeResBlock>,
    out: Conv2d,
}

impl SpadeGenerator {
    pub fn new(cfg: SpadeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, &[rng::tag("spade-generator")]);
        let mut store = ParamStore::new();
        let c0 = cfg.channels[0];
        let stem = Conv2d::new(&mut store, "stem", cfg.k, c0, 3, &mut r);
        let (bh, bw) = cfg.base();
        let latent = cfg.latent_dim.map(|d| Linear::new(&mut store, "latent", d, c0 * bh * bw, &mut r));
        let mut blocks = vec![SpadeResBlock::new(&mut store, "block0", cfg.k, c0, c0, cfg.hidden, &mut r)];
        for i in 1..cfg.channels.len() {
            blocks.push(SpadeResBlock::new(
                &mut store,
                &format!("block{i}"),
                cfg.k,
                cfg.channels[i - 1],
                cfg.channels[i],
                cfg.hidden,
                &mut r,
            ));
        }
        let out = Conv2d::new(&mut store, "out", *cfg.channels.last().unwrap(), 3, 3, &mut r);
        Ok(SpadeGenerator { cfg, store, stem, latent, blocks, out })
    }

    /// `[N, K, H, W]` one-hot (possibly straight-through) → `[N, 3, H, W]` in `[0, 1]`.
    pub fn forward(&self, p: &Leaves, seg: &Var, z: Option<&Var>) -> Result<Var> {
        let s = seg.shape();
        if s.len() != 4 || s[1] != self.cfg.k {
            return Err(Error::Argument(format!("segmap tensor {s:?} does not have K = {}", self.cfg.k)));
        }
        if (s[2], s[3]) != self.cfg.resolution {
            return Err(Error::Argument(format!(
                "segmap is {}x{}, generator expects {:?}",
                s[2], s[3], self.cfg.resolution
            )));
        }
        let (bh, bw) = self.cfg.base();
        let mut x = self.stem.forward(p, &resize_seg(seg, bh, bw)?);
        match (&self.latent, z) {
            (Some(lin), Some(z)) => {
                let n = s[0];
                x = x.add(&lin.forward(p, z).reshape(&[n, self.cfg.channels[0], bh, bw]));
            }
            (Some(_), None) => return Err(Error::Argument("generator configured with a latent input".into())),
            (None, Some(_)) => return Err(Error::Argument("generator has no latent input".into())),
            (None, None) => {}
        }
        x = self.blocks[0].forward(p, &x, seg)?;
        for b in &self.blocks[1..] {
            x = b.forward(p, &x.upsample(2), seg)?;
        }
        Ok(self.out.forward(p, &lrelu(&x)).sigmoid())
    }
}

/// Paint images for `maps`. Deterministic given weights, maps and `z`.
pub fn synthesize(gen: &SpadeGenerator, maps: &[&SegMap], z: Option<&Tensor>) -> Result<Vec<Image>> {
    if let Some(m) = maps.iter().find(|m| m.k() != gen.cfg.k) {
        return Err(Error::Argument(format!("segmap has K = {}, generator K = {}", m.k(), gen.cfg.k)));
    }
    if maps.is_empty() {
        return Ok(Vec::new());
    }
    let p = gen.store.leaves(false);
    let seg = Var::constant(data::one_hot_batch(maps));
    let zv = z.map(|t| Var::constant(t.clone()));
    let img = gen.forward(&p, &seg, zv.as_ref())?;
    Ok(data::tensor_to_images(img.value()))
}

impl ConditionalSynth for SpadeGenerator {
    fn synthesize_maps(&self, maps: &[&SegMap]) -> Result<Vec<Image>> {
        let z = self.cfg.latent_dim.map(|d| sample_latent(maps.len(), d, self.cfg.seed));
        synthesize(self, maps, z.as_ref())
    }
}

// ---------------------------------------------------------------------------
// discriminators
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    /// number of patch scorers, scorer `s` sees the input pooled by `2^s`
    pub num_scales: usize,
    pub seed: u64,
}

/// Scores plus the intermediate activations of one patch scorer.
pub struct DiscOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
struct PatchScorer {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

/// Multi-scale patch discriminator over `in_channels`-channel inputs.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub cfg: DiscConfig,
    pub store: ParamStore,
    scorers: Vec<PatchScorer>,
}

impl PatchDiscriminator {
    pub fn new(cfg: DiscConfig) -> Self {
        let mut r = rng::stream(cfg.seed, &[rng::tag("patch-discriminator"), cfg.in_channels as u64]);
        let mut store = ParamStore::new();
        let scorers = (0..cfg.num_scales.max(1))
            .map(|s| {
                let mut cin = cfg.in_channels;
                let convs = cfg
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let conv = Conv2d::new(&mut store, &format!("d{s}.conv{i}"), cin, c, 3, &mut r);
                        cin = c;
                        conv
                    })
                    .collect();
                let head = Conv2d::new(&mut store, &format!("d{s}.head"), cin, 1, 3, &mut r);
                PatchScorer { convs, head }
            })
            .collect();
        PatchDiscriminator { cfg, store, scorers }
    }

    /// Run every scorer. Layers after the first are preceded by 2× average
    /// pooling (except the last), so patches shrink with depth.
    pub fn forward(&self, p: &Leaves, input: &Var) -> Vec<DiscOutput> {
        assert_eq!(input.shape()[1], self.cfg.in_channels, "discriminator input channel mismatch");
        let n_layers = self.cfg.channels.len();
        self.scorers
            .iter()
            .enumerate()
            .map(|(s, sc)| {
                let mut h = input.avg_pool(1 << s);
                let mut features = Vec::with_capacity(n_layers);
                for (i, conv) in sc.convs.iter().enumerate() {
                    if i > 0 && i + 1 < n_layers && h.shape()[2] % 2 == 0 && h.shape()[3] % 2 == 0 {
                        h = h.avg_pool(2);
                    }
                    h = lrelu(&conv.forward(p, &h));
                    features.push(h.clone());
                }
                DiscOutput { score: sc.head.forward(p, &h), features }
            })
            .collect()
    }
}

/// Conditional discriminator: sees the channel concatenation of the one-hot
/// map and the image.
#[derive(Clone, Debug)]
pub struct CondDiscriminator(pub PatchDiscriminator);

impl CondDiscriminator {
    pub fn new(k: usize, channels: Vec<usize>, num_scales: usize, seed: u64) -> Self {
        CondDiscriminator(PatchDiscriminator::new(DiscConfig { in_channels: k + 3, channels, num_scales, seed }))
    }

    pub fn store(&self) -> &ParamStore {
        &self.0.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.0.store
    }

    pub fn forward(&self, p: &Leaves, y: &Var, x: &Var) -> Vec<DiscOutput> {
        self.0.forward(p, &Var::concat(&[y.clone(), x.clone()], 1))
    }
}

/// Pair-scoring discriminator interface (implemented by test doubles too).
pub trait PairDiscriminator {
    fn run(&self, y: &Var, x: &Var) -> Vec<DiscOutput>;
}

pub struct BoundCond<'a> {
    pub d: &'a CondDiscriminator,
    pub leaves: &'a Leaves,
}

impl PairDiscriminator for BoundCond<'_> {
    fn run(&self, y: &Var, x: &Var) -> Vec<DiscOutput> {
        self.d.forward(self.leaves, y, x)
    }
}

impl<F: Fn(&Var, &Var) -> Vec<DiscOutput>> PairDiscriminator for F {
    fn run(&self, y: &Var, x: &Var) -> Vec<DiscOutput> {
        self(y, x)
    }
}

/// `−E[min(0, −1 + real)] − E[min(0, −1 − fake)]`, averaged over scorers.
pub fn hinge_d_loss(real: &[Var], fake: &[Var]) -> Var {
    assert_eq!(real.len(), fake.len());
    let n = real.len() as f64;
    let mut total = Var::scalar(0.0);
    for (r, f) in real.iter().zip(fake) {
        let lr = r.add_scalar(-1.0).min_zero().mean().neg();
        let lf = f.neg().add_scalar(-1.0).min_zero().mean().neg();
        total = total.add(&lr.add(&lf));
    }
    total.scale(1.0 / n)
}

/// `−E[fake]`, averaged over scorers.
pub fn hinge_g_loss(fake: &[Var]) -> Var {
    let n = fake.len() as f64;
    let mut total = Var::scalar(0.0);
    for f in fake {
        total = total.add(&f.mean().neg());
    }
    total.scale(1.0 / n)
}

/// Discriminator and generator hinge terms for one batch.
pub fn hinge_losses<D: PairDiscriminator + ?Sized>(d: &D, y: &Var, x_real: &Var, x_fake: &Var) -> (Var, Var) {
    let real: Vec<Var> = d.run(y, x_real).into_iter().map(|o| o.score).collect();
    let fake: Vec<Var> = d.run(y, x_fake).into_iter().map(|o| o.score).collect();
    (hinge_d_loss(&real, &fake), hinge_g_loss(&fake))
}

/// Mean |feature difference| over matched layers, averaged over layers and
/// scorers. Real features are treated as constants.
pub fn feature_matching_from(fake: &[DiscOutput], real: &[DiscOutput]) -> Var {
    assert_eq!(fake.len(), real.len(), "scorer count mismatch");
    let mut total = Var::scalar(0.0);
    for (f, r) in fake.iter().zip(real) {
        assert_eq!(f.features.len(), r.features.len(), "feature list mismatch");
        let nl = f.features.len() as f64;
        for (a, b) in f.features.iter().zip(&r.features) {
            total = total.add(&a.sub(&b.detach()).abs().mean().scale(1.0 / nl));
        }
    }
    total.scale(1.0 / fake.len() as f64)
}

pub fn feature_matching_l1<D: PairDiscriminator + ?Sized>(d: &D, y: &Var, x_fake: &Var, x_real: &Var) -> Var {
    feature_matching_from(&d.run(y, x_fake), &d.run(y, x_real))
}

// ---------------------------------------------------------------------------
// toy colour oracle
// ---------------------------------------------------------------------------

/// 4-connected components of a map: `(class, pixel indices)` per region.
pub fn regions(map: &SegMap) -> Vec<(usize, Vec<usize>)> {
    let (h, w) = (map.height(), map.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let class = map.labels()[start];
        let mut stack = vec![start];
        let mut px = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            px.push(p);
            let (i, j) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && map.labels()[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                push(p - w);
            }
            if i + 1 < h {
                push(p + w);
            }
            if j > 0 {
                push(p - 1);
            }
            if j + 1 < w {
                push(p + 1);
            }
        }
        out.push((class as usize, px));
    }
    out
}

/// Fraction of connected regions whose mean synthesized colour lies within
/// `tol` (L∞) of the class reference colour.
pub fn region_color_accuracy(images: &[Image], maps: &[&SegMap], colors: &[[u8; 3]], tol: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (img, map) in images.iter().zip(maps) {
        for (class, px) in regions(map) {
            let mut mean = [0.0; 3];
            for &p in &px {
                let v = img.pixel(p / img.w, p % img.w);
                for c in 0..3 {
                    mean[c] += v[c] / px.len() as f64;
                }
            }
            total += 1;
            if data::color_distance(mean, data::color_f64(colors[class])) <= tol {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpadeTrainConfig {
    pub batch_size: usize,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub lambda_perceptual: f64,
    pub lambda_feat: f64,
    pub perceptual_weights: Vec<f64>,
    pub surrogate_seed: u64,
    pub eval_interval: u64,
    pub steps: u64,
    pub seed: u64,
}

impl Default for SpadeTrainConfig {
    fn default() -> Self {
        SpadeTrainConfig {
            batch_size: 8,
            adam_g: AdamConfig::new(1e-4, 0.0, 0.9),
            adam_d: AdamConfig::new(4e-4, 0.0, 0.9),
            lambda_perceptual: 10.0,
            lambda_feat: 10.0,
            perceptual_weights: PERCEPTUAL_WEIGHTS.to_vec(),
            surrogate_seed: 1234,
            eval_interval: 100,
            steps: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpadeMetricsRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub perceptual: f64,
    pub feat_match: f64,
}

/// Loss terms of the generator objective on one batch.
pub struct SpadeGenTerms {
    pub g_adv: Var,
    pub perceptual: Var,
    pub feat_match: Var,
    pub total: Var,
}

/// `g_adv + λ1·perceptual + λ2·feature-matching` for generated `x_fake`
/// against real pairs `(y, x_real)`.
pub fn spade_generator_loss<D: PairDiscriminator + ?Sized>(
    d: &D,
    fx: &SurrogateFeatureExtractor,
    y: &Var,
    x_fake: &Var,
    x_real: &Var,
    cfg: &SpadeTrainConfig,
) -> Result<SpadeGenTerms> {
    let fake_out = d.run(y, x_fake);
    let real_out = d.run(y, x_real);
    let scores: Vec<Var> = fake_out.iter().map(|o| o.score.clone()).collect();
    let g_adv = hinge_g_loss(&scores);
    let feat_match = feature_matching_from(&fake_out, &real_out);
    let perceptual = perceptual_l1(fx, x_fake, x_real, &cfg.perceptual_weights)?;
    let total = g_adv
        .add(&perceptual.scale(cfg.lambda_perceptual))
        .add(&feat_match.scale(cfg.lambda_feat));
    Ok(SpadeGenTerms { g_adv, perceptual, feat_match, total })
}

#[derive(Clone, Debug)]
pub struct SpadeTrainer {
    pub gen: SpadeGenerator,
    pub disc: CondDiscriminator,
    pub fx: SurrogateFeatureExtractor,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub cfg: SpadeTrainConfig,
    pub step: u64,
}

impl SpadeTrainer {
    pub fn new(gen: SpadeGenerator, disc: CondDiscriminator, cfg: SpadeTrainConfig) -> Result<Self> {
        if disc.0.cfg.in_channels != gen.cfg.k + 3 {
            return Err(Error::Config("discriminator input channels must be K + 3".into()));
        }
        let fx = SurrogateFeatureExtractor::new(cfg.surrogate_seed);
        let opt_g = Adam::new(cfg.adam_g, &gen.store);
        let opt_d = Adam::new(cfg.adam_d, disc.store());
        Ok(SpadeTrainer { gen, disc, fx, opt_g, opt_d, cfg, step: 0 })
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.k != self.gen.cfg.k || (data.h, data.w) != self.gen.cfg.resolution {
            return Err(Error::Argument(format!(
                "dataset K={} {}x{} incompatible with generator K={} {:?}",
                data.k, data.h, data.w, self.gen.cfg.k, self.gen.cfg.resolution
            )));
        }
        Ok(())
    }

    fn latent(&self, n: usize, tag: &str) -> Option<Var> {
        self.gen
            .cfg
            .latent_dim
            .map(|d| Var::constant(sample_latent(n, d, rng::derive_seed(self.cfg.seed, &[rng::tag(tag), self.step]))))
    }

    pub fn step(&mut self, data: &Dataset) -> Result<SpadeMetricsRow> {
        let idx = batch_indices(data.len(), self.cfg.batch_size, self.cfg.seed, self.step, "spade-batch");
        let batch = data.pick(&idx);
        let maps: Vec<&SegMap> = batch.iter().map(|s| &s.segmap).collect();
        let imgs: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let y = Var::constant(data::one_hot_batch(&maps));
        let x_real = Var::constant(data::images_to_tensor(&imgs));

        // discriminator
        let gl = self.gen.store.leaves(false);
        let z = self.latent(maps.len(), "spade-z-d");
        let x_fake = self.gen.forward(&gl, &y, z.as_ref())?.detach();
        let dl = self.disc.store().leaves(true);
        let (d_loss, _) = hinge_losses(&BoundCond { d: &self.disc, leaves: &dl }, &y, &x_real, &x_fake);
        let grads = dl.grads(&d_loss.backward());
        if !all_finite(&grads) || !d_loss.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite discriminator loss at step {}", self.step)));
        }
        self.opt_d.step(self.disc.store_mut(), &grads);

        // generator
        let gl = self.gen.store.leaves(true);
        let dl = self.disc.store().leaves(false);
        let z = self.latent(maps.len(), "spade-z-g");
        let x_fake = self.gen.forward(&gl, &y, z.as_ref())?;
        let terms = spade_generator_loss(&BoundCond { d: &self.disc, leaves: &dl }, &self.fx, &y, &x_fake, &x_real, &self.cfg)?;
        let grads = gl.grads(&terms.total.backward());
        if !all_finite(&grads) || !terms.total.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite generator loss at step {}", self.step)));
        }
        self.opt_g.step(&mut self.gen.store, &grads);
        self.step += 1;
        Ok(SpadeMetricsRow {
            step: self.step,
            d_loss: d_loss.item(),
            g_adv: terms.g_adv.item(),
            perceptual: terms.perceptual.item(),
            feat_match: terms.feat_match.item(),
        })
    }
}

/// Alternate discriminator / generator updates for `cfg.steps` steps.
pub fn train_spade(
    gen: SpadeGenerator,
    disc: CondDiscriminator,
    data: &Dataset,
    cfg: SpadeTrainConfig,
) -> Result<(SpadeGenerator, CondDiscriminator, Vec<SpadeMetricsRow>)> {
    let mut t = SpadeTrainer::new(gen, disc, cfg)?;
    t.check_data(data)?;
    let mut log = Vec::new();
    while t.step < t.cfg.steps {
        let row = t.step(data)?;
        if t.step % t.cfg.eval_interval.max(1) == 0 || t.step == t.cfg.steps {
            log.push(row);
        }
    }
    Ok((t.gen, t.disc, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::max_rel_err;
    use ndarray::IxDyn;

    fn cfg(k: usize) -> SpadeConfig {
        SpadeConfig { k, resolution: (8, 8), channels: vec![8, 4], hidden: 8, latent_dim: None, seed: 3 }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        crate::seggen::sample_latent(1, shape.iter().product(), seed)
            .into_shape_with_order(IxDyn(shape))
            .unwrap()
    }

    fn block_with(gamma_one: bool) -> (ParamStore, SpadeBlock) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, &[]);
        let b = SpadeBlock::new(&mut store, "n", 3, 4, 6, &mut r);
        if gamma_one {
            for id in [b.gamma_conv().weight(), b.gamma_conv().bias(), b.beta_conv().weight(), b.beta_conv().bias()] {
                let i = store.names().iter().position(|n| *n == store.names()[id_index(&store, id)]).unwrap();
                store.values_mut()[i].fill(0.0);
            }
        }
        (store, b)
    }

    fn id_index(store: &ParamStore, id: crate::nn::ParamId) -> usize {
        let target = store.get(id) as *const Tensor;
        store.values().iter().position(|t| std::ptr::eq(t, target)).unwrap()
    }

    fn seg_var(maps: &[&SegMap]) -> Var {
        Var::constant(data::one_hot_batch(maps))
    }

    #[test]
    fn constant_activation_yields_beta() {
        let (store, b) = block_with(false);
        let p = store.leaves(false);
        let m = SegMap::from_fn(3, 4, 4, |i, j| ((i + j) % 3) as u8).unwrap();
        let seg = seg_var(&[&m]);
        let act = Var::full(&[1, 4, 4, 4], 2.5);
        let out = spade_normalize(&b, &p, &act, &seg).unwrap();
        let (_, beta) = b.modulation(&p, &seg);
        assert!(max_rel_err(out.value(), beta.value(), 1e-9) < 1e-12);
    }

    #[test]
    fn identity_modulation_standardizes_each_channel() {
        let (store, b) = block_with(true);
        let p = store.leaves(false);
        let m = SegMap::constant(3, 4, 4, 1).unwrap();
        let act = Var::constant(rand_tensor(&[2, 4, 4, 4], 5));
        let out = spade_normalize(&b, &p, &act, &seg_var(&[&m, &m])).unwrap();
        let v = out.value();
        for n in 0..2 {
            for c in 0..4 {
                let ch = v.index_axis(Axis(0), n).index_axis(Axis(0), c).to_owned();
                let mean = ch.mean().unwrap();
                let var = ch.mapv(|x| (x - mean).powi(2)).mean().unwrap();
                assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
            }
        }
    }

    #[test]
    fn different_maps_give_different_outputs() {
        let (store, b) = block_with(false);
        let p = store.leaves(false);
        let act = Var::constant(rand_tensor(&[1, 4, 4, 4], 7));
        let a = SegMap::constant(3, 8, 8, 0).unwrap();
        let c = SegMap::from_fn(3, 8, 8, |i, _| (i / 3) as u8).unwrap();
        let oa = spade_normalize(&b, &p, &act, &seg_var(&[&a])).unwrap();
        let oc = spade_normalize(&b, &p, &act, &seg_var(&[&c])).unwrap();
        assert!(max_rel_err(oa.value(), oc.value(), 1e-9) > 1e-6);
        let wrong = Var::full(&[1, 5, 4, 4], 0.0);
        assert!(matches!(spade_normalize(&b, &p, &wrong, &seg_var(&[&a])), Err(Error::State(_))));
    }

    #[test]
    fn synthesize_range_size_determinism_and_k_check() {
        let g = SpadeGenerator::new(cfg(3)).unwrap();
        let m = SegMap::from_fn(3, 8, 8, |i, j| ((i * j) % 3) as u8).unwrap();
        let a = synthesize(&g, &[&m], None).unwrap();
        assert_eq!((a[0].h, a[0].w), (8, 8));
        assert!(a[0].data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, synthesize(&g, &[&m], None).unwrap());
        let bad = SegMap::constant(4, 8, 8, 0).unwrap();
        assert!(matches!(synthesize(&g, &[&bad], None), Err(Error::Argument(_))));
    }

    fn fixed(real: f64, fake: f64) -> impl Fn(&Var, &Var) -> Vec<DiscOutput> {
        move |_y: &Var, x: &Var| {
            let v = if x.value().iter().next().copied().unwrap_or(0.0) > 0.5 { real } else { fake };
            vec![DiscOutput { score: Var::full(&[x.shape()[0], 1, 2, 2], v), features: vec![x.clone()] }]
        }
    }

    #[test]
    fn hinge_examples() {
        let y = Var::full(&[2, 3, 4, 4], 0.0);
        let real = Var::full(&[2, 3, 4, 4], 1.0);
        let fake = Var::full(&[2, 3, 4, 4], 0.0);
        let (d, _) = hinge_losses(&fixed(1.0, -1.0), &y, &real, &fake);
        assert_eq!(d.item(), 0.0);
        let (d, g) = hinge_losses(&fixed(0.0, 0.0), &y, &real, &fake);
        assert_eq!((d.item(), g.item()), (2.0, 0.0));
        for (r, f) in [(-3.0, 2.0), (0.4, -0.2), (5.0, 5.0)] {
            let (d, g) = hinge_losses(&fixed(r, f), &y, &real, &fake);
            assert!(d.item() >= 0.0);
            assert_eq!(g.item(), -f);
        }
    }

    #[test]
    fn perceptual_properties() {
        let fx = SurrogateFeatureExtractor::new(0);
        let a = Var::constant(rand_tensor(&[2, 3, 8, 8], 1).mapv(|v| 0.5 + 0.2 * v));
        let b = Var::constant(rand_tensor(&[2, 3, 8, 8], 2).mapv(|v| 0.5 + 0.2 * v));
        let w = PERCEPTUAL_WEIGHTS;
        assert_eq!(perceptual_l1(&fx, &a, &a, &w).unwrap().item(), 0.0);
        let ab = perceptual_l1(&fx, &a, &b, &w).unwrap().item();
        let ba = perceptual_l1(&fx, &b, &a, &w).unwrap().item();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-12);
        let w2: Vec<f64> = w.iter().map(|v| v * 2.0).collect();
        assert!((perceptual_l1(&fx, &a, &b, &w2).unwrap().item() - 2.0 * ab).abs() < 1e-12);
        assert_eq!(SurrogateFeatureExtractor::new(0).weights(), fx.weights());
    }

    #[test]
    fn feature_matching_properties() {
        let d = CondDiscriminator::new(3, vec![8, 8, 8], 1, 4);
        let p = d.store().leaves(false);
        let bound = BoundCond { d: &d, leaves: &p };
        let m = SegMap::from_fn(3, 8, 8, |i, _| (i % 3) as u8).unwrap();
        let y = seg_var(&[&m]);
        let a = Var::constant(rand_tensor(&[1, 3, 8, 8], 8).mapv(|v| 0.5 + 0.2 * v));
        let b = Var::constant(rand_tensor(&[1, 3, 8, 8], 9).mapv(|v| 0.5 + 0.2 * v));
        assert_eq!(feature_matching_l1(&bound, &y, &a, &a).item(), 0.0);
        let v = feature_matching_l1(&bound, &y, &a, &b).item();
        assert!(v > 0.0);
        // second-pass oracle from captured feature lists
        let fa = bound.run(&y, &a);
        let fb = bound.run(&y, &b);
        let mut want = 0.0;
        for (x, z) in fa[0].features.iter().zip(&fb[0].features) {
            want += (x.value() - z.value()).mapv(f64::abs).mean().unwrap() / fa[0].features.len() as f64;
        }
        assert!((v - want).abs() < 1e-12);
        assert!((feature_matching_l1(&bound, &y, &b, &a).item() - v).abs() < 1e-12);
    }

    #[test]
    fn region_components() {
        let m = SegMap::from_fn(2, 3, 3, |i, j| if i == 1 || j == 1 { 1 } else { 0 }).unwrap();
        // a plus of class 1 splits class 0 into four corners
        let r = regions(&m);
        assert_eq!(r.iter().filter(|(c, _)| *c == 0).count(), 4);
        assert_eq!(r.iter().filter(|(c, _)| *c == 1).count(), 1);
    }

    #[test]
    fn zero_step_training_keeps_weights_and_short_run_logs_finite() {
        let spec = crate::data::ToyWorldSpec::street(3, (8, 8), 0);
        let ds = crate::data::generate_toy_dataset(&spec, 8, 0, crate::data::Split::Train).unwrap();
        let g = SpadeGenerator::new(cfg(3)).unwrap();
        let d = CondDiscriminator::new(3, vec![8, 8], 1, 1);
        let zero = SpadeTrainConfig { steps: 0, ..Default::default() };
        let (g2, d2, log) = train_spade(g.clone(), d.clone(), &ds, zero).unwrap();
        assert_eq!(g2.store, g.store);
        assert_eq!(d2.store(), d.store());
        assert!(log.is_empty());
        let short = SpadeTrainConfig { steps: 4, eval_interval: 2, batch_size: 2, ..Default::default() };
        let (_, _, log) = train_spade(g, d, &ds, short).unwrap();
        assert_eq!(log.len(), 2);
        for r in log {
            assert!([r.d_loss, r.g_adv, r.perceptual, r.feat_match].iter().all(|v| v.is_finite()));
        }
    }
}
