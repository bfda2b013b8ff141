//! The six subcommands. Paths are relative to the workdir.

use crate::config::RunConfig;
use crate::metrics::{self, MetricsLog};
use sbgan_core::autograd::kernels;
use sbgan_core::checkpoint::Checkpoint;
use sbgan_core::data::{self, Dataset, Image, SegMap, Split};
use sbgan_core::end2end::{self, FineTuneRow, FineTuner, UncondDiscriminator};
use sbgan_core::eval::{self, EmbeddingModel, FidReport, LayoutDivergence, SurrogateEmbedder};
use sbgan_core::imgsynth::{self, CondDiscriminator, PatchDiscriminator, SpadeGenerator, SpadeMetricsRow, SpadeTrainer};
use sbgan_core::rng;
use sbgan_core::seggen::{self, SegCritic, SegGenerator, SegTrainer};
use sbgan_core::{Error, Result};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Options shared by the three training commands.
#[derive(Clone, Debug, Default)]
pub struct TrainOpts {
    pub resume: bool,
    pub force: bool,
    /// stop (with a checkpoint) once this many steps have been completed
    pub stop_after: Option<u64>,
}

pub struct Ctx {
    pub workdir: PathBuf,
    pub cfg: RunConfig,
    pub hash: String,
}

impl Ctx {
    pub fn new(workdir: PathBuf, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let deterministic = cfg.deterministic || std::env::var("SBGAN_DETERMINISTIC").is_ok_and(|v| v == "1");
        if deterministic {
            kernels::set_serial(true);
        }
        let hash = cfg.hash();
        Ok(Ctx { workdir, cfg, hash })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.workdir.join(&self.cfg.data_dir)
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.workdir.join(&self.cfg.out_dir).join(name)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn load_split(&self, split: Split) -> Result<Dataset> {
        let dir = self.data_dir();
        if !dir.join(split.name()).is_dir() || !dir.join("meta.json").is_file() {
            return Err(Error::Argument(format!(
                "no {} split under {}; run make-toy-data first",
                split.name(),
                dir.display()
            )));
        }
        let ds = data::read_split(&dir, split)?;
        if ds.k != self.cfg.k() || (ds.h, ds.w) != self.cfg.resolution() {
            return Err(Error::Argument(format!(
                "dataset is K={} {}x{}, config expects K={} {:?}",
                ds.k,
                ds.h,
                ds.w,
                self.cfg.k(),
                self.cfg.resolution()
            )));
        }
        Ok(ds)
    }

    fn embedder(&self) -> SurrogateEmbedder {
        SurrogateEmbedder::new(self.cfg.eval.embedder_seed)
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_run_dir(dir: &Path, opts: &TrainOpts) -> Result<()> {
    if !opts.resume && is_nonempty_dir(dir) {
        if !opts.force {
            return Err(Error::State(format!(
                "{} already exists; pass --resume to continue or --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))
}

fn sample_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("samples").join(format!("step_{step:06}.png"))
}

// ---------------------------------------------------------------------------
// make-toy-data
// ---------------------------------------------------------------------------

pub fn make_toy_data(ctx: &Ctx, force: bool) -> Result<PathBuf> {
    let root = ctx.data_dir();
    if is_nonempty_dir(&root) {
        if !force {
            return Err(Error::State(format!("{} is not empty; pass --force to overwrite", root.display())));
        }
        fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    }
    let d = &ctx.cfg.data;
    let train = data::generate_toy_dataset(&d.toy, d.n_train, rng::derive_seed(d.seed, &[rng::tag("train")]), Split::Train)?;
    let val = data::generate_toy_dataset(&d.toy, d.n_val, rng::derive_seed(d.seed, &[rng::tag("val")]), Split::Val)?;
    data::write_dataset(&root, &d.toy, &train, &val)?;
    log::info!("wrote {} train / {} val scenes to {}", train.len(), val.len(), root.display());
    Ok(root)
}

// ---------------------------------------------------------------------------
// train-seg
// ---------------------------------------------------------------------------

fn seg_checkpoint(ctx: &Ctx, t: &SegTrainer) -> Checkpoint {
    let (stage, alpha) = t.schedule.stage_at(t.step);
    let mut c = Checkpoint::new("seg", ctx.cfg.to_json(), t.step, stage, alpha);
    c.push("g", t.gen.store.named());
    c.push("c", t.critic.store.named());
    c.tensors.extend(t.opt_g.state("opt_g"));
    c.tensors.extend(t.opt_c.state("opt_c"));
    c
}

/// Networks of a seg checkpoint, placed at the final stage.
pub fn load_seg_nets(cfg: &RunConfig, ck: &Checkpoint) -> Result<(SegGenerator, SegCritic)> {
    let mut g = SegGenerator::new(cfg.seg_net());
    let mut c = SegCritic::new(cfg.seg_net());
    g.store.load(&ck.group("g"))?;
    c.store.load(&ck.group("c"))?;
    let last = g.num_stages() - 1;
    g.set_stage(last, 1.0)?;
    c.set_stage(last, 1.0)?;
    Ok((g, c))
}

fn colorize_all(maps: &[SegMap], colors: &[[u8; 3]]) -> Vec<Image> {
    maps.iter().map(|m| data::colorize(m, colors)).collect()
}

/// Layout samples at the current stage, upsampled to full size for the grid.
fn seg_sample_grid(ctx: &Ctx, t: &SegTrainer) -> Result<Image> {
    let maps = t.sample_maps(ctx.cfg.sample_count, rng::derive_seed(ctx.cfg.seed, &[rng::tag("grid")]))?;
    let (h, _) = ctx.cfg.resolution();
    let f = h / maps[0].height();
    let big: Vec<SegMap> = maps
        .iter()
        .map(|m| SegMap::from_fn(m.k(), m.height() * f, m.width() * f, |i, j| m.get(i / f, j / f) as u8))
        .collect::<Result<_>>()?;
    data::tile(&colorize_all(&big, &ctx.cfg.data.toy.class_colors), 4)
}

pub fn train_seg(ctx: &Ctx, opts: &TrainOpts) -> Result<PathBuf> {
    let dir = ctx.run_dir("seg");
    let ckpt = dir.join("checkpoint.ckpt");
    let train = ctx.load_split(Split::Train)?;
    let mut t = SegTrainer::new(
        SegGenerator::new(ctx.cfg.seg_net()),
        SegCritic::new(ctx.cfg.seg_net()),
        ctx.cfg.schedule()?,
        ctx.cfg.seg.train.clone(),
    )?;
    t.check_data(&train)?;
    prepare_run_dir(&dir, opts)?;
    let resume_step = if opts.resume {
        let c = Checkpoint::load(&ckpt)?;
        c.expect("seg", Some(&ctx.hash))?;
        t.gen.store.load(&c.group("g"))?;
        t.critic.store.load(&c.group("c"))?;
        t.opt_g.load_state("opt_g", &c.tensors)?;
        t.opt_c.load_state("opt_c", &c.tensors)?;
        t.step = c.header.step;
        Some(t.step)
    } else {
        None
    };
    let mut log = MetricsLog::open::<seggen::SegMetricsRow>(&dir.join("metrics.csv"), &ctx.hash, resume_step)?;
    let total = t.total_steps();
    if resume_step.is_none() {
        seg_checkpoint(ctx, &t).save(&ckpt)?;
    }
    while t.step < total {
        if opts.stop_after.is_some_and(|s| t.step >= s) {
            log::info!("stopping at step {}", t.step);
            return Ok(ckpt);
        }
        let losses = t.step(&train)?;
        if t.step % t.cfg.eval_interval.max(1) == 0 || t.step == total {
            let row = t.metrics_row(&losses, &train)?;
            log::info!("seg step {} stage {} kl {:.4}", row.step, row.stage, row.hist_kl);
            log.append(&row)?;
            data::save_image(&seg_sample_grid(ctx, &t)?, &sample_path(&dir, t.step))?;
        }
        if t.step % ctx.cfg.checkpoint_interval.max(1) == 0 || t.step == total || opts.stop_after == Some(t.step) {
            seg_checkpoint(ctx, &t).save(&ckpt)?;
        }
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// train-spade
// ---------------------------------------------------------------------------

fn spade_checkpoint(ctx: &Ctx, t: &SpadeTrainer) -> Checkpoint {
    let mut c = Checkpoint::new("spade", ctx.cfg.to_json(), t.step, 0, 1.0);
    c.push("g", t.gen.store.named());
    c.push("d", t.disc.store().named());
    c.tensors.extend(t.opt_g.state("opt_g"));
    c.tensors.extend(t.opt_d.state("opt_d"));
    c
}

pub fn load_spade_nets(cfg: &RunConfig, ck: &Checkpoint) -> Result<(SpadeGenerator, CondDiscriminator)> {
    let mut g = SpadeGenerator::new(cfg.spade_net())?;
    let mut d = CondDiscriminator(PatchDiscriminator::new(cfg.spade_disc()));
    g.store.load(&ck.group("g"))?;
    d.store_mut().load(&ck.group("d"))?;
    Ok((g, d))
}

/// Pairs of (colored map, synthesized image) for the first validation maps.
fn spade_sample_grid(ctx: &Ctx, g: &SpadeGenerator, maps: &[&SegMap]) -> Result<Image> {
    let imgs = imgsynth::synthesize(g, maps, None)?;
    let mut tiles = Vec::new();
    for (m, i) in maps.iter().zip(imgs) {
        tiles.push(data::colorize(m, &ctx.cfg.data.toy.class_colors));
        tiles.push(i);
    }
    data::tile(&tiles, 8)
}

pub fn train_spade(ctx: &Ctx, opts: &TrainOpts) -> Result<PathBuf> {
    let dir = ctx.run_dir("spade");
    let ckpt = dir.join("checkpoint.ckpt");
    let train = ctx.load_split(Split::Train)?;
    let val = ctx.load_split(Split::Val)?;
    let grid_maps: Vec<&SegMap> = val.segmaps().into_iter().take(ctx.cfg.sample_count).collect();
    let mut t = SpadeTrainer::new(
        SpadeGenerator::new(ctx.cfg.spade_net())?,
        CondDiscriminator(PatchDiscriminator::new(ctx.cfg.spade_disc())),
        ctx.cfg.spade.train.clone(),
    )?;
    t.check_data(&train)?;
    prepare_run_dir(&dir, opts)?;
    let resume_step = if opts.resume {
        let c = Checkpoint::load(&ckpt)?;
        c.expect("spade", Some(&ctx.hash))?;
        t.gen.store.load(&c.group("g"))?;
        t.disc.store_mut().load(&c.group("d"))?;
        t.opt_g.load_state("opt_g", &c.tensors)?;
        t.opt_d.load_state("opt_d", &c.tensors)?;
        t.step = c.header.step;
        Some(t.step)
    } else {
        None
    };
    let mut log = MetricsLog::open::<SpadeMetricsRow>(&dir.join("metrics.csv"), &ctx.hash, resume_step)?;
    let total = t.cfg.steps;
    if resume_step.is_none() {
        spade_checkpoint(ctx, &t).save(&ckpt)?;
    }
    while t.step < total {
        if opts.stop_after.is_some_and(|s| t.step >= s) {
            return Ok(ckpt);
        }
        let row = t.step(&train)?;
        if t.step % t.cfg.eval_interval.max(1) == 0 || t.step == total {
            log::info!("spade step {} d {:.4} perceptual {:.4}", row.step, row.d_loss, row.perceptual);
            log.append(&row)?;
            data::save_image(&spade_sample_grid(ctx, &t.gen, &grid_maps)?, &sample_path(&dir, t.step))?;
        }
        if t.step % ctx.cfg.checkpoint_interval.max(1) == 0 || t.step == total || opts.stop_after == Some(t.step) {
            spade_checkpoint(ctx, &t).save(&ckpt)?;
        }
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

fn finetune_checkpoint(ctx: &Ctx, t: &FineTuner) -> Checkpoint {
    let (stage, alpha) = t.g_sb.stage();
    let mut c = Checkpoint::new("finetune", ctx.cfg.to_json(), t.step, stage, alpha);
    c.push("g_sb", t.g_sb.store.named());
    c.push("d_sb", t.d_sb.store.named());
    c.push("g_spd", t.g_spd.store.named());
    c.push("d_spd", t.d_spd.store().named());
    c.push("d2", t.d2.store().named());
    for (name, opt) in [
        ("opt_g_sb", &t.opt_g_sb),
        ("opt_d_sb", &t.opt_d_sb),
        ("opt_g_spd", &t.opt_g_spd),
        ("opt_d_spd", &t.opt_d_spd),
        ("opt_d2", &t.opt_d2),
    ] {
        c.tensors.extend(opt.state(name));
    }
    c
}

pub fn load_finetune_nets(cfg: &RunConfig, ck: &Checkpoint) -> Result<(SegGenerator, SpadeGenerator)> {
    let mut g_sb = SegGenerator::new(cfg.seg_net());
    g_sb.store.load(&ck.group("g_sb"))?;
    let last = g_sb.num_stages() - 1;
    g_sb.set_stage(last, 1.0)?;
    let mut g_spd = SpadeGenerator::new(cfg.spade_net())?;
    g_spd.store.load(&ck.group("g_spd"))?;
    Ok((g_sb, g_spd))
}

fn new_d2(cfg: &RunConfig) -> UncondDiscriminator {
    UncondDiscriminator::new(cfg.finetune.d2_channels.clone(), cfg.finetune.d2_scales, cfg.seed)
}

fn pretrained(ctx: &Ctx, from_scratch: bool) -> Result<(SegGenerator, SegCritic, SpadeGenerator, CondDiscriminator)> {
    if from_scratch {
        let mut g = SegGenerator::new(ctx.cfg.seg_net());
        let mut c = SegCritic::new(ctx.cfg.seg_net());
        let last = g.num_stages() - 1;
        g.set_stage(last, 1.0)?;
        c.set_stage(last, 1.0)?;
        return Ok((
            g,
            c,
            SpadeGenerator::new(ctx.cfg.spade_net())?,
            CondDiscriminator(PatchDiscriminator::new(ctx.cfg.spade_disc())),
        ));
    }
    let need = |name: &str| {
        let p = ctx.run_dir(name).join("checkpoint.ckpt");
        if !p.is_file() {
            return Err(Error::Load(format!(
                "missing prerequisite checkpoint {} (run {} first or pass --from-scratch)",
                p.display(),
                if name == "seg" { "train-seg" } else { "train-spade" }
            )));
        }
        Checkpoint::load(&p)
    };
    let seg = need("seg")?;
    seg.expect("seg", None)?;
    let spd = need("spade")?;
    spd.expect("spade", None)?;
    let (g_sb, d_sb) = load_seg_nets(&ctx.cfg, &seg)?;
    let (g_spd, d_spd) = load_spade_nets(&ctx.cfg, &spd)?;
    Ok((g_sb, d_sb, g_spd, d_spd))
}

pub fn finetune(ctx: &Ctx, opts: &TrainOpts, from_scratch: bool, ablate: bool) -> Result<PathBuf> {
    let dir = ctx.run_dir(if ablate { "ablation" } else { "finetune" });
    let train = ctx.load_split(Split::Train)?;
    if ablate {
        let val = ctx.load_split(Split::Val)?;
        let (g_sb, d_sb, g_spd, d_spd) = pretrained(ctx, from_scratch)?;
        prepare_run_dir(&dir, opts)?;
        let rows = end2end::run_ablation(
            &g_sb,
            &d_sb,
            &g_spd,
            &d_spd,
            &new_d2(&ctx.cfg),
            &train,
            &val,
            &ctx.cfg.finetune.train,
            &ctx.embedder(),
            &ctx.cfg.ablation_eval(),
        )?;
        let out = dir.join("ablation.csv");
        metrics::write_table(&out, &ctx.hash, &rows)?;
        return Ok(out);
    }
    let ckpt = dir.join("checkpoint.ckpt");
    let (g_sb, d_sb, g_spd, d_spd) = pretrained(ctx, from_scratch)?;
    let mut t = FineTuner::new(g_sb, d_sb, g_spd, d_spd, new_d2(&ctx.cfg), ctx.cfg.finetune.train.clone())?;
    t.check_data(&train)?;
    prepare_run_dir(&dir, opts)?;
    let resume_step = if opts.resume {
        let c = Checkpoint::load(&ckpt)?;
        c.expect("finetune", Some(&ctx.hash))?;
        t.g_sb.store.load(&c.group("g_sb"))?;
        t.d_sb.store.load(&c.group("d_sb"))?;
        t.g_spd.store.load(&c.group("g_spd"))?;
        t.d_spd.store_mut().load(&c.group("d_spd"))?;
        t.d2.store_mut().load(&c.group("d2"))?;
        t.opt_g_sb.load_state("opt_g_sb", &c.tensors)?;
        t.opt_d_sb.load_state("opt_d_sb", &c.tensors)?;
        t.opt_g_spd.load_state("opt_g_spd", &c.tensors)?;
        t.opt_d_spd.load_state("opt_d_spd", &c.tensors)?;
        t.opt_d2.load_state("opt_d2", &c.tensors)?;
        t.step = c.header.step;
        Some(t.step)
    } else {
        None
    };
    let mut log = MetricsLog::open::<FineTuneRow>(&dir.join("metrics.csv"), &ctx.hash, resume_step)?;
    let total = t.cfg.steps;
    if resume_step.is_none() {
        finetune_checkpoint(ctx, &t).save(&ckpt)?;
    }
    while t.step < total {
        if opts.stop_after.is_some_and(|s| t.step >= s) {
            return Ok(ckpt);
        }
        let row = t.step(&train)?;
        if t.step % t.cfg.eval_interval.max(1) == 0 || t.step == total {
            log::info!("finetune step {} L_G {:.4}", row.step, row.l_g);
            log.append(&row)?;
            let (imgs, maps) = end2end::sample_composed(
                &t.g_sb,
                &t.g_spd,
                ctx.cfg.sample_count,
                rng::derive_seed(ctx.cfg.seed, &[rng::tag("grid")]),
                &t.cfg.gumbel,
            )?;
            let mut tiles = Vec::new();
            for (m, i) in colorize_all(&maps, &ctx.cfg.data.toy.class_colors).into_iter().zip(imgs) {
                tiles.push(m);
                tiles.push(i);
            }
            data::save_image(&data::tile(&tiles, 8)?, &sample_path(&dir, t.step))?;
        }
        if t.step % ctx.cfg.checkpoint_interval.max(1) == 0 || t.step == total || opts.stop_after == Some(t.step) {
            finetune_checkpoint(ctx, &t).save(&ckpt)?;
        }
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// Composed generator from a finetune checkpoint, or from a seg checkpoint
/// paired with a spade checkpoint.
fn composed_from(ctx: &Ctx, checkpoint: &Path, spade: Option<&Path>) -> Result<(RunConfig, SegGenerator, SpadeGenerator)> {
    let ck = Checkpoint::load(&ctx.resolve(checkpoint))?;
    let cfg = RunConfig::from_json(&ck.header.config)?;
    match ck.header.kind.as_str() {
        "finetune" => {
            let (g_sb, g_spd) = load_finetune_nets(&cfg, &ck)?;
            Ok((cfg, g_sb, g_spd))
        }
        "seg" => {
            let sp = spade.ok_or_else(|| {
                Error::Argument("a seg checkpoint needs --spade-checkpoint to paint images".into())
            })?;
            let sck = Checkpoint::load(&ctx.resolve(sp))?;
            sck.expect("spade", None)?;
            let scfg = RunConfig::from_json(&sck.header.config)?;
            let (g_sb, _) = load_seg_nets(&cfg, &ck)?;
            let (g_spd, _) = load_spade_nets(&scfg, &sck)?;
            Ok((cfg, g_sb, g_spd))
        }
        other => Err(Error::Argument(format!("cannot sample from a {other} checkpoint"))),
    }
}

pub fn sample(ctx: &Ctx, checkpoint: &Path, spade: Option<&Path>, n: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Argument("n must be >= 1".into()));
    }
    let (cfg, g_sb, g_spd) = composed_from(ctx, checkpoint, spade)?;
    let out = ctx.resolve(out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (imgs, maps) = end2end::sample_composed(&g_sb, &g_spd, n, seed, &cfg.finetune.train.gumbel)?;
    let colored = colorize_all(&maps, &cfg.data.toy.class_colors);
    for (i, (img, seg)) in imgs.iter().zip(&colored).enumerate() {
        data::save_image(img, &out.join(format!("image_{i:04}.png")))?;
        data::save_image(seg, &out.join(format!("segmap_{i:04}.png")))?;
    }
    data::save_image(&data::tile(&imgs, 8)?, &out.join("images_grid.png"))?;
    data::save_image(&data::tile(&colored, 8)?, &out.join("segmaps_grid.png"))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub metric: String,
    #[serde(flatten)]
    pub fid: FidReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint_kind: String,
    pub checkpoint_step: u64,
    pub checkpoint_config_hash: String,
    pub metrics: Vec<MetricReport>,
    pub layout: Option<LayoutDivergence>,
}

fn single(metric: &str, value: f64, n: usize, seed: u64, emb: &dyn EmbeddingModel) -> MetricReport {
    MetricReport {
        metric: metric.into(),
        fid: FidReport { mean: value, trials: vec![value], n_per_trial: n, seed, embedder_id: emb.id() },
    }
}

pub fn evaluate(ctx: &Ctx, checkpoint: &Path, gt_conditioning: bool, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(&ctx.resolve(checkpoint))?;
    let cfg = RunConfig::from_json(&ck.header.config)?;
    let val = ctx.load_split(Split::Val)?;
    if val.k != cfg.k() || (val.h, val.w) != cfg.resolution() {
        return Err(Error::Argument("validation data does not match the checkpoint's configuration".into()));
    }
    let emb = ctx.embedder();
    let ev = &ctx.cfg.eval;
    let mut metrics = Vec::new();
    let mut layout = None;
    let colors = &cfg.data.toy.class_colors;
    match ck.header.kind.as_str() {
        "seg" => {
            let (g, _) = load_seg_nets(&cfg, &ck)?;
            let gumbel = cfg.seg.train.gumbel;
            let real = colorize_all(&val.samples.iter().map(|s| s.segmap.clone()).collect::<Vec<_>>(), colors);
            let real_ref: Vec<&Image> = real.iter().collect();
            let r = eval::evaluate_fid(
                |n, s| Ok(colorize_all(&seggen::sample_maps(&g, n, s, &gumbel)?, colors)),
                &real_ref,
                &emb,
                ev.n_per_trial.min(val.len()),
                ev.trials,
                ev.seed,
            )?;
            metrics.push(MetricReport { metric: "fid_colored_segmaps".into(), fid: r });
            let maps = seggen::sample_maps(&g, ev.n_per_trial, rng::derive_seed(ev.seed, &[rng::tag("layout")]), &gumbel)?;
            layout = Some(eval::layout_divergence(&maps.iter().collect::<Vec<_>>(), &val.segmaps())?);
        }
        "spade" => {
            if !gt_conditioning {
                return Err(Error::Argument("a spade checkpoint can only be evaluated with --gt-conditioning".into()));
            }
        }
        "finetune" => {
            let (g_sb, g_spd) = load_finetune_nets(&cfg, &ck)?;
            let gumbel = cfg.finetune.train.gumbel;
            let real = val.images();
            let r = eval::evaluate_fid(
                |n, s| Ok(end2end::sample_composed(&g_sb, &g_spd, n, s, &gumbel)?.0),
                &real,
                &emb,
                ev.n_per_trial.min(val.len()),
                ev.trials,
                ev.seed,
            )?;
            metrics.push(MetricReport { metric: "fid".into(), fid: r });
            let (_, maps) = end2end::sample_composed(
                &g_sb,
                &g_spd,
                ev.n_per_trial,
                rng::derive_seed(ev.seed, &[rng::tag("layout")]),
                &gumbel,
            )?;
            layout = Some(eval::layout_divergence(&maps.iter().collect::<Vec<_>>(), &val.segmaps())?);
        }
        other => return Err(Error::Argument(format!("cannot evaluate a {other} checkpoint"))),
    }
    if gt_conditioning {
        let g_spd = match ck.header.kind.as_str() {
            "spade" => load_spade_nets(&cfg, &ck)?.0,
            "finetune" => load_finetune_nets(&cfg, &ck)?.1,
            _ => return Err(Error::Argument("--gt-conditioning needs a spade or finetune checkpoint".into())),
        };
        let v = eval::eval_conditioned_on_gt(&g_spd, &val, &emb)?;
        metrics.push(single("fid_gt_conditioned", v, val.len(), ev.seed, &emb));
    }
    let report = EvalReport {
        config_hash: ctx.hash.clone(),
        checkpoint_kind: ck.header.kind.clone(),
        checkpoint_step: ck.header.step,
        checkpoint_config_hash: ck.header.config_hash.clone(),
        metrics,
        layout,
    };
    let out = ctx.resolve(out);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    Ok(report)
}
