//! Acceptance criteria A1–A8. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line. Pass criterion names (e.g. `A3 A4`) to run a
//! subset.

use ndarray::{Array2, Axis, IxDyn};
use sbgan_cli::commands::{self, Ctx, TrainOpts};
use sbgan_cli::RunConfig;
use sbgan_core::autograd::{max_rel_err, numeric_grad, Tensor, Var};
use sbgan_core::data::{self, Dataset, Image, SegMap, Split, ToyWorldSpec};
use sbgan_core::end2end::{self, AblationEval, AblationSetting, FineTuneConfig, FineTuner, UncondDiscriminator};
use sbgan_core::eval::{self, GaussianStats, SurrogateEmbedder};
use sbgan_core::imgsynth::{self, CondDiscriminator, DiscOutput, SpadeConfig, SpadeGenerator, SpadeTrainConfig};
use sbgan_core::seggen::{self, GumbelConfig, ProgressiveSchedule, SegCritic, SegGenerator, SegNetConfig, SegTrainConfig};
use sbgan_core::rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

type Outcome = (bool, String);

const K: usize = 4;
const RES: (usize, usize) = (16, 16);

fn toy() -> (Dataset, Dataset, ToyWorldSpec) {
    let spec = ToyWorldSpec::street(K, RES, 7);
    let train = data::generate_toy_dataset(&spec, 2000, 1, Split::Train).unwrap();
    let val = data::generate_toy_dataset(&spec, 256, 2, Split::Val).unwrap();
    (train, val, spec)
}

// ---------------------------------------------------------------------------

fn a1() -> Outcome {
    let p = [0.1, 0.2, 0.3, 0.4];
    let n = 100_000usize;
    let probs = Tensor::from_shape_fn(IxDyn(&[n, K, 1, 1]), |ix| p[ix[1]]);
    let g = seggen::sample_gumbel(&[n, K, 1, 1], 11, 1e-20);
    let s = seggen::gumbel_softmax(&Var::constant(probs), &g, &GumbelConfig::default()).unwrap();
    let hard = seggen::straight_through_discretize(&s, true);
    let counts = hard.value().sum_axis(Axis(0));
    let mut chi2 = 0.0;
    let mut max_dev: f64 = 0.0;
    for k in 0..K {
        let c = counts[[k, 0, 0]];
        let e = p[k] * n as f64;
        chi2 += (c - e).powi(2) / e;
        max_dev = max_dev.max((c / n as f64 - p[k]).abs());
    }
    let pval = 1.0 - ChiSquared::new((K - 1) as f64).unwrap().cdf(chi2);
    (pval > 0.01 && max_dev <= 0.02, format!("chi2 {chi2:.3} p {pval:.4} max |freq - P| {max_dev:.5}"))
}

// ---------------------------------------------------------------------------

fn a2() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    // forward is the exact argmax one-hot of S
    let logits = seggen::sample_gumbel(&[3, K, 5, 5], 1, 1e-20);
    let s = Var::constant(logits.clone()).softmax(1);
    let hard = seggen::straight_through_discretize(&s, true);
    let maps = data::argmax_maps(s.value());
    let exact = Tensor::from_shape_fn(IxDyn(&[3, K, 5, 5]), |ix| {
        (maps[ix[0]].get(ix[2], ix[3]) == ix[1]) as u8 as f64
    });
    let fwd = hard.value() == &exact;
    ok &= fwd;
    notes.push(format!("forward one-hot exact: {fwd}"));

    // backward equals the soft path (linear probe), against finite differences
    let w = seggen::sample_gumbel(&[3, K, 5, 5], 2, 1e-20);
    let g = seggen::sample_gumbel(&[3, K, 5, 5], 3, 1e-20);
    let soft = |x: &Var| seggen::gumbel_softmax_log(&x.log_softmax(1), &g, 1.0);
    let x = Var::param(logits.clone());
    let st = seggen::straight_through_discretize(&soft(&x), true).mul(&Var::constant(w.clone())).sum();
    let analytic = st.backward().wrt(&x);
    let num = numeric_grad(&logits, 1e-6, |t| soft(&Var::constant(t.clone())).mul(&Var::constant(w.clone())).sum().item());
    let rel = max_rel_err(&analytic, &num, 1e-6);
    ok &= rel <= 1e-3;
    notes.push(format!("ST vs soft-path FD rel err {rel:.2e}"));

    // disabling the estimator cuts the image loss off from G_SB
    let sb = SegGenerator::new(SegNetConfig { k: K, latent_dim: 8, base: (4, 4), channels: vec![8, 8], seed: 4 });
    let mut sb = sb;
    sb.set_stage(1, 1.0).unwrap();
    let spd = SpadeGenerator::new(SpadeConfig { k: K, resolution: (8, 8), channels: vec![8, 4], hidden: 8, latent_dim: None, seed: 5 })
        .unwrap();
    let z = Var::constant(seggen::sample_latent(2, 8, 6));
    let mut norms = Vec::new();
    for st in [true, false] {
        let cfg = GumbelConfig { straight_through_backward: st, ..Default::default() };
        let p = sb.store.leaves(true);
        let (img, _) = end2end::compose_forward(&sb, &p, &spd, &spd.store.leaves(false), &z, &cfg, 7).unwrap();
        let grads = p.grads(&img.square().mean().backward());
        norms.push(grads.iter().map(|t| t.mapv(|v| v * v).sum()).sum::<f64>().sqrt());
    }
    let cut = norms[0] > 0.0 && norms[1] == 0.0;
    ok &= cut;
    notes.push(format!("|dL/dG_SB| on {:.3e} off {:e}", norms[0], norms[1]));
    (ok, notes.join("; "))
}

// ---------------------------------------------------------------------------

fn colored(maps: &[SegMap], spec: &ToyWorldSpec) -> Vec<Image> {
    maps.iter().map(|m| data::colorize(m, &spec.class_colors)).collect()
}

fn seg_net() -> SegNetConfig {
    SegNetConfig { k: K, latent_dim: 32, base: (4, 4), channels: vec![32, 16, 8], seed: 3 }
}

fn a3(train: &Dataset, val: &Dataset, spec: &ToyWorldSpec) -> (Outcome, SegGenerator, SegCritic) {
    let emb = SurrogateEmbedder::new(1234);
    let real = colored(&val.samples.iter().map(|s| s.segmap.clone()).collect::<Vec<_>>(), spec);
    let real_ref: Vec<&Image> = real.iter().collect();
    let gumbel = GumbelConfig::default();
    let fid_of = |g: &SegGenerator| {
        eval::evaluate_fid(
            |n, s| Ok(colored(&seggen::sample_maps(g, n, s, &gumbel)?, spec)),
            &real_ref,
            &emb,
            real.len(),
            2,
            9,
        )
        .unwrap()
        .mean
    };
    let mut init = SegGenerator::new(seg_net());
    init.set_stage(2, 1.0).unwrap();
    let fid0 = fid_of(&init);
    let schedule = ProgressiveSchedule::doubling((4, 4), RES, 200, 0.5).unwrap();
    let cfg = SegTrainConfig { batch_size: 16, eval_interval: 1_000_000, seed: 1, ..Default::default() };
    let (g, c, _) = seggen::train_seg(SegGenerator::new(seg_net()), SegCritic::new(seg_net()), train, schedule, cfg).unwrap();
    let fid1 = fid_of(&g);
    let maps = seggen::sample_maps(&g, 1024, 77, &gumbel).unwrap();
    let kl = eval::layout_divergence(&maps.iter().collect::<Vec<_>>(), &val.segmaps()).unwrap().kl_class_freq;
    let improvement = 1.0 - fid1 / fid0;
    (
        (kl <= 0.1 && improvement >= 0.5, format!("KL {kl:.4}; colored-segmap FID {fid0:.3} -> {fid1:.3} ({:.1}% better)", 100.0 * improvement)),
        g,
        c,
    )
}

// ---------------------------------------------------------------------------

fn spade_net() -> SpadeConfig {
    SpadeConfig { k: K, resolution: RES, channels: vec![32, 16, 8], hidden: 16, latent_dim: None, seed: 8 }
}

fn a4(train: &Dataset, val: &Dataset, spec: &ToyWorldSpec) -> (Outcome, SpadeGenerator, CondDiscriminator) {
    let cfg = SpadeTrainConfig { steps: 500, batch_size: 8, eval_interval: 1_000_000, seed: 2, ..Default::default() };
    let (g, d, _) = imgsynth::train_spade(SpadeGenerator::new(spade_net()).unwrap(), CondDiscriminator::new(K, vec![16, 32], 1, 9), train, cfg)
        .unwrap();
    let maps = val.segmaps();
    let imgs = imgsynth::synthesize(&g, &maps, None).unwrap();
    let acc = imgsynth::region_color_accuracy(&imgs, &maps, &spec.class_colors, 0.15);
    ((acc >= 0.8, format!("{:.1}% of val regions within 0.15 of the class colour", 100.0 * acc)), g, d)
}

// ---------------------------------------------------------------------------

fn a5() -> Outcome {
    let mut r = rng::stream(5, &[]);
    use rand::Rng as _;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = r.random_range(1..=16usize);
        let mu_a: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let mu_b: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let va: Vec<f64> = (0..d).map(|_| r.random_range(0.01..4.0)).collect();
        let vb: Vec<f64> = (0..d).map(|_| r.random_range(0.01..4.0)).collect();
        let mk = |m: &[f64], v: &[f64]| GaussianStats {
            mu: nalgebra::DVector::from_column_slice(m),
            sigma: nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)),
        };
        let got = eval::frechet_distance(&mk(&mu_a, &va), &mk(&mu_b, &vb)).unwrap();
        let want: f64 = (0..d).map(|i| (mu_a[i] - mu_b[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2)).sum();
        worst = worst.max((got - want).abs());
    }
    let feats = Array2::from_shape_fn((64, 12), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.3 + (i as f64).sin());
    let s = eval::fit_gaussian(&feats).unwrap();
    let self_d = eval::frechet_distance(&s, &s).unwrap();
    let (_, val, _) = toy();
    let real = val.images();
    let emb = SurrogateEmbedder::new(1234);
    let replay = eval::evaluate_fid(|_, _| Ok(real.iter().map(|&i| i.clone()).collect()), &real, &emb, real.len(), 3, 0)
        .unwrap()
        .mean;
    (
        worst <= 1e-6 && self_d <= 1e-6 && replay.abs() <= 1e-3,
        format!("diagonal max err {worst:.2e}; self {self_d:.2e}; replayed real set {replay:.2e}"),
    )
}

// ---------------------------------------------------------------------------

fn a6() -> Outcome {
    let mut errs: Vec<(String, f64)> = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| errs.push((name.to_string(), (got - want).abs()));
    let scores = |r: f64, f: f64| {
        move |_y: &Var, x: &Var| {
            let v = if x.value().iter().next().copied().unwrap() > 0.5 { r } else { f };
            vec![DiscOutput { score: Var::full(&[x.shape()[0], 1, 3, 3], v), features: vec![] }]
        }
    };
    let y = Var::full(&[2, K, 4, 4], 0.0);
    let real = Var::full(&[2, 3, 4, 4], 1.0);
    let fake = Var::full(&[2, 3, 4, 4], 0.0);
    for (r, f) in [(0.0, 0.0), (1.0, -1.0), (0.25, 0.5), (-2.0, 3.0)] {
        let (d, g) = imgsynth::hinge_losses(&scores(r, f), &y, &real, &fake);
        let want_d = (1.0 - r).max(0.0) + (1.0 + f).max(0.0);
        check(&format!("hinge d ({r},{f})"), d.item(), want_d);
        check(&format!("hinge g ({r},{f})"), g.item(), -f);
        let d2 = move |x: &Var| vec![Var::full(&[x.shape()[0], 1, 2, 2], if x.value().iter().next().copied().unwrap() > 0.5 { r } else { f })];
        let (dl, gu) = end2end::d2_losses(&d2, &real, &fake).unwrap();
        check(&format!("d2 ({r},{f})"), dl.item(), want_d);
        check(&format!("g_uncond ({r},{f})"), gu.item(), -f);
    }
    let s = Var::scalar;
    check("joint", end2end::joint_generator_loss(&s(1.0), &s(2.0), &s(3.0), 10.0).unwrap().item(), 33.0);
    check("joint λ=0", end2end::joint_generator_loss(&s(1.0), &s(2.0), &s(3.0), 0.0).unwrap().item(), 3.0);
    // unit-gradient linear critic: gp = 0, critic loss = E[c(fake)] − E[c(real)]
    let w = {
        let mut t = Tensor::zeros(IxDyn(&[1, 2, 2, 2]));
        t[[0, 0, 0, 0]] = 0.6;
        t[[0, 1, 1, 0]] = 0.8;
        t
    };
    let critic = move |x: &Var| x.mul(&Var::constant(w.clone())).sum_axes_keep(&[1, 2, 3]).reshape(&[x.shape()[0]]);
    let real = Var::constant(Tensor::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |ix| (ix[0] + ix[1] * 2 + ix[3]) as f64 * 0.1));
    let fake = Var::constant(Tensor::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |ix| (ix[2] + ix[3]) as f64 * 0.2));
    let l = seggen::wgan_gp_losses(&critic, &real, &fake, 10.0, &[0.3, 0.7]).unwrap();
    let c = |x: &Var, n: usize| {
        let v = x.value();
        0.6 * v[[n, 0, 0, 0]] + 0.8 * v[[n, 1, 1, 0]]
    };
    let want = (c(&fake, 0) + c(&fake, 1)) / 2.0 - (c(&real, 0) + c(&real, 1)) / 2.0;
    check("gp unit critic", l.gp.item(), 0.0);
    check("wgan critic loss", l.critic_loss.item(), want);
    check("wgan gen loss", l.gen_loss.item(), -(c(&fake, 0) + c(&fake, 1)) / 2.0);
    let worst = errs.iter().cloned().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    (worst.1 <= 1e-6, format!("{} oracle checks, worst {:.2e} ({})", errs.len(), worst.1, worst.0))
}

// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn a7(
    g_sb: &SegGenerator,
    d_sb: &SegCritic,
    g_spd: &SpadeGenerator,
    d_spd: &CondDiscriminator,
    train: &Dataset,
    val: &Dataset,
) -> Outcome {
    let d2 = UncondDiscriminator::new(vec![16, 32], 1, 10);
    let cfg = FineTuneConfig { steps: 20, batch_size: 8, seed: 4, ..Default::default() };
    let mut frozen_ok = true;
    for s in AblationSetting::ALL {
        let (ft_sb, ft_spade) = s.flags();
        let mut t = FineTuner::new(g_sb.clone(), d_sb.clone(), g_spd.clone(), d_spd.clone(), d2.clone(), FineTuneConfig { ft_sb, ft_spade, steps: 3, ..cfg.clone() })
            .unwrap();
        end2end::finetune(&mut t, train).unwrap();
        frozen_ok &= (t.g_sb.store == g_sb.store) == !ft_sb;
        frozen_ok &= (t.g_spd.store == g_spd.store) == !ft_spade;
    }
    let emb = SurrogateEmbedder::new(1234);
    let ev = AblationEval { n_per_trial: val.len(), trials: 2, seed: 3 };
    let rows = end2end::run_ablation(g_sb, d_sb, g_spd, d_spd, &d2, train, val, &cfg, &emb, &ev).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    let complete = names == ["No FT", "FT SB", "FT SPADE", "FT Both"] && rows.iter().all(|r| r.fid.is_finite() && r.hist_kl.is_finite());
    let table: Vec<String> = rows.iter().map(|r| format!("{} fid {:.3} kl {:.4}", r.setting, r.fid, r.hist_kl)).collect();
    (complete && frozen_ok, format!("freeze exact: {frozen_ok}; {}", table.join(", ")))
}

// ---------------------------------------------------------------------------

fn sbgan(workdir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sbgan"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("SBGAN_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run sbgan");
    assert!(out.status.success(), "sbgan {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn a8() -> Outcome {
    let cfg = RunConfig::tiny();
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &runs {
        std::fs::write(d.path().join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        for cmd in [&["make-toy-data"][..], &["train-seg"], &["train-spade"], &["finetune"], &["finetune", "--ablate"]] {
            sbgan(d.path(), cmd);
        }
        sbgan(d.path(), &["eval", "--checkpoint", "runs/finetune/checkpoint.ckpt", "--gt-conditioning"]);
    }
    let files = ["runs/seg/metrics.csv", "runs/spade/metrics.csv", "runs/finetune/metrics.csv", "runs/ablation/ablation.csv", "eval/report.json"];
    let same: Vec<bool> = files
        .iter()
        .map(|f| std::fs::read(runs[0].path().join(f)).unwrap() == std::fs::read(runs[1].path().join(f)).unwrap())
        .collect();
    // in-process rerun goes through the same code path without a subprocess
    let dir = tempfile::tempdir().unwrap();
    let ctx = Ctx::new(dir.path().to_path_buf(), cfg).unwrap();
    commands::make_toy_data(&ctx, false).unwrap();
    commands::train_seg(&ctx, &TrainOpts::default()).unwrap();
    let in_proc = std::fs::read(dir.path().join(files[0])).unwrap() == std::fs::read(runs[0].path().join(files[0])).unwrap();
    (
        same.iter().all(|&b| b) && in_proc,
        format!("{} of {} artifacts byte-identical across reruns; in-process rerun identical: {in_proc}", same.iter().filter(|&&b| b).count(), files.len()),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let run = |name: &str| wanted.is_empty() || wanted.iter().any(|w| w == name);
    let mut failed = Vec::new();
    let mut report = |name: &str, start: Instant, (ok, detail): Outcome| {
        println!("{name} {} ({:.1}s): {detail}", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        if !ok {
            failed.push(name.to_string());
        }
    };
    if run("A1") {
        report("A1", Instant::now(), a1());
    }
    if run("A2") {
        report("A2", Instant::now(), a2());
    }
    let need_models = run("A3") || run("A4") || run("A7");
    let mut models = None;
    if need_models {
        let (train, val, spec) = toy();
        let t = Instant::now();
        let (o3, g_sb, d_sb) = a3(&train, &val, &spec);
        if run("A3") {
            report("A3", t, o3);
        }
        let t = Instant::now();
        let (o4, g_spd, d_spd) = a4(&train, &val, &spec);
        if run("A4") {
            report("A4", t, o4);
        }
        models = Some((g_sb, d_sb, g_spd, d_spd, train, val));
    }
    if run("A5") {
        report("A5", Instant::now(), a5());
    }
    if run("A6") {
        report("A6", Instant::now(), a6());
    }
    if let (true, Some((g_sb, d_sb, g_spd, d_spd, train, val))) = (run("A7"), &models) {
        report("A7", Instant::now(), a7(g_sb, d_sb, g_spd, d_spd, train, val));
    }
    if run("A8") {
        report("A8", Instant::now(), a8());
    }
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
