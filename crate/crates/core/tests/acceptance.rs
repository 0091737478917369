//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 8 check implementation properties; a FAIL there fails the
//! process. Criteria 6 and 7 are directional training experiments; their
//! FAIL lines are reported but only fail the process with
//! `DHAT_ACCEPTANCE_STRICT=1`. Set `DHAT_ACCEPTANCE_QUICK=1` to skip them.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{real_attack, tiny_config, tiny_data, LinearLogistic};
use dhat::attacks::{fgsm, inverse_pgd, linf_distance, pgd, AttackConfig, Direction};
use dhat::attention::{attention_region_iou, separate_attended, separate_background, AttentionMap, BackgroundThreshold, MapSource};
use dhat::budget::Budget;
use dhat::config::{ExperimentConfig, Objective, TrainingData};
use dhat::evaluation::{attention_bias_sweep, robust_accuracy, robust_gap};
use dhat::losses::{debias_logits, dhat_objective_with_grads, dhlr_loss, floe_loss, floe_residuals, kl_divergence_rows, LogitBundle, LossWeights};
use dhat::models::{build_named, Classifier};
use dhat::training::{resume, train, train_aux, TrainOptions};
use ndarray::{array, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

// Independent reference implementations.

fn oracle_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

fn oracle_kl(target: &[f64], z: &[f64]) -> f64 {
    let (lp, lq) = (oracle_log_softmax(target), oracle_log_softmax(z));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn oracle_residual(z: &[f64], s: &[f64], eps: f64) -> Vec<f64> {
    let dot: f64 = z.iter().zip(s).map(|(a, b)| a * b).sum();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    z.iter().zip(s).map(|(a, b)| a - dot / (ss + eps) * b).collect()
}

fn oracle_pnorm(v: &[f64], p: f64) -> f64 {
    v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn loss_analytics() -> Verdict {
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-6 {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    let deb = debias_logits(&array![[3.0, 1.0]], &array![[1.0, 2.0]]).unwrap();
    check("debias[0]", deb[[0, 0]], 2.0);
    check("debias[1]", deb[[0, 1]], -1.0);
    let want = (2.0f64 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    check("dhlr", dhlr_loss(&array![[2.0f64.ln(), 0.0]], &array![[0.0, 0.0]]).unwrap(), want);
    check("dhlr identical", dhlr_loss(&array![[0.3, -1.2, 2.0]], &array![[0.3, -1.2, 2.0]]).unwrap(), 0.0);
    check("floe oblique", floe_loss(&array![[3.0, 4.0]], &array![[1.0, 0.0]], 2.0, 1e-15).unwrap(), 4.0);
    check("floe orthogonal", floe_loss(&array![[0.0, 5.0]], &array![[3.0, 0.0]], 2.0, 1e-15).unwrap(), 5.0);
    check("floe parallel", floe_loss(&array![[2.0, -4.0]], &array![[-1.0, 2.0]], 2.0, 1e-15).unwrap(), 0.0);
    check("floe zero background", floe_loss(&array![[3.0, 4.0]], &array![[0.0, 0.0]], 2.0, 1e-12).unwrap(), 5.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut negative, mut shift, mut oracle) = (0, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (b, k) = (rng.random_range(1..5), rng.random_range(2..11));
        let t = random_matrix(&mut rng, b, k, 6.0);
        let z = random_matrix(&mut rng, b, k, 6.0);
        let kl = kl_divergence_rows(&t, &z).unwrap();
        negative += kl.iter().filter(|&&v| v < 0.0).count();
        for ((tr, zr), v) in rows(&t).iter().zip(rows(&z)).zip(kl.iter()) {
            oracle = oracle.max((oracle_kl(tr, &zr) - v).abs());
        }
        let base = dhlr_loss(&t, &z).unwrap();
        let c = rng.random_range(-50.0..50.0);
        shift = shift
            .max((dhlr_loss(&t.mapv(|v| v + c), &z).unwrap() - base).abs())
            .max((dhlr_loss(&t, &z.mapv(|v| v + c)).unwrap() - base).abs());
    }
    let pass = failures.is_empty() && negative == 0 && shift <= 1e-6 && oracle <= 1e-6;
    Verdict::new(
        pass,
        format!("hand oracles {}; negative KL rows {negative}; max shift change {shift:.1e}; max oracle deviation {oracle:.1e}{}", if failures.is_empty() { "ok" } else { "FAILED" }, failures.iter().map(|f| format!("; {f}")).collect::<String>()),
    )
}

/// Objective with the alignment target held fixed at `target`.
fn frozen_objective(z_adv: &Array2<f64>, z_inv: &Array2<f64>, z_bg: &Array2<f64>, target: &Array2<f64>, labels: &[usize], w: &LossWeights) -> f64 {
    let b = labels.len() as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let za = z_adv.row(i).to_vec();
        total -= oracle_log_softmax(&za)[y];
        total += w.lambda1 * oracle_kl(&target.row(i).to_vec(), &za);
        let r = oracle_residual(&z_inv.row(i).to_vec(), &z_bg.row(i).to_vec(), w.eps_num);
        total += w.lambda2 * oracle_pnorm(&r, w.p_norm);
    }
    total / b
}

fn gradient_fidelity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let (b, k) = (3, 8);
        let z_adv = random_matrix(&mut rng, b, k, 3.0);
        let z_inv = random_matrix(&mut rng, b, k, 3.0);
        let z_bg = random_matrix(&mut rng, b, k, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let w = LossWeights {
            lambda1: rng.random_range(0.1..2.0),
            lambda2: rng.random_range(0.1..2.0),
            p_norm: if trial % 2 == 0 { 2.0 } else { 3.0 },
            ..LossWeights::default()
        };
        let bundle = LogitBundle::debiased(z_adv.clone(), z_inv.clone(), z_bg.clone()).unwrap();
        let (_, grads) = dhat_objective_with_grads(&bundle, &labels, &w).unwrap();
        let target = &z_inv - &z_bg;
        let blocks = [grads.d_adv, grads.d_inv.unwrap(), grads.d_bg.unwrap()];
        for (block, analytic) in blocks.iter().enumerate() {
            let mut fd = Array2::<f64>::zeros((b, k));
            for idx in 0..b * k {
                let (i, j) = (idx / k, idx % k);
                let eval = |delta: f64| {
                    let mut zs = [z_adv.clone(), z_inv.clone(), z_bg.clone()];
                    zs[block][[i, j]] += delta;
                    frozen_objective(&zs[0], &zs[1], &zs[2], &target, &labels, &w)
                };
                fd[[i, j]] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let num = (analytic - &fd).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(num / den);
        }
    }
    Verdict::new(worst < 1e-4, format!("max relative error {worst:.2e} over 10 bundles x 3 logit blocks"))
}

fn attack_constraints() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models: Vec<Classifier<f32>> = (0..4)
        .map(|s| build_named::<f32>(if s % 2 == 0 { "small-cnn" } else { "small-resnet" }, 3, 3, s).unwrap())
        .collect();
    let (mut ok, mut worst) = (0, 0.0f64);
    for n in 0..100 {
        let model = &models[n % models.len()];
        let x = Array4::from_shape_fn((2, 3, 12, 12), |_| rng.random_range(0.0f32..=1.0));
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
        let inverse = rng.random_bool(0.5);
        let (e, s, t) = (rng.random_range(0..17), rng.random_range(1..5), rng.random_range(1..8));
        let mut cfg = if inverse { AttackConfig::inverse(e, s, t) } else { AttackConfig::pgd(e, s, t) };
        cfg.random_start = rng.random_bool(0.5);
        cfg.seed = rng.random();
        let out = if inverse { inverse_pgd(model, &x, &labels, &cfg) } else { pgd(model, &x, &labels, &cfg) }.unwrap();
        let d = linf_distance(&x, &out);
        worst = worst.max(d - cfg.epsilon.value());
        if d <= cfg.epsilon.value() + 1e-7 && out.iter().all(|v| (0.0..=1.0).contains(v)) {
            ok += 1;
        }
    }

    let mut fgsm_equal = true;
    for (i, model) in models.iter().enumerate() {
        let x = Array4::from_shape_fn((4, 3, 12, 12), |_| rng.random_range(0.0f32..=1.0));
        let labels = [0, 1, 2, i % 3];
        let cfg = AttackConfig::pgd(8, 2, 1);
        fgsm_equal &= pgd(model, &x, &labels, &cfg).unwrap() == fgsm(model, &x, &labels, &cfg).unwrap();
    }

    let mut margin_err = 0.0f64;
    for _ in 0..20 {
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = LinearLogistic { w: w.clone() };
        let x = Array4::from_shape_fn((1, 3, 2, 2), |_| rng.random_range(0.4..0.6));
        let (eta, steps) = (rng.random_range(0.001..0.02), rng.random_range(1..6));
        let out = inverse_pgd(&model, &x, &[0], &real_attack(1.0, eta, steps, Direction::Inverse)).unwrap();
        let gain = model.score(&out, 0) - model.score(&x, 0);
        let want = eta * steps as f64 * w.iter().map(|v| v.abs()).sum::<f64>();
        margin_err = margin_err.max((gain - want).abs());
    }
    Verdict::new(
        ok == 100 && fgsm_equal && margin_err <= 1e-6,
        format!("{ok}/100 inside ball and box (worst excess {worst:.1e}); pgd(T=1) == fgsm: {fgsm_equal}; linear margin error {margin_err:.1e}"),
    )
}

fn floe_geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut orth, mut scale) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..11);
        let z = random_matrix(&mut rng, 1, k, 5.0);
        let s = random_matrix(&mut rng, 1, k, 5.0);
        let r = floe_residuals(&z, &s, 1e-12).unwrap();
        let (rv, sv) = (r.row(0).to_vec(), s.row(0).to_vec());
        let (rn, sn) = (oracle_pnorm(&rv, 2.0), oracle_pnorm(&sv, 2.0));
        if rn > 1e-12 && sn > 1e-12 {
            orth = orth.max((rv.iter().zip(&sv).map(|(a, b)| a * b).sum::<f64>() / (rn * sn)).abs());
        }
        for c in [-2.0, 0.5, 10.0] {
            let rc = floe_residuals(&z, &s.mapv(|v| v * c), 1e-12).unwrap();
            let diff = (&rc - &r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            scale = scale.max(diff / (1.0 + rn));
        }
    }
    Verdict::new(orth <= 1e-5 && scale <= 1e-9, format!("max normalized inner product {orth:.1e}; max rescaling change {scale:.1e}"))
}

fn toy_map(values: Array3<f32>) -> AttentionMap {
    let b = values.dim().0;
    AttentionMap {
        values,
        source: MapSource::AuxModel,
        target_class: vec![0; b],
    }
}

fn brute_force_iou(map: &Array3<f32>, region: &Array3<u8>, threshold: f32) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..4 {
        for x in 0..4 {
            let a = map[[0, y, x]] >= threshold;
            let b = region[[0, y, x]] == 1;
            inter += (a && b) as u32;
            union += (a || b) as u32;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn separation_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut complement, mut monotone) = (0, 0);
    for _ in 0..100 {
        let (b, h, w) = (rng.random_range(1..4), rng.random_range(2..10), rng.random_range(2..10));
        let x = Array4::from_shape_fn((b, 3, h, w), |_| rng.random_range(0.0f32..=1.0));
        let m = toy_map(Array3::from_shape_fn((b, h, w), |_| rng.random_range(0.0f32..=1.0)));
        let lo = rng.random_range(0.01..0.98);
        let hi = rng.random_range(lo..0.99);
        let omega = BackgroundThreshold::new(lo).unwrap();
        let kept = separate_background(&x, &m, omega).unwrap();
        let removed = separate_attended(&x, &m, omega).unwrap();
        complement += (&kept + &removed == x) as usize;
        let wider = separate_background(&x, &m, BackgroundThreshold::new(hi).unwrap()).unwrap();
        monotone += kept.iter().zip(wider.iter()).all(|(a, b)| *a == 0.0 || a == b) as usize;
    }

    let mut region = Array3::<u8>::zeros((1, 4, 4));
    let mut map = Array3::<f32>::zeros((1, 4, 4));
    for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        map[[0, y, x]] = 1.0;
    }
    for (y, x) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
        region[[0, y, x]] = 1;
    }
    let hand = attention_region_iou(&toy_map(map), &region, 0.5).unwrap()[0];
    let mut toys = 0;
    for _ in 0..200 {
        let map = Array3::from_shape_fn((1, 4, 4), |_| rng.random_range(0.0f32..=1.0));
        let region = Array3::from_shape_fn((1, 4, 4), |_| rng.random_bool(0.4) as u8);
        let t = rng.random_range(0.1f32..0.9);
        toys += (attention_region_iou(&toy_map(map.clone()), &region, t).unwrap()[0] == brute_force_iou(&map, &region, t)) as usize;
    }
    Verdict::new(
        complement == 100 && monotone == 100 && hand == 2.0 / 6.0 && toys == 200,
        format!("complementarity {complement}/100; monotonicity {monotone}/100; hand toy IoU {hand:.4}; brute-force agreement {toys}/200"),
    )
}

fn desk_config(objective: Objective, seed: u64) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", "desk_dhat.json"].iter().collect();
    let mut cfg = ExperimentConfig::from_path(&path).unwrap();
    cfg.objective = objective;
    cfg.override_seed(seed);
    cfg
}

struct ArmResult {
    fg: f64,
    bg: f64,
    gap: f64,
    test_robust: f64,
}

fn evaluate_arm(model: &Classifier<f32>, data: &TrainingData) -> ArmResult {
    let gap = robust_gap(model, &data.train, &data.test, &AttackConfig::pgd(8, 2, 10)).unwrap();
    let probe = AttackConfig::inverse(4, 2, 10);
    let sweep = attention_bias_sweep(model, &data.test, &[Budget::over_255(4)], Direction::Inverse, &probe, 0.5).unwrap();
    ArmResult {
        fg: sweep[0].fg_iou,
        bg: sweep[0].bg_iou,
        gap: gap.gap,
        test_robust: gap.test_robust_acc,
    }
}

fn train_model(cfg: &ExperimentConfig, data: &TrainingData, aux: &Classifier<f32>) -> Classifier<f32> {
    let out = train(cfg, TrainOptions { data: Some(data), aux: Some(aux), ..Default::default() }).unwrap();
    assert!(out.divergence.is_none(), "{} diverged", cfg.objective.name());
    out.checkpoint.model().unwrap()
}

fn debiasing_experiment() -> Verdict {
    let base = desk_config(Objective::Dhat, 0);
    let data = base.dataset.load().unwrap();
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut lines = Vec::new();
    for seed in 0..3 {
        let dhat_cfg = desk_config(Objective::Dhat, seed);
        let uiat_cfg = desk_config(Objective::UiatStyle { lambda: 1.0 }, seed);
        let aux = train_aux(&dhat_cfg, &data).unwrap();
        let d = evaluate_arm(&train_model(&dhat_cfg, &data, &aux), &data);
        let u = evaluate_arm(&train_model(&uiat_cfg, &data, &aux), &data);
        let (ca, cb, cc) = (d.fg > u.fg && d.bg < u.bg, d.gap < u.gap, d.test_robust >= u.test_robust - 0.01);
        a += ca as usize;
        b += cb as usize;
        c += cc as usize;
        lines.push(format!(
            "seed {seed}: fg {:.3}/{:.3} bg {:.3}/{:.3} gap {:.3}/{:.3} robust {:.3}/{:.3} (dhat/uiat) a={ca} b={cb} c={cc}",
            d.fg, u.fg, d.bg, u.bg, d.gap, u.gap, d.test_robust, u.test_robust
        ));
    }
    Verdict::new(a >= 2 && b >= 2 && c >= 2, format!("(a) {a}/3 (b) {b}/3 (c) {c}/3\n    {}", lines.join("\n    ")))
}

/// Index of the maximum and whether the curve rises to it and falls after
/// it with at most one step against the trend.
fn single_interior_peak(acc: &[f64]) -> (bool, usize) {
    let peak = (0..acc.len()).fold(0, |best, i| if acc[i] > acc[best] { i } else { best });
    let against = (0..acc.len() - 1)
        .filter(|&i| if i < peak { acc[i + 1] < acc[i] } else { acc[i + 1] > acc[i] })
        .count();
    let interior = peak > 0 && peak + 1 < acc.len() && acc[peak] > acc[0] && acc[peak] > acc[acc.len() - 1];
    (interior && against <= 1, peak)
}

const SWEEP_EPOCHS: usize = 10;

fn omega_sweep() -> Verdict {
    let mut base = desk_config(Objective::Dhat, 0);
    base.schedule = dhat::training::TrainSchedule::standard(SWEEP_EPOCHS, base.schedule.base_lr, base.schedule.batch_size, 0);
    let data = base.dataset.load().unwrap();
    let aux = train_aux(&base, &data).unwrap();
    let omegas: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let acc: Vec<f64> = omegas
        .iter()
        .map(|&w| {
            let cfg = base.clone().with_omega(BackgroundThreshold::new(w).unwrap());
            robust_accuracy(&train_model(&cfg, &data, &aux), &data.test, &AttackConfig::pgd(8, 2, 10)).unwrap()
        })
        .collect();
    let (pass, peak) = single_interior_peak(&acc);
    let curve: Vec<String> = omegas.iter().zip(&acc).map(|(w, a)| format!("{w:.1}:{a:.3}")).collect();
    Verdict::new(pass, format!("{SWEEP_EPOCHS} epochs per run; peak at omega {:.1}; {}", omegas[peak], curve.join(" ")))
}

fn reproducibility() -> Verdict {
    let cfg = tiny_config(Objective::Dhat, 3);
    let data = tiny_data();
    let run = || train(&cfg, TrainOptions { data: Some(&data), ..Default::default() }).unwrap();
    let (first, second) = (run(), run());
    let identical = first.log.to_csv(false).unwrap() == second.log.to_csv(false).unwrap();

    let part = train(&cfg, TrainOptions { data: Some(&data), stop_after: Some(1), ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("part.ckpt");
    part.checkpoint.save(&path).unwrap();
    let loaded = dhat::models::Checkpoint::load(&path).unwrap();
    let resumed = resume(loaded, part.log, &cfg, TrainOptions { data: Some(&data), ..Default::default() }).unwrap();
    let max_loss_diff = resumed
        .log
        .records()
        .iter()
        .zip(first.log.records())
        .fold(0.0f64, |m, (a, b)| m.max((a.loss_total - b.loss_total).abs()));
    let same_params = resumed.checkpoint.params == first.checkpoint.params;
    Verdict::new(
        identical && max_loss_diff <= 1e-6 && same_params,
        format!("repeat CSV identical: {identical}; resumed loss trajectory max difference {max_loss_diff:.1e}; final parameters identical: {same_params}"),
    )
}

fn main() -> ExitCode {
    let flag = |name: &str| std::env::var(name).is_ok_and(|v| v != "0");
    let (quick, strict) = (flag("DHAT_ACCEPTANCE_QUICK"), flag("DHAT_ACCEPTANCE_STRICT"));
    type Check = fn() -> Verdict;
    let criteria: [(u32, &str, Check, Duration, bool); 8] = [
        (1, "loss analytics", loss_analytics, Duration::from_secs(10), false),
        (2, "gradient fidelity", gradient_fidelity, Duration::from_secs(30), false),
        (3, "attack constraints", attack_constraints, Duration::from_secs(60), false),
        (4, "FLOE geometry", floe_geometry, Duration::from_secs(10), false),
        (5, "background separation algebra", separation_algebra, Duration::from_secs(10), false),
        (6, "desk-scale debiasing experiment", debiasing_experiment, Duration::from_secs(30 * 60), true),
        (7, "omega sweep shape", omega_sweep, Duration::from_secs(20 * 60), true),
        (8, "reproducibility", reproducibility, Duration::from_secs(10 * 60), false),
    ];
    let (mut failed, mut fatal) = (0, 0);
    for (n, name, check, budget, heavy) in criteria {
        if heavy && quick {
            println!("criterion {n} {name}: SKIP (quick mode)");
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= budget;
        failed += !pass as usize;
        fatal += (!pass && (strict || !heavy)) as usize;
        println!(
            "criterion {n} {name}: {} [{:.1}s of {}s] {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            v.detail
        );
    }
    println!("{failed} of 8 criteria failed");
    if fatal == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
