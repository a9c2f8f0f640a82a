//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dprisk::accountant::{calibrate_sigma, default_orders, epsilon_for, rdp_step, step_curve, PrivacyParams};
use dprisk::config::ExperimentConfig;
use dprisk::datagen::{generate, normalize, Dataset, DatasetSpec, NormStats};
use dprisk::evalrecon::{
    cumulative_curve, default_grid, match_reconstructions, Distance, MatchResult, SsimConfig,
};
use dprisk::imprint::{detect_imprint, run_campaign, AttackScenario};
use dprisk::numerics::{Rng, Tensor};
use dprisk::pipeline::{self, Budget, BudgetCurve, CellRecord, Prepared, Stages};
use dprisk::report::curves_svg;
use dprisk::rero::{game_params, mc_privacy_loss_epsilon, mc_reconstruction_game, worst_case_bound};
use dprisk::trainer::{Model, ModelSpec};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct AttackData {
    raw: Vec<Tensor>,
    normalized: Dataset,
    stats: NormStats,
    downstream: Model,
}

fn attack_data() -> AttackData {
    let raw = generate(&DatasetSpec::binary(64, 16, 2024)).unwrap();
    let (normalized, stats) = normalize(&raw).unwrap();
    AttackData {
        raw: raw.samples.iter().map(|s| s.image.clone()).collect(),
        normalized,
        stats,
        downstream: Model::init(&ModelSpec::mlp(&[1, 16, 16], &[32], 2), 7).unwrap(),
    }
}

fn client_dp(sigma: f64, clip: f64) -> PrivacyParams {
    PrivacyParams {
        noise_multiplier: sigma,
        clip_norm: clip,
        sampling_rate: 1.0 / 64.0,
        steps: 64,
        delta: 8e-7,
    }
}

fn attack(d: &AttackData, scenario: &AttackScenario) -> (Vec<MatchResult>, Vec<Tensor>) {
    let campaign = run_campaign(&d.normalized, &d.stats, scenario, &d.downstream).unwrap();
    let recons: Vec<Tensor> = campaign.sets.iter().flat_map(|s| s.images.iter().cloned()).collect();
    let m = match_reconstructions(&d.raw, &recons, &SsimConfig::default(), Distance::Ssim).unwrap();
    (m, recons)
}

fn exact_recovery() -> Check {
    let d = attack_data();
    let (matches, recons) = attack(&d, &AttackScenario::default());
    let mut recovered = 0;
    let mut worst_mae = 0.0f64;
    for m in &matches {
        let Some(j) = m.best_recon else { continue };
        let mae = d.raw[m.sample].sub(&recons[j]).unwrap().data().iter().map(|v| v.abs()).sum::<f64>()
            / d.raw[m.sample].len() as f64;
        if m.best_ssim >= 0.999 && mae < 1e-8 {
            recovered += 1;
            worst_mae = worst_mae.max(mae);
        }
    }
    ensure(recovered >= 63, format!("{recovered}/64 recovered, worst MAE {worst_mae:.2e}"))
}

/// Successes above SSIM 0.8 and the best SSIM seen, worst case over clip
/// norms, for each noise level.
fn dp_sweep(d: &AttackData, tau: Option<f64>) -> (usize, f64, f64) {
    let mut worst = (0usize, 0.0, f64::NEG_INFINITY);
    for sigma in [0.005, 0.0054, 0.01, 0.1] {
        for clip in [0.01, 0.1, 1.0, 10.0] {
            let scenario = AttackScenario {
                dp_on_client: Some(client_dp(sigma, clip)),
                tau,
                ..AttackScenario::default()
            };
            let (m, _) = attack(d, &scenario);
            let above = m.iter().filter(|r| r.best_ssim > 0.8).count();
            let best = m.iter().map(|r| r.best_ssim).fold(f64::NEG_INFINITY, f64::max);
            if above > worst.0 || (above == worst.0 && best > worst.2) {
                worst = (above, sigma, best);
            }
        }
    }
    worst
}

fn dp_stops_attack() -> Check {
    let d = attack_data();
    let (above, sigma, best) = dp_sweep(&d, None);
    // Reported only: the attacker keeps every bin, however noisy.
    let (raw_above, raw_sigma, raw_best) = dp_sweep(&d, Some(0.0));
    ensure(
        above == 0,
        format!(
            "most successes {above}/64 (sigma {sigma}), best SSIM {best:.3}; \
             without the bin cut-off {raw_above}/64 at sigma {raw_sigma}, best SSIM {raw_best:.3}"
        ),
    )
}

fn risk_ordering() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.set("privacy.eps", "1, 8, 32, 1e9").unwrap();
    cfg.set("privacy.kappa", "0.0005").unwrap();
    cfg.set("privacy.nonprivate", "false").unwrap();
    let (profile, _) = pipeline::run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let rows = &profile.rows;
    let mut problems = Vec::new();
    if rows.len() != 4 || profile.has_failures() {
        problems.push(format!("{} rows, failures {}", rows.len(), profile.has_failures()));
    }
    for r in rows {
        if !(r.worst_case >= r.relaxed && r.relaxed >= r.realistic) {
            problems.push(format!("eps {}: {} / {} / {}", r.epsilon.render(), r.worst_case, r.relaxed, r.realistic));
        }
    }
    for w in rows.windows(2) {
        if w[1].worst_case < w[0].worst_case || w[1].relaxed < w[0].relaxed {
            problems.push(format!("not monotone between eps {} and {}", w[0].epsilon.render(), w[1].epsilon.render()));
        }
    }
    let last = rows.last().ok_or("no rows")?;
    if !(last.worst_case == 1.0 && last.relaxed == 1.0) {
        problems.push(format!("eps 1e9 bounds {} / {}", last.worst_case, last.relaxed));
    }
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}: {:.4}/{:.4}/{:.2}", r.epsilon.render(), r.worst_case, r.relaxed, r.realistic))
        .collect();
    ensure(problems.is_empty(), format!("{} {}", table.join(", "), problems.join("; ")))
}

fn bound_soundness() -> Check {
    let mut rng = Rng::new(99);
    let mut worst_margin = f64::NEG_INFINITY;
    let mut detail = String::new();
    for n in [4, 16, 64] {
        for sigma in [0.5, 1.0, 2.0] {
            let game = mc_reconstruction_game(n, sigma, 100_000, &mut rng).map_err(|e| e.to_string())?;
            let bound = worst_case_bound(&game_params(n, sigma)).map_err(|e| e.to_string())?.gamma;
            let margin = (game.success_rate - bound) / game.std_error.max(1e-12);
            if margin > worst_margin {
                worst_margin = margin;
                detail = format!("n {n}, sigma {sigma}: empirical {:.4} vs bound {:.4}", game.success_rate, bound);
            }
        }
    }
    ensure(worst_margin <= 3.0, format!("closest case {detail} ({worst_margin:.1} SE)"))
}

fn accountant() -> Check {
    let mut problems = Vec::new();
    for sigma in [0.5, 1.0, 4.0] {
        let curve = step_curve(sigma, 1.0, &default_orders());
        for (a, v) in curve.iter() {
            let exact = a / (2.0 * sigma * sigma);
            if v != exact || rdp_step(sigma, 1.0, a) != exact {
                problems.push(format!("q=1 sigma {sigma} order {a}: {v} vs {exact}"));
            }
        }
    }
    let (q, sigma, steps, delta) = (0.01, 1.0, 1000, 1e-5);
    let eps = epsilon_for(sigma, q, steps, delta).map_err(|e| e.to_string())?.epsilon.value();
    let lower = mc_privacy_loss_epsilon(q, sigma, steps, delta, 200_000, &mut Rng::new(5)).map_err(|e| e.to_string())?;
    if !(eps >= lower && eps <= 2.0 * lower) {
        problems.push(format!("eps {eps} outside [{lower}, {}]", 2.0 * lower));
    }
    let mut worst_rt = 0.0f64;
    for target in [0.5, 1.0, 8.0, 32.0] {
        let s = calibrate_sigma(target, delta, q, steps).map_err(|e| e.to_string())?;
        let back = epsilon_for(s, q, steps, delta).map_err(|e| e.to_string())?.epsilon.value();
        let again = calibrate_sigma(back, delta, q, steps).map_err(|e| e.to_string())?;
        worst_rt = worst_rt.max((again - s).abs() / s);
    }
    if worst_rt > 0.01 {
        problems.push(format!("calibration round trip off by {worst_rt:.2e}"));
    }
    ensure(
        problems.is_empty(),
        format!("eps {eps:.4} vs MC lower {lower:.4}, round trip {worst_rt:.1e} {}", problems.join("; ")),
    )
}

fn metric_means(cells: &[CellRecord], name: &str) -> Vec<(Budget, f64)> {
    let mut out: Vec<(Budget, f64)> = Vec::new();
    for c in cells {
        let Some(t) = &c.training else { continue };
        let Some((_, v)) = t.metrics.iter().find(|(n, _)| n == name) else { continue };
        match out.iter_mut().find(|(b, _)| *b == c.budget) {
            Some(e) => e.1 += v,
            None => out.push((c.budget, *v)),
        }
    }
    for (b, v) in &mut out {
        let n = cells.iter().filter(|c| c.budget == *b && c.training.is_some()).count();
        *v /= n as f64;
    }
    out
}

fn training_cells(cfg: &ExperimentConfig) -> Result<Vec<CellRecord>, String> {
    let prep = Prepared::new(cfg).map_err(|e| e.to_string())?;
    let cells: Vec<CellRecord> = pipeline::run_cells(cfg, &prep, Stages { train: true, attack: false })
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|o| o.record)
        .collect();
    if let Some(bad) = cells.iter().find(|c| !c.errors.is_empty()) {
        return Err(format!("{} seed {}: {:?}", bad.budget.id(), bad.seed, bad.errors));
    }
    Ok(cells)
}

fn mean_of(means: &[(Budget, f64)], b: Budget) -> f64 {
    means.iter().find(|(x, _)| *x == b).map_or(f64::NAN, |m| m.1)
}

fn classification_trend() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.set("privacy.eps", "1, 1e9").unwrap();
    let means = metric_means(&training_cells(&cfg)?, "mcc");
    let (np, hi, lo) = (
        mean_of(&means, Budget::NONPRIVATE),
        mean_of(&means, Budget(1e9)),
        mean_of(&means, Budget(1.0)),
    );
    ensure(
        (np - hi).abs() <= 0.02 && lo <= np - 0.10,
        format!("mean MCC non-private {np:.4}, eps 1e9 {hi:.4}, eps 1 {lo:.4}"),
    )
}

fn segmentation_trend() -> Check {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("dataset.kind", "segmentation"),
        ("dataset.samples", "400"),
        ("dataset.size", "32"),
        ("model.kind", "unet_lite"),
        ("model.channels", "8"),
        ("train.learning_rate", "0.01"),
        ("train.epochs", "30"),
        ("train.batch_size", "32"),
        ("privacy.eps", "1, 1e9"),
        ("privacy.nonprivate", "false"),
        ("run.seeds", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let means = metric_means(&training_cells(&cfg)?, "dice_2");
    let (hi, lo) = (mean_of(&means, Budget(1e9)), mean_of(&means, Budget(1.0)));
    ensure(hi > 0.0 && lo < 0.5 * hi, format!("tumour Dice eps 1 {lo:.4}, eps 1e9 {hi:.4}"))
}

fn gradients() -> Check {
    let zoo = common::gradient_zoo();
    let mut worst = (0.0f64, "");
    for (name, model, loss) in &zoo {
        let e = common::max_gradient_error(model, loss, 3, 7);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    ensure(
        worst.0 <= 1e-4,
        format!("{} layer types, worst relative error {:.2e} ({})", common::layer_names(&zoo).len(), worst.0, worst.1),
    )
}

fn curve_artifacts() -> Check {
    let render = || {
        let d = attack_data();
        let nonprivate = attack(&d, &AttackScenario::default()).0;
        let dp = AttackScenario {
            dp_on_client: Some(client_dp(0.0054, 1.0)),
            ..AttackScenario::default()
        };
        let private = attack(&d, &dp).0;
        let curves = vec![
            BudgetCurve {
                epsilon: Budget(1e9),
                curve: cumulative_curve(&private, &default_grid()).unwrap(),
            },
            BudgetCurve {
                epsilon: Budget::NONPRIVATE,
                curve: cumulative_curve(&nonprivate, &default_grid()).unwrap(),
            },
        ];
        let csv: String = curves.iter().map(|c| c.curve.to_csv()).collect();
        (curves.clone(), csv, curves_svg(&curves))
    };
    let (curves, csv_a, svg_a) = render();
    let (_, csv_b, svg_b) = render();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (name, text) in [("a.csv", &csv_a), ("a.svg", &svg_a), ("b.csv", &csv_b), ("b.svg", &svg_b)] {
        std::fs::write(dir.path().join(name), text).map_err(|e| e.to_string())?;
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    let same = read("a.csv") == read("b.csv") && read("a.svg") == read("b.svg");
    let np = curves[1].curve.at(0.1).unwrap_or(f64::NAN);
    let private = curves[0].curve.at(0.1).unwrap_or(f64::NAN);
    ensure(
        np >= 0.95 && private == 0.0 && same && svg_a.matches("<polyline").count() == 2,
        format!("at error 0.1: non-private {np:.3}, sigma 0.0054 {private:.3}; byte-identical {same}"),
    )
}

fn detection() -> Check {
    let clean = common::clean_zoo();
    let modified = common::modified_zoo();
    let fp = clean.iter().filter(|m| detect_imprint(m)).count();
    let tp = modified.iter().filter(|m| detect_imprint(m)).count();
    ensure(
        fp == 0 && tp == modified.len(),
        format!("true positives {tp}/{}, false positives {fp}/{}", modified.len(), clean.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check, Duration); 10] = [
        ("exact recovery without DP", exact_recovery, Duration::from_secs(30)),
        ("DP stops the realistic attack", dp_stops_attack, Duration::from_secs(60)),
        ("risk ordering across budgets", risk_ordering, Duration::from_secs(300)),
        ("worst-case bound soundness", bound_soundness, Duration::from_secs(120)),
        ("accountant correctness", accountant, Duration::from_secs(120)),
        ("classification utility trend", classification_trend, Duration::from_secs(900)),
        ("segmentation utility trend", segmentation_trend, Duration::from_secs(900)),
        ("gradient correctness", gradients, Duration::from_secs(60)),
        ("reconstruction curve artifact", curve_artifacts, Duration::from_secs(60)),
        ("imprint detection", detection, Duration::from_secs(10)),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= *limit => (true, d),
            Ok(d) => (false, format!("{d}; too slow")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {detail} [{:.1}s / {}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
