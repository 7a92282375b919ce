//! Acceptance checks, one line per criterion. Runs as a plain binary
//! (`harness = false`) so the report prints in order and the exit status
//! reflects every check.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{brute_conr, brute_pairs, finite_difference, random_batch, relative_error};
use conr::datagen::DensityProfile;
use conr::eval::{assign_shots, delta1, geometric_mean_error, Shot};
use conr::experiment::{
    ablation_configs, compare_methods, run_experiment, Comparison, DataConfig, ExperimentConfig,
    Method, RunResult,
};
use conr::label::Label;
use conr::loss::{conr_loss, ConrConfig, Variant};
use conr::pairing::{select_pairs_with, AugmentedBatch, PairSets, PairingMode};
use conr::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pairs_for(batch: &AugmentedBatch, cfg: &ConrConfig) -> PairSets {
    select_pairs_with(
        &batch.labels,
        &batch.predictions,
        &cfg.rule(),
        cfg.variant.pairing_mode(),
    )
    .unwrap()
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut with_anchors = 0;
    for _ in 0..20 {
        let cfg = ConrConfig {
            omega: [0.5, 1.0, 2.0][rng.random_range(0..3)],
            tau: [0.2, 0.7, 1.0][rng.random_range(0..3)],
            ..ConrConfig::default()
        };
        let rb = random_batch(&mut rng, 8, 8, 6.0);
        let pairs = pairs_for(&rb.batch, &cfg);
        with_anchors += usize::from(pairs.anchor_count() > 0);
        let beta = cfg.beta;
        let out = conr_loss(&rb.batch, &pairs, &rb.weights, &cfg).unwrap();
        let mut analytic = out.d_features.clone();
        analytic.scale(beta);
        let fd = finite_difference(&rb.batch.features, 1e-5, |z| {
            let b = AugmentedBatch {
                features: z.clone(),
                ..rb.batch.clone()
            };
            beta * conr_loss(&b, &pairs, &rb.weights, &cfg).unwrap().value
        });
        worst = worst.max(relative_error(analytic.data(), fd.data()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-5 && secs < 10.0 && with_anchors > 0,
        format!("max relative error {worst:.2e} over 20 batches ({with_anchors} with anchors), {secs:.2}s"),
    )
}

fn oracle_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let sources = rng.random_range(1..=32);
        let omega = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let cfg = ConrConfig {
            omega,
            tau: [0.2, 0.5, 1.0][rng.random_range(0..3)],
            variant: Variant::ALL[case % 5],
            ..ConrConfig::default()
        };
        let rb = random_batch(&mut rng, sources, 6, 8.0);
        let mode = cfg.variant.pairing_mode();
        let pairs = pairs_for(&rb.batch, &cfg);
        let oracle = brute_pairs(&rb.labels, &rb.preds, omega, mode == PairingMode::LabelOnly);
        if pairs.positives != oracle.positives
            || pairs.negatives != oracle.negatives
            || pairs.anchor_mask != oracle.anchors
        {
            return Err(format!(
                "pair sets differ in batch {case} (size {})",
                2 * sources
            ));
        }
        let got = conr_loss(&rb.batch, &pairs, &rb.weights, &cfg)
            .unwrap()
            .value;
        let want = brute_conr(&rb.batch.features, &rb.labels, &rb.preds, &rb.weights, &cfg);
        if want != 0.0 {
            worst = worst.max((got - want).abs() / want.abs());
        } else if got != 0.0 {
            return Err(format!("batch {case}: loss {got}, reference 0"));
        }
    }
    ensure(
        worst <= 1e-9,
        format!(
            "200 batches of size 2..64, pair sets identical, max loss relative error {worst:.2e}"
        ),
    )
}

/// Anchor with one positive (same direction) and one negative (orthogonal),
/// τ = 1, pushing weight `eta_scale · 1 · |0 − 5|`.
fn single_negative_anchor_loss(eta_scale: f64) -> f64 {
    let batch = AugmentedBatch::new(
        Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        vec![Label::Scalar(0.0), Label::Scalar(0.0), Label::Scalar(5.0)],
        vec![Label::Scalar(0.0), Label::Scalar(0.0), Label::Scalar(0.5)],
        vec![0, 0, 1],
    )
    .unwrap();
    let cfg = ConrConfig {
        tau: 1.0,
        eta_scale,
        ..ConrConfig::default()
    };
    let pairs = pairs_for(&batch, &cfg);
    assert_eq!(pairs.positives[0], vec![1]);
    assert_eq!(pairs.negatives[0], vec![2]);
    let out = conr_loss(&batch, &pairs, &[1.0; 3], &cfg).unwrap();
    out.per_anchor.iter().find(|(j, _)| *j == 0).unwrap().1
}

fn closed_form_check() -> Check {
    let unit = single_negative_anchor_loss(0.2);
    let double = single_negative_anchor_loss(0.4);
    let want_unit = (1.0 + (-1.0f64).exp()).ln();
    let want_double = (1.0 + 2.0 / std::f64::consts::E).ln();
    ensure(
        (unit - want_unit).abs() < 1e-9 && (double - want_double).abs() < 1e-9,
        format!(
            "S=1: {unit:.9} vs ln(1+1/e) {want_unit:.9}; S=2: {double:.9} vs ln(1+2/e) {want_double:.9}"
        ),
    )
}

fn invariants_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 300;
    for t in 0..trials {
        let sources = rng.random_range(1..=24);
        let cfg = ConrConfig {
            omega: [0.5, 1.0, 2.0][t % 3],
            variant: Variant::ALL[t % 5],
            ..ConrConfig::default()
        };
        let rb = random_batch(&mut rng, sources, 4, 8.0);
        let pairs = pairs_for(&rb.batch, &cfg);
        let out = conr_loss(&rb.batch, &pairs, &rb.weights, &cfg).unwrap();
        if !(out.value >= 0.0 && out.value.is_finite()) {
            return Err(format!("trial {t}: loss {}", out.value));
        }
        for j in 0..pairs.len() {
            if pairs.anchor_mask[j] == pairs.negatives[j].is_empty() {
                return Err(format!(
                    "trial {t}: anchor flag of {j} disagrees with its negatives"
                ));
            }
        }
        for k in 0..sources {
            if !pairs.positives[k].contains(&(sources + k))
                || !pairs.positives[sources + k].contains(&k)
            {
                return Err(format!(
                    "trial {t}: views of source {k} not mutual positives"
                ));
            }
        }

        // No anchors: predictions spread far apart leave no negatives.
        let mut spread = rb.batch.clone();
        spread.predictions = (0..spread.len())
            .map(|i| Label::Scalar(100.0 * i as f64))
            .collect();
        let full = ConrConfig::default();
        let none = pairs_for(&spread, &full);
        let zero = conr_loss(&spread, &none, &rb.weights, &full).unwrap();
        if none.anchor_count() != 0
            || zero.value != 0.0
            || zero.d_features.data().iter().any(|&g| g != 0.0)
        {
            return Err(format!("trial {t}: nonzero loss without anchors"));
        }

        // Larger pushing weights raise every contributing anchor's loss.
        let full_pairs = pairs_for(&rb.batch, &full);
        let low = conr_loss(&rb.batch, &full_pairs, &rb.weights, &full).unwrap();
        let stronger = ConrConfig {
            eta_scale: full.eta_scale * 3.0,
            ..full
        };
        let high = conr_loss(&rb.batch, &full_pairs, &rb.weights, &stronger).unwrap();
        for ((j, a), (_, b)) in low.per_anchor.iter().zip(&high.per_anchor) {
            if b <= a {
                return Err(format!("trial {t}: anchor {j} loss {a} did not grow ({b})"));
            }
        }

        // Relabelling the rows changes nothing.
        let n = rb.batch.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = AugmentedBatch::new(
            rb.batch.features.select_rows(&perm),
            perm.iter().map(|&i| rb.batch.labels[i].clone()).collect(),
            perm.iter()
                .map(|&i| rb.batch.predictions[i].clone())
                .collect(),
            perm.iter().map(|&i| rb.batch.origin[i]).collect(),
        )
        .unwrap();
        let w: Vec<f64> = perm.iter().map(|&i| rb.weights[i]).collect();
        let p2 = pairs_for(&permuted, &cfg);
        let v2 = conr_loss(&permuted, &p2, &w, &cfg).unwrap().value;
        if (v2 - out.value).abs() > 1e-12 * out.value.max(1.0) {
            return Err(format!("trial {t}: permuted loss {v2} vs {}", out.value));
        }
    }
    Ok(format!(
        "{trials} random batches: nonnegative, zero without anchors, monotone in S, permutation invariant, anchors have negatives, views mutual positives"
    ))
}

fn benchmark_config(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    }
}

fn benchmark_setup_check(cfg: &ExperimentConfig) -> Check {
    let DataConfig::Synthetic(spec) = &cfg.data else {
        return Err("default data source is not synthetic".into());
    };
    let test_size = spec.test_per_bin * (spec.label_max - spec.label_min).round() as usize;
    let ok = spec.label_min == 0.0
        && spec.label_max == 100.0
        && matches!(spec.profile, DensityProfile::Exponential { .. })
        && spec.n_train == 5000
        && test_size == 1000
        && cfg.conr.alpha == 1.0
        && cfg.conr.beta == 4.0
        && cfg.conr.omega == 1.0
        && cfg.conr.tau == 0.2
        && cfg.conr.eta_scale == 0.01
        && cfg.conr.variant == Variant::Full;
    ensure(
        ok,
        format!(
            "labels [{}, {}], {:?}, {} train / {} balanced test, alpha {} beta {} omega {} tau {} eta_scale {}",
            spec.label_min,
            spec.label_max,
            spec.profile,
            spec.n_train,
            test_size,
            cfg.conr.alpha,
            cfg.conr.beta,
            cfg.conr.omega,
            cfg.conr.tau,
            cfg.conr.eta_scale
        ),
    )
}

fn runs_of<'a>(cmp: &'a Comparison, name: &str) -> Vec<&'a RunResult> {
    let runs: Vec<&RunResult> = cmp.runs.iter().filter(|r| r.name == name).collect();
    assert_eq!(runs.len(), SEEDS.len(), "runs for {name}");
    runs
}

fn few_mae(r: &RunResult) -> f64 {
    r.test.few.as_ref().expect("few-shot test samples").mae
}

fn few_shot_check(vanilla: &[&RunResult], conr: &[&RunResult], secs: f64) -> Check {
    let mut wins = 0;
    let mut gains = Vec::new();
    for (v, c) in vanilla.iter().zip(conr) {
        let (bv, bc) = (few_mae(v), few_mae(c));
        wins += usize::from(bc < bv);
        gains.push(100.0 * (bv - bc) / bv);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let per_seed: Vec<String> = gains.iter().map(|g| format!("{g:+.1}%")).collect();
    ensure(
        wins >= 4 && mean >= 5.0 && secs <= 300.0,
        format!(
            "ConR lower in {wins}/5 seeds, mean improvement {mean:.1}% [{}], {secs:.0}s",
            per_seed.join(" ")
        ),
    )
}

fn penalty_check(conr: &[&RunResult]) -> Check {
    let mut halved = 0;
    let mut ratios = Vec::new();
    for r in conr {
        let (Some(first), Some(last)) = (r.expected_penalty_first(), r.expected_penalty_final())
        else {
            return Err(format!("seed {}: no penalty recorded", r.seed));
        };
        let ratio = last / first;
        halved += usize::from(last <= 0.5 * first);
        ratios.push(format!("{ratio:.3}"));
    }
    ensure(
        halved >= 4,
        format!(
            "final/epoch-1 ratio <= 0.5 in {halved}/5 seeds [{}]",
            ratios.join(" ")
        ),
    )
}

fn collapse_check(vanilla: &[&RunResult], conr: &[&RunResult]) -> Check {
    let mut ok = 0;
    let mut pairs = Vec::new();
    for (v, c) in vanilla.iter().zip(conr) {
        ok += usize::from(c.collapse_rate_final <= v.collapse_rate_final);
        pairs.push(format!(
            "{:.3}/{:.3}",
            c.collapse_rate_final, v.collapse_rate_final
        ));
    }
    ensure(
        ok >= 4,
        format!(
            "ConR <= vanilla in {ok}/5 seeds, ConR/vanilla [{}]",
            pairs.join(" ")
        ),
    )
}

fn metrics_check() -> Check {
    let gm_a = geometric_mean_error(&[1.0, 4.0]);
    let gm_b = geometric_mean_error(&[2.0, 8.0, 4.0]);
    let d_in = delta1(&[1.2], &[1.0]);
    let d_out = delta1(&[1.3], &[1.0]);
    let mut labels = Vec::new();
    for (bin, count) in [(0.5, 150), (1.5, 50), (2.5, 7)] {
        labels.extend(std::iter::repeat_n(bin, count));
    }
    let part = assign_shots(&labels, 1.0).unwrap();
    let shots = [part.shot_of(0.5), part.shot_of(1.5), part.shot_of(2.5)];
    let ok = (gm_a - 2.0).abs() < 1e-9
        && (gm_b - 4.0).abs() < 1e-9
        && d_in == Some(1.0)
        && d_out == Some(0.0)
        && shots == [Shot::Many, Shot::Median, Shot::Few];
    ensure(
        ok,
        format!(
            "GM(1,4)={gm_a:.12} GM(2,8,4)={gm_b:.12} delta1(1.2)={d_in:?} delta1(1.3)={d_out:?} 150/50/7 -> {shots:?}"
        ),
    )
}

fn determinism_check(cmp_dir: &Path, dir: &Path) -> Check {
    let mut cfg = benchmark_config(Method::Conr);
    cfg.seed = 3;
    cfg.output_dir = dir.to_path_buf();
    run_experiment(&cfg).map_err(|e| e.to_string())?;
    let again = std::fs::read(dir.join("metrics.json")).unwrap();
    let first = std::fs::read(cmp_dir.join("conr/seed_3/metrics.json")).unwrap();
    ensure(
        again == first,
        format!(
            "ConR seed 3 rerun: metrics.json {} bytes, identical: {}",
            again.len(),
            again == first
        ),
    )
}

fn ablation_check(
    cmp: &Comparison,
    conr: &[&RunResult],
    vanilla: &[&RunResult],
    dir: &Path,
) -> Check {
    let path = dir.join("ablation.csv");
    cmp.write_ablation_csv(&path).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    let names: Vec<&str> = rows[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let filled = rows[1..]
        .iter()
        .all(|l| l.split(',').skip(1).all(|v| !v.is_empty()));
    let full = runs_of(cmp, Variant::Full.table_name());
    let same = full
        .iter()
        .zip(conr)
        .all(|(a, b)| a.metrics_json().unwrap() == b.metrics_json().unwrap());
    let criteria = few_shot_check(vanilla, &full, 0.0).is_ok()
        && penalty_check(&full).is_ok()
        && collapse_check(vanilla, &full).is_ok();
    ensure(
        rows.len() == 6 && filled && same && criteria,
        format!(
            "{} variant rows [{}], all cells filled: {filled}, Full reproduces the ConR runs: {same}, Full meets the benchmark checks: {criteria}",
            rows.len() - 1,
            names.join(", ")
        ),
    )
}

fn report(name: &str, check: Check, failures: &mut usize) {
    match check {
        Ok(detail) => println!("[PASS] {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("[FAIL] {name}: {detail}");
        }
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;

    report(
        "ConR gradient vs finite differences",
        gradient_check(),
        &mut failures,
    );
    report(
        "pairing and loss vs brute-force references",
        oracle_check(),
        &mut failures,
    );
    report(
        "single-negative anchor closed forms",
        closed_form_check(),
        &mut failures,
    );
    report(
        "loss structural invariants",
        invariants_check(),
        &mut failures,
    );
    report(
        "metric exact values and shot thresholds",
        metrics_check(),
        &mut failures,
    );

    let vanilla_cfg = benchmark_config(Method::Vanilla);
    let conr_cfg = benchmark_config(Method::Conr);
    report(
        "synthetic benchmark setup",
        benchmark_setup_check(&conr_cfg),
        &mut failures,
    );

    let cmp_dir = tmp.path().join("compare");
    let start = Instant::now();
    let cmp = match compare_methods(&[vanilla_cfg, conr_cfg.clone()], &SEEDS, &cmp_dir) {
        Ok(c) => c,
        Err(e) => {
            println!("[FAIL] synthetic benchmark runs: {e}");
            return ExitCode::FAILURE;
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let vanilla = runs_of(&cmp, "Vanilla");
    let conr = runs_of(&cmp, "ConR");
    report(
        "few-shot MAE, ConR vs vanilla",
        few_shot_check(&vanilla, &conr, secs),
        &mut failures,
    );
    report(
        "expected penalty halves during training",
        penalty_check(&conr),
        &mut failures,
    );
    report(
        "few-shot collapse rate, ConR vs vanilla",
        collapse_check(&vanilla, &conr),
        &mut failures,
    );
    report(
        "metrics.json reproducible",
        determinism_check(&cmp_dir, &tmp.path().join("rerun")),
        &mut failures,
    );

    let ablation_dir = tmp.path().join("ablation");
    let ablation = ablation_configs(&conr_cfg);
    let check = match compare_methods(&ablation, &SEEDS, &ablation_dir) {
        Ok(ab) => ablation_check(&ab, &conr, &vanilla, &ablation_dir),
        Err(e) => Err(e.to_string()),
    };
    report("ablation table over five variants", check, &mut failures);

    println!("acceptance: {} failed", failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
