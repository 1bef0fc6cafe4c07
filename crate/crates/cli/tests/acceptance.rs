//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion
//! straight to stderr (so it shows without `--nocapture`), then fails the
//! test if any criterion failed.
//!
//! The learned-model criteria share one experiment per seed: a synthetic
//! cohort of 36 controls and 20 patients. Controls 0..16 train every model,
//! controls 16..24 are the held-out set for method ordering and the length
//! trend, and controls 16..36 against the 20 patients drive detection and
//! regional analysis.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use restdyn_core::baselines::*;
use restdyn_core::data::*;
use restdyn_core::gradcheck::run_suite;
use restdyn_core::models::{Model, ModelKind, ModelSpec};
use restdyn_core::optim::{evaluate, train, AdamConfig, TrainConfig};
use restdyn_core::stats::*;
use restdyn_core::{FrameScorer, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const T: usize = 8;
const EPOCHS: usize = 20;
const BATCH: usize = 8;
const PREDICTOR_LR: f64 = 3e-3;
const AUTOENCODER_LR: f64 = 1e-3;
const N_TRAIN: usize = 16;
const N_HELD_OUT: usize = 8;
const N_TEST_CONTROLS: usize = 20;
const N_PATIENTS: usize = 20;

struct Outcome {
    line: String,
    pass: bool,
}

fn outcome(id: &str, title: &str, pass: bool, detail: String) -> Outcome {
    let line = format!("[{}] {id} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    // direct handle: libtest only captures the print macros
    let _ = writeln!(std::io::stderr(), "{line}");
    Outcome { line, pass }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------
// 1. gradient suite

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let reports = run_suite().expect("suite runs");
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        "C1",
        "gradient suite",
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, {} failed {failed:?}, worst rel err {worst:.2e} (< 1e-4), {:.1}s (< 120s)",
            reports.len(),
            failed.len(),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. baseline oracles

fn c2_baselines() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut linear_err = 0.0_f64;
    for _ in 0..200 {
        let n = rng.gen_range(2..30);
        let (a, b) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.05..0.05));
        let ys: Vec<f64> = (0..n).map(|t| a + b * t as f64).collect();
        let truth = a + b * n as f64;
        linear_err = linear_err.max((extrapolate_series(&ys).unwrap() - truth).abs());
        let after = a + b * (n + 1) as f64;
        linear_err = linear_err.max((interpolate_series(&ys, after).unwrap() - truth).abs());
    }

    // Knots 0..3 with values [0, 1, 0, 1], unit spacing, natural ends:
    //   4 M1 + M2 = 6 (0 - 2 + 0) = -12
    //   M1 + 4 M2 = 6 (1 - 0 + 1) =  12
    // so M1 = -4, M2 = 4. On [1, 2] the cubic is
    //   y(x) = M1 (2-x)^3 / 6 + M2 (x-1)^3 / 6 + (y1 - M1/6)(2-x) + (y2 - M2/6)(x-1)
    let s = NaturalSpline::fit_uniform(&[0.0, 1.0, 0.0, 1.0]).unwrap();
    let m = s.second_derivatives();
    let hand = [0.0, -4.0, 4.0, 0.0];
    let mut coef_err = m.iter().zip(hand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let y = |x: f64| -4.0 * (2.0 - x).powi(3) / 6.0 + 4.0 * (x - 1.0).powi(3) / 6.0 + (1.0 + 4.0 / 6.0) * (2.0 - x) + (0.0 - 4.0 / 6.0) * (x - 1.0);
    for x in [1.0, 1.25, 1.5, 1.75, 2.0] {
        coef_err = coef_err.max((s.eval(x) - y(x)).abs());
    }

    // band-limited clips: a few slow sinusoids per pixel inside [0, 1]
    let (mut ext, mut int, mut n) = (0.0, 0.0, 0.0);
    for k in 0..20 {
        let phase = k as f64;
        let frames = Tensor::from_fn(&[1, 8, 8, T + 2], |i| {
            let p = (i / (T + 2)) as f64;
            let t = (i % (T + 2)) as f64;
            0.5 + 0.25 * (t / 3.0 + p + phase).sin() + 0.15 * (t / 5.0 + 2.0 * p).cos()
        });
        let truth = frames.time_range(T..T + 1);
        let mse = |m: BaselineMethod| {
            let b = Baseline::new(m, T).unwrap();
            let p = b.predict(&frames.time_range(0..b.window_len())).unwrap();
            p.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64
        };
        ext += mse(BaselineMethod::Extrapolate);
        int += mse(BaselineMethod::Interpolate);
        n += 1.0;
    }
    let (ext, int) = (ext / n, int / n);
    outcome(
        "C2",
        "baseline oracles",
        linear_err < 1e-10 && coef_err < 1e-12 && int < ext,
        format!("linear err {linear_err:.1e} (< 1e-10), 4-knot err {coef_err:.1e} (< 1e-12), interpolation {int:.2e} < extrapolation {ext:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 7. statistics oracles

fn auc_brute(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Two-sided p by composite Simpson integration of the t density.
fn p_by_integration(t: f64, df: usize) -> f64 {
    // Γ((ν+1)/2) / Γ(ν/2) by the half-integer recursion
    let mut ratio = if df % 2 == 1 {
        1.0 / std::f64::consts::PI.sqrt()
    } else {
        std::f64::consts::PI.sqrt() / 2.0
    };
    let mut k = if df % 2 == 1 { 1 } else { 2 };
    while k < df {
        ratio *= (k as f64 + 1.0) / k as f64;
        k += 2;
    }
    let nu = df as f64;
    let c = ratio / (nu * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - 2.0 * s * h / 3.0
}

fn bh_by_enumeration(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = (1..=m).filter(|&k| sorted[k - 1] <= k as f64 * q / m as f64).map(|k| sorted[k - 1]).fold(-1.0, f64::max);
    p.iter().map(|&pi| pi <= cut).collect()
}

fn c7_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut auc_err = 0.0_f64;
    for _ in 0..100 {
        let pos: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(0..10) as f64).collect();
        let neg: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(0..10) as f64).collect();
        auc_err = auc_err.max((auc_pairs(&pos, &neg).unwrap() - auc_brute(&pos, &neg)).abs());
    }

    let mut p_err = 0.0_f64;
    for _ in 0..50 {
        let (n1, n2) = (rng.gen_range(2..15), rng.gen_range(2..15));
        let shift = rng.gen_range(-1.5..1.5);
        let a: Vec<f64> = (0..n1).map(|_| rng.gen_range(0.0..1.0) + shift).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tt = ttest_unpaired(&a, &b, false).unwrap();
        p_err = p_err.max((tt.p - p_by_integration(tt.t, n1 + n2 - 2)).abs());
    }

    let mut bh_mismatch = 0;
    for _ in 0..100 {
        let m = rng.gen_range(1..40);
        let p: Vec<f64> = (0..m)
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(1e-5..0.01) } else { rng.gen_range(1e-3..=1.0) })
            .collect();
        if bh_fdr(&p, 0.05).unwrap() != bh_by_enumeration(&p, 0.05) {
            bh_mismatch += 1;
        }
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let draws = 1000;
    let rejected = (0..draws)
        .filter(|_| {
            let a: Vec<f64> = (0..15).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..15).map(|_| normal.sample(&mut rng)).collect();
            ttest_unpaired(&a, &b, false).unwrap().p < 0.05
        })
        .count();
    let rate = rejected as f64 / draws as f64;
    outcome(
        "C7",
        "statistics oracles",
        auc_err < 1e-12 && p_err < 1e-6 && bh_mismatch == 0 && (0.03..=0.07).contains(&rate),
        format!("AUC err {auc_err:.1e}, t-test p err {p_err:.1e} (< 1e-6), BH mismatches {bh_mismatch}/100, null rejection {rate:.3} in [0.03, 0.07]"),
    )
}

// ---------------------------------------------------------------------------
// 8. motion control

fn c8_motion() -> Outcome {
    let seeds = 100;
    let n = 500;
    let mut ok = 0;
    let mut worst = 0.0_f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        // skewed per-frame errors and spiky fd, drawn independently
        let errors = LogNormal::new(-5.0, 0.5).unwrap();
        let unit: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
        let err: Vec<f64> = (0..n).map(|_| errors.sample(&mut rng)).collect();
        let fd: Vec<f64> = (0..n)
            .map(|_| {
                let base: f64 = (0.08 + 0.04 * unit.sample(&mut rng)).abs();
                if rng.gen_bool(0.05) {
                    base + rng.gen_range(0.5..1.5)
                } else {
                    base
                }
            })
            .collect();
        let c = correlation_test(&err, &fd).unwrap();
        worst = worst.max(c.r.abs());
        if c.r.abs() < 0.1 {
            ok += 1;
        }
    }
    outcome(
        "C8",
        "motion control",
        ok * 100 >= 95 * seeds,
        format!("|r| < 0.1 in {ok}/{seeds} seeds (n = {n}, need >= 95%), max |r| {worst:.3}"),
    )
}

// ---------------------------------------------------------------------------
// 9. CLI reproducibility

fn restdyn(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_restdyn"))
        .current_dir(dir)
        .args(args)
        .env_remove("RESTDYN_THREADS")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn numbers(bytes: &[u8]) -> Vec<f64> {
    String::from_utf8_lossy(bytes)
        .split(|c: char| c == ',' || c == '\n' || c.is_whitespace() || c == ':')
        .filter_map(|s| s.trim_matches(|c| c == '"' || c == '[' || c == ']').parse().ok())
        .collect()
}

fn c9_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let toy = ["--t", "4", "--epochs", "3", "--batch", "4", "--channels", "2,3", "--bottleneck", "3", "--lr", "1e-3", "--val-split", "0.3"];
    let stages: Vec<(&str, Vec<&str>)> = vec![
        ("c", vec!["synth", "--out", "c", "--controls", "4", "--patients", "4", "--x", "8", "--y", "8", "--z", "2", "--frames", "30"]),
        ("m", [&["train", "--model", "recurrent_unet", "--data", "c", "--out", "m"][..], &toy].concat()),
        ("a", [&["train", "--model", "autoencoder", "--data", "c", "--out", "a"][..], &toy].concat()),
        ("s", vec!["score", "--weights", "m/weights.vxw", "--data", "c", "--out", "s"]),
        ("b", vec!["baseline", "--method", "interpolate", "--t", "4", "--data", "c", "--out", "b"]),
        ("r", vec!["regional", "--scores-dir", "s", "--data", "c", "--out", "r"]),
        ("st", vec!["stats", "--scores", "s/scores.csv", "--regional", "r/regional.json", "--out", "st/report.json"]),
    ];
    let mut problems = Vec::new();
    for (_, args) in &stages {
        if !restdyn(d, &[args.as_slice(), &["--threads", "1"]].concat()) {
            problems.push(format!("{} failed", args[0]));
        }
    }
    let mut replayed = 0;
    for (dir, _) in &stages {
        let again = format!("{dir}_replay");
        let target = if *dir == "st" { format!("{again}/report.json") } else { again.clone() };
        let run = format!("{dir}/run.json");
        if !restdyn(d, &["replay", &run, "--out", &target, "--threads", "1"]) {
            problems.push(format!("replay of {dir} failed"));
        } else if files(&d.join(dir)) != files(&d.join(&again)) {
            problems.push(format!("replay of {dir} not bit-identical"));
        } else {
            replayed += 1;
        }
    }

    // threads: the training stages and scoring on 3 threads
    let mut max_diff = 0.0_f64;
    for (dir, args) in &stages[1..4] {
        let out = format!("{dir}_t3");
        let args: Vec<&str> = args.iter().map(|a| if a == dir { out.as_str() } else { a }).collect();
        if !restdyn(d, &[args.as_slice(), &["--threads", "3"]].concat()) {
            problems.push(format!("{dir} on 3 threads failed"));
            continue;
        }
        let (one, three) = (files(&d.join(dir)), files(&d.join(&out)));
        if one.len() != three.len() {
            problems.push(format!("{dir}: different file sets across threads"));
            continue;
        }
        for ((n1, b1), (_, b3)) in one.iter().zip(&three) {
            if n1.ends_with(".csv") || n1.ends_with(".json") {
                let (x, y) = (numbers(b1), numbers(b3));
                if x.len() != y.len() {
                    problems.push(format!("{dir}/{n1}: shape differs across threads"));
                }
                for (a, b) in x.iter().zip(&y) {
                    max_diff = max_diff.max((a - b).abs());
                }
            }
        }
    }
    outcome(
        "C9",
        "reproducibility",
        problems.is_empty() && max_diff <= 1e-10,
        format!(
            "{replayed}/{} stages replay bit-identically on 1 thread, max |1 vs 3 threads| {max_diff:.1e} (<= 1e-10){}",
            stages.len(),
            if problems.is_empty() { String::new() } else { format!(", problems: {problems:?}") }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3-6. learned models on synthetic cohorts

struct SeedRun {
    seed: u64,
    /// Held-out next-frame MSE: recurrent U-Net, 2-D U-Net, extrapolation, copy.
    ordering: [f64; 4],
    /// Seconds spent training and evaluating the two predictors.
    ordering_secs: f64,
    /// Autoencoder reconstruction MSE at T = 4, 6, 8.
    lengths: [f64; 3],
    /// (scorer, AUC, p) at anomaly strength 1 and 0.
    detection: Vec<(&'static str, f64, f64, f64)>,
    planted: BTreeSet<usize>,
    fdr_regions: BTreeSet<usize>,
    /// As many regions as were planted, taken in order of decreasing -log10 p.
    top_ranked: BTreeSet<usize>,
    /// FDR-passing regions when the per-pixel copy baseline is the scorer.
    copy_fdr_regions: BTreeSet<usize>,
}

fn spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        channels: vec![4, 8],
        bottleneck: 8,
        t: T,
        ..ModelSpec::new(kind)
    }
}

fn fit(kind: ModelKind, clips: &[SliceClip], seed: u64, lr: f64) -> Model {
    let mut model = Model::build(spec(kind), seed).unwrap();
    let cfg = TrainConfig {
        epochs: EPOCHS,
        batch_size: BATCH,
        val_fraction: 0.0,
        seed,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    train(&mut model, clips, &cfg).unwrap();
    model
}

fn clips(vols: &[VolumeSequence], t: usize) -> Vec<SliceClip> {
    vols.iter().flat_map(|v| clips_for(v, t, 4, 0).unwrap()).collect()
}

fn scores(scorer: &dyn FrameScorer, vols: &[VolumeSequence]) -> Vec<SubjectScore> {
    vols.iter().map(|v| score_subject(scorer, v).unwrap()).collect()
}

fn rows(s: &[SubjectScore]) -> Vec<ScoreRow> {
    s.iter().map(ScoreRow::from).collect()
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = SynthConfig {
        n_control: N_TRAIN + N_TEST_CONTROLS,
        n_patient: N_PATIENTS,
        seed,
        anomaly_strength: 1.0,
        ..SynthConfig::default()
    };
    let strong = synth_cohort(&cfg).unwrap();
    let null = synth_cohort(&SynthConfig {
        anomaly_strength: 0.0,
        ..cfg.clone()
    })
    .unwrap();
    let controls = &strong[..cfg.n_control];
    assert_eq!(controls, &null[..cfg.n_control], "controls do not depend on anomaly strength");
    let train_clips = clips(&controls[..N_TRAIN], T);
    let held_out = &controls[N_TRAIN..N_TRAIN + N_HELD_OUT];
    let test_clips = clips(held_out, T);

    let start = Instant::now();
    let recurrent = fit(ModelKind::RecurrentUnet, &train_clips, seed, PREDICTOR_LR);
    let unet = fit(ModelKind::Unet2d, &train_clips, seed, PREDICTOR_LR);
    let mse = |s: &dyn FrameScorer| evaluate(s, &test_clips).unwrap().mse;
    let ordering = [
        mse(&recurrent),
        mse(&unet),
        mse(&Baseline::new(BaselineMethod::Extrapolate, T).unwrap()),
        mse(&Baseline::new(BaselineMethod::Copy, T).unwrap()),
    ];
    let ordering_secs = secs(start.elapsed());

    let ae = fit(ModelKind::RecurrentAutoencoder, &train_clips, seed, AUTOENCODER_LR);
    let lengths = [4, 6, 8].map(|t| evaluate(&ae.with_sequence_length(t).unwrap(), &clips(held_out, t)).unwrap().mse);

    let test_controls = &controls[N_TRAIN..];
    let mut detection = Vec::new();
    let mut predictor_strong = Vec::new();
    for (name, scorer) in [("recurrent_unet", &recurrent as &dyn FrameScorer), ("autoencoder", &ae)] {
        let ctl = scores(scorer, test_controls);
        let pat_strong = scores(scorer, &strong[cfg.n_control..]);
        let pat_null = scores(scorer, &null[cfg.n_control..]);
        let s1 = group_report(&rows(&[ctl.clone(), pat_strong.clone()].concat()), false).unwrap();
        let s0 = group_report(&rows(&[ctl.clone(), pat_null].concat()), false).unwrap();
        detection.push((name, s1.auc, s1.p, s0.auc));
        if name == "recurrent_unet" {
            predictor_strong = [ctl, pat_strong].concat();
        }
    }

    let atlas = strong[0].atlas.clone().unwrap();
    let table = regional_analysis(&predictor_strong, &atlas, 0.05, false).unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "  seed {seed}: ordering {ordering:.5?} ({ordering_secs:.0}s), lengths {lengths:.5?}, detection {}, regions -log10 p {:?}",
        detection
            .iter()
            .map(|(n, auc, p, null)| format!("{n} AUC {auc:.3} p {p:.1e} null AUC {null:.3}"))
            .collect::<Vec<_>>()
            .join(", "),
        table.rows.iter().map(|r| (r.region_id, (r.neg_log10_p * 10.0).round() / 10.0)).collect::<Vec<_>>()
    );
    let copy = Baseline::new(BaselineMethod::Copy, T).unwrap();
    let copy_scores = scores(&copy, &[test_controls, &strong[cfg.n_control..]].concat());
    let copy_table = regional_analysis(&copy_scores, &atlas, 0.05, false).unwrap();
    let planted: BTreeSet<usize> = planted_regions(&cfg).into_iter().collect();
    let mut ranked: Vec<_> = table.rows.iter().map(|r| (r.neg_log10_p, r.region_id)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    SeedRun {
        seed,
        ordering,
        ordering_secs,
        lengths,
        detection,
        top_ranked: ranked.iter().take(planted.len()).map(|&(_, id)| id).collect(),
        planted,
        fdr_regions: table.rows.iter().filter(|r| r.fdr_pass).map(|r| r.region_id).collect(),
        copy_fdr_regions: copy_table.rows.iter().filter(|r| r.fdr_pass).map(|r| r.region_id).collect(),
    }
}

fn c3_ordering(runs: &[SeedRun]) -> Outcome {
    let held: Vec<u64> = runs
        .iter()
        .filter(|r| r.ordering.windows(2).all(|w| w[0] < w[1]))
        .map(|r| r.seed)
        .collect();
    let total: f64 = runs.iter().map(|r| r.ordering_secs).sum();
    outcome(
        "C3",
        "method ordering",
        held.len() >= 4 && total < 900.0,
        format!(
            "recurrent U-Net < 2-D U-Net < extrapolation < copy in {}/5 seeds {held:?} (need 4), {total:.0}s (< 900s)",
            held.len()
        ),
    )
}

fn c4_lengths(runs: &[SeedRun]) -> Outcome {
    let held: Vec<u64> = runs
        .iter()
        .filter(|r| r.lengths.windows(2).all(|w| w[0] >= w[1]))
        .map(|r| r.seed)
        .collect();
    outcome(
        "C4",
        "autoencoder length trend",
        held.len() >= 4,
        format!("MSE non-increasing over T = 4, 6, 8 in {}/5 seeds {held:?} (need 4)", held.len()),
    )
}

fn c5_detection(runs: &[SeedRun]) -> Outcome {
    // the criterion is stated for one cohort; seed 0 is that cohort and the
    // other seeds are reported alongside
    let ok = |r: &SeedRun| {
        r.detection
            .iter()
            .all(|&(_, auc, p, null_auc)| auc >= 0.9 && p < 0.01 && (0.3..=0.7).contains(&null_auc))
    };
    let primary = &runs[0];
    let detail: Vec<String> = primary
        .detection
        .iter()
        .map(|(n, auc, p, null)| format!("{n} AUC {auc:.3} p {p:.1e} null AUC {null:.3}"))
        .collect();
    let others = runs.iter().filter(|r| ok(r)).count();
    outcome(
        "C5",
        "anomaly detection",
        ok(primary),
        format!(
            "seed 0: {} (need AUC >= 0.9, p < 0.01, null AUC in [0.3, 0.7]); all conditions hold in {others}/5 seeds",
            detail.join("; ")
        ),
    )
}

fn c6_regional(runs: &[SeedRun]) -> Outcome {
    let held: Vec<u64> = runs.iter().filter(|r| r.fdr_regions == r.planted).map(|r| r.seed).collect();
    // not part of the criterion: are the planted regions at least the most
    // significant ones, and does a scorer without spatial context isolate them?
    let ranked_first = runs.iter().filter(|r| r.top_ranked == r.planted).count();
    let copy_exact = runs.iter().filter(|r| r.copy_fdr_regions == r.planted).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} planted {:?} passing {:?}", r.seed, r.planted, r.fdr_regions))
        .collect();
    outcome(
        "C6",
        "regional analysis",
        held.len() >= 4,
        format!(
            "FDR-passing regions equal the planted set in {}/5 seeds (need 4); planted regions rank first by -log10 p in {ranked_first}/5; copy baseline isolates them in {copy_exact}/5; {}",
            held.len(),
            detail.join("; ")
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![c1_gradients(), c2_baselines(), c7_statistics(), c8_motion(), c9_reproducibility()];
    let start = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let _ = writeln!(std::io::stderr(), "  model experiments took {:.0}s", secs(start.elapsed()));
    results.extend([c3_ordering(&runs), c4_lengths(&runs), c5_detection(&runs), c6_regional(&runs)]);
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.line.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
