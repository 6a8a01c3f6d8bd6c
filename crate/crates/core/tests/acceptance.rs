//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so that every verdict is printed. Pass
//! criterion numbers as arguments to run a subset (`cargo test --test
//! acceptance -- 1 5 9`). The end-to-end phantom run uses the CPU-relaxed
//! scale (100 subjects, side 128, 4.0°) unless `ACCEPTANCE_FULL_SCALE=1`,
//! which runs 300 subjects at side 256 against 3.0°.

// Reported table values and frozen oracle digits, not constants.
#![allow(clippy::approx_constant, clippy::excessive_precision)]

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anteversion::cv::{self, make_folds, FOLDS};
use anteversion::dataset::{compute_stats, AgeBins, Gender, GenderGroup, PatientRecord, SdConvention};
use anteversion::metrics::{self, audit_average_row, classify_error, fold_table, ErrorBand, COLUMNS};
use anteversion::nn::{layers, FeatureMap, Grads, ParamKind, ParamStore};
use anteversion::phantom::{reference_decode, render};
use anteversion::plane::{ImagePlane, ValueRange};
use anteversion::preprocess::mirror_sample;
use anteversion::training::{NadamConfig, OptimizerState, PlateauConfig, PlateauSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. Table arithmetic

/// Printed Table 3 fold means in `COLUMNS` order (male L/R, female L/R, all L/R).
const TABLE3_FOLDS: [[f64; 6]; 5] = [
    [3.16, 3.10, 3.21, 2.59, 3.17, 3.02],
    [3.14, 2.81, 3.59, 4.15, 3.23, 3.08],
    [2.93, 3.23, 1.74, 3.10, 2.73, 3.21],
    [2.78, 2.70, 3.24, 2.78, 2.87, 2.72],
    [2.69, 2.63, 3.11, 3.08, 2.78, 2.73],
];
const TABLE3_AVERAGE: [f64; 6] = [2.94, 2.89, 3.01, 3.14, 2.96, 2.31];
/// Men / women per test fold.
const TABLE3_COUNTS: [(usize, usize); 5] = [(51, 9), (48, 12), (50, 10), (48, 12), (47, 13)];

fn table_arithmetic() -> Outcome {
    // per-fold prediction rows whose absolute errors equal the printed gender means
    let folds: Vec<Vec<cv::PredictionRow>> = TABLE3_FOLDS
        .iter()
        .zip(TABLE3_COUNTS)
        .enumerate()
        .map(|(f, (means, (men, women)))| {
            let row = |i: usize, gender: Gender, err_left: f64, err_right: f64| cv::PredictionRow {
                patient_id: format!("f{f}-{i}"),
                gender,
                age_years: 40.0,
                true_right: 15.0,
                true_left: 15.0,
                pred_right: 15.0 + err_right,
                pred_left: 15.0 - err_left,
                fold: f,
            };
            (0..men)
                .map(|i| row(i, Gender::Male, means[0], means[1]))
                .chain((0..women).map(|i| row(men + i, Gender::Female, means[2], means[3])))
                .collect()
        })
        .collect();
    let table = fold_table(&folds).map_err(|e| e.to_string())?;
    let average = |k: usize| table.average[k].expect("non-empty column");
    for (k, expected) in [(0, 2.94), (1, 2.89), (3, 3.14)] {
        check((average(k) - expected).abs() <= 0.005, || {
            format!("{}: fold_table average {} vs {expected}", COLUMNS[k].label(), average(k))
        })?;
    }
    for (k, row) in table.folds.iter().enumerate() {
        check(row.n_male == TABLE3_COUNTS[k].0 && row.n_female == TABLE3_COUNTS[k].1, || format!("fold {k} counts"))?;
    }

    // the both-gender columns are printed per fold, so audit them directly
    let flags = audit_average_row(&TABLE3_FOLDS, &TABLE3_AVERAGE, 0.005);
    let all_left = metrics::mean_of_fold_means(&TABLE3_FOLDS.map(|r| r[4]));
    check((all_left - 2.96).abs() <= 0.005, || format!("all_left recomputed {all_left}"))?;
    let br = flags
        .iter()
        .find(|f| f.column == COLUMNS[5])
        .ok_or("printed all_right average 2.31 was not flagged")?;
    check((br.recomputed - 2.95).abs() <= 0.005, || format!("all_right recomputed {}", br.recomputed))?;
    for k in [0, 1, 3, 4] {
        check(!flags.iter().any(|f| f.column == COLUMNS[k]), || format!("{} flagged unexpectedly", COLUMNS[k].label()))?;
    }
    let others: Vec<String> = flags
        .iter()
        .filter(|f| f.column != COLUMNS[5])
        .map(|f| format!("{} printed {} recomputed {:.3}", f.column.label(), f.printed, f.recomputed))
        .collect();
    Ok(format!(
        "ML {:.3} MR {:.3} FR {:.3} BL {all_left:.3}; all_right 2.31 flagged (recomputed {:.3}); also flagged: {}",
        average(0),
        average(1),
        average(3),
        br.recomputed,
        if others.is_empty() { "none".into() } else { others.join(", ") }
    ))
}

// ---------------------------------------------------------------------------
// 2. Demographic pooling

/// `n` values with exact mean `mean` (zero-sum deviations of scale `sd`).
fn centered(n: usize, mean: f64, sd: f64, phase: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7 + phase).sin()).collect();
    let m = raw.iter().sum::<f64>() / n as f64;
    raw.iter().map(|v| mean + sd * (v - m)).collect()
}

fn demographic_pooling() -> Outcome {
    let mut records = Vec::new();
    for (gender, n, age, right, left) in [
        (Gender::Male, 244, (37.72, 16.01), (16.54, 5.28), (16.11, 5.43)),
        (Gender::Female, 56, (46.95, 16.39), (20.61, 5.70), (19.55, 5.20)),
    ] {
        let ages = centered(n, age.0, age.1, 0.1);
        let rights = centered(n, right.0, right.1, 0.2);
        let lefts = centered(n, left.0, left.1, 0.3);
        for i in 0..n {
            records.push(PatientRecord {
                patient_id: format!("{}{i}", gender.code()),
                age_years: ages[i],
                gender,
                right_angle_deg: rights[i],
                left_angle_deg: lefts[i],
                image_path: PathBuf::new(),
            });
        }
    }
    let stats = compute_stats(&records, &AgeBins::default(), SdConvention::Sample).map_err(|e| e.to_string())?;
    let all = stats.group(GenderGroup::All, None);
    check(all.count == 300, || format!("pooled count {}", all.count))?;
    let (age, right, left) = (all.age.unwrap().mean, all.right_angle.unwrap().mean, all.left_angle.unwrap().mean);
    for (name, got, want) in [("right", right, 17.30), ("left", left, 16.75), ("age", age, 39.44)] {
        check((got - want).abs() <= 0.01, || format!("pooled {name} mean {got} vs {want}"))?;
    }
    Ok(format!("pooled right {right:.4}, left {left:.4}, age {age:.4}"))
}

// ---------------------------------------------------------------------------
// 3. Gradient check

fn gradient_check() -> Outcome {
    let r = common::gradient_check(5, 250, 1e-5);
    check(r.checked >= 200 && r.failed.is_empty(), || format!("{} of {} parameters failed: {:?}", r.failed.len(), r.checked, r.failed))?;
    Ok(format!(
        "{} parameters, worst relative error {:.2e}, {} draws redrawn at ReLU/max-pool switches",
        r.checked, r.worst_rel, r.kink_rejections
    ))
}

// ---------------------------------------------------------------------------
// 4. Uniform gate

fn uniform_gate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (c, h, w) = (rng.random_range(1..16), rng.random_range(1..12), rng.random_range(1..12));
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = FeatureMap::new(c, h, w, data);
        let g = rng.random_range(1e-3..1.0);
        let pooled = layers::attention_pool(&f, &vec![g; h * w]);
        for ch in 0..c {
            let gap = f.channel(ch).iter().sum::<f64>() / (h * w) as f64;
            let rel = (pooled[ch] - gap).abs() / gap.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    check(worst <= 1e-6, || format!("worst relative deviation {worst:e}"))?;
    Ok(format!("100 maps, worst relative deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Optimizer and schedule

/// Parameter after each of the first ten steps from θ=0 with g=1, lr=1e-3,
/// β1=0.9, β2=0.999, ε=0 (high-precision hand evaluation of the recurrence).
const NADAM_ORACLE: [f64; 10] = [
    -0.001473684210526315789473684,
    -0.00263099630996309963099631,
    -0.003709217795870892701366676,
    -0.0047558057190300603159874,
    -0.005786579705010468265469237,
    -0.006808320096238646080500576,
    -0.007824417484373463378640587,
    -0.008836755885229076817752071,
    -0.009846466006721237050209306,
    -0.01085426764180532885022876,
];

fn optimizer_schedule() -> Outcome {
    let mut params = ParamStore::new();
    let id = params.register("theta", vec![1], vec![0.0], ParamKind::Trainable);
    let config = NadamConfig {
        epsilon: 0.0,
        ..NadamConfig::default()
    };
    let mut opt = OptimizerState::new(&params, config, 1e-3);
    let mut grads = Grads::zeros_like(&params);
    grads.get_mut(id)[0] = 1.0;
    let mut worst = 0.0f64;
    for (t, want) in NADAM_ORACLE.iter().enumerate() {
        opt.step(&mut params, &grads, 0).map_err(|e| e.to_string())?;
        let got = params.data(id)[0];
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-12, || format!("step {}: {got} vs {want}", t + 1))?;
    }

    let mut s = PlateauSchedule::new(PlateauConfig::default());
    let lrs: Vec<f64> = (0..400).map(|_| s.step(1.0)).collect();
    let mut floor_at = None;
    for (i, &lr) in lrs.iter().enumerate() {
        let k = (i / 30) as i32;
        let want = (1e-3 * 0.8f64.powi(k)).max(1e-4);
        check((lr - want).abs() <= 1e-12 * want, || format!("epoch {}: lr {lr} vs {want}", i + 1))?;
        if lr == 1e-4 && floor_at.is_none() {
            floor_at = Some(k);
        }
    }
    check(floor_at == Some(11), || format!("floor reached after reduction {floor_at:?}"))?;
    check(lrs.windows(2).all(|w| w[1] <= w[0]), || "lr increased".into())?;
    Ok(format!(
        "NADAM worst |Δ| {worst:.1e} over 10 steps; lr 1e-3·0.8^k, floor 1e-4 reached at reduction 11 (epoch {})",
        11 * 30 + 1
    ))
}

// ---------------------------------------------------------------------------
// 6. Fold plans

fn fold_partition() -> Outcome {
    let records: Vec<PatientRecord> = (0..300)
        .map(|i| PatientRecord {
            patient_id: format!("P{i:04}"),
            age_years: 20.0 + (i % 60) as f64,
            gender: if i < 244 { Gender::Male } else { Gender::Female },
            right_angle_deg: 15.0,
            left_angle_deg: 15.0,
            image_path: PathBuf::new(),
        })
        .collect();
    let everyone: HashSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    for seed in 0..100u64 {
        let plan = make_folds(&records, seed, true).map_err(|e| e.to_string())?;
        check(plan.fold_sizes() == [60; FOLDS], || format!("seed {seed}: sizes {:?}", plan.fold_sizes()))?;
        let mut tested = HashSet::new();
        for e in 0..FOLDS {
            let split = plan.split(&records, e);
            let ids = |rs: &[&PatientRecord]| rs.iter().map(|r| r.patient_id.clone()).collect::<HashSet<_>>();
            let (tr, va, te) = (ids(&split.train), ids(&split.val), ids(&split.test));
            check(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te), || {
                format!("seed {seed} experiment {e}: roles overlap")
            })?;
            check(tr.len() + va.len() + te.len() == 300, || format!("seed {seed} experiment {e}: roles miss records"))?;
            for id in te {
                check(tested.insert(id.clone()), || format!("seed {seed}: {id} tested twice"))?;
            }
        }
        check(tested.len() == everyone.len(), || format!("seed {seed}: union of test sets has {}", tested.len()))?;
    }
    Ok("100 seeds × 300 records: five folds of 60, test sets partition the data, roles disjoint".into())
}

// ---------------------------------------------------------------------------
// 7. Mirror contract

fn mirror_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let values: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let img = ImagePlane::new(h, w, values, ValueRange::BitDepth(16)).map_err(|e| e.to_string())?;
        let (r, l) = (rng.random_range(-10.0..50.0), rng.random_range(-10.0..50.0));
        let (m, mr, ml) = mirror_sample(&img, r, l);
        check((mr, ml) == (l, r), || "labels not swapped".into())?;
        let (back, br, bl) = mirror_sample(&m, mr, ml);
        check(back == img && (br, bl) == (r, l), || "mirror is not an involution".into())?;
    }
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let (r, l) = (rng.random_range(-10.0..40.0), rng.random_range(-10.0..40.0));
        let img = render(256, r, l, 0.02, i).map_err(|e| e.to_string())?;
        let (d_r, d_l) = reference_decode(&img).map_err(|e| e.to_string())?;
        let (m, _, _) = mirror_sample(&img, r, l);
        let (m_r, m_l) = reference_decode(&m).map_err(|e| e.to_string())?;
        worst = worst.max((m_r - d_l).abs()).max((m_l - d_r).abs());
        worst = worst.max((m_r - l).abs()).max((m_l - r).abs());
    }
    check(worst <= 0.5, || format!("decoded mirror deviates by {worst:.3}°"))?;
    Ok(format!("involution on 100 random planes; 50 phantoms decode swapped within {worst:.3}°"))
}

// ---------------------------------------------------------------------------
// 8 and 10. CLI runs

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_anteversion")
}

fn run_cli(args: &[&str], cwd: &Path, output_root: Option<&Path>) -> Result<(), String> {
    let mut cmd = Command::new(bin());
    cmd.args(args).current_dir(cwd).env_remove("ANTEVERSION_DEVICE");
    match output_root {
        Some(root) => cmd.env("ANTEVERSION_OUTPUT_ROOT", root),
        None => cmd.env_remove("ANTEVERSION_OUTPUT_ROOT"),
    };
    let out = cmd.output().map_err(|e| format!("spawning {}: {e}", bin()))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

struct Scale {
    population: usize,
    side: usize,
    threshold: f64,
    epochs: usize,
}

fn e2e_config(s: &Scale) -> String {
    format!(
        r#"seed = 7
run_name = "phantom"
output_root = "runs"

[data]
metadata = "phantom/metadata.csv"
image_root = "phantom/images"

[preprocess]
side = {side}

[backbone]
blocks = [{{ convs = 1, width = 8 }}, {{ convs = 1, width = 16 }}, {{ convs = 1, width = 32 }}, {{ convs = 1, width = 32 }}, {{ convs = 1, width = 64 }}]

[head]
attn_widths = [16, 8]
dense_width = 64
dropout = 0.1
bn_momentum = 0.9

[training]
epochs = {epochs}
batch_size = 8

[schedule]
patience = 10

[report]
plots = false

[phantom]
population = {population}
side = {side}
seed = 1
"#,
        side = s.side,
        epochs = s.epochs,
        population = s.population
    )
}

fn phantom_learnability() -> Outcome {
    let full = std::env::var("ACCEPTANCE_FULL_SCALE").is_ok_and(|v| v == "1");
    let scale = if full {
        Scale { population: 300, side: 256, threshold: 3.0, epochs: 150 }
    } else {
        Scale { population: 100, side: 128, threshold: 4.0, epochs: 150 }
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(dir.path().join("run.toml"), e2e_config(&scale)).map_err(|e| e.to_string())?;
    run_cli(&["phantom", "--config", "run.toml", "--out", "phantom"], dir.path(), None)?;
    run_cli(&["cv", "--config", "run.toml"], dir.path(), None)?;
    let run_dir = dir.path().join("runs/phantom");
    let mut cells = Vec::new();
    let mut worst = 0.0f64;
    for e in 0..FOLDS {
        let rows = cv::read_predictions(&cv::predictions_path(&run_dir, e)).map_err(|e| e.to_string())?;
        let n = rows.len() as f64;
        let right = rows.iter().map(|r| (r.pred_right - r.true_right).abs()).sum::<f64>() / n;
        let left = rows.iter().map(|r| (r.pred_left - r.true_left).abs()).sum::<f64>() / n;
        worst = worst.max(right).max(left);
        cells.push(format!("fold {e} R {right:.2} L {left:.2}"));
    }
    let label = format!("{} subjects, side {}, threshold {:.1}°", scale.population, scale.side, scale.threshold);
    check(worst <= scale.threshold, || format!("{label}: worst fold MAE {worst:.3}° ({})", cells.join("; ")))?;
    Ok(format!("{label}: {} (worst {worst:.2}°)", cells.join("; ")))
}

fn tiny_config() -> &'static str {
    r#"seed = 11
run_name = "repro"

[data]
metadata = "phantom/metadata.csv"
image_root = "phantom/images"

[preprocess]
side = 64

[backbone]
blocks = [{ convs = 1, width = 4 }, { convs = 1, width = 8 }]

[head]
attn_widths = [4]
dense_width = 8
dropout = 0.2

[training]
epochs = 4

[phantom]
population = 30
side = 64
seed = 3
"#
}

fn list_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(dir.path().join("run.toml"), tiny_config()).map_err(|e| e.to_string())?;
    run_cli(&["phantom", "--config", "run.toml", "--out", "phantom"], dir.path(), None)?;
    let roots = [dir.path().join("a"), dir.path().join("b")];
    for root in &roots {
        run_cli(&["cv", "--config", "run.toml", "--seed", "11"], dir.path(), Some(root))?;
    }
    let (a, b) = (roots[0].join("repro"), roots[1].join("repro"));
    let compared: Vec<PathBuf> = list_files(&a)
        .into_iter()
        .filter(|p| p.ends_with("foldplan.json") || p.ends_with("predictions.csv") || p.starts_with("report") && p.extension().is_some_and(|e| e == "csv"))
        .collect();
    check(compared.len() == 1 + FOLDS + 11, || format!("unexpected artifact set {compared:?}"))?;
    for p in &compared {
        let (x, y) = (fs::read(a.join(p)), fs::read(b.join(p)));
        check(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), || format!("{} differs between runs", p.display()))?;
    }
    Ok(format!("{} artifacts byte-identical (fold plan, 5 prediction files, report CSVs)", compared.len()))
}

// ---------------------------------------------------------------------------
// 9. Error bands

fn error_bands() -> Outcome {
    let cases = [
        (0.0, ErrorBand::Accurate),
        (3.0, ErrorBand::Accurate),
        (3.0f64.next_up(), ErrorBand::Moderate),
        (6.0, ErrorBand::Moderate),
        (6.0f64.next_up(), ErrorBand::Poor),
        (1e6, ErrorBand::Poor),
    ];
    for (e, want) in cases {
        let got = classify_error(e).map_err(|err| err.to_string())?;
        check(got == want, || format!("{e} classified {got:?}, expected {want:?}"))?;
    }
    check(classify_error(-1e-9).is_err() && classify_error(f64::NAN).is_err(), || "negative/NaN accepted".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let e: f64 = rng.random_range(0.0..12.0);
        let matches = [e <= 3.0, e > 3.0 && e <= 6.0, e > 6.0];
        check(matches.iter().filter(|&&m| m).count() == 1, || format!("{e} matched {matches:?}"))?;
        let band = classify_error(e).map_err(|err| err.to_string())?;
        check(matches[band as usize], || format!("{e} classified as {band:?}"))?;
    }
    Ok("boundaries 3.0→accurate, 6.0→moderate, 6.0+ε→poor; 10,000 random errors each in exactly one band".into())
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, title: "table-arithmetic reproduction", budget: Duration::from_secs(1), run: table_arithmetic },
        Criterion { id: 2, title: "demographic consistency", budget: Duration::from_secs(1), run: demographic_pooling },
        Criterion { id: 3, title: "gradient check", budget: Duration::from_secs(120), run: gradient_check },
        Criterion { id: 4, title: "attention-pooling identity", budget: Duration::from_secs(10), run: uniform_gate },
        Criterion { id: 5, title: "optimizer/scheduler exactness", budget: Duration::from_secs(1), run: optimizer_schedule },
        Criterion { id: 6, title: "CV partition properties", budget: Duration::from_secs(10), run: fold_partition },
        Criterion { id: 7, title: "mirror contract", budget: Duration::from_secs(30), run: mirror_contract },
        Criterion { id: 8, title: "end-to-end phantom learnability", budget: Duration::from_secs(12 * 3600), run: phantom_learnability },
        Criterion { id: 9, title: "error-band classifier", budget: Duration::from_secs(1), run: error_bands },
        Criterion { id: 10, title: "CLI reproducibility", budget: Duration::from_secs(12 * 3600), run: reproducibility },
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; exceeded runtime budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} ({}) [{:.2?}]: {detail}", c.id, c.title, elapsed),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} ({}) [{:.2?}]: {why}", c.id, c.title, elapsed);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
