//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osrlab::autolabel::{expand_clamp, merge_boxes, threshold_segment, BBox, GrayImage};
use osrlab::cli::{self, CommonArgs, CompareArgs, ExperimentConfig};
use osrlab::datagen::{
    default_paper_shape, generate_dataset, test_split, train_split, BlobSpec, ClassBlob,
    KNOWN_RADIUS, KNOWN_STDDEV,
};
use osrlab::eval::{evaluate, Grouping, SampleGroup};
use osrlab::gradcheck::{run_gradcheck, GradcheckOptions};
use osrlab::losses::{combined_loss, objectosphere_term, Label, LossConfig, LossMode};
use osrlab::numerics::{affine_forward, init_params};
use osrlab::trainer::{incremental_train, train_with};

const SEEDS: [u64; 3] = [1, 2, 3];

type Check = (&'static str, &'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (
        elapsed <= limit,
        format!("{:.2}s of {}s", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn a1_gradients() -> Outcome {
    let start = Instant::now();
    let report = match run_gradcheck(20_240_601, 100, GradcheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("gradcheck error: {e}")),
    };
    let enough =
        report.modes.len() == LossMode::ALL.len() && report.modes.iter().all(|m| m.trials >= 100);
    let (fast, t) = within(start.elapsed(), Duration::from_secs(30));
    let worst = report
        .modes
        .iter()
        .map(|m| format!("{}={:.1e}", m.mode, m.max_rel_error))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        report.passed() && enough && fast,
        format!("max rel {worst}; {t}"),
    )
}

fn a2_minimizer() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut worst = 0.0f64;
    for classes in [2usize, 3, 4, 7] {
        let params = init_params(&[2, 4, classes], classes as u64).unwrap();
        let w = &params.weights()[1];
        let f0 = vec![0.0; 4];
        let logits = affine_forward(w, &vec![0.0; classes], &f0).unwrap();
        for mode in [
            LossMode::Entropic,
            LossMode::Objectosphere,
            LossMode::IntraspreadObjectosphere,
        ] {
            let cfg = LossConfig::new(mode, classes);
            let v = combined_loss(&logits, &f0, Label::Background, None, &cfg)
                .unwrap()
                .value;
            let err = (v - (classes as f64).ln()).abs();
            worst = worst.max(err);
            ok &= err <= 1e-12;
        }
    }
    let dir = [0.6, -0.8, 0.0];
    let mut prev = f64::NEG_INFINITY;
    for i in 0..100 {
        let r = 0.05 * i as f64;
        let f: Vec<f64> = dir.iter().map(|d| d * r).collect();
        let p = objectosphere_term(&f, Label::Background, 5.0, 1e-2)
            .unwrap()
            .value;
        ok &= p > prev;
        prev = p;
    }
    let (fast, t) = within(start.elapsed(), Duration::from_secs(1));
    outcome(ok && fast, format!("max |L(0) - ln C| = {worst:.1e}; {t}"))
}

fn a3_ordering() -> Outcome {
    let start = Instant::now();
    let mut ordered = 0;
    let mut totals = [0usize; 3];
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let (report, _, _) = cli::compare_losses(&cfg).unwrap();
        let fp: Vec<usize> = report
            .runs
            .iter()
            .map(|r| r.report.unknown_fp_count)
            .collect();
        for (t, f) in totals.iter_mut().zip(&fp) {
            *t += f;
        }
        if fp[0] > fp[1] && fp[1] >= fp[2] {
            ordered += 1;
        }
        per_seed.push(format!("{}/{}/{}", fp[0], fp[1], fp[2]));
    }
    let strict_min = totals[2] < totals[0] && totals[2] < totals[1];
    let (fast, t) = within(start.elapsed(), Duration::from_secs(120));
    outcome(
        ordered >= 2 && strict_min && fast,
        format!(
            "fp ce/obj/intra per seed [{}], totals {totals:?}, ordered in {ordered}/3; {t}",
            per_seed.join(", ")
        ),
    )
}

fn new_class_spec() -> BlobSpec {
    let t = 30f64.to_radians();
    BlobSpec {
        input_dim: 2,
        known: vec![ClassBlob {
            name: "banana".into(),
            center: vec![KNOWN_RADIUS * t.cos(), KNOWN_RADIUS * t.sin()],
            stddev: KNOWN_STDDEV,
            n_train: 60,
            n_test: 20,
        }],
        background_train: vec![],
        heldout_unknown: vec![],
    }
}

fn a4_incremental() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let spec = default_paper_shape();
    let names = spec.class_names();
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig {
            seed,
            ..cfg.clone()
        };
        let data = generate_dataset(&spec, seed).unwrap();
        let old_train = train_split(&data);
        let old_test = test_split(&data);
        let mut grouping = Grouping::from_dataset(&data);
        let tc = cfg.train_config(cfg.train.mode, cfg.train.epochs, 3);
        let base = train_with(
            &old_train,
            &tc,
            &cfg.layer_dims(2, 3),
            &names,
            cfg.feature_activation,
        )
        .unwrap();
        let before = evaluate(
            &base.params,
            &names,
            &old_test,
            cfg.eval_threshold,
            &grouping,
        )
        .unwrap()
        .accuracy_on(&[0, 1, 2]);

        let new_data = generate_dataset(&new_class_spec(), seed + 1000).unwrap();
        let inc = cfg.train_config(cfg.train.mode, cfg.incremental_epochs, 3);
        let ck =
            incremental_train(&base, &old_train, &train_split(&new_data), "banana", &inc).unwrap();
        let mut test = old_test;
        test.extend(test_split(&new_data).into_iter().map(|mut s| {
            s.label = Label::Known(3);
            s
        }));
        grouping.insert("banana", SampleGroup::Known);
        let after = evaluate(
            &ck.params,
            &ck.class_names,
            &test,
            cfg.eval_threshold,
            &grouping,
        )
        .unwrap();
        let old_acc = after.accuracy_on(&[0, 1, 2]);
        let new_acc = after.accuracy_on(&[3]);
        if old_acc >= before - 0.05 && new_acc >= 0.80 {
            good += 1;
        }
        lines.push(format!("{before:.3}->{old_acc:.3}/{new_acc:.3}"));
    }
    let (fast, t) = within(start.elapsed(), Duration::from_secs(60));
    outcome(
        good >= 2 && fast,
        format!(
            "old before->after/new per seed [{}], {good}/3 ok; {t}",
            lines.join(", ")
        ),
    )
}

fn a5_magnitudes() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let spec = default_paper_shape();
        let data = generate_dataset(&spec, seed).unwrap();
        let tc = cfg.train_config(LossMode::Objectosphere, cfg.compare_epochs.objectosphere, 3);
        let ck = train_with(
            &train_split(&data),
            &tc,
            &cfg.layer_dims(2, 3),
            &spec.class_names(),
            cfg.feature_activation,
        )
        .unwrap();
        let r = evaluate(
            &ck.params,
            &ck.class_names,
            &test_split(&data),
            cfg.eval_threshold,
            &Grouping::from_dataset(&data),
        )
        .unwrap();
        let g = &r.magnitude_stats.groups;
        let known = g[&SampleGroup::Known].mean;
        let others: Vec<f64> = [SampleGroup::Background, SampleGroup::Heldout]
            .iter()
            .filter_map(|k| g.get(k).map(|s| s.mean))
            .collect();
        ok &= !others.is_empty() && others.iter().all(|&m| known > m);
        lines.push(format!(
            "{known:.2} vs {:.2}",
            others.iter().cloned().fold(0.0, f64::max)
        ));
    }
    outcome(
        ok,
        format!("known vs unknown mean |F| per seed [{}]", lines.join(", ")),
    )
}

fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BBox {
    let x1 = rng.random_range(0..w);
    let y1 = rng.random_range(0..h);
    let x2 = rng.random_range(x1 + 1..=w);
    let y2 = rng.random_range(y1 + 1..=h);
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Envelope by scanning every pixel covered by some box.
fn pixel_envelope(boxes: &[BBox], w: u32, h: u32) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let px = BBox {
                x1: x,
                y1: y,
                x2: x + 1,
                y2: y + 1,
            };
            if boxes.iter().any(|b| b.contains(&px)) {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    BBox { x1, y1, x2, y2 }
}

fn a6_boxes() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for _ in 0..1000 {
        let w = rng.random_range(1..=40);
        let h = rng.random_range(1..=40);
        let n = rng.random_range(1..=6);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, w, h)).collect();
        let merged = merge_boxes(&boxes).unwrap();
        if merged != pixel_envelope(&boxes, w, h) {
            bad += 1;
        }
        let slack = rng.random_range(0..=12);
        let e = expand_clamp(merged, slack, w, h).unwrap();
        if !e.fits(w, h) || !e.contains(&merged) {
            bad += 1;
        }
    }
    let (fast, t) = within(start.elapsed(), Duration::from_secs(1));
    outcome(
        bad == 0 && fast,
        format!("{bad} mismatches in 1000 sets; {t}"),
    )
}

fn a7_segmenter() -> Outcome {
    let truth = BBox::new(5, 5, 10, 12).unwrap();
    let mut img = GrayImage::filled(20, 20, 255);
    for y in truth.y1..truth.y2 {
        for x in truth.x1..truth.x2 {
            img.set(x, y, 0);
        }
    }
    let clean = threshold_segment(&img, 128, 0);
    let exact = clean == vec![truth];
    for y in truth.y1..truth.y2 {
        for x in truth.x2..20 {
            img.set(x, y, (30 + 20 * (x - truth.x2)).min(255) as u8);
        }
    }
    let shadow = threshold_segment(&img, 128, 0);
    let excess = shadow
        .first()
        .map_or(0, |b| b.width().saturating_sub(truth.width()));
    outcome(
        exact && excess >= 3,
        format!("clean exact: {exact}; shadow widens the box by {excess}px"),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn a8_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let common = CommonArgs {
            config: None,
            seed: Some(4),
            out: Some(out.join("train")),
        };
        cli::cmd_train(&common).unwrap();
        cli::cmd_compare_losses(&CompareArgs {
            common: CommonArgs {
                out: Some(out.join("compare")),
                ..common
            },
            threshold: None,
            emit_svg: Some(true),
        })
        .unwrap();
        (
            dir_bytes(&out.join("train")),
            dir_bytes(&out.join("compare")),
        )
    };
    let a = run("a");
    let b = run("b");
    let files = a.0.len() + a.1.len();
    let svgs = a.1.iter().filter(|(n, _)| n.ends_with(".svg")).count();
    outcome(
        a == b && svgs == 3 && files == 2 + 8,
        format!("{files} artifacts compared byte-for-byte ({svgs} SVGs)"),
    )
}

fn main() {
    let criteria: [Check; 8] = [
        ("A1", "gradient verification", a1_gradients),
        ("A2", "minimizer property", a2_minimizer),
        ("A3", "open-set ordering", a3_ordering),
        ("A4", "incremental learning", a4_incremental),
        ("A5", "magnitude separation", a5_magnitudes),
        ("A6", "bbox oracle equivalence", a6_boxes),
        ("A7", "segmenter exactness and shadow failure", a7_segmenter),
        ("A8", "determinism", a8_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{id} {name}: {} ({})",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
