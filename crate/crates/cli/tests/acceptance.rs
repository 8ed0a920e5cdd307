//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidshed::color::{extract_features, BinGrid, FrameFeatures, HueRange, Palette};
use vidshed::control::{
    queue_capacity, supported_throughput, target_drop_rate, ControlConfig, FixedLatencies, LatencyEstimates,
};
use vidshed::reference::check_random_traces;
use vidshed::sim::engine::score_frames;
use vidshed::sim::qor::{evaluate_random, evaluate_rate};
use vidshed::sim::{
    generate_labeled_corpus, generate_synthetic_scenario, run_simulation, train_utility_model, CorpusSpec, FrameRecord,
    SegmentLengths, ShedPolicy, SimConfig,
};
use vidshed::threshold::{threshold_for_drop_rate, Threshold, UtilityCdf};
use vidshed::utility::{QueryExpr, UtilityModel};
use vidshed_cli::run::{cmd_run, RunArgs};
use vidshed_cli::sweep::cross_validate;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn red_palette() -> Palette {
    Palette::from([("red".to_string(), HueRange::red())])
}

fn train(frames: &[FrameRecord]) -> (UtilityModel, Vec<f64>) {
    train_utility_model(frames, &red_palette(), &BinGrid::default(), QueryExpr::single("red"))
        .expect("training succeeds")
}

fn corpus(seed: u64) -> Vec<FrameRecord> {
    generate_labeled_corpus(seed, &CorpusSpec::default())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// 1. Threshold selection equals a brute-force CDF scan.
fn cdf_inverse_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rates: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let mut checks = 0usize;
    for h in 0..1000 {
        let n = rng.random_range(1..=1000);
        let distinct = rng.random_range(1..=n.min(50));
        let history: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..distinct) as f64 / distinct as f64)
            .collect();
        let cdf = UtilityCdf::from_values(history.iter().copied()).map_err(|e| e.to_string())?;
        let mut steps: Vec<f64> = history.clone();
        steps.sort_by(f64::total_cmp);
        steps.dedup();
        let brute_cdf = |u: f64| history.iter().filter(|&&x| x <= u).count() as f64 / n as f64;
        for &r in &rates {
            let want = if r == 0.0 {
                Threshold::ShedNone
            } else {
                Threshold::Value(*steps.iter().find(|&&u| brute_cdf(u) >= r).expect("CDF reaches 1"))
            };
            let got = threshold_for_drop_rate(&cdf, r).map_err(|e| e.to_string())?;
            ensure(got == want, || {
                format!("history {h} (n={n}) r={r}: got {got:?}, brute force {want:?}")
            })?;
            let shed = history.iter().filter(|&&u| got.sheds(u)).count() as f64 / n as f64;
            let expected = got.value().map_or(0.0, |u| cdf.cdf(u));
            ensure(
                shed == expected && expected == got.value().map_or(0.0, brute_cdf),
                || format!("history {h} r={r}: shed fraction {shed} != CDF(u_th) {expected}"),
            )?;
            checks += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 10.0, || format!("took {elapsed:.2} s (limit 10 s)"))?;
    Ok(format!("{checks} (history, r) pairs exact in {elapsed:.2} s"))
}

fn vivid_share(f: &FrameFeatures) -> f64 {
    let pf = &f.color("red").expect("red features").pf;
    let (_, cols) = pf.shape();
    (0..cols).map(|j| pf.get(pf.shape().0 - 1, j)).sum()
}

/// 2. Leave-one-camera-out separation of positive and negative utilities.
fn utility_separation() -> Outcome {
    let frames = corpus(2024);
    for f in &frames {
        let feats = extract_features(&f.hist, &red_palette(), &BinGrid::default()).map_err(|e| e.to_string())?;
        let share = vivid_share(&feats);
        let ok = if f.objects.is_empty() {
            share <= 0.02
        } else {
            share >= 0.20
        };
        ensure(ok, || {
            format!("corpus frame {}/{} vivid share {share}", f.camera_id, f.frame_id)
        })?;
    }
    let folds = cross_validate(&frames, &red_palette(), &BinGrid::default(), &QueryExpr::single("red"))
        .map_err(|e| e.to_string())?;
    let separated = folds.iter().filter(|f| f.fully_separated()).count();
    let share = separated as f64 / folds.len() as f64;
    ensure(share >= 0.9, || {
        format!("min pos > max neg in {separated}/{} folds", folds.len())
    })?;
    for f in &folds {
        ensure(f.median_above_p95(), || {
            format!(
                "camera {}: median pos {} <= p95 neg {}",
                f.held_out_camera, f.median_pos, f.p95_neg
            )
        })?;
    }
    let margin = folds
        .iter()
        .map(|f| f.min_pos - f.max_neg)
        .fold(f64::INFINITY, f64::min);
    Ok(format!(
        "{separated}/{} folds fully separated, median > p95 in all; smallest margin {margin:.4}",
        folds.len()
    ))
}

/// 3. Utility shedding dominates content-agnostic shedding.
fn tradeoff_dominance() -> Outcome {
    let (model, _) = train(&corpus(11));
    let test = corpus(12);
    let query = QueryExpr::single("red");
    let utilities = score_frames(ShedPolicy::Utility, &model, &test, 0).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for r in [0.3, 0.5, 0.7] {
        let u = evaluate_rate(&test, &utilities, &query, r).map_err(|e| e.to_string())?;
        ensure((u.drop_rate - r).abs() <= 0.01, || {
            format!("r={r}: observed utility drop rate {}", u.drop_rate)
        })?;
        let uq = u.qor.ok_or("no target objects")?;
        let seeds = 30u64;
        let random: Vec<f64> = (0..seeds)
            .map(|s| {
                evaluate_random(&test, &query, r, 1000 + s)
                    .qor
                    .expect("targets present")
            })
            .collect();
        let rq = random.iter().sum::<f64>() / seeds as f64;
        ensure(uq >= 0.95, || format!("r={r}: utility QoR {uq:.4} < 0.95"))?;
        ensure((rq - (1.0 - r)).abs() <= 0.05, || {
            format!("r={r}: random mean QoR {rq:.4} not within 0.05 of {}", 1.0 - r)
        })?;
        ensure(uq > rq, || format!("r={r}: utility QoR {uq:.4} <= random {rq:.4}"))?;
        parts.push(format!("r={r}: utility {uq:.3} vs random {rq:.3}"));
    }
    Ok(parts.join("; "))
}

/// 4. Latency bound held through the three-segment scenario.
fn latency_bound_enforcement() -> Outcome {
    let (model, history) = train(&corpus(1));
    let seg = SegmentLengths::default();
    let frames = generate_synthetic_scenario(42, seg, 0, 10.0);
    ensure(frames.len() == 9000, || format!("{} frames", frames.len()))?;
    let cfg = SimConfig::default();
    let lb = cfg.control.latency_bound_ms;
    let start = Instant::now();
    let rep = run_simulation(&cfg, &model, &frames, &history).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let period = 100.0;
    let onset = seg.low_no_object as f64 * period;
    let seg3 = onset + seg.high_with_objects as f64 * period;
    let violations: Vec<&_> = rep.frames.iter().filter(|f| f.e2e_ms.is_some_and(|e| e > lb)).collect();
    ensure(violations.len() <= 5, || format!("{} violations", violations.len()))?;
    for v in &violations {
        ensure(v.generation_ms >= onset && v.generation_ms <= onset + 5000.0, || {
            format!("violation at {} ms, outside 5 s of onset {onset} ms", v.generation_ms)
        })?;
    }
    let shed_share = |lo: f64, hi: f64| {
        let seg: Vec<_> = rep
            .frames
            .iter()
            .filter(|f| f.generation_ms >= lo && f.generation_ms < hi)
            .collect();
        seg.iter().filter(|f| f.decision.is_shed()).count() as f64 / seg.len() as f64
    };
    let (s1, s2, s3) = (
        shed_share(0.0, onset),
        shed_share(onset, seg3),
        shed_share(seg3, f64::INFINITY),
    );
    ensure(s1 <= 0.02, || format!("segment 1 shed {s1:.4}"))?;
    ensure(s3 <= 0.02, || format!("segment 3 shed {s3:.4}"))?;
    ensure(elapsed < 60.0, || format!("simulation took {elapsed:.2} s"))?;
    Ok(format!(
        "{} violations, shed {:.3}/{:.3}/{:.3} by segment, max E2E {:.0} ms, {elapsed:.2} s",
        violations.len(),
        s1,
        s2,
        s3,
        rep.summary.max_e2e_ms.unwrap_or(0.0)
    ))
}

/// 5. Control arithmetic tables and drop-rate monotonicity.
fn control_arithmetic() -> Outcome {
    let fixed = FixedLatencies::default();
    let est = |p: f64| LatencyEstimates::new(p, fixed, 10.0);
    let st = |p: f64| supported_throughput(&est(p)).map_err(|e| e.to_string());
    ensure(st(100.0)? == 10.0 && st(500.0)? == 2.0, || {
        "supported throughput table".into()
    })?;
    ensure((st(33.3)? - 30.03).abs() <= 0.01, || {
        "supported throughput 33.3 ms".into()
    })?;
    ensure(supported_throughput(&est(0.0)).is_err(), || {
        "proc_q = 0 must be unmeasured".into()
    })?;
    for (s, f, want) in [
        (10.0, 40.0, 0.75),
        (2.0, 10.0, 0.8),
        (10.0, 10.0, 0.0),
        (20.0, 10.0, 0.0),
        (5.0, 0.0, 0.0),
    ] {
        let got = target_drop_rate(s, f);
        ensure(got == want, || {
            format!("target_drop_rate({s}, {f}) = {got}, want {want}")
        })?;
    }
    let hundred = FixedLatencies {
        net_cam_ls_ms: 30.0,
        net_ls_q_ms: 30.0,
        proc_cam_ms: 40.0,
    };
    let cfg = |lb: f64, f: FixedLatencies| ControlConfig {
        latency_bound_ms: lb,
        fixed: f,
        ..ControlConfig::default()
    };
    let cap = |lb: f64, f: FixedLatencies, p: f64| queue_capacity(&LatencyEstimates::new(p, f, 10.0), &cfg(lb, f));
    for (lb, f, p, want) in [
        (1000.0, hundred, 100.0, 9),
        (150.0, hundred, 100.0, 1),
        (1000.0, hundred, 1000.0, 1),
    ] {
        let got = cap(lb, f, p);
        ensure(got == want, || {
            format!("queue_capacity(LB={lb}, proc_q={p}) = {got}, want {want}")
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    for _ in 0..2000 {
        let fps = rng.random_range(0.1..120.0);
        let mut sts: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..150.0)).collect();
        sts.sort_by(f64::total_cmp);
        let rs: Vec<f64> = sts.iter().map(|&s| target_drop_rate(s, fps)).collect();
        ensure(rs.windows(2).all(|w| w[1] <= w[0]), || {
            format!("not non-increasing in ST at fps {fps}")
        })?;
        ensure(rs.iter().all(|r| (0.0..=1.0).contains(r)), || {
            "rate outside [0, 1]".into()
        })?;
        let s = rng.random_range(0.0..150.0);
        let mut fpss: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..120.0)).collect();
        fpss.sort_by(f64::total_cmp);
        let rs: Vec<f64> = fpss.iter().map(|&f| target_drop_rate(s, f)).collect();
        ensure(rs.windows(2).all(|w| w[1] >= w[0]), || {
            format!("not non-decreasing in FPS at st {s}")
        })?;
        pairs += 40;
    }
    Ok(format!(
        "tables exact; monotone over {pairs} randomized (ST, FPS) points"
    ))
}

/// 6. Shedder queue matches the brute-force reference.
fn shedder_oracle() -> Outcome {
    check_random_traces(2024, 10_000, 50)?;
    Ok("10000 traces (<= 50 events) identical to reference, conservation held".into())
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .expect("run dir")
        .map(|e| {
            let p = e.expect("entry").path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).expect("read"),
            )
        })
        .collect();
    files.sort();
    files
}

/// 7. Identical manifest and seed give byte-identical reports.
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let train_frames = generate_labeled_corpus(
        3,
        &CorpusSpec {
            cameras: 3,
            frames_per_camera: 600,
            ..CorpusSpec::default()
        },
    );
    let (model, _) = train(&train_frames);
    vidshed::sim::save_dataset(&d.join("corpus.jsonl"), &train_frames).map_err(|e| e.to_string())?;
    model.save(&d.join("model.json")).map_err(|e| e.to_string())?;
    let seg = SegmentLengths {
        low_no_object: 600,
        high_with_objects: 600,
        high_no_object: 600,
    };
    let streams = (0..2).map(|c| generate_synthetic_scenario(8, seg, c, 10.0)).collect();
    let frames = vidshed::sim::interleave_cameras(streams).map_err(|e| e.to_string())?;
    vidshed::sim::save_dataset(&d.join("scenario.jsonl"), &frames).map_err(|e| e.to_string())?;
    std::fs::write(
        d.join("run.toml"),
        "version = 1\nmodel = \"model.json\"\ndataset = \"scenario.jsonl\"\ntraining_dataset = \"corpus.jsonl\"\nout = \"a\"\nseed = 17\n",
    )
    .map_err(|e| e.to_string())?;
    let args = RunArgs {
        config: Some(d.join("run.toml")),
        ..RunArgs::default()
    };
    let mut outputs = Vec::new();
    for out in ["a", "b"] {
        let a = RunArgs {
            out: Some(d.join(out)),
            ..args.clone()
        };
        cmd_run(&a).map_err(|e| format!("{e:#}"))?;
        outputs.push(dir_bytes(&d.join(out)));
    }
    cmd_run(&args).map_err(|e| format!("{e:#}"))?;
    outputs.push(dir_bytes(&d.join("a")));
    ensure(outputs[0] == outputs[1] && outputs[0] == outputs[2], || {
        "run outputs differ".into()
    })?;
    let bytes: usize = outputs[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "3 runs, {} files ({bytes} bytes) byte-identical",
        outputs[0].len()
    ))
}

/// 8. Single-threaded scoring throughput.
fn throughput() -> Outcome {
    let frames = corpus(9);
    let (model, _) = train(&frames);
    let feats: Vec<FrameFeatures> = frames
        .iter()
        .map(|f| f.features(&red_palette(), &BinGrid::default()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut evals = 0usize;
    let mut acc = 0.0;
    while start.elapsed().as_secs_f64() < 1.0 {
        for f in &feats {
            acc += model
                .query_utility(std::hint::black_box(f))
                .map_err(|e| e.to_string())?;
        }
        evals += feats.len();
    }
    let rate = evals as f64 / start.elapsed().as_secs_f64();
    std::hint::black_box(acc);
    ensure(rate >= 50_000.0, || format!("{rate:.0} evaluations/s < 50000"))?;
    Ok(format!("{rate:.0} evaluations/s (8x8 grid, one color)"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 cdf-inverse exactness", cdf_inverse_exactness),
        ("2 utility separation (leave-one-camera-out)", utility_separation),
        ("3 tradeoff dominance over random shedding", tradeoff_dominance),
        ("4 latency-bound enforcement", latency_bound_enforcement),
        ("5 control arithmetic", control_arithmetic),
        ("6 shedder queue oracle equivalence", shedder_oracle),
        ("7 run determinism", determinism),
        ("8 scoring throughput", throughput),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
