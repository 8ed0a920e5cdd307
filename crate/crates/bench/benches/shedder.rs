use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use vidshed::color::{extract_features, BinGrid, FrameFeatures, HueRange, Palette};
use vidshed::shedder::{FrameMeta, Shedder, ShedderConfig};
use vidshed::sim::{
    generate_labeled_corpus, generate_synthetic_scenario, run_simulation, train_utility_model, CorpusSpec,
    SegmentLengths, SimConfig,
};
use vidshed::threshold::{threshold_for_drop_rate, UtilityCdf};
use vidshed::utility::QueryExpr;

fn palette() -> Palette {
    Palette::from([("red".to_string(), HueRange::red())])
}

fn scoring(c: &mut Criterion) {
    let frames = generate_labeled_corpus(
        1,
        &CorpusSpec {
            cameras: 2,
            frames_per_camera: 500,
            ..CorpusSpec::default()
        },
    );
    let grid = BinGrid::default();
    let (model, _) = train_utility_model(&frames, &palette(), &grid, QueryExpr::single("red")).unwrap();
    let feats: Vec<FrameFeatures> = frames.iter().map(|f| f.features(&palette(), &grid).unwrap()).collect();

    c.bench_function("utility/score_1000_frames", |b| {
        b.iter(|| {
            feats
                .iter()
                .map(|f| model.query_utility(black_box(f)).unwrap())
                .sum::<f64>()
        })
    });
    c.bench_function("features/extract_1000_histograms", |b| {
        b.iter(|| {
            for f in &frames {
                black_box(extract_features(black_box(&f.hist), &palette(), &grid).unwrap());
            }
        })
    });
}

fn thresholds(c: &mut Criterion) {
    let history: Vec<f64> = (0..2000).map(|k| ((k * 7919) % 1000) as f64 / 1000.0).collect();
    c.bench_function("threshold/cdf_and_invert_2000", |b| {
        b.iter(|| {
            let cdf = UtilityCdf::from_values(black_box(&history).iter().copied()).unwrap();
            threshold_for_drop_rate(&cdf, 0.5).unwrap()
        })
    });
}

fn shedder_ops(c: &mut Criterion) {
    let utilities: Vec<f64> = (0..10_000).map(|k| ((k * 104_729) % 997) as f64 / 997.0).collect();
    c.bench_function("shedder/admit_10000_capacity_64", |b| {
        b.iter_batched(
            || {
                Shedder::new(ShedderConfig {
                    initial_capacity: 64,
                    ..ShedderConfig::default()
                })
            },
            |mut s| {
                for (k, &u) in utilities.iter().enumerate() {
                    let meta = FrameMeta {
                        frame_id: k as u64,
                        camera_id: 0,
                        generation_ms: k as f64,
                    };
                    black_box(s.admit(meta, u, k as f64));
                    if k % 4 == 0 {
                        black_box(s.on_token_freed(k as f64));
                    }
                }
                s
            },
            BatchSize::SmallInput,
        )
    });
}

fn simulation(c: &mut Criterion) {
    let training = generate_labeled_corpus(
        1,
        &CorpusSpec {
            cameras: 2,
            frames_per_camera: 500,
            ..CorpusSpec::default()
        },
    );
    let (model, history) =
        train_utility_model(&training, &palette(), &BinGrid::default(), QueryExpr::single("red")).unwrap();
    let seg = SegmentLengths {
        low_no_object: 600,
        high_with_objects: 600,
        high_no_object: 600,
    };
    let frames = generate_synthetic_scenario(2, seg, 0, 10.0);
    let cfg = SimConfig::default();
    let mut group = c.benchmark_group("simulation");
    group.sample_size(20);
    group.bench_function("three_segment_1800_frames", |b| {
        b.iter(|| run_simulation(&cfg, &model, black_box(&frames), &history).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scoring, thresholds, shedder_ops, simulation);
criterion_main!(benches);
