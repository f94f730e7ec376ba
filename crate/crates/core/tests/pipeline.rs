use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specxplain_core::net::init;
use specxplain_core::pipeline::{run_pipeline, ExplainMethod, PipelineConfig, SegmentConfig, Spectrogram};
use specxplain_core::{PathConfig, Target, Tensor};

fn spectrogram(w: usize, seed: u64) -> Spectrogram {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor::from_vec(&[1, 48, w], (0..48 * w).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap();
    Spectrogram::new(values, "probe").unwrap()
}

fn config(method: ExplainMethod) -> PipelineConfig {
    PipelineConfig {
        method,
        path: PathConfig::trapezoid(8),
        targets: Some(vec![Target::Feature(0), Target::Feature(5), Target::Head]),
        ..PipelineConfig::default()
    }
}

#[test]
fn output_does_not_depend_on_worker_count() {
    let model = init::nisqa_like(21, 15, true);
    let spec = spectrogram(90, 1);
    let cfg = config(ExplainMethod::Ig);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_pipeline(&model, &spec, &cfg).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn maps_cover_the_whole_spectrogram() {
    let model = init::nisqa_like(22, 15, true);
    let spec = spectrogram(40, 2);
    let out = run_pipeline(&model, &spec, &config(ExplainMethod::DeepLift)).unwrap();
    assert_eq!(out.positions.len(), 40);
    assert_eq!(out.full_maps.len(), 3);
    assert!(out.coverage.iter().all(|&c| c >= 1));
    for map in &out.full_maps {
        assert_eq!(map.values.shape(), &[1, 48, 40]);
    }
    assert_eq!(out.segment_l1.len(), 40);
    assert_eq!(out.report.features.len(), 3);
}

#[test]
fn interior_columns_are_covered_by_every_overlapping_segment() {
    let model = init::nisqa_like(23, 15, true);
    let spec = spectrogram(50, 3);
    let mut cfg = config(ExplainMethod::DeepLift);
    cfg.segment = SegmentConfig::new(15, 1);
    let out = run_pipeline(&model, &spec, &cfg).unwrap();
    assert!(out.coverage[7..43].iter().all(|&c| c == 15));
    assert!(out.coverage[0] < 15);
}

#[test]
fn segment_width_must_match_the_model() {
    let model = init::nisqa_like(24, 15, true);
    let mut cfg = config(ExplainMethod::Ig);
    cfg.segment = SegmentConfig::new(13, 1);
    assert!(run_pipeline(&model, &spectrogram(30, 4), &cfg).is_err());
}
