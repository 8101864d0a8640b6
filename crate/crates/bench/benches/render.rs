use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffrast_core::objective::{render_views, ViewTarget};
use diffrast_core::{evaluate, parse_scene_str, LossWeights, ParamGroup, ParamSet, Precision, SceneConfig};

fn config(shading: &str, res: usize) -> SceneConfig {
    let text = format!(
        r#"{{"mesh": "icosphere:3", "colors": "position", "camera": {{"eye": [0.0, 0.6, 3.0]}},
            "resolution": [{res}, {res}], "shading": {shading}}}"#
    );
    parse_scene_str(&text).unwrap()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for res in [64, 128, 256] {
        let cfg = config(r#"{"model": "none"}"#, res);
        let scene = cfg.build_scene(Path::new(".")).unwrap();
        let cams = cfg.cameras();
        group.bench_with_input(BenchmarkId::from_parameter(res), &res, |b, _| {
            b.iter(|| render_views(black_box(&scene), &cams, Precision::Double).unwrap())
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    let shadings = [
        ("lambertian", r#"{"model": "lambertian", "kd": 1.0, "light_dir": [0, 0, 1]}"#),
        ("sh", r#"{"model": "sh", "coeffs": [1.2, 0.3, 0.5, -0.2, 0.1, -0.1, 0.15, 0.05, -0.1]}"#),
    ];
    for (name, shading) in shadings {
        let cfg = config(shading, 128);
        let scene = cfg.build_scene(Path::new(".")).unwrap();
        let cams = cfg.cameras();
        let mut shifted = cams.clone();
        shifted[0].eye.x += 0.1;
        let targets: Vec<ViewTarget> = render_views(&scene, &shifted, Precision::Double)
            .unwrap()
            .iter()
            .map(|(o, _)| ViewTarget::from_render(o, Precision::Double))
            .collect();
        let params = ParamSet::new([ParamGroup::VertexPositions, ParamGroup::VertexColors, ParamGroup::CameraEye]).unwrap();
        let weights = LossWeights::default();
        group.bench_function(name, |b| {
            b.iter(|| evaluate(black_box(&scene), &cams, &targets, &weights, &params, Precision::Double).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
