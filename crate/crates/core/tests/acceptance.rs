//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::cell::Cell;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffrast_core::camera::ScreenVertices;
use diffrast_core::gradcheck::{gradcheck_config, GradcheckOptions};
use diffrast_core::io::png::{encode_png, with_alpha, BitDepth};
use diffrast_core::objective::render_views;
use diffrast_core::raster::{rasterize, rasterize_backward, VertexAttrs, MIN_AREA};
use diffrast_core::shading::{shade, ShadeInputs};
use diffrast_core::{
    forward_render, parse_scene, parse_scene_str, run_task, with_workers, Camera, Image, LightingSpec, ParamGroup,
    Precision, Scene, SoftConfig, Vec2, Vec3, VertexAttributes,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn screen(ndc: &[Vec2], depth: &[f64]) -> ScreenVertices {
    ScreenVertices {
        ndc_xy: ndc.to_vec(),
        depth: depth.to_vec(),
        inv_w: depth.iter().map(|d| 1.0 / d).collect(),
        behind: vec![false; ndc.len()],
    }
}

fn area2(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

// ---------------------------------------------------------------------------

fn barycentric_exactness() -> Outcome {
    let (w, h) = (16usize, 16usize);
    let coord = -1.2f64..1.2;
    let strategy = (
        prop::array::uniform6(coord),
        prop::array::uniform3(0.5f64..5.0),
        prop::array::uniform9(-2.0f64..2.0),
    );
    let pixels_checked = Cell::new(0usize);
    let result = runner(1000).run(&strategy, |(xy, depth, colors)| {
        let ndc = [Vec2::new(xy[0], xy[1]), Vec2::new(xy[2], xy[3]), Vec2::new(xy[4], xy[5])];
        prop_assume!(area2(&ndc[0], &ndc[1], &ndc[2]).abs() > 0.05);
        let attrs = VertexAttrs::new(3, colors.to_vec());
        let (frame, tape) = rasterize(&screen(&ndc, &depth), &[[0, 1, 2]], &attrs, &SoftConfig::default(), w, h).unwrap();
        let zero_alpha = Image::zeros(w, h, 1);
        let mut covered = 0;
        for p in 0..w * h {
            if !frame.covered(p) {
                continue;
            }
            covered += 1;
            let c = p % 3;
            let mut g = Image::zeros(w, h, 3);
            g.pixel_mut(p)[c] = 1.0;
            let grads = rasterize_backward(&g, &zero_alpha, &tape).unwrap();
            for k in 0..3 {
                for ch in 0..3 {
                    let got = grads.attrs[k * 3 + ch];
                    let want = if ch == c { frame.bary[p][k] } else { 0.0 };
                    prop_assert_eq!(got.to_bits(), want.to_bits(), "pixel {} vertex {} channel {}", p, k, ch);
                }
            }
            // the weights themselves against an independent computation
            let q = Vec2::new((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let q = Vec2::new(q.x / w as f64 * 2.0 - 1.0, 1.0 - q.y / h as f64 * 2.0);
            let a = area2(&ndc[0], &ndc[1], &ndc[2]);
            let oracle = [
                area2(&q, &ndc[1], &ndc[2]) / a,
                area2(&ndc[0], &q, &ndc[2]) / a,
                area2(&ndc[0], &ndc[1], &q) / a,
            ];
            for k in 0..3 {
                prop_assert!((frame.bary[p][k] - oracle[k]).abs() < 1e-12);
            }
        }
        pixels_checked.set(pixels_checked.get() + covered);
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, format!("1000 scenes, {} covered pixels, all bit-exact", pixels_checked.get())),
        Err(e) => outcome(false, e.to_string()),
    }
}

// ---------------------------------------------------------------------------

struct GroupCheck {
    label: &'static str,
    scene: &'static str,
    weights: &'static str,
    group: ParamGroup,
    samples: usize,
    points: usize,
}

fn gradient_fidelity() -> Outcome {
    let lambert = r#""shading": {"model": "lambertian", "kd": 0.9, "light_dir": [0.267261, 0.534522, 0.801784]}"#;
    let phong = r#""shading": {"model": "phong", "kd": 0.7, "ks": 0.4, "shininess": 12.0, "light_dir": [0.267261, 0.534522, 0.801784]}"#;
    let sh = r#""shading": {"model": "sh", "coeffs": [1.2, 0.3, 0.5, -0.2, 0.1, -0.1, 0.15, 0.05, -0.1]}"#;
    let ramp = r#""texture": {"ramp": {"size": [16, 16]}}"#;
    let checker = r#""texture": {"checker": {"size": [16, 16], "cells": 4}}"#;
    let none = r#""shading": {"model": "none"}"#;
    let alpha_only = r#"{"lambda_iou": 1, "lambda_col": 0, "lambda_sm": 0, "lambda_lap": 0}"#;
    let color_only = r#"{"lambda_iou": 0, "lambda_col": 1, "lambda_sm": 0, "lambda_lap": 0}"#;
    let default = "{}";
    let checks = [
        GroupCheck { label: "positions/alpha", scene: none, weights: alpha_only, group: ParamGroup::VertexPositions, samples: 150, points: 2 },
        GroupCheck { label: "positions/color", scene: lambert, weights: color_only, group: ParamGroup::VertexPositions, samples: 150, points: 2 },
        GroupCheck { label: "uvs", scene: ramp, weights: default, group: ParamGroup::Uvs, samples: 150, points: 1 },
        GroupCheck { label: "texels", scene: checker, weights: default, group: ParamGroup::Texture, samples: 150, points: 1 },
        GroupCheck { label: "light_dir", scene: lambert, weights: default, group: ParamGroup::LightDir, samples: 3, points: 30 },
        GroupCheck { label: "sh", scene: sh, weights: default, group: ParamGroup::ShCoeffs, samples: 9, points: 10 },
        GroupCheck { label: "kd/ks", scene: phong, weights: default, group: ParamGroup::Material, samples: 3, points: 30 },
        GroupCheck { label: "eye", scene: lambert, weights: default, group: ParamGroup::CameraEye, samples: 3, points: 60 },
    ];
    let opts = GradcheckOptions {
        h: 1e-4,
        tolerance: 1e-3,
        min_pass_rate: 0.99,
        ..Default::default()
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for c in &checks {
        let text = format!(
            r#"{{"mesh": "icosphere:2", "colors": "position", "camera": {{"eye": [0.0, 0.6, 3.0]}},
                "resolution": [32, 32], {}, "loss": {}}}"#,
            c.scene, c.weights
        );
        let cfg = parse_scene_str(&text).expect("check config");
        let r = gradcheck_config(&cfg, Path::new("."), c.group, &GradcheckOptions { samples: c.samples, ..opts }, c.points)
            .expect("check problem");
        let checked = r.passed() + r.failed();
        let ok = r.ok() && checked >= 20;
        pass &= ok;
        parts.push(format!(
            "{} {}/{}{}",
            c.label,
            r.passed(),
            checked,
            if ok { "" } else { " FAIL" }
        ));
    }
    outcome(pass, format!("passed/checked: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------

fn seg_dist2(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.dot(&ab)).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm_squared()
}

fn soft_alpha_oracle() -> Outcome {
    let (w, h) = (16usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for _ in 0..100 {
        let n_faces = rng.gen_range(1..=50);
        let delta = 10f64.powf(rng.gen_range(-4.0..-1.5));
        let soft = SoftConfig {
            delta,
            cutoff_eps: 1e-7,
        };
        let mut ndc = Vec::new();
        let mut faces = Vec::new();
        while faces.len() < n_faces {
            let c = Vec2::new(rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3));
            let s = rng.gen_range(0.03..0.4);
            let tri: Vec<Vec2> = (0..3).map(|_| c + Vec2::new(rng.gen_range(-s..s), rng.gen_range(-s..s))).collect();
            if area2(&tri[0], &tri[1], &tri[2]).abs() * 0.5 < 1e-4 {
                continue;
            }
            let base = ndc.len();
            ndc.extend(tri);
            faces.push([base, base + 1, base + 2]);
        }
        let depth: Vec<f64> = (0..ndc.len()).map(|_| rng.gen_range(1.0..4.0)).collect();
        let attrs = VertexAttrs::new(1, vec![0.0; ndc.len()]);
        let (frame, _) = rasterize(&screen(&ndc, &depth), &faces, &attrs, &soft, w, h).unwrap();
        for p in 0..w * h {
            let a = frame.alpha.data()[p];
            if frame.covered(p) {
                worst = worst.max((a - 1.0).abs());
                continue;
            }
            let q = Vec2::new(((p % w) as f64 + 0.5) / w as f64 * 2.0 - 1.0, 1.0 - ((p / w) as f64 + 0.5) / h as f64 * 2.0);
            let keep: f64 = faces
                .iter()
                .filter(|f| area2(&ndc[f[0]], &ndc[f[1]], &ndc[f[2]]).abs() * 0.5 >= MIN_AREA)
                .map(|f| {
                    let d2 = (0..3)
                        .map(|k| seg_dist2(&q, &ndc[f[k]], &ndc[f[(k + 1) % 3]]))
                        .fold(f64::INFINITY, f64::min);
                    1.0 - (-d2 / delta).exp()
                })
                .product();
            worst = worst.max((a - (1.0 - keep)).abs());
            compared += 1;
        }
    }
    outcome(
        worst <= 1e-6,
        format!("100 scenes, {compared} background pixels, max abs error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------

fn round_trip() -> Outcome {
    let dir = configs_dir();
    let run = |name: &str| {
        let cfg = parse_scene(&dir.join(name)).expect("task config");
        let iters = cfg.task.as_ref().unwrap().iterations;
        let r = run_task(&cfg, &dir, None).expect("task run");
        (r, iters)
    };
    let limit = Duration::from_secs(300);
    let mut pass = true;
    let mut parts = Vec::new();

    let (b, iters) = run("task_b.json");
    let ok = iters <= 500 && b.metrics.color_l1_drop >= 0.95 && b.wall_time < limit;
    pass &= ok;
    parts.push(format!("b L1 drop {:.4} in {iters} steps", b.metrics.color_l1_drop));

    let (a, iters) = run("task_a.json");
    let ok = iters <= 2000 && a.metrics.silhouette_iou >= 0.95 && a.wall_time < limit;
    pass &= ok;
    parts.push(format!("a IOU {:.4} in {iters} steps", a.metrics.silhouette_iou));

    let (g, _) = run("task_g.json");
    let rel = g.metrics.sh_rel_l2.unwrap_or(f64::INFINITY);
    pass &= rel <= 0.05 && g.wall_time < limit;
    parts.push(format!("g SH rel L2 {rel:.2e}"));

    let (f, _) = run("task_f.json");
    let eye = f.metrics.eye_error_ratio.unwrap_or(f64::INFINITY);
    pass &= eye <= 0.01 && f.wall_time < limit;
    parts.push(format!("f eye error {:.3}% of radius", eye * 100.0));

    let (hh, _) = run("task_h.json");
    pass &= hh.wall_time < limit;
    if let Some((got, want)) = hh.metrics.material {
        parts.push(format!(
            "h (reported only) shininess {:.2} vs {:.2}, kd {:.3} vs {:.3}",
            got[2], want[2], got[0], want[0]
        ));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------

fn fingerprint(images: &[Image]) -> Vec<u8> {
    images
        .iter()
        .flat_map(|i| i.data().iter().flat_map(|x| x.to_bits().to_le_bytes()))
        .collect()
}

fn determinism() -> Outcome {
    let dir = configs_dir();
    let sphere = parse_scene(&dir.join("sphere.json")).unwrap();
    let mut task = parse_scene(&dir.join("task_e.json")).unwrap();
    task.task.as_mut().unwrap().iterations = 25;
    let mut silhouette = parse_scene(&dir.join("task_a.json")).unwrap();
    silhouette.task.as_mut().unwrap().iterations = 25;
    silhouette.views = 2;

    let run = |workers: usize| {
        with_workers(Some(workers), || {
            let scene = sphere.build_scene(&dir).unwrap();
            let views = render_views(&scene, &sphere.cameras(), Precision::Double).unwrap();
            let mut images: Vec<Image> = views.iter().flat_map(|(o, _)| [o.color.clone(), o.alpha.clone()]).collect();
            let png = encode_png(&with_alpha(&views[0].0.color, &views[0].0.alpha).unwrap(), BitDepth::Sixteen).unwrap();
            let mut csv = String::new();
            for cfg in [&task, &silhouette] {
                let r = run_task(cfg, &dir, None).unwrap();
                csv += &r.loss_csv().unwrap();
                let out = render_views(&r.scene, &r.cameras, Precision::Double).unwrap();
                images.extend(out.into_iter().map(|(o, _)| o.color));
            }
            (fingerprint(&images), png, csv)
        })
    };
    let reference = run(1);
    let same = [4, 8].iter().all(|&w| run(w) == reference);
    outcome(
        same,
        format!(
            "render, 2 optimize runs ({} CSV bytes) identical at 1, 4, 8 workers",
            reference.2.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn random_scene(rng: &mut ChaCha8Rng, lighting: LightingSpec) -> (Scene, Camera) {
    let mesh = diffrast_core::geometry::unit_sphere(1).unwrap();
    let colors = (0..mesh.vertex_count())
        .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
        .collect();
    let mesh = mesh
        .with_attributes(VertexAttributes {
            colors: Some(colors),
            ..Default::default()
        })
        .unwrap();
    let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    let eye = dir * rng.gen_range(2.5..4.0);
    let cam = Camera::look_at(eye, Vec3::zeros(), if dir.y.abs() > 0.9 { Vec3::x() } else { Vec3::y() }, 0.8, 1.0);
    let scene = Scene {
        mesh,
        texture: None,
        lighting,
        soft: SoftConfig::default(),
        width: 24,
        height: 24,
    };
    (scene, cam)
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

fn reductions() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;

    // no lighting reproduces plain interpolation
    let r = runner(100).run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scene, cam) = random_scene(&mut rng, LightingSpec::None);
        let (out, _) = forward_render(&scene, &cam).unwrap();
        let colors = scene.mesh.colors().unwrap();
        for p in 0..scene.width * scene.height {
            let got = out.color.pixel(p);
            prop_assert_eq!(got, out.frame.attr_image.pixel(p));
            if out.frame.covered(p) {
                let f = scene.mesh.faces()[out.frame.face_id[p] as usize];
                let b = out.frame.bary[p];
                let want = colors[f[0]] * b[0] + colors[f[1]] * b[1] + colors[f[2]] * b[2];
                prop_assert!((Vec3::from_column_slice(got) - want).amax() < 1e-12);
            } else {
                prop_assert_eq!(got, &[0.0, 0.0, 0.0][..]);
            }
        }
        Ok(())
    });
    pass &= r.is_ok();
    parts.push(format!("none = interpolation {}", if r.is_ok() { "ok" } else { "FAIL" }));

    // Phong without specular is Lambertian
    let worst = Cell::new(0.0f64);
    let r = runner(100).run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let light_dir = unit(&mut rng);
        let kd = rng.gen_range(0.0..2.0);
        let shininess = rng.gen_range(1.0..64.0);
        let (mut scene, cam) = random_scene(&mut rng, LightingSpec::Lambertian { kd, light_dir });
        let (lambert, _) = forward_render(&scene, &cam).unwrap();
        scene.lighting = LightingSpec::Phong {
            kd,
            ks: 0.0,
            shininess,
            light_dir,
        };
        let (phong, _) = forward_render(&scene, &cam).unwrap();
        let diff = lambert
            .color
            .data()
            .iter()
            .zip(phong.color.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst.set(worst.get().max(diff));
        prop_assert!(diff <= 1e-9);
        Ok(())
    });
    pass &= r.is_ok();
    parts.push(format!("phong ks=0 = lambertian (max diff {:.1e})", worst.get()));

    // band-0 spherical harmonics ignore the normal
    let r = runner(100).run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (8, 8);
        let mut coeffs = [0.0; 9];
        coeffs[0] = rng.gen_range(-3.0..3.0);
        let spec = LightingSpec::SphericalHarmonics { coeffs };
        let base = Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let normals = |rng: &mut ChaCha8Rng| {
            Image::from_vec(w, h, 3, (0..w * h).flat_map(|_| unit(rng).as_slice().to_vec()).collect()).unwrap()
        };
        let (n1, n2) = (normals(&mut rng), normals(&mut rng));
        let coverage: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.8)).collect();
        let run = |n: &Image| {
            let inputs = ShadeInputs {
                base: &base,
                normals: Some(n),
                positions: None,
                coverage: &coverage,
                eye: Vec3::new(0.0, 0.0, 3.0),
            };
            shade(&inputs, &spec).unwrap().0
        };
        prop_assert_eq!(run(&n1), run(&n2));
        Ok(())
    });
    pass &= r.is_ok();
    parts.push(format!("sh band 0 normal-invariant {}", if r.is_ok() { "ok" } else { "FAIL" }));
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 6] = [
        ("1 barycentric gradient exactness", barycentric_exactness, Some(Duration::from_secs(10))),
        ("2 gradient fidelity", gradient_fidelity, Some(Duration::from_secs(120))),
        ("3 soft alpha vs brute force", soft_alpha_oracle, None),
        ("4 round-trip recovery", round_trip, None),
        ("5 determinism across worker counts", determinism, None),
        ("6 shading reductions", reductions, None),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= b);
        let pass = result.pass && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {name}: {} ({:.1} s{})",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            match budget {
                Some(b) if !in_budget => format!(", over {} s budget", b.as_secs()),
                _ => String::new(),
            }
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
