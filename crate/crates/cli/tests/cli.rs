use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn diffrast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffrast")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn png_size(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn render_writes_images_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = diffrast(&["render", "--config", &config("sphere.json"), "--out", out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for name in ["color.png", "alpha.png", "depth.png"] {
        assert_eq!(png_size(&dir.path().join(name)), (64, 64), "{name}");
    }
    let echoed = String::from_utf8(r.stdout).unwrap();
    let saved = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert_eq!(echoed, saved);
    assert!(saved.contains("\"delta\": 0.0001"), "{saved}");
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = diffrast(&[
        "render", "--config", &config("sphere.json"), "--out", out, "--res", "24x16", "--delta", "0.001", "--seed", "9",
        "--workers", "2", "--precision", "single",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(png_size(&dir.path().join("color.png")), (24, 16));
    let saved = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    for needle in ["\"delta\": 0.001", "\"seed\": 9", "\"workers\": 2", "\"precision\": \"single\""] {
        assert!(saved.contains(needle), "{needle} missing from {saved}");
    }
}

#[test]
fn optimize_writes_a_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = diffrast(&["optimize", "--config", &config("task_b.json"), "--out", out, "--iters", "60", "-q"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(r.stdout.is_empty());
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "iteration,total,iou,col,sm,lap");
    let iters: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters.len(), 60);
    assert!(iters.windows(2).all(|w| w[1] > w[0]));
    for name in ["final.png", "mesh.obj", "report.txt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn identical_runs_give_identical_csv() {
    let run = |workers: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let r = diffrast(&[
            "optimize", "--config", &config("task_e.json"), "--out", out, "--iters", "15", "--workers", workers, "-q",
        ]);
        assert!(r.status.success());
        (
            std::fs::read(dir.path().join("loss.csv")).unwrap(),
            std::fs::read(dir.path().join("final.png")).unwrap(),
        )
    };
    let first = run("1");
    assert_eq!(first, run("1"));
    assert_eq!(first, run("4"));
}

#[test]
fn gradcheck_vertex_colors_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = diffrast(&[
        "gradcheck", "--config", &config("sphere.json"), "--out", out, "--group", "vertex_colors", "-q",
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let table = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(table.contains("vertex_colors"), "{table}");
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    // configuration errors
    let missing = dir.path().join("missing.json");
    assert_eq!(diffrast(&["render", "--config", missing.to_str().unwrap(), "--out", out]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"shading": {"model": "toon"}}"#).unwrap();
    let r = diffrast(&["render", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("shading"));
    assert_eq!(diffrast(&["render", "--bogus"]).status.code(), Some(1));
    assert_eq!(diffrast(&["optimize", "--config", &config("sphere.json"), "--out", out]).status.code(), Some(1));

    // runtime errors: the output path is a file
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let r = diffrast(&["render", "--config", &config("sphere.json"), "--out", blocker.to_str().unwrap(), "-q"]);
    assert_eq!(r.status.code(), Some(2));

    // gradient check failure: a step of zero is rejected by the checker
    let r = diffrast(&[
        "gradcheck", "--config", &config("sphere.json"), "--out", out, "--group", "vertex_colors", "--step", "0", "-q",
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn help_documents_every_flag() {
    let common = ["--config", "--out", "--seed", "--delta", "--workers", "--res", "--precision", "--quiet"];
    let cases: [(&str, &[&str]); 3] = [
        ("render", &[]),
        ("optimize", &["--iters"]),
        ("gradcheck", &["--group", "--samples", "--step", "--tolerance", "--points"]),
    ];
    for (sub, extra) in cases {
        let r = diffrast(&[sub, "--help"]);
        assert!(r.status.success());
        let text = String::from_utf8(r.stdout).unwrap();
        for flag in common.iter().chain(extra) {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(flag) || l.contains(&format!(", {flag}")))
                .unwrap_or_else(|| panic!("{sub}: {flag} missing"));
            let described = line.split_whitespace().count() > 2;
            assert!(described, "{sub}: {flag} has no description: {line}");
        }
    }
}
