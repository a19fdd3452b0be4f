use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowfix::data::{load_image_exact, DatasetManifest};
use flowfix::grid::LatentGrid;
use flowfix::sampler::integrate;
use flowfix_cli::commands::{load_checkpoint, PRIMARY_GENERATION_WARNING};
use flowfix_cli::config::RunConfig;

const SMALL: &str = r#"
schema_version = 1
phantom_count = 12
target_size = 32
split_train = 0.5
split_val = 0.25
split_test = 0.25
patch_size = 4
hidden_dim = 16
depth = 2
heads = 2
control_depth = 1
batch_size = 3
max_steps = 4
kid_subsets = 5
ablate_steps = [1, 2]
ablate_guidance = [1.0, 1.5]
ablate_grid_rows = 2
generate_count = 3
generate_steps = 2
"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), SMALL).unwrap();
        Work { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_flowfix"))
            .args(["--workdir", self.dir.path().to_str().unwrap(), "--config", "run.toml"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_is_gated_deterministic_and_echoes_config() {
    let w = Work::new();
    let out = w.ok(&["simulate", "--out", "a"]);
    assert!(stdout(&out).contains("phantom_count = 12"));
    let echoed = RunConfig::load(&w.path("a/run_config.toml")).unwrap();
    assert_eq!(echoed.phantom_count, 12);
    let m = DatasetManifest::load(&w.path("a")).unwrap();
    assert_eq!(m.records.len(), 12);
    assert!(m.records.iter().all(|r| r.gate_ssim > 0.6 && r.gate_ssim < 0.9));

    w.ok(&["simulate", "--out", "b"]);
    assert_eq!(tree(&w.path("a")), tree(&w.path("b")));

    w.ok(&["simulate", "--out", "mild", "--gate", "0.95", "0.99"]);
    let m = DatasetManifest::load(&w.path("mild")).unwrap();
    assert!(m.records.iter().all(|r| r.gate_ssim > 0.95 && r.gate_ssim < 0.99));
    m.verify().unwrap();
}

#[test]
fn bad_config_exits_with_code_two_and_writes_nothing() {
    let w = Work::new();
    fs::write(w.path("run.toml"), format!("{SMALL}\nlearning_rate = 0.1\n")).unwrap();
    let out = w.run(&["simulate", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!w.path("data").exists());

    let w = Work::new();
    let out = w.run(&["simulate", "--out", "data", "--gate", "0.9", "0.6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!w.path("data").exists());

    let out = w.run(&["train", "--data", "missing", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_restore_eval_generate_ablate() {
    let w = Work::new();
    w.ok(&["simulate", "--out", "data"]);
    for variant in ["primary", "bis"] {
        let out = w.ok(&["train", "--data", "data", "--out", variant, "--variant", variant]);
        assert!(stdout(&out).contains(&format!("variant = \"{variant}\"")));
        assert!(w.path(&format!("{variant}/model.safetensors")).exists());
        let echoed = RunConfig::load(&w.path(&format!("{variant}/run_config.toml"))).unwrap();
        assert_eq!(echoed.seed, 1);
    }

    // restore is reproducible and guidance 1 matches the two-branch path
    for out in ["r1", "r2"] {
        w.ok(&["restore", "--checkpoint", "primary", "--input", "data", "--out", out, "--guidance", "1.0"]);
    }
    let (a, b) = (tree(&w.path("r1/restored")), tree(&w.path("r2/restored")));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    let ckpt = load_checkpoint(&w.path("primary")).unwrap();
    let names: Vec<_> = a.keys().filter(|p| p.extension().unwrap() == "png").collect();
    let first = names[0];
    let corrupted = load_image_exact(&w.path("r1/corrupted").join(first)).unwrap();
    let src = LatentGrid::new(1, 32, 32, corrupted.data.clone()).unwrap();
    let cfg = RunConfig::default().sample_config();
    let two = integrate(&ckpt.model, &[Some(&src)], &[cfg.seed], &cfg, true).unwrap();
    let restored = load_image_exact(&w.path("r1/restored").join(first)).unwrap();
    assert_eq!(ckpt.codec.decode(&two[0]).unwrap(), restored);

    // paired and distribution reports
    let out = w.ok(&[
        "eval", "--input", "ours=r1/restored", "--input", "r1/corrupted", "--reference", "r1/reference",
    ]);
    let text = stdout(&out);
    assert!(text.contains("SSIM") && text.contains("MAE (normed)"));
    assert!(text.contains("ours") && text.contains("corrupted"));
    let lines = fs::read_to_string(w.path("eval/report.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let out = w.ok(&["eval", "--input", "r1/reference", "--reference", "r1/reference", "--out", "self"]);
    let row: serde_json::Value =
        serde_json::from_str(fs::read_to_string(w.path("self/report.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(row["ssim"], 1.0);
    assert_eq!(row["mae"], 0.0);
    assert!(stdout(&out).contains("1.000"));

    let out = w.ok(&[
        "eval", "--mode", "distribution", "--input", "r1/reference", "--reference", "r1/reference", "--out", "dist",
    ]);
    assert!(stdout(&out).contains("FID") && stdout(&out).contains(" \u{00b1} "));
    let row: serde_json::Value =
        serde_json::from_str(fs::read_to_string(w.path("dist/report.jsonl")).unwrap().trim()).unwrap();
    assert!(row["fid"].as_f64().unwrap() <= 1e-6);

    // generation
    let out = w.run(&["generate", "--checkpoint", "bis", "--count", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = w.ok(&["generate", "--checkpoint", "primary", "--out", "gp"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains(PRIMARY_GENERATION_WARNING));
    let out = w.ok(&["generate", "--checkpoint", "bis", "--out", "gb", "--steps", "10"]);
    assert!(!String::from_utf8_lossy(&out.stderr).contains("warning"));
    let images = tree(&w.path("gb"));
    assert_eq!(images.keys().filter(|p| p.extension().unwrap() == "png").count(), 3);

    // ablation grids and table
    let out = w.ok(&["ablate", "--checkpoint", "bis", "--input", "data", "--out", "abl"]);
    assert!(stdout(&out).contains("guidance"));
    let rows = fs::read_to_string(w.path("abl/ablation.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    for f in ["steps_grid.png", "guidance_grid.png", "generation_grid.png", "run_config.toml"] {
        assert!(w.path("abl").join(f).exists(), "{f}");
    }
    let grid = image::open(w.path("abl/steps_grid.png")).unwrap();
    // two rows of source | 2 settings | reference
    assert_eq!((grid.width(), grid.height()), (4 * 33 - 1, 2 * 33 - 1));
}
