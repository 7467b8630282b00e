use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array4;
use spdnet::data::{list_images, load_image, save_image};

fn spdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spdnet")).args(args).output().expect("spawn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn count_from_info(o: &Output) -> usize {
    stdout(o).lines().find_map(|l| l.strip_prefix("param_count: ")).expect("param_count line").parse().unwrap()
}

const TINY: &str = "[model]\nbase_channels = 4\nnum_wmlm = 3\nlevels_per_wmlm = 2\n[model.block]\nse_reduction = 2\nblocks_per_srir = 1\n\
[train]\nbatch_size = 2\npatch_size = 16\nmax_steps = 3\nseed = 1\n";

/// Synthesises a dataset and trains the tiny 3-stage model on it.
fn trained(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let params = dir.join("rain.toml");
    std::fs::write(&params, "scene_size = 32\nnum_streaks = [5, 10]\n").unwrap();
    let o = spdnet(&["synth", "--out-dir", s(&data), "--seed", "3", "--count", "3", "--params", s(&params)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    let o = spdnet(&["train", "--config", s(&cfg), "--input", s(&data), "--output", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    run.join("final.safetensors")
}

#[test]
fn info_default_and_toy_counts() {
    let o = spdnet(&["info"]);
    assert!(o.status.success());
    assert_eq!(count_from_info(&o), spdnet::ModelConfig::default().param_count());
    assert!(stdout(&o).contains("stages: 3\n"));
    assert!(stdout(&o).contains("channels: 60\n"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, "[model]\nbase_channels = 1\nnum_wmlm = 1\nlevels_per_wmlm = 1\n[model.block]\nse_reduction = 1\nblocks_per_srir = 1\n").unwrap();
    let o = spdnet(&["info", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(count_from_info(&o), 159);
}

#[test]
fn info_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nbase_channels = 8\nbase_channels = = 3\n").unwrap();
    let o = spdnet(&["info", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = spdnet(&["info", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = spdnet(&["info", "--weights", s(&dir.path().join("missing.safetensors"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_and_missing_flags() {
    assert_eq!(spdnet(&["info", "--bogus"]).status.code(), Some(2));
    assert_eq!(spdnet(&["rcp", "--input", "a.png"]).status.code(), Some(2));
    assert_eq!(spdnet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn rcp_writes_rounded_residue() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    let out = dir.path().join("out.png");
    let px = [[0u8, 128, 255], [10, 10, 10], [200, 100, 50], [7, 9, 8]];
    let data = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, y, x)| px[y * 2 + x][c] as f32 / 255.0);
    save_image(&input, &data).unwrap();
    let o = spdnet(&["rcp", "--input", s(&input), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gray = image::open(&out).unwrap();
    assert_eq!(gray.color(), image::ColorType::L8);
    assert_eq!(gray.to_luma8().into_raw(), vec![255, 0, 150, 2]);
}

#[test]
fn synth_is_seeded_and_pairs_by_stem() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("rain.toml");
    std::fs::write(&params, "scene_size = 24\n").unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = spdnet(&["synth", "--out-dir", s(&out), "--seed", "9", "--count", "2", "--params", s(&params)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let rainy = list_images(&out.join("rainy")).unwrap();
        let gt = list_images(&out.join("gt")).unwrap();
        assert_eq!(rainy.keys().collect::<Vec<_>>(), gt.keys().collect::<Vec<_>>());
        assert_eq!(rainy.len(), 2);
        bytes.push(std::fs::read(&rainy["scene0001"]).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);

    let clean = dir.path().join("clean");
    std::fs::create_dir(&clean).unwrap();
    save_image(&clean.join("street.png"), &Array4::from_elem((1, 3, 20, 20), 0.3)).unwrap();
    let out = dir.path().join("c");
    let o = spdnet(&["synth", "--clean-dir", s(&clean), "--out-dir", s(&out), "--seed", "1", "--count", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let keys: Vec<_> = list_images(&out.join("rainy")).unwrap().into_keys().collect();
    assert_eq!(keys, vec!["street", "street_r1"]);
    let gt = load_image(&out.join("gt/street.png")).unwrap();
    assert!(gt.data().iter().all(|&v| (v - 77.0 / 255.0).abs() < 1e-6));

    let o = spdnet(&["synth", "--out-dir", s(&dir.path().join("z")), "--count", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("z").exists());
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let weights = trained(dir.path());
    let log = std::fs::read_to_string(weights.with_file_name("train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,loss,lr,wall_time\n"));

    let o = spdnet(&["info", "--weights", s(&weights)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("stages: 3\n"));

    // Non-multiple sizes exercise padding.
    let inputs = dir.path().join("inputs");
    std::fs::create_dir(&inputs).unwrap();
    for (i, (h, w)) in [(20, 20), (17, 23), (11, 13)].into_iter().enumerate() {
        let img = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| ((c + y + 2 * x + i) % 9) as f32 / 8.0);
        save_image(&inputs.join(format!("img{i}.png")), &img).unwrap();
    }
    let out = dir.path().join("out");
    let o = spdnet(&["infer", "--weights", s(&weights), "--input", s(&inputs), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = list_images(&out).unwrap();
    assert_eq!(written.keys().collect::<Vec<_>>(), vec!["img0", "img1", "img2"]);
    assert_eq!(load_image(&written["img1"]).unwrap().data().dim(), (1, 3, 17, 23));
    assert_eq!(load_image(&written["img2"]).unwrap().data().dim(), (1, 3, 11, 13));

    let stages = dir.path().join("stages");
    let o = spdnet(&["infer", "--weights", s(&weights), "--input", s(&inputs.join("img0.png")), "--output", s(&stages), "--save-stages"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let keys: Vec<_> = list_images(&stages).unwrap().into_keys().collect();
    assert_eq!(keys, vec!["img0_stage1", "img0_stage2", "img0_stage3"]);
    assert_eq!(std::fs::read(stages.join("img0_stage3.png")).unwrap(), std::fs::read(out.join("img0.png")).unwrap());

    let report = dir.path().join("report.json");
    let o = spdnet(&["eval", "--pred-dir", s(&inputs), "--gt-dir", s(&inputs), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["mean_ssim"], 1.0);
    assert_eq!(json["mean_psnr"], "inf");
    assert_eq!(json["per_image"].as_object().unwrap().len(), 3);
    assert!(stdout(&o).contains("img2\t"));

    let data = dir.path().join("data");
    let o = spdnet(&["eval", "--weights", s(&weights), "--input", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 5);

    // Resuming continues the step count in the same log.
    let o = spdnet(&[
        "train", "--config", s(&dir.path().join("tiny.toml")), "--input", s(&data),
        "--output", s(&weights.parent().unwrap().join("more")), "--weights", s(&weights),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trained 0 steps"));
}

#[test]
fn infer_failures_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = spdnet(&["infer", "--weights", s(&dir.path().join("nope.safetensors")), "--input", s(dir.path()), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("weights"));

    let weights = trained(dir.path());
    let inputs = dir.path().join("inputs");
    std::fs::create_dir(&inputs).unwrap();
    save_image(&inputs.join("good.png"), &Array4::from_elem((1, 3, 8, 8), 0.5)).unwrap();
    std::fs::write(inputs.join("broken.png"), b"not a png").unwrap();
    std::fs::write(inputs.join("torn.jpg"), [0xff, 0xd8, 0xff]).unwrap();
    let o = spdnet(&["infer", "--weights", s(&weights), "--input", s(&inputs), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("broken.png") && err.contains("torn.jpg"), "{err}");
    assert!(!out.exists());
}

#[test]
fn eval_requires_matching_stems() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p"), dir.path().join("g"));
    std::fs::create_dir(&p).unwrap();
    std::fs::create_dir(&g).unwrap();
    save_image(&p.join("x.png"), &Array4::from_elem((1, 3, 12, 12), 0.5)).unwrap();
    save_image(&g.join("y.png"), &Array4::from_elem((1, 3, 12, 12), 0.5)).unwrap();
    let o = spdnet(&["eval", "--pred-dir", s(&p), "--gt-dir", s(&g)]);
    assert_eq!(o.status.code(), Some(3));
    let o = spdnet(&["eval", "--pred-dir", s(&p), "--gt-dir", s(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
}
