use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decouple_core::manifest::load_manifest;
use decouple_core::synth::MANIFEST_NAME;

const TINY: &str = r#"
seed = 5

[synth]
image_size = 32

[train]
batch_size = 2
max_steps = 2

[train.generator]
base_width = 8
n_down = 2
n_blocks = 1
spectral_blocks = true

[train.discriminator]
base_width = 8
n_layers = 3
"#;

fn decouple(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decouple"))
        .args(args)
        .env_remove("DECOUPLE_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn gen(dir: &Path, cfg: &Path, name: &str, n: usize) -> PathBuf {
    let out = dir.join(name);
    let o = decouple(&["gen-synth", "--config", s(cfg), "--out", s(&out), "--n", &n.to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join(MANIFEST_NAME)
}

#[test]
fn gen_synth_is_deterministic_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = gen(dir.path(), &cfg, "a", 6);
    let b = gen(dir.path(), &cfg, "b", 6);
    assert!(a.is_file());
    assert!(dir.path().join("a/resolved_config.toml").is_file());
    for i in 0..6 {
        let name = format!("scene_{i:05}.png");
        assert_eq!(fs::read(a.with_file_name(&name)).unwrap(), fs::read(b.with_file_name(&name)).unwrap());
    }
    assert_eq!(load_manifest(&a).unwrap().len(), 6);
}

#[test]
fn gen_synth_without_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = decouple(&["gen-synth", "--out", s(&dir.path().join("x")), "--n", "2"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn output_root_variable_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_decouple"))
        .args(["gen-synth", "--config", s(&cfg), "--out", "rel", "--n", "1"])
        .env("DECOUPLE_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("rel").join(MANIFEST_NAME).is_file());
}

#[test]
fn curate_modes_produce_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let m = gen(dir.path(), &cfg, "data", 40);

    let rem = dir.path().join("rem");
    let o = decouple(&["curate", "--manifest", s(&m), "--class", "disc", "--mode", "remover", "--out", s(&rem)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected"));
    for sample in load_manifest(&rem.join(MANIFEST_NAME)).unwrap().load_all().unwrap() {
        assert!(sample.seg.data().iter().all(|&c| c != 1), "{} has target pixels", sample.id);
    }

    let res = dir.path().join("res");
    let o = decouple(&["curate", "--manifest", s(&m), "--class", "1", "--mode", "restorer", "--out", s(&res)]);
    assert_eq!(code(&o), 0);
    for sample in load_manifest(&res.join(MANIFEST_NAME)).unwrap().load_all().unwrap() {
        let f = sample.seg.data().iter().filter(|&&c| c == 1).count() as f64 / sample.seg.data().len() as f64;
        assert!((0.05..=0.40).contains(&f), "{} coverage {f}", sample.id);
    }

    let bank = dir.path().join("bank");
    let o = decouple(&["curate", "--manifest", s(&m), "--class", "disc", "--mode", "bank", "--out", s(&bank)]);
    assert_eq!(code(&o), 0);
    assert!(bank.join(decouple_core::curation::BANK_INDEX_NAME).is_file());
    assert!(bank.join("resolved_config.toml").is_file());
}

#[test]
fn curate_empty_selection_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // Scenes without objects contain no restorer candidates.
    let cfg = write_config(
        dir.path(),
        &TINY.replace("image_size = 32", "image_size = 32\nobject_count_range = [0, 0]"),
    );
    let m = gen(dir.path(), &cfg, "empty", 5);
    let o = decouple(&["curate", "--manifest", s(&m), "--class", "disc", "--mode", "restorer", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn remover_training_without_restorer_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = decouple(&["train", "--phase", "remover", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn train_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let m = gen(dir.path(), &cfg, "data", 30);
    let run = dir.path().join("base");
    let o = decouple(&["train", "--phase", "baseline", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("term") && stdout.contains("total"), "{stdout}");
    let ckpt = run.join("checkpoint.dckp");
    assert!(ckpt.is_file());
    assert!(run.join("resolved_config.toml").is_file());

    let rem = dir.path().join("rem");
    assert_eq!(
        code(&decouple(&["curate", "--manifest", s(&m), "--class", "disc", "--mode", "remover", "--out", s(&rem)])),
        0
    );
    let ev = dir.path().join("eval");
    let o = decouple(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--test-manifest",
        s(&m),
        "--comparison-manifest",
        s(&rem.join(MANIFEST_NAME)),
        "--out",
        s(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = decouple_core::evaluation::EvalReport::load(&ev.join("report.json")).unwrap();
    for k in ["fid_star", "u_ids_star", "psnr", "ssim"] {
        assert!(report.metric(k).is_some(), "missing {k}");
    }
    assert!(!report.timestamp.is_empty());

    // The unfiltered manifest still contains target pixels.
    let o = decouple(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--test-manifest",
        s(&m),
        "--comparison-manifest",
        s(&m),
        "--out",
        s(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&o), 5);
}

#[test]
fn ablate_marks_failed_rows_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    // An unreachable restorer band leaves the guided rows without a restorer.
    let text = r#"
[experiment]
n_train = 24
n_test = 16
seeds = [3]
steps = 1
restorer_steps = 1

[experiment.synth]
image_size = 32

[experiment.train]
batch_size = 2

[experiment.train.generator]
base_width = 8
n_down = 2
n_blocks = 1
spectral_blocks = true

[experiment.train.discriminator]
base_width = 8
n_layers = 3

[experiment.train.curation]
select_lo = 0.99
select_hi = 1.0
"#;
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("abl");
    let o = decouple(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert_ne!(code(&o), 0);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    let lines: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(lines.len(), 4, "{table}");
    let hashes: Vec<&str> = lines.iter().map(|l| l.split_whitespace().nth(8).unwrap()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]), "{table}");
    assert!(lines[0].starts_with("baseline") && !lines[0].contains("FAILED"));
    assert!(lines[1].starts_with("curation_only") && !lines[1].contains("FAILED"));
    assert!(lines[2].contains("FAILED") && lines[3].contains("FAILED"));
    assert!(out.join("seed3/baseline/checkpoint.dckp").is_file());
}
