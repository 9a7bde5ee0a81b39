use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [2]
[data]
kind = "synthetic"
k_src = 4
k_tgt = 3
shift = 0.5
source_train_per_class = 12
source_test_per_class = 4
target_train_per_class = 4
target_test_per_class = 4
[base]
arch = "(4x3x3)-maxpool2-(4x3x3)-dense8"
[train]
steps = 4
batch_size = 8
[transfer]
per_class = [2, 4]
repeats = 2
[viz]
iterations = 4
layers = [{ module = "base", layer = 0 }, { module = "module", layer = 0 }]
"#;

fn modnet(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_modnet"));
    cmd.args(args).env_remove("MODNET_OUT");
    if let Some(o) = out {
        cmd.env("MODNET_OUT", o);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_transfer_viz_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("env_out");

    let o = modnet(&["train", "--config", &cfg], Some(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("base_seed2.ckpt").exists());

    let o = modnet(&["train", "--config", &cfg, "--module"], Some(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("module_seed2.ckpt").exists());

    let o = modnet(
        &["transfer", "--config", &cfg, "--per-class", "2", "--topology", "finetune,two_towers"],
        Some(&out),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(csv.starts_with("seed,topology,per_class,examples_seen,batch_index,test_accuracy\n"));
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(!csv.contains("stitch"));

    let o = modnet(&["viz", "--config", &cfg, "--seed", "2"], Some(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("viz/base_l0_f3.pgm").exists());
    assert!(out.join("viz/module_l0_f3.pgm").exists());

    let svg = dir.path().join("c.svg");
    let o = modnet(
        &["plot", "--csv", out.join("curves.csv").to_str().unwrap(), "--out", svg.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(svg).unwrap().contains("<polyline"));
}

#[test]
fn out_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let flag = dir.path().join("flag");
    let env = dir.path().join("env");
    let o = modnet(&["train", "--config", &cfg, "--out", flag.to_str().unwrap()], Some(&env));
    assert_eq!(code(&o), 0);
    assert!(flag.join("base_seed2.ckpt").exists());
    assert!(!env.exists());
}

#[test]
fn resume_continues_an_interrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(code(&modnet(&["train", "--config", &cfg], Some(&full))), 0);

    let short = write_config(dir.path(), &TINY.replace("steps = 4", "steps = 2"));
    assert_eq!(code(&modnet(&["train", "--config", &short], Some(&part))), 0);
    let cfg = write_config(dir.path(), TINY);
    let ck = part.join("base_seed2.ckpt");
    let o = modnet(&["resume", "--config", &cfg, "--checkpoint", ck.to_str().unwrap()], Some(&part));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(full.join("base_seed2.ckpt")).unwrap(),
        std::fs::read(&ck).unwrap()
    );
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let bad = write_config(dir.path(), &TINY.replace("dense8", "dense8-bogus"));
    assert_eq!(code(&modnet(&["train", "--config", &bad], Some(&out))), 2);

    let unknown = write_config(dir.path(), &format!("{TINY}\n[extra]\nx = 1\n"));
    assert_eq!(code(&modnet(&["train", "--config", &unknown], Some(&out))), 2);

    let cfg = write_config(dir.path(), TINY);
    let missing = modnet(&["viz", "--config", &cfg, "--checkpoint", "/nonexistent/x.ckpt"], Some(&out));
    assert_eq!(code(&missing), 3);

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = modnet(&["resume", "--config", &cfg, "--checkpoint", garbage.to_str().unwrap()], Some(&out));
    assert_eq!(code(&o), 3);

    let huge = write_config(dir.path(), &TINY.replace("batch_size = 8", "batch_size = 8\nlr = 1e300"));
    let o = modnet(&["train", "--config", &huge], Some(&out));
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(code(&modnet(&["transfer", "--config", &cfg, "--topology", "nope"], Some(&out))), 2);
}
