use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
[dataset]
frames = 6
train_fraction = 0.5
[geometry]
cart_size = [64, 64]
n_scanlines = 48
n_axial = 96
[model]
base_channels = 4
legacy_n_down = 4
[discriminator]
n_layers = 2
base_channels = 4
[train]
crop = 32
epochs = 1
batch_size = 2
[experiment]
variants = ["sa2h", "lsa2h"]
seeds = [1]
[eval]
error_maps = 1
histogram = { bins = 50, patch = 8 }
"#;

fn run(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_echosynth")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, runs, eval, rep) = (dir.path().join("d"), dir.path().join("r"), dir.path().join("e"), dir.path().join("p"));

    let out = run(&["gen-data", "--config", p(&cfg), "--out", p(&data), "--threads", "1"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("6 frames (3 train, 3 eval)"));
    let train = run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&runs)]);
    assert!(String::from_utf8_lossy(&train.stdout).contains("lsa2h seed 1"));
    assert!(String::from_utf8_lossy(&train.stdout).contains("s+a+low-quality"));
    let table = run(&["eval", "--config", p(&cfg), "--data", p(&data), "--runs", p(&runs), "--out", p(&eval), "--metrics", "psnr,mae,pchi2"]);
    let table = String::from_utf8_lossy(&table.stdout).to_string();
    assert!(table.contains("| sa2h |") && table.contains("| lsa2h |"));
    run(&["report", "--eval", p(&eval), "--out", p(&rep)]);
    assert!(rep.join("boxplots.svg").exists() && rep.join("summary.md").exists());
    run(&["infer", "--checkpoint", p(&runs.join("sa2h/seed-1")), "--data", p(&data), "--out", p(&dir.path().join("i"))]);
    assert_eq!(std::fs::read_dir(dir.path().join("i")).unwrap().count(), 3);
}

#[test]
fn bad_arguments_are_rejected() {
    let bad = Command::new(env!("CARGO_BIN_EXE_echosynth")).args(["train", "--data", "x", "--out", "y", "--variant", "pix2pix"]).output().unwrap();
    assert!(!bad.status.success());
    let dir = tempfile::tempdir().unwrap();
    let missing = Command::new(env!("CARGO_BIN_EXE_echosynth")).args(["eval", "--data", p(dir.path()), "--runs", "r", "--out", "o"]).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "full.toml"] {
        echosynth::harness::ExperimentConfig::load(&root.join(name)).unwrap();
    }
}
