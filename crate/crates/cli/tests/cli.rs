//! The `ccad` binary driven end to end on tiny configurations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccad_pipeline::dataset::ingest;
use ccad_pipeline::synth::{synth_generate, SynthSpec};

const TINY: &str = r#"
image_size = 16
synth_n_train = 8
synth_n_test_good = 4
synth_n_test_defect = 4
extractor_widths = [8, 8]
extractor_layers = [0, 1]
feature_dim = 8
patch_stride = 4
bank_size = 6
fcm_inner = 8
fcm_heads = 2
base_width = 8
channel_mult = [1, 2]
attention_levels = 1
heads = 2
groups = 4
cond_inner = 8
codec_hidden = 8
codec_steps = 20
codec_mae_threshold = 10.0
max_steps = 4
batch_size = 2
diffusion_steps = 50
inference_steps = 3
score_layers = [0, 1]
score_weights = [1.0, 1.0]
smooth_sigma = 1.0
"#;

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let config = dir.join("run.toml");
    let text = format!(
        "data_root = {:?}\nwork_dir = {:?}\n{TINY}",
        dir.join("data").display().to_string(),
        dir.join("work").display().to_string()
    );
    fs::write(&config, text).unwrap();
    Fixture { _tmp: tmp, dir, config }
}

fn ccad(fx: &Fixture, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccad"))
        .args(args)
        .arg("--config")
        .arg(&fx.config)
        .output()
        .unwrap()
}

fn ok(fx: &Fixture, args: &[&str]) -> String {
    let out = ccad(fx, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
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

#[test]
fn synthetic_data_is_reproducible_and_ingests_with_matching_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_train: 5,
        n_test_good: 3,
        n_test_defect: 4,
        size: 16,
        ..SynthSpec::default()
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth_generate(&spec, &a).unwrap();
    synth_generate(&spec, &b).unwrap();
    assert_eq!(tree(&a), tree(&b));

    let m = ingest(&a, "{stem}_mask.*").unwrap();
    let c = m.category(None).unwrap();
    assert_eq!(c.train.len(), 5);
    assert_eq!(c.test.iter().filter(|t| !t.is_anomalous()).count(), 3);
    assert_eq!(c.test.iter().filter(|t| t.is_anomalous()).count(), 4);
    assert_eq!(c.image_size, (16, 16));
}

#[test]
fn training_without_a_bank_is_a_validation_error() {
    let fx = fixture();
    ok(&fx, &["synth-data"]);
    let out = ccad(&fx, &["train", "--variant", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bank required"));
}

#[test]
fn bad_configuration_exits_with_one() {
    let fx = fixture();
    let out = ccad(&fx, &["build-bank", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = ccad(&fx, &["build-bank", "--set", "score_weights=[1.0]"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn orphan_defect_image_is_named() {
    let fx = fixture();
    ok(&fx, &["synth-data"]);
    let orphan = fx.dir.join("data/synthetic/test/square/999.png");
    fs::copy(fx.dir.join("data/synthetic/test/square/000.png"), &orphan).unwrap();
    let out = ccad(&fx, &["build-bank"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("999.png"));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let fx = fixture();
    ok(&fx, &["synth-data"]);
    ok(&fx, &["build-bank"]);
    fs::write(fx.dir.join("work/model.ccadckpt"), b"not a checkpoint").unwrap();
    let out = ccad(&fx, &["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn every_subcommand_runs_and_evaluate_is_idempotent() {
    for variant in ["v", "c", "f"] {
        let fx = fixture();
        let data_before = {
            ok(&fx, &["synth-data"]);
            tree(&fx.dir.join("data"))
        };
        ok(&fx, &["build-bank"]);
        ok(&fx, &["train", "--variant", variant]);
        ok(&fx, &["reconstruct", "--variant", variant]);
        let scores = ok(&fx, &["score", "--variant", variant]);
        assert_eq!(scores.lines().count(), 8);
        ok(&fx, &["evaluate", "--variant", variant]);
        let first = fs::read(fx.dir.join("work/report.json")).unwrap();
        ok(&fx, &["evaluate", "--variant", variant]);
        let second = fs::read(fx.dir.join("work/report.json")).unwrap();
        assert_eq!(first, second, "variant {variant}");
        let md = ok(&fx, &["report", "--variant", variant]);
        assert!(md.contains("AUROC"));

        // inputs untouched
        assert_eq!(tree(&fx.dir.join("data")), data_before);

        // artifacts carry the configuration they were made with
        let echo: serde_json::Value =
            serde_json::from_slice(&fs::read(fx.dir.join("work/model.config.json")).unwrap()).unwrap();
        assert_eq!(echo["config"]["variant"], variant);
        let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
        assert_eq!(report["config"]["variant"], variant);
        assert_eq!(report["seeds"]["train"], 0);

        let maps = fx.dir.join("work/maps/square/000.png");
        let img = image::open(&maps).unwrap();
        assert!(matches!(img, image::DynamicImage::ImageLuma16(_)));
    }
}

#[test]
fn checkpoint_from_another_configuration_is_refused() {
    let fx = fixture();
    ok(&fx, &["synth-data"]);
    ok(&fx, &["build-bank"]);
    ok(&fx, &["train"]);
    let out = ccad(&fx, &["evaluate", "--set", "base_width=16"]);
    assert_eq!(out.status.code(), Some(1));
}
