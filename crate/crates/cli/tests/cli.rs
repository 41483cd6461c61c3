use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in well under a second
seed = 3
epochs = 2
batch_size = 2
gen.num_videos = 10
gen.frames_per_video = 3
gen.pairs_per_frame = 2
gen.entity_classes = 5
gen.predicate_partition = 2,3,4
gen.visual_dim = 4
gen.crop_dim = 6
fusion.d_model = 8
fusion.heads = 2
fusion.ff_dim = 8
fusion.spatial_layers = 1
fusion.temporal_layers = 1
fusion.max_temporal_positions = 3
fusion.semantic_dim = 4
provider.dim = 8
";

fn tr2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tr2")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tr2(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(args: &[&str]) -> String {
    let out = tr2(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn gen_train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen", "-c", &cfg, "-o", data.to_str().unwrap()]);
    assert!(data.join("dataset.txt").exists());
    assert!(data.join("embeddings.txt").exists());

    let run = dir.path().join("run");
    let dataset = format!("paths.dataset={}", data.join("dataset.txt").display());
    let embeddings = format!("paths.embeddings={}", data.join("embeddings.txt").display());
    ok(&["train", "-c", &cfg, "--set", &dataset, "--set", &embeddings, "-o", run.to_str().unwrap()]);
    for f in ["checkpoint.bin", "record.txt", "config.txt", "test.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("checkpoint.bin");
    let strata = dir.path().join("strata.csv");
    let report = ok(&[
        "eval",
        "-c",
        &cfg,
        "--set",
        &dataset,
        "--set",
        &embeddings,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--strata",
        strata.to_str().unwrap(),
        "--baseline",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(report, fs::read_to_string(run.join("test.csv")).unwrap());
    let strata_text = fs::read_to_string(&strata).unwrap();
    assert!(strata_text.starts_with("stratum_upper,recall,baseline_recall,gain"));
    for line in strata_text.lines().skip(1) {
        let gain: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(gain, 0.0);
    }

    let merged = ok(&["report", run.join("record.txt").to_str().unwrap()]);
    assert!(merged.starts_with("run,seed,config_hash,split,task,strategy,K,recall"));
    assert!(merged.lines().count() > 1);
}

#[test]
fn training_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["train", "-c", &cfg, "-o", a.to_str().unwrap()]);
    ok(&["train", "-c", &cfg, "-o", b.to_str().unwrap()]);
    for f in ["checkpoint.bin", "test.csv", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn gradcheck_single_variant_passes() {
    let out = ok(&["gradcheck", "--guidance", "eq2"]);
    assert!(out.contains("eq2") && out.trim_end().ends_with("pass"), "{out}");
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "fusion.heads = 4\nnot.a.key = 1\n").unwrap();
    let cases = [
        failure(&["train", "-c", bad.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]),
        failure(&["train", "--set", "fusion.heads=3", "-o", dir.path().to_str().unwrap()]),
        failure(&["report", dir.path().join("missing.txt").to_str().unwrap()]),
        failure(&["gradcheck", "--guidance", "sideways"]),
    ];
    for stderr in &cases {
        assert_eq!(stderr.lines().count(), 1, "{stderr}");
        assert!(stderr.starts_with("error: "), "{stderr}");
    }
    assert!(cases[0].contains("bad.cfg:2"), "{}", cases[0]);
}

#[test]
fn shipped_configs_parse() {
    let dir = tempfile::tempdir().unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(configs).unwrap() {
        let path = entry.unwrap().path();
        let out = dir.path().join(path.file_stem().unwrap());
        ok(&["gen", "-c", path.to_str().unwrap(), "--set", "gen.num_videos=2", "-o", out.to_str().unwrap()]);
        assert!(out.join("dataset.txt").exists());
    }
}
