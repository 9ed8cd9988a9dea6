use std::path::Path;
use std::process::{Command, Output};

use revformer::checkpoint::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_revformer");

const SMALL: &str = r#"
seed = 3
[model]
preset = "rev_vit_tiny"
[train]
steps = 6
batch = 8
[train.data]
samples = 32
[verify]
invert_depths = [2]
memory_depths = [4, 8, 16, 24]
memory_dim = 16
[bench]
depths = [1, 2]
dims = [16]
steps = 1
warmup = 0
batch = 2
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("REVFORMER_THREADS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn info_prints_preset_costs() {
    let o = run(&["info", "rev_vit_b"], &[]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("87335656"), "{s}");
    assert!(s.contains("recompute"));
}

#[test]
fn info_without_model_is_an_error() {
    let o = run(&["info"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[model]\npreset = \"rev_vit_tiny\"\n[train]\nlearning_rate = 0.1\n",
    );
    let o = run(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = run(
        &[
            "verify",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(
        header(&out.join("verify.csv")),
        "suite,case,status,value,threshold,detail"
    );
}

#[test]
fn verify_exits_one_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("[verify]", "[verify]\nmemory_cached_ratio = 1000.0");
    let cfg = write(dir.path(), "c.toml", &text);
    let o = run(
        &[
            "verify",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = write(dir.path(), "full.toml", SMALL);
    let half = write(
        dir.path(),
        "half.toml",
        &SMALL.replace("steps = 6\nbatch", "steps = 3\nbatch"),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let s = |p: &Path| p.to_str().unwrap().to_string();

    assert!(run(&["train", "--config", &s(&full), "--out", &s(&a)], &[])
        .status
        .success());
    assert!(run(&["train", "--config", &s(&half), "--out", &s(&b)], &[])
        .status
        .success());
    let ck = b.join("checkpoint.rvt");
    let o = run(
        &[
            "train",
            "--config",
            &s(&full),
            "--out",
            &s(&b),
            "--resume",
            &s(&ck),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(&std::fs::read(&ck).unwrap()[..4], b"RVT1");
    let x = Checkpoint::<f32>::load(&a.join("checkpoint.rvt")).unwrap();
    let y = Checkpoint::<f32>::load(&ck).unwrap();
    // The embedded configs differ only in train.steps.
    assert_eq!((x.step, x.rng), (y.step, y.rng));
    assert_eq!(
        Checkpoint {
            config: String::new(),
            ..x
        },
        Checkpoint {
            config: String::new(),
            ..y
        }
    );
    assert_eq!(header(&a.join("train_log.csv")), "step,loss,accuracy,lr");
}

#[test]
fn seed_flag_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let c = cfg.to_str().unwrap();
    assert!(
        run(&["train", "--config", c, "--out", a.to_str().unwrap()], &[])
            .status
            .success()
    );
    assert!(run(
        &[
            "train",
            "--config",
            c,
            "--seed",
            "9",
            "--out",
            b.to_str().unwrap()
        ],
        &[]
    )
    .status
    .success());
    assert_ne!(
        std::fs::read(a.join("train_log.csv")).unwrap(),
        std::fs::read(b.join("train_log.csv")).unwrap()
    );
}

#[test]
fn bench_writes_csv_and_honours_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let args = [
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    let o = run(&args, &[("REVFORMER_THREADS", "1")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "arch,depth,dim,schedule,steps_per_s,peak_act_bytes_measured,peak_act_bytes_estimated,flops,params"
    );
    assert_eq!(text.lines().count(), 5);

    let o = run(&args, &[("REVFORMER_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("REVFORMER_THREADS"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let o = run(&["info", "--config", p.to_str().unwrap()], &[]);
            assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            n += 1;
        }
    }
    assert!(n > 0);
}
