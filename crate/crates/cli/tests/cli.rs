use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointaugment::dataio::{load_dataset, LoadOptions};

const SMALL: &str = "\
epochs = 2
batch_size = 8
n_points = 32
point_widths = 8,16
head_hidden = 8
feature_channels = 8
feature_hidden = 8
shape_hidden = 8
displacement_hidden = 8
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointaugment"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.conf"), SMALL).unwrap();
        let data = dir.path().join("data");
        ok(&[
            "gensynth",
            "--out",
            s(&data),
            "--train-per-class",
            "6",
            "--test-per-class",
            "3",
            "--n-points",
            "32",
        ]);
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let data = self.path("data");
        let conf = self.path("small.conf");
        let mut args = vec![
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--config",
            s(&conf),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn missing_data_is_a_usage_error() {
    let o = run(&["train", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = Fixture::new();
    let conf = f.path("bad.conf");
    std::fs::write(&conf, "epochs = 1\nwarmup = 3\n").unwrap();
    let o = run(&[
        "train",
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("o")),
        "--config",
        s(&conf),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `warmup`"));
}

#[test]
fn gensynth_output_loads() {
    let f = Fixture::new();
    let ds = load_dataset(
        &f.path("data"),
        &LoadOptions {
            n_points: 32,
            seed: 0,
        },
    )
    .unwrap();
    assert_eq!(ds.num_classes(), 4);
    assert_eq!(ds.train().len(), 24);
    assert_eq!(ds.test().len(), 12);
}

#[test]
fn train_writes_one_row_per_epoch_and_evaluates() {
    let f = Fixture::new();
    let out = f.train("pa", &[]);
    let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch\t"));

    let ckpt = out.join("checkpoint.bin");
    let data = f.path("data");
    let conf = f.path("small.conf");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
        "--config",
        s(&conf),
    ]);
    let eval = std::fs::read_to_string(out.join("eval.tsv")).unwrap();
    assert!(eval.lines().any(|l| l.starts_with("test\t12\t")), "{eval}");

    ok(&[
        "retrieve",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
        "--config",
        s(&conf),
    ]);
    let retrieval = std::fs::read_to_string(out.join("retrieval.tsv")).unwrap();
    let map: f64 = retrieval
        .lines()
        .find_map(|l| l.strip_prefix("mean_ap\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&map));

    ok(&[
        "robustness",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
        "--config",
        s(&conf),
    ]);
    let rob = std::fs::read_to_string(out.join("robustness.tsv")).unwrap();
    assert_eq!(rob.lines().count(), 7);
    assert!(rob.lines().nth(1).unwrap().starts_with("none\t"));
}

#[test]
fn baseline_and_pointaugment_differ() {
    let f = Fixture::new();
    let pa = f.train("pa", &[]);
    let base = f.train("base", &["--baseline", "conventional"]);
    let a = std::fs::read(pa.join("metrics.tsv")).unwrap();
    let b = std::fs::read(base.join("metrics.tsv")).unwrap();
    assert_ne!(a, b);
    let echo = std::fs::read_to_string(base.join("config.txt")).unwrap();
    assert!(echo.contains("mode = baseline_conventional"));
}

#[test]
fn resume_extends_a_finished_run() {
    let f = Fixture::new();
    let full = f.path("full.conf");
    std::fs::write(&full, SMALL.replace("epochs = 2", "epochs = 4")).unwrap();
    let straight = f.path("straight");
    let data = f.path("data");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&straight),
        "--config",
        s(&full),
    ]);

    let resumed = f.train("resumed", &[]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--config",
        s(&full),
        "--resume",
    ]);
    assert_eq!(
        std::fs::read(straight.join("metrics.tsv")).unwrap(),
        std::fs::read(resumed.join("metrics.tsv")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let f = Fixture::new();
    let bad = f.path("bad.bin");
    std::fs::write(&bad, b"PAUGCKPT garbage").unwrap();
    let o = run(&[
        "eval",
        "--data",
        s(&f.path("data")),
        "--checkpoint",
        s(&bad),
        "--out",
        s(&f.path("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn ablation_variants_are_reported() {
    let f = Fixture::new();
    let out = f.path("abl");
    ok(&[
        "ablate",
        "--data",
        s(&f.path("data")),
        "--out",
        s(&out),
        "--config",
        s(&f.path("small.conf")),
        "--variants",
        "A=none;B=D+M",
    ]);
    let table = std::fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("B\t"));
}
