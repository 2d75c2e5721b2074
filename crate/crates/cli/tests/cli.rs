use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prm_core::data::write_idx;

fn prm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prm"));
    c.env("RUST_LOG", "warn");
    c
}

/// Ten classes, each a bright 6x6 square at its own spot plus hashed noise.
fn fixture_images(n: usize, salt: usize) -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        let (r0, c0) = (2 + (class / 5) * 12, 2 + (class % 5) * 5);
        let img = &mut images[i * 784..(i + 1) * 784];
        for (p, px) in img.iter_mut().enumerate() {
            *px = ((p * 31 + i * 17 + salt) % 41) as u8;
        }
        for r in r0..r0 + 6 {
            for c in c0..c0 + 5 {
                img[r * 28 + c] = 220;
            }
        }
    }
    (images, labels)
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("mnist");
        fs::create_dir_all(&data).unwrap();
        let (img, lbl) = fixture_images(200, 0);
        write_idx(&data, "train", 28, 28, &img, &lbl).unwrap();
        let (img, lbl) = fixture_images(60, 5);
        write_idx(&data, "t10k", 28, 28, &img, &lbl).unwrap();
        let cfg = format!(
            "model = lenet5\ndataset = {}\nseed = 3\noutput_dir = {}\n\
             batch_size = 20\ntrain.epochs = 2\nadmm.rho = 0.01\nadmm.iterations = 2\n\
             admm.epochs_per_proximal = 1\nbudget.conv1.filters = 6\nbudget.conv2.filters = 10\n\
             budget.fc1.filters = 30\nbudget.fc1.columns = 200\nretrain.epochs = 1\n",
            data.display(),
            root.join("run").display()
        );
        fs::write(root.join("run.cfg"), cfg).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        prm().args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "prm {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn pipeline(&self) -> String {
        let cfg = self.path("run.cfg");
        self.ok(&[
            "pipeline",
            "--config",
            cfg.to_str().unwrap(),
            "--deterministic",
            "--fresh",
        ])
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_is_deterministic_and_stages_agree() {
    let fx = Fixture::new();
    let first = fx.pipeline();
    let csv1 = fs::read(fx.path("run/report.csv")).unwrap();
    let txt1 = fs::read(fx.path("run/report.txt")).unwrap();
    let base1 = fs::read(fx.path("run/baseline.ckpt")).unwrap();
    let second = fx.pipeline();
    assert_eq!(first, second);
    assert_eq!(csv1, fs::read(fx.path("run/report.csv")).unwrap());
    assert_eq!(txt1, fs::read(fx.path("run/report.txt")).unwrap());
    assert_eq!(base1, fs::read(fx.path("run/baseline.ckpt")).unwrap());
    assert!(csv1.starts_with(b"layer,total,nonzero,live_filters,total_filters,live_columns,total_columns\r\n"));

    // the compacted network computes the same function as the masked one
    let purified = fx.path("run/purified.ckpt");
    let compacted = fx.path("run/compacted.ckpt");
    let a = fx.ok(&["eval", "--in", s(&purified)]);
    let b = fx.ok(&["eval", "--in", s(&compacted)]);
    assert!(a.starts_with("accuracy "), "{a}");
    assert_eq!(a, b);

    // zero thresholds remove only unused paths, so accuracy is unchanged
    let again = fx.path("again.ckpt");
    let retrained = fx.path("run/retrained.ckpt");
    let csv = fx.ok(&["purify", "--in", s(&retrained), "--out", s(&again), "--format", "csv"]);
    assert!(csv.starts_with("layer,"));
    let before = fx.ok(&["eval", "--in", s(&retrained)]);
    let after = fx.ok(&["eval", "--in", s(&again)]);
    let acc = |t: &str| t.split_whitespace().nth(1).unwrap().to_string();
    assert_eq!(acc(&before), acc(&after));

    let table = fx.ok(&["report", "--in", s(&compacted)]);
    assert!(table.contains("TOTAL"), "{table}");
}

#[test]
fn stage_commands_chain_through_checkpoints() {
    let fx = Fixture::new();
    let cfg = fx.path("run.cfg");
    let base = fx.path("b.ckpt");
    let admm = fx.path("a.ckpt");
    let re = fx.path("r.ckpt");
    let pur = fx.path("p.ckpt");
    let com = fx.path("c.ckpt");
    fx.ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&base),
        "--set",
        "train.epochs=1",
    ]);
    fx.ok(&[
        "admm",
        "--in",
        s(&base),
        "--out",
        s(&admm),
        "--set",
        "admm.iterations=1",
    ]);
    fx.ok(&[
        "retrain",
        "--in",
        s(&admm),
        "--out",
        s(&re),
        "--set",
        "retrain.epochs=0",
    ]);
    fx.ok(&["purify", "--in", s(&re), "--out", s(&pur), "--th4", "0.001"]);
    fx.ok(&["compact", "--in", s(&pur), "--out", s(&com)]);
    assert_eq!(fx.ok(&["eval", "--in", s(&pur)]), fx.ok(&["eval", "--in", s(&com)]));
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let cfg = fx.path("run.cfg");

    let unknown_flag = fx.run(&["train", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let missing_in = fx.run(&["eval", "--config", s(&cfg)]);
    assert_eq!(missing_in.status.code(), Some(2));

    let missing_ckpt = fx.run(&["eval", "--in", s(&fx.path("nope.ckpt"))]);
    assert_eq!(missing_ckpt.status.code(), Some(3));

    let garbage = fx.path("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint at all").unwrap();
    let bad_magic = fx.run(&["report", "--in", s(&garbage)]);
    assert_eq!(bad_magic.status.code(), Some(3));

    let bad_cfg = fx.path("bad.cfg");
    fs::write(&bad_cfg, "model = lenet5\nwarp.factor = 9\n").unwrap();
    let out = fx.run(&["train", "--config", s(&bad_cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp.factor"));

    let missing_data = fx.run(&["train", "--config", s(&cfg), "--set", "dataset=/nonexistent/mnist"]);
    assert_eq!(missing_data.status.code(), Some(3));

    let bad_budget = fx.run(&["pipeline", "--config", s(&cfg), "--set", "budget.conv9.filters=2"]);
    assert_eq!(bad_budget.status.code(), Some(2));

    let bad_format = fx.run(&["train", "--config", s(&cfg), "--format", "xml"]);
    assert_eq!(bad_format.status.code(), Some(2));
}
