use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY: &str = "\
# tiny run for command tests
epochs = 1
decay_start_epoch = 1
load_size = 32
crop_size = 32
flip = false
synthetic_n = 4
synthetic_test_n = 4
synthetic_size = 32
n_resblocks = 1
ngf = 4
ndf = 4
vgg_width_div = 16
patches_per_layer = 16
nce_dim = 16
checkpoint_every = 1
sample_every = 1
";

fn sndcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sndcr"))
        .args(args)
        .env_remove("SNDCR_SEED")
        .output()
        .expect("spawn sndcr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_config(dir: &Path) -> PathBuf {
    let p = dir.join("toy.cfg");
    fs::write(&p, TOY).unwrap();
    p
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = toy_config(dir);
    let out = dir.join("run");
    let o = sndcr(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--set",
        "epochs=1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("latest.ckpt")
}

fn synthetic(dir: &Path) -> PathBuf {
    let root = dir.join("synth");
    let o = sndcr(&[
        "make-synthetic",
        "--out",
        s(&root),
        "--n",
        "5",
        "--n-test",
        "5",
        "--size",
        "32",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    root
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn report_value(text: &str, metric: &str) -> f64 {
    let line = text
        .lines()
        .find(|l| l.starts_with(&format!("metric={metric} ")))
        .unwrap_or_else(|| panic!("no {metric} line in {text}"));
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix("value="))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn train_writes_checkpoint_log_and_samples() {
    let tmp = TempDir::new().unwrap();
    let ckpt = trained(tmp.path());
    assert!(ckpt.is_file());
    let run = ckpt.parent().unwrap();
    assert!(run.join("checkpoint_0001.ckpt").is_file());
    assert!(run.join("samples/epoch_0001.png").is_file());
    let log = fs::read_to_string(run.join("loss_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.contains("total=")));
}

#[test]
fn train_rejects_missing_config_and_invalid_overrides() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.cfg");
    let out = tmp.path().join("run");
    assert_eq!(
        code(&sndcr(&[
            "train",
            "--config",
            s(&missing),
            "--out",
            s(&out)
        ])),
        2
    );
    let cfg = toy_config(tmp.path());
    let o = sndcr(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--set",
        "load_size=286",
        "--set",
        "crop_size=300",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("crop_size"));
    assert_eq!(
        code(&sndcr(&["train", "--config", s(&cfg), "--set", "nonsense"])),
        2
    );
    assert_eq!(code(&sndcr(&["train"])), 2);
}

#[test]
fn seed_precedence_flag_over_env_over_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let run = |env: Option<&str>, flag: Option<&str>, out: &Path| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_sndcr"));
        c.env_remove("SNDCR_SEED");
        if let Some(e) = env {
            c.env("SNDCR_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        let o = c
            .args(["train", "--config", s(&cfg), "--out", s(out)])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("config.txt")).unwrap()
    };
    let a = run(Some("11"), None, &tmp.path().join("a"));
    assert!(a.contains("seed = 11"));
    let b = run(Some("11"), Some("12"), &tmp.path().join("b"));
    assert!(b.contains("seed = 12"));
}

#[test]
fn translate_keeps_names_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let ckpt = trained(tmp.path());
    let root = synthetic(tmp.path());
    let input = root.join("testA");
    let (o1, o2) = (tmp.path().join("t1"), tmp.path().join("t2"));
    for o in [&o1, &o2] {
        let r = sndcr(&[
            "translate",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&input),
            "--out",
            s(o),
        ]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    let names = sorted_names(&o1);
    assert_eq!(names.len(), 5);
    assert_eq!(names, sorted_names(&input));
    for n in &names {
        assert_eq!(fs::read(o1.join(n)).unwrap(), fs::read(o2.join(n)).unwrap());
    }
}

#[test]
fn translate_empty_input_and_missing_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ckpt = trained(tmp.path());
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = tmp.path().join("out");
    let r = sndcr(&[
        "translate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&empty),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 0);
    assert!(sorted_names(&out).is_empty());
    let missing = tmp.path().join("missing.ckpt");
    let r = sndcr(&[
        "translate",
        "--checkpoint",
        s(&missing),
        "--input",
        s(&empty),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn evaluate_identical_disjoint_and_unaligned_sets() {
    let tmp = TempDir::new().unwrap();
    let root = synthetic(tmp.path());
    let (a, b) = (root.join("testA"), root.join("testB"));
    let args = |x: &Path, y: &Path, rep: &Path| {
        vec![
            "evaluate".to_string(),
            "--set-a".into(),
            s(x).into(),
            "--set-b".into(),
            s(y).into(),
            "--fid".into(),
            "--swd".into(),
            "--ssim".into(),
            "--size".into(),
            "32".into(),
            "--report".into(),
            s(rep).into(),
        ]
    };
    let rep = tmp.path().join("same.txt");
    let o = sndcr(
        &args(&a, &a, &rep)
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&rep).unwrap();
    assert!(report_value(&text, "fid").abs() < 1e-6);
    assert!(report_value(&text, "swd").abs() < 1e-6);
    assert_eq!(report_value(&text, "ssim"), 1.0);
    assert!(text
        .lines()
        .all(|l| l.contains("extractor=") && l.contains("seed=")));

    // same names, different domains: aligned for SSIM
    let rep1 = tmp.path().join("ab1.txt");
    let rep2 = tmp.path().join("ab2.txt");
    for r in [&rep1, &rep2] {
        let o = sndcr(
            &args(&a, &b, r)
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let t1 = fs::read_to_string(&rep1).unwrap();
    assert!(report_value(&t1, "fid") > 0.0);
    assert_eq!(t1, fs::read_to_string(&rep2).unwrap());

    let train_a = root.join("trainA");
    let odd = tmp.path().join("odd");
    fs::create_dir_all(&odd).unwrap();
    for n in sorted_names(&train_a) {
        fs::copy(train_a.join(&n), odd.join(format!("x{n}"))).unwrap();
    }
    let o = sndcr(
        &args(&a, &odd, &tmp.path().join("odd.txt"))
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(code(&o), 2);

    let csv = tmp.path().join("r.csv");
    let o = sndcr(&[
        "evaluate",
        "--set-a",
        s(&a),
        "--set-b",
        s(&b),
        "--fid",
        "--size",
        "32",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0);
    let c = fs::read_to_string(&csv).unwrap();
    assert!(c.starts_with("metric,value,extractor,seed\nfid,"));
}

#[test]
fn make_synthetic_writes_four_folders() {
    let tmp = TempDir::new().unwrap();
    let root = synthetic(tmp.path());
    for (d, n) in [("trainA", 5), ("trainB", 5), ("testA", 5), ("testB", 5)] {
        assert_eq!(sorted_names(&root.join(d)).len(), n, "{d}");
    }
    assert_eq!(
        code(&sndcr(&[
            "make-synthetic",
            "--out",
            s(&tmp.path().join("x")),
            "--n",
            "0"
        ])),
        2
    );
}

#[test]
fn selfcheck_passes_and_names_injected_fault() {
    let o = sndcr(&["selfcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = sndcr(&["selfcheck", "--quick"]);
    assert_eq!(code(&o), 0);
    let o = sndcr(&["selfcheck", "--quick", "--inject-fault", "gram"]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("FAIL  gram oracle"), "{out}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("gram oracle"));
}

#[test]
fn resume_continues_training() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path());
    let out = tmp.path().join("run");
    let o = sndcr(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--set",
        "epochs=2",
        "--set",
        "decay_start_epoch=2",
    ]);
    assert_eq!(code(&o), 0);
    let first = fs::read_to_string(out.join("loss_log.txt")).unwrap();
    let resumed = tmp.path().join("resumed");
    let o = sndcr(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&resumed),
        "--resume",
        s(&out.join("checkpoint_0001.ckpt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tail = fs::read_to_string(resumed.join("loss_log.txt")).unwrap();
    let second_epoch: Vec<&str> = first.lines().skip(4).collect();
    assert_eq!(tail.lines().collect::<Vec<_>>(), second_epoch);
}
