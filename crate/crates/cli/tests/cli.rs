use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdc_core::persistence::decode_header;

const TOY: &str = r#"
seed = 3
[data]
kind = "gaussians"
classes = 3
per_class = 20
test_per_class = 6
shape = [1, 4, 4]
separation = 2.0
seed = 1

[condensation]
ipc = 3
outer_loops = 2
inner_epochs = 2
batch_real = 8
batch_train = 16
selection_period = 1
syn_lr = 10.0

[condensation.network]
width = 4

[evaluation]
epochs = 3
repeats = 2
"#;

fn mdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdc"))
        .args(args)
        .env_remove("MDC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Writes the toy config with `extra` lines added to `[condensation]`.
fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("cfg{}.toml", fs::read_dir(dir).unwrap().count()));
    let text = TOY.replace("[condensation]\n", &format!("[condensation]\n{extra}"));
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_or_malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdc(&["condense", s(&dir.path().join("absent.toml"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.toml"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = [").unwrap();
    assert_eq!(code(&mdc(&["condense", s(&bad)])), 2);
    assert_eq!(code(&mdc(&["condense"])), 2);
}

#[test]
fn condense_is_deterministic_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&mdc(&["condense", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&mdc(&["condense", s(&cfg), "--out", s(&b)])), 0);
    let bytes = fs::read(a.join("synthetic.mdc")).unwrap();
    assert_eq!(bytes, fs::read(b.join("synthetic.mdc")).unwrap());
    assert_eq!(
        fs::read(a.join("log.jsonl")).unwrap(),
        fs::read(b.join("log.jsonl")).unwrap()
    );

    // The written config reproduces the run on its own.
    let c = dir.path().join("c");
    let o = mdc(&["condense", s(&a.join("config.toml")), "--out", s(&c)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(bytes, fs::read(c.join("synthetic.mdc")).unwrap());
    assert!(fs::read_to_string(a.join("run.toml"))
        .unwrap()
        .contains("method = \"mdc\""));
}

#[test]
fn basic_method_matches_mdc_without_subset_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let off = config(dir.path(), "subset_loss_enabled = false\n");
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    assert_eq!(
        code(&mdc(&[
            "condense",
            s(&cfg),
            "--method",
            "basic",
            "--out",
            s(&a)
        ])),
        0
    );
    assert_eq!(
        code(&mdc(&[
            "condense",
            s(&off),
            "--method",
            "mdc",
            "--out",
            s(&b)
        ])),
        0
    );
    assert_eq!(
        code(&mdc(&[
            "condense",
            s(&cfg),
            "--method",
            "mdc",
            "--out",
            s(&c)
        ])),
        0
    );
    let read = |d: &Path| fs::read(d.join("synthetic.mdc")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn environment_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_mdc"))
        .args(["condense", s(&cfg)])
        .env("MDC_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("synthetic.mdc").exists());
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("syn_lr = 10.0", "syn_lr = 1e30");
    fs::write(&cfg, text).unwrap();
    let o = mdc(&["condense", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

fn manifest_files(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("manifest.toml")).unwrap();
    text.lines()
        .filter_map(|l| l.strip_prefix("file = \""))
        .map(|l| l.trim_end_matches('"').to_string())
        .collect()
}

#[test]
fn baselines_store_the_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = |k: &str| dir.path().join(k);
    for k in ["A", "B", "C"] {
        let o = mdc(&["baseline", s(&cfg), "--kind", k, "--out", s(&out(k))]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ipcs = |k: &str| -> Vec<u32> {
        manifest_files(&out(k))
            .iter()
            .map(|f| {
                decode_header(&fs::read(out(k).join(f)).unwrap())
                    .unwrap()
                    .ipc
            })
            .collect()
    };
    assert_eq!(ipcs("A"), vec![1, 2, 3]);
    assert_eq!(ipcs("B"), vec![3]);
    assert_eq!(ipcs("C"), vec![3]);
    assert!(fs::read_to_string(out("A").join("manifest.toml"))
        .unwrap()
        .contains("stored_images_per_class = 6"));
}

fn parse_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn evaluation_writes_consistent_csvs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let c = dir.path().join("C");
    let m = dir.path().join("mdc");
    assert_eq!(
        code(&mdc(&["baseline", s(&cfg), "--kind", "C", "--out", s(&c)])),
        0
    );
    assert_eq!(code(&mdc(&["condense", s(&cfg), "--out", s(&m)])), 0);

    let ev = |input: &Path, out: &Path| {
        let o = mdc(&[
            "evaluate",
            s(input),
            "--config",
            s(&cfg),
            "--sizes",
            "1,2,3",
            "--out",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    ev(&c.join("manifest.toml"), &c);
    ev(&m, &m);

    let per_seed = parse_csv(&c.join("per_seed.csv"));
    let aggregated = parse_csv(&c.join("aggregated.csv"));
    assert_eq!(per_seed.len(), 3 * 2);
    assert_eq!(aggregated.len(), 3);
    for row in &aggregated {
        assert_eq!(row[0], "C");
        let accs: Vec<f64> = per_seed
            .iter()
            .filter(|r| r[1] == row[1])
            .map(|r| r[3].parse().unwrap())
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - row[2].parse::<f64>().unwrap()).abs() <= 1e-9);
    }

    let table = dir.path().join("table.md");
    let o = mdc(&["report", s(&c), s(&m), "--out", s(&table)]);
    assert_eq!(code(&o), 0);
    let md = String::from_utf8(o.stdout).unwrap();
    assert_eq!(md, fs::read_to_string(&table).unwrap());
    assert!(md.starts_with("| Method | 1 | 2 | 3 | Avg. | Diff. |"));
    assert!(md
        .lines()
        .any(|l| l.starts_with("| C |") && l.ends_with("| +0.00 |")));
    assert!(md.lines().any(|l| l.starts_with("| mdc |")));

    // A method evaluated on fewer sizes cannot share the table.
    let short = dir.path().join("short");
    let o = mdc(&[
        "evaluate",
        s(&m),
        "--config",
        s(&cfg),
        "--sizes",
        "1",
        "--method",
        "other",
        "--out",
        s(&short),
    ]);
    assert_eq!(code(&o), 0);
    let o = mdc(&["report", s(&c), s(&short)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("inconsistent size sets"));
}

#[test]
fn corrupted_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let m = dir.path().join("m");
    assert_eq!(code(&mdc(&["condense", s(&cfg), "--out", s(&m)])), 0);
    let file = m.join("synthetic.mdc");
    let mut bytes = fs::read(&file).unwrap();
    bytes[40] ^= 0x10;
    fs::write(&file, bytes).unwrap();
    let o = mdc(&["evaluate", s(&file), "--config", s(&cfg), "--out", s(&m)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
