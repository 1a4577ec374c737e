use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn aetn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aetn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = aetn(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> (i32, String) {
    let out = aetn(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let last = err.lines().last().unwrap_or("").to_string();
    (out.status.code().unwrap(), last)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Data {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

const TOY_MODEL: &[&str] = &[
    "--d-model", "16", "--d-ffn", "32", "--n-heads", "2", "--d-emb", "4", "--ae-mid-dim", "8",
    "--batch-size", "16", "--base-lr", "3e-3", "--validation-fraction", "0.2",
];

/// synth -> catalog -> ingest on a small twin-mode population.
fn prepared() -> Data {
    let dir = tempfile::tempdir().unwrap();
    let d = Data {
        root: dir.path().to_path_buf(),
        _dir: dir,
    };
    fs::write(
        d.path("synth.conf"),
        "# small population\nn_users = 80\nnum_apps = 40\nnum_categories = 5\ntwin_mode = true\ntwin_templates = 4\n",
    )
    .unwrap();
    ok(&[
        "synth", "--config", s(&d.path("synth.conf")), "--seed", "5",
        "--out-apps", s(&d.path("apps.tsv")), "--out-log", s(&d.path("log.jsonl")),
        "--out-labels", s(&d.path("labels.tsv")),
    ]);
    ok(&["catalog", "--apps", s(&d.path("apps.tsv")), "--out", s(&d.path("catalog.tsv"))]);
    ok(&[
        "ingest", "--log", s(&d.path("log.jsonl")), "--catalog", s(&d.path("catalog.tsv")),
        "--out", s(&d.path("records.bin")), "--seq-len", "6",
    ]);
    d
}

fn train(d: &Data, out: &str, metrics: &str, seed: &str, extra: &[&str]) -> String {
    let (ck, m) = (d.path(out), d.path(metrics));
    let (records, catalog) = (d.path("records.bin"), d.path("catalog.tsv"));
    let mut args = vec![
        "train", "--records", s(&records), "--catalog", s(&catalog),
        "--out", s(&ck), "--metrics", s(&m), "--seed", seed, "--epochs", "2",
    ];
    args.extend_from_slice(TOY_MODEL);
    args.extend_from_slice(extra);
    ok(&args).trim().to_string()
}

#[test]
fn pipeline_end_to_end() {
    let d = prepared();
    let fid = train(&d, "model.ckpt", "with.tsv", "3", &[]);
    train(&d, "plain.ckpt", "without.tsv", "3", &["--use-aux", "false"]);
    assert!(fid.starts_with("aetn-"), "{fid}");

    let store = d.path("store.bin");
    let printed = ok(&[
        "infer", "--checkpoint", s(&d.path("model.ckpt")), "--records", s(&d.path("records.bin")),
        "--out-store", s(&store),
    ]);
    assert_eq!(printed.trim(), fid);

    let got = ok(&["store", "get", "--store", s(&store), "--feature-id", &fid, "--user", "user000003"]);
    let fields: Vec<&str> = got.trim().split('\t').collect();
    assert_eq!(fields[0], "user000003");
    assert_eq!(fields[2].split(',').count(), 4);
    let absent = ok(&["store", "get", "--store", s(&store), "--feature-id", &fid, "--user", "nobody"]);
    assert_eq!(absent.trim(), "absent\tnobody");

    fs::write(d.path("active.txt"), "user000001\nuser000002\n").unwrap();
    ok(&[
        "update", "--checkpoint", s(&d.path("model.ckpt")), "--store", s(&store),
        "--records", s(&d.path("records.bin")), "--active-users", s(&d.path("active.txt")),
    ]);
    let after = ok(&["store", "get", "--store", s(&store), "--feature-id", &fid, "--user", "user000001"]);
    let ts: u64 = after.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(ts > 80, "timestamp {ts} did not advance");

    let report = ok(&[
        "eval", "--records", s(&d.path("records.bin")), "--store", s(&store),
        "--labels", s(&d.path("labels.tsv")), "--curves", s(&d.path("with.tsv")), s(&d.path("without.tsv")),
        "--out-json", s(&d.path("report.jsonl")), "--seed", "1",
        "--n-query", "20", "--n-pool", "80", "--dae-epochs", "2", "--dae-d-model", "16", "--dae-d-emb", "4",
        "--curve-threshold", "100",
    ]);
    assert!(report.contains("[aetn]") && report.contains("[dae]"), "{report}");
    assert!(report.contains("probe AUC"));
    let json = fs::read_to_string(d.path("report.jsonl")).unwrap();
    assert_eq!(json.lines().count(), 3);
    assert!(json.contains("\"record\":\"curve\""));
}

#[test]
fn same_seed_same_outputs() {
    let d = prepared();
    let a = train(&d, "a.ckpt", "a.tsv", "11", &[]);
    let b = train(&d, "b.ckpt", "b.tsv", "11", &[]);
    assert_eq!(a, b);
    assert_eq!(fs::read(d.path("a.ckpt")).unwrap(), fs::read(d.path("b.ckpt")).unwrap());
    assert_eq!(fs::read(d.path("a.tsv")).unwrap(), fs::read(d.path("b.tsv")).unwrap());
    let c = train(&d, "c.ckpt", "c.tsv", "12", &[]);
    assert_ne!(a, c);

    // a store built from another checkpoint is refused
    let store = d.path("a.store");
    ok(&[
        "infer", "--checkpoint", s(&d.path("a.ckpt")), "--records", s(&d.path("records.bin")),
        "--out-store", s(&store),
    ]);
    let (code, line) = fails(&["store", "get", "--store", s(&store), "--feature-id", &c, "--user", "user000001"]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error: kind=feature_id msg="), "{line}");
    fs::write(d.path("active.txt"), "user000001\n").unwrap();
    let (_, line) = fails(&[
        "update", "--checkpoint", s(&d.path("c.ckpt")), "--store", s(&store),
        "--records", s(&d.path("records.bin")), "--active-users", s(&d.path("active.txt")),
    ]);
    assert!(line.starts_with("error: kind=feature_id"), "{line}");
}

#[test]
fn production_settings_are_accepted() {
    let d = prepared();
    let fid = train(
        &d,
        "prod.ckpt",
        "prod.tsv",
        "1",
        &["--preset", "production", "--d-model", "512", "--d-ffn", "1024", "--n-heads", "8",
          "--d-emb", "128", "--ae-mid-dim", "128", "--base-lr", "1e-4", "--batch-size", "1000",
          "--decay", "0.8", "--epochs", "0"],
    );
    assert!(fid.starts_with("aetn-"));
}

#[test]
fn gradcheck_reports_small_error() {
    let out = ok(&["gradcheck", "--seed", "2"]);
    let err: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("max_rel_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{out}");
}

#[test]
fn errors_are_one_machine_readable_line() {
    let d = prepared();
    let (code, line) = fails(&["gradcheck", "--no-such-key", "1"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("error: kind=usage msg=") && line.contains("no_such_key"), "{line}");

    let (code, line) = fails(&[
        "train", "--records", s(&d.path("records.bin")), "--catalog", s(&d.path("catalog.tsv")),
        "--out", s(&d.path("x.ckpt")),
    ]);
    assert_eq!(code, 2);
    assert!(line.contains("--seed"), "{line}");

    let (code, line) = fails(&["infer", "--checkpoint", s(&d.path("missing.ckpt")), "--records", "r", "--out-store", "o"]);
    assert_eq!(code, 1);
    assert!(line.starts_with("error: kind=io msg="), "{line}");

    let (code, line) = fails(&[
        "train", "--records", s(&d.path("records.bin")), "--catalog", s(&d.path("catalog.tsv")),
        "--out", s(&d.path("x.ckpt")), "--seed", "1", "--seq-len", "9",
    ]);
    assert_eq!(code, 2);
    assert!(line.contains("seq_len"), "{line}");

    fs::write(d.path("bad.conf"), "epochs 3\n").unwrap();
    let (_, line) = fails(&["gradcheck", "--config", s(&d.path("bad.conf"))]);
    assert!(line.starts_with("error: kind=parse"), "{line}");

    let (code, _) = fails(&["frobnicate"]);
    assert_eq!(code, 2);
}
