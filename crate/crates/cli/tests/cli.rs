use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "classes=3",
    "per_class=20",
    "input_dim=4",
    "hidden=8",
    "embed_dim=4",
    "epochs=2",
    "batch_size=8",
    "queue_size=16",
    "probe_epochs=3",
];

fn mixco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub.to_string(), "--out".into(), out.display().to_string()];
    for s in SMALL {
        args.push("--set".into());
        args.push(s.to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    mixco(&refs)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mixco(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("worst relative error")).unwrap();
    let worst: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst < 1e-5);
}

#[test]
fn manifest_echoes_mixco_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = small("pretrain", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("manifest.cfg")).unwrap();
    let fields: Vec<(&str, &str)> = manifest
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let get = |k: &str| fields.iter().find(|(key, _)| *key == k).unwrap().1.parse::<f64>().unwrap();
    assert_eq!(get("beta"), 1.0);
    assert_eq!(get("tau_mix"), 0.05);
    for name in ["encoder.ckpt", "moco.ckpt", "metrics.log"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(!dir.path().join(".mixco.lock").exists());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = mixco(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(mixco(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "tau = warm\n").unwrap();
    let o = mixco(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));

    let o = small("pretrain", &dir.path().join("out2"), &["--set", "batch_size=0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = small("pretrain", dir.path(), &["--set", "lr=1e300", "--set", "lr_schedule=constant"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = small(
        "linear-eval",
        dir.path(),
        &["--encoder", dir.path().join("absent.ckpt").to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".mixco.lock"), "1\n").unwrap();
    let o = small("gen-data", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("dataset.txt").exists());
}

#[test]
fn manifest_rerun_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let o = small("pretrain", &first, &["--set", "seed=7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let manifest = first.join("manifest.cfg");
    let o = mixco(&[
        "pretrain",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["manifest.cfg", "encoder.ckpt", "moco.ckpt", "metrics.log"] {
        assert_eq!(
            fs::read(first.join(name)).unwrap(),
            fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn manifest_may_not_overwrite_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = small("gen-data", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let manifest = dir.path().join("manifest.cfg");
    let before = fs::read(&manifest).unwrap();
    let o = mixco(&[
        "gen-data",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read(&manifest).unwrap(), before);
}

#[test]
fn pipeline_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let o = small("gen-data", &data_dir, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dataset = data_dir.join("dataset.txt");
    let data_set = format!("data_path={}", dataset.display());

    let run = dir.path().join("run");
    let o = small("pretrain", &run, &["--set", &data_set]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let encoder = run.join("encoder.ckpt");

    let snapshot = |p: &Path| fs::read(p).unwrap();
    let inputs = [dataset.clone(), encoder.clone()];
    let before: Vec<Vec<u8>> = inputs.iter().map(|p| snapshot(p)).collect();

    let eval = dir.path().join("eval");
    let enc = encoder.to_str().unwrap();
    let o = small("linear-eval", &eval, &["--set", &data_set, "--encoder", enc]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy"));
    let o = small("linear-eval", &eval, &["--set", &data_set, "--random-encoder"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = fs::read_to_string(eval.join("results.txt")).unwrap();
    assert_eq!(results.lines().count(), 2);

    let o = small("export-embeddings", &eval, &["--set", &data_set, "--encoder", enc]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let emb = eval.join("embeddings.txt");
    assert_eq!(fs::read_to_string(&emb).unwrap().lines().count(), 61);

    let o = small("metrics", &eval, &["--embeddings", emb.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let from_file = stdout(&o);
    assert!(from_file.contains("davies_bouldin") && from_file.contains("calinski_harabasz"));
    let o = small("metrics", &eval, &["--set", &data_set, "--encoder", enc]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let after: Vec<Vec<u8>> = inputs.iter().map(|p| snapshot(p)).collect();
    assert_eq!(before, after);

    // Writing into the directory holding the dataset must not replace it.
    let o = small("gen-data", &data_dir, &["--set", &data_set]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(snapshot(&dataset), before[0]);
}
