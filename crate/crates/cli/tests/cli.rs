use std::path::Path;
use std::process::{Command, Output};

fn hyperflux(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperflux"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn fit_recovers_an_exact_power_law() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("series.csv");
    let mut csv = String::from("method,threshold,density,accuracy,epoch\n");
    for (i, s) in [0.5f64, 1.0, 2.0, 4.0, 8.0, 16.0].iter().enumerate() {
        csv.push_str(&format!("magnitude,{s},{},0.99,{i}\n", 0.25 * s.powi(-2)));
    }
    std::fs::write(&input, csv).unwrap();
    let out = dir.path().join("fit");
    let o = hyperflux(
        &[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--eps-acc",
            "1.0",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("alpha0 = 2.000000"), "{text}");
    assert!(text.contains("r2 = 1.000000"), "{text}");
    assert!(out.join("report.toml").exists());
    assert!(out.join("labeled.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn missing_config_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hyperflux(&["train", "--config", "missing.toml"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("missing.toml"), "{err}");
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["status"], "error");
    assert_eq!(line["command"], "train");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = hyperflux(&["prune-everything"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = hyperflux(&["fit", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_override_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = hyperflux(&["--set", "train.seed", "pretrain"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.seed"));
}

#[test]
fn small_sweep_writes_per_gamma_records_and_a_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = hyperflux(
        &[
            "--set",
            "train.pretrain_epochs=5",
            "--set",
            "data.n=400",
            "--set",
            "model.hidden=[16, 16]",
            "sweep",
            "--gammas",
            "2,0.5",
            "--epochs",
            "30",
            "--jobs",
            "2",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for g in ["0.5", "2"] {
        let epochs = std::fs::read_to_string(out.join(format!("gamma-{g}/epochs.csv"))).unwrap();
        assert_eq!(epochs.lines().count(), 31);
        assert!(epochs.starts_with("epoch,density,loss,pressure_loss,gamma,flips,acc\n"));
    }
    let series = std::fs::read_to_string(out.join("series.csv")).unwrap();
    assert!(series.starts_with("method,threshold,density,accuracy,epoch\n"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let config = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(config.contains("pretrain_epochs = 5"));
}

#[test]
fn runs_are_reproducible_from_their_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--set",
        "train.pretrain_epochs=2",
        "--set",
        "train.pruning_epochs=4",
        "--set",
        "train.stabilization_epochs=2",
        "--set",
        "model.hidden=[8]",
        "train",
    ];
    let first = dir.path().join("a");
    assert!(hyperflux(&args, &first).status.success());
    let config = first.join("config.toml");
    let second = dir.path().join("b");
    let o = hyperflux(&["--config", config.to_str().unwrap(), "train"], &second);
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["epochs.csv", "net.ckpt", "config.toml"] {
        assert_eq!(
            std::fs::read(first.join(file)).unwrap(),
            std::fs::read(second.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn export_writes_histogram_and_layer_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("pre");
    let o = hyperflux(
        &["--set", "model.hidden=[8]", "pretrain", "--epochs", "1"],
        &run,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("export");
    let ckpt = run.join("net.ckpt");
    let o = hyperflux(
        &[
            "export",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--bins",
            "4",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    let total: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 2 * 8 + 8 * 2);
    let layers = std::fs::read_to_string(out.join("layers.csv")).unwrap();
    assert!(layers.starts_with("layer,active,total,density\n"));
}
