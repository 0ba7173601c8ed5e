//! End-to-end checks of the `segweight` binary on a small synthetic dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segweight::imagery::load_weight_map;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segweight"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir` with its contents.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SYNTH: &[&str] = &[
    "synth", "--out", "d", "--n", "12", "--size", "32x32", "--seed", "5", "--coverage", "0.1,0.2", "--label-noise",
    "1",
];

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    ok(SYNTH, cwd);
    for split in ["train", "val", "test"] {
        assert!(cwd.join("d").join(split).join("images").is_dir());
    }
    assert_eq!(json(cwd.join("d/manifest.json"))["seed"], 5);
    let data_before = snapshot(&cwd.join("d"));

    // weights: one PFM per mask plus class statistics
    ok(
        &["weights", "--masks", "d/train/masks", "--classes", "2", "--sigma", "2", "--out", "w"],
        cwd,
    );
    let stats = json(cwd.join("w/stats.json"));
    let n_c: Vec<u64> = serde_json::from_value(stats["n_c"].clone()).unwrap();
    let m = stats["m"].as_u64().unwrap();
    assert_eq!(n_c.iter().sum::<u64>(), m);
    let omega1 = stats["omega_c"][1].as_f64().unwrap();
    assert!((omega1 - m as f64 / (2.0 * n_c[1] as f64)).abs() < 1e-12);
    let masks = fs::read_dir(cwd.join("d/train/masks")).unwrap().count();
    let pfms: Vec<_> = fs::read_dir(cwd.join("w"))
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pfm"))
        .collect();
    assert_eq!(pfms.len(), masks);
    assert!(load_weight_map(&pfms[0]).unwrap().weights().iter().all(|w| *w >= 0.0));

    // train twice, with different thread caps: byte-identical outputs
    let train = |out: &str, threads: &str| {
        let o = bin()
            .args([
                "train", "--data", "d", "--sigma", "2", "--class-weights", "on", "--epochs", "2", "--out", out,
            ])
            .env("SEGWEIGHT_THREADS", threads)
            .current_dir(cwd)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("t1", "1");
    train("t2", "3");
    for f in ["history.json", "model.msgn"] {
        assert_eq!(fs::read(cwd.join("t1").join(f)).unwrap(), fs::read(cwd.join("t2").join(f)).unwrap(), "{f}");
    }
    let history = json(cwd.join("t1/history.json"));
    assert_eq!(history["epochs"].as_array().unwrap().len(), 2);

    // eval
    let out = ok(&["eval", "--model", "t1/model.msgn", "--data", "d", "--out", "e"], cwd);
    let metrics = json(cwd.join("e/metrics.json"));
    let stdout: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout, metrics);
    let per_class = metrics["per_class"].as_array().unwrap();
    assert_eq!(per_class.len(), 2);
    for key in ["class", "PA", "IoU"] {
        assert!(per_class[1].get(key).is_some(), "{key}");
    }

    // sweep: four rows
    ok(&["sweep", "--data", "d", "--seed", "7", "--epochs", "1", "--out", "s"], cwd);
    let table = fs::read_to_string(cwd.join("s/sweep.md")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    for (row, label) in rows.iter().zip(["baseline", "sigma=1", "sigma=2", "sigma=3"]) {
        assert!(row.starts_with(&format!("| {label} |")), "{row}");
    }
    assert!(table.lines().next().unwrap().contains("| PA | IoU |"));

    // noise-bench: {noisy, clean} x {baseline, weighted}
    ok(
        &["noise-bench", "--data", "d", "--noise", "0.02", "--seed", "7", "--epochs", "1", "--out", "nb"],
        cwd,
    );
    let nb = json(cwd.join("nb/noise_bench.json"));
    for arm in ["baseline", "weighted"] {
        for test in ["noisy_test", "clean_test"] {
            assert!(nb[arm][test]["PA"].is_number() && nb[arm][test]["IoU"].is_number());
        }
    }

    // report: color panels
    ok(
        &[
            "report", "--data", "d", "--baseline", "t1/model.msgn", "--weighted", "t2/model.msgn", "--count", "2",
            "--out", "r",
        ],
        cwd,
    );
    let pngs = fs::read_dir(cwd.join("r"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 2);

    // exactly one manifest per artifact directory
    for dir in ["d", "w", "t1", "e", "s", "nb", "r"] {
        let n = fs::read_dir(cwd.join(dir))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
            .count();
        assert_eq!(n, 1, "{dir}");
    }
    // nothing above touched the dataset
    assert_eq!(snapshot(&cwd.join("d")), data_before);
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(SYNTH, a.path());
    ok(SYNTH, b.path());
    let strip = |dir: &Path| {
        snapshot(&dir.join("d"))
            .into_iter()
            .filter(|(p, _)| !p.ends_with("manifest.json"))
            .map(|(p, v)| (p.strip_prefix(dir).unwrap().to_owned(), v))
            .collect::<BTreeMap<_, _>>()
    };
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();

    let unknown = run(&["train", "--data", "d", "--bogus"], cwd);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));

    let no_command = run(&[], cwd);
    assert_eq!(no_command.status.code(), Some(1));

    let missing = run(
        &["train", "--data", "nowhere", "--sigma", "none", "--class-weights", "off", "--out", "x"],
        cwd,
    );
    assert_eq!(missing.status.code(), Some(2));

    ok(SYNTH, cwd);
    let bad_classes = run(&["weights", "--masks", "d/train/masks", "--classes", "1", "--sigma", "2", "--out", "w"], cwd);
    assert_eq!(bad_classes.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_classes.stderr).contains("at ("));

    let bad_sigma = run(&["weights", "--masks", "d/train/masks", "--sigma", "0", "--out", "w"], cwd);
    assert_eq!(bad_sigma.status.code(), Some(1));

    let into_input = run(
        &["train", "--data", "d", "--sigma", "none", "--class-weights", "off", "--out", "d"],
        cwd,
    );
    assert_eq!(into_input.status.code(), Some(1));

    let threads = bin()
        .args(["weights", "--masks", "d/train/masks", "--sigma", "2", "--out", "w"])
        .env("SEGWEIGHT_THREADS", "zero")
        .current_dir(cwd)
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));

    let help = run(&["--help"], cwd);
    assert_eq!(help.status.code(), Some(0));
}
