use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pass(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pass"))
        .args(args)
        .current_dir(root)
        .env("PASS_OUTPUT_ROOT", root.join("runs"))
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let o = pass(root, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(root: &Path, args: &[&str]) -> i32 {
    pass(root, args).status.code().expect("exit code")
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Generated data plus a one-epoch checkpoint under `runs/`.
fn pipeline() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen"]);
    ok(t.path(), &["pretrain", "--epochs", "1"]);
    t
}

#[test]
fn gen_writes_six_domains_and_refuses_to_overwrite() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    ok(root, &["gen", "--out", "a"]);
    let domains: Vec<_> = fs::read_dir(root.join("a"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(domains.len(), 6);
    assert!(domains.iter().all(|d| d.join("manifest.json").is_file()));

    assert_eq!(code(root, &["gen", "--out", "a"]), 6);
    ok(root, &["gen", "--out", "a", "--force"]);

    // the same spec elsewhere gives the same manifests
    ok(root, &["gen", "--out", "b"]);
    for d in &domains {
        let name = d.file_name().unwrap();
        assert_eq!(
            fs::read(d.join("manifest.json")).unwrap(),
            fs::read(root.join("b").join(name).join("manifest.json")).unwrap()
        );
    }
    ok(root, &["gen", "--out", "c", "--seed", "1"]);
    assert_ne!(
        fs::read(root.join("a/source/manifest.json")).unwrap(),
        fs::read(root.join("c/source/manifest.json")).unwrap()
    );
}

#[test]
fn gen_reads_a_spec_file() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    ok(root, &["gen", "--out", "a"]);
    let spec = fs::read_to_string(root.join("a/benchmark.toml")).unwrap();
    fs::write(root.join("bench.toml"), spec.replace("train = 40", "train = 3")).unwrap();
    ok(root, &["gen", "--spec", "bench.toml", "--out", "b"]);
    let train = fs::read_dir(root.join("b/source/train")).unwrap().count();
    assert_eq!(train, 3 * 3, "image plus two masks per sample");

    fs::write(root.join("broken.toml"), "[source]\nname = 1\n").unwrap();
    assert_eq!(code(root, &["gen", "--spec", "broken.toml", "--out", "x"]), 3);
    assert_eq!(code(root, &["gen", "--spec", "absent.toml", "--out", "y"]), 4);
}

#[test]
fn source_only_run_scores_like_the_checkpoint() {
    let t = pipeline();
    let root = t.path();
    let before = snapshot(&root.join("runs"));
    ok(root, &["adapt", "--method", "source_only", "--out", "so"]);
    ok(root, &["eval", "--run", "so", "--out", "e_run"]);
    ok(root, &["eval", "--out", "e_ckpt"]);
    assert_eq!(
        fs::read(root.join("e_run/eval.csv")).unwrap(),
        fs::read(root.join("e_ckpt/eval.csv")).unwrap()
    );
    // inputs are untouched
    assert_eq!(snapshot(&root.join("runs")), before);
}

#[test]
fn adapt_is_reproducible_and_echoes_its_config() {
    let t = pipeline();
    let root = t.path();
    let args = [
        "adapt",
        "--domain",
        "shape-severe",
        "--domain",
        "style-contrast",
        "--viz",
    ];
    ok(root, &[&args[..], &["--out", "a"]].concat());
    ok(root, &[&args[..], &["--out", "b"]].concat());
    for d in ["shape-severe", "style-contrast"] {
        for f in ["report.csv", "metrics.json"] {
            let a = fs::read(root.join("a").join(d).join(f)).unwrap();
            assert_eq!(a, fs::read(root.join("b").join(d).join(f)).unwrap(), "{d}/{f}");
        }
        assert!(root.join("a").join(d).join("viz/id_0000.png").is_file());
        assert!(root.join("a").join(d).join("viz/sp_0000.png").is_file());
    }
    // the echo alone reproduces the run
    ok(root, &["adapt", "--config", "a/config.toml", "--out", "c"]);
    assert_eq!(
        fs::read(root.join("a/shape-severe/report.csv")).unwrap(),
        fs::read(root.join("c/shape-severe/report.csv")).unwrap()
    );
    assert_eq!(code(root, &["adapt", "--out", "a"]), 6);
}

#[test]
fn flags_override_the_config_file() {
    let t = pipeline();
    let root = t.path();
    fs::write(
        root.join("run.toml"),
        "domains = [\"shape-mild\"]\n[adapt]\npreset = \"fast\"\nsteps_per_sample = 2\n[prompts]\nbank_size = 16\n",
    )
    .unwrap();
    ok(
        root,
        &[
            "adapt",
            "--config",
            "run.toml",
            "--omega",
            "0.8",
            "--bank-size",
            "8",
            "--out",
            "o",
        ],
    );
    let echo = fs::read_to_string(root.join("o/config.toml")).unwrap();
    for line in ["omega = 0.8", "lr = 0.01", "steps_per_sample = 2", "bank_size = 8"] {
        assert!(echo.contains(line), "{line} missing from\n{echo}");
    }
}

#[test]
fn update_scheme_toggles() {
    let t = pipeline();
    let root = t.path();
    let scheme = |dir: &str| {
        let echo = fs::read_to_string(root.join(dir).join("config.toml")).unwrap();
        echo.lines().find(|l| l.starts_with("scheme")).unwrap().to_string()
    };
    let base = [
        "adapt",
        "--domain",
        "shape-mild",
        "--method",
        "pass",
        "--mode",
        "online",
    ];
    ok(
        root,
        &[&base[..], &["--use-amu=false", "--continual", "--out", "c"]].concat(),
    );
    assert_eq!(scheme("c"), "scheme = \"continual\"");
    ok(root, &[&base[..], &["--use-amu=false", "--out", "i"]].concat());
    assert_eq!(scheme("i"), "scheme = \"independent\"");
    ok(root, &[&base[..], &["--out", "a"]].concat());
    assert_eq!(scheme("a"), "scheme = \"amu\"");
    assert_eq!(
        code(
            root,
            &[&base[..], &["--use-amu=true", "--continual", "--out", "x"]].concat()
        ),
        3
    );
}

#[test]
fn offline_mode_and_report() {
    let t = pipeline();
    let root = t.path();
    ok(
        root,
        &[
            "adapt",
            "--mode",
            "offline",
            "--epochs",
            "1",
            "--domain",
            "shape-mild",
            "--out",
            "off",
        ],
    );
    assert!(root.join("off/shape-mild/step_losses.csv").is_file());
    ok(root, &["adapt", "--method", "ptbn", "--out", "ptbn"]);
    let out = ok(root, &["report", "off", "ptbn", "--out", "rep"]);
    assert!(out.contains("spearman"));
    let methods = fs::read_to_string(root.join("rep/methods.csv")).unwrap();
    assert!(methods.contains("pass-offline,shape-mild"));
    assert!(methods.contains("ptbn,shape-severe"));
    let sim = fs::read_to_string(root.join("rep/similarity.csv")).unwrap();
    assert_eq!(sim.lines().next(), Some("domain,similarity,dice"));
    assert_eq!(sim.lines().count(), 6);
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    assert_eq!(code(root, &["adapt", "--no-such-flag"]), 2);
    assert_eq!(code(root, &["frobnicate"]), 2);
    fs::write(root.join("bad.toml"), "sed = 1\n").unwrap();
    assert_eq!(code(root, &["adapt", "--config", "bad.toml"]), 3);
    assert_eq!(code(root, &["adapt", "--omega", "2"]), 3);
    assert_eq!(code(root, &["adapt", "--id-norm", "XN"]), 3);
    assert_eq!(code(root, &["adapt", "--config", "absent.toml"]), 4);
    assert_eq!(code(root, &["adapt", "--checkpoint", "absent.ckpt"]), 4);
    assert_eq!(code(root, &["pretrain"]), 4);
    ok(root, &["gen", "--out", "d"]);
    assert_eq!(
        code(root, &["eval", "--data", "d", "--out", "d/inner", "--checkpoint", "x"]),
        4
    );
    fs::write(root.join("fake.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(root, &["eval", "--data", "d", "--checkpoint", "fake.ckpt"]), 4);
}

#[test]
fn outputs_never_land_in_inputs() {
    let t = pipeline();
    let root = t.path();
    assert_eq!(code(root, &["adapt", "--out", "runs/data/inside"]), 3);
    assert!(!root.join("runs/data/inside").exists());
}

#[test]
fn check_commands_pass() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(t.path(), &["selftest", "--out", "self.json"]);
    assert!(!out.contains("FAIL"));
    let out = ok(t.path(), &["gradcheck", "--out", "grad.json"]);
    assert!(out.contains("composite tent"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("grad.json")).unwrap()).unwrap();
    assert!(v.as_array().unwrap().len() > 30);
}
