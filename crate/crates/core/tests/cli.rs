use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.baseline_ad=4",
    "synth.baseline_cn=4",
    "synth.longitudinal_cn=4",
    "synth.stable_mci=3",
    "synth.converted_mci=3",
    "max_epochs=1",
    "netgen.node.steps_per_epoch=1",
    "netgen.edge.steps_per_epoch=1",
    "netgen.edge_val_batches=1",
    "netgen.node_val_size=64",
];

fn trajnet(root: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trajnet"));
    cmd.env("TRAJNET_ARTIFACTS", root);
    for s in TINY.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_stage() {
    let o = Command::new(env!("CARGO_BIN_EXE_trajnet")).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in [
        "synth",
        "ingest",
        "train-netgen",
        "build-graphs",
        "train-encoder",
        "train-vae",
        "train-rnn",
        "predict",
        "interpret",
        "evaluate",
        "report",
    ] {
        assert!(text.contains(cmd), "`{cmd}` missing from help");
    }
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajnet(dir.path(), &["vae.nonexistent=1"], &["config"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = trajnet(dir.path(), &["vae.train.seed=4"], &["config"]);
    assert_eq!(code(&o), 2, "derived seeds cannot be set: {}", stderr(&o));
    let o = trajnet(dir.path(), &["interpret.fraction=1.5"], &["config"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_upstream_stage_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajnet(dir.path(), &[], &["train-netgen"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("synth"), "{}", stderr(&o));
    assert_eq!(code(&trajnet(dir.path(), &[], &["synth"])), 0);
    let o = trajnet(dir.path(), &[], &["build-graphs"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("train-netgen"), "{}", stderr(&o));
    for stage in ["train-encoder", "train-vae", "train-rnn", "predict", "interpret", "evaluate"] {
        assert_eq!(code(&trajnet(dir.path(), &[], &[stage])), 3, "{stage}");
    }
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&trajnet(dir.path(), &[], &["synth"])), 0);
    let o = trajnet(dir.path(), &["learning_rate=1e30"], &["train-netgen"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn config_file_and_overrides_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.conf");
    std::fs::write(&file, "# tiny\nseed = 9\nvae.beta = 0.5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_trajnet"))
        .args(["--config", file.to_str().unwrap(), "--set", "vae.beta=0.25", "config"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("seed = 9\n"));
    assert!(text.contains("vae.beta = 0.25\n"));
    assert!(text.contains("# synth.seed = 9\n"));
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "f32" || x == "safetensors" || x == "tsv") {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_networks() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for root in [a.path(), b.path()] {
        for stage in ["synth", "train-netgen", "build-graphs"] {
            let o = trajnet(root, &["seed=3"], &[stage]);
            assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
        }
    }
    let (ta, tb) = (tree(&a.path().join("graphs")), tree(&b.path().join("graphs")));
    assert!(!ta.is_empty());
    assert_eq!(ta.len(), tb.len());
    for ((na, da), (nb, db)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}

#[test]
fn materialized_cohort_can_be_ingested() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = trajnet(a.path(), &[], &["synth", "--materialize"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = a.path().join("cohorts/longitudinal_voxels");
    assert!(data.exists(), "materialized data at {}", data.display());
    let o = trajnet(b.path(), &[], &["ingest", "--kind", "longitudinal", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("registered 10 subjects"));
    let o = trajnet(b.path(), &[], &["ingest", "--kind", "baseline", b.path().join("nope").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
}
