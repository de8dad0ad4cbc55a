use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn owseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owseg"))
        .current_dir(dir)
        .args(["--config", "small.cfg"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn owseg")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = owseg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A tiny run that trains in well under a second.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("small.cfg"),
        "# tiny smoke configuration\n\
         height=24\nwidth=24\nepochs=2\nbatch=2\nbase_width=2\n\
         train_scenes=4\nval_scenes=2\ntest_scenes=3\n\
         dataset_dir=data\nout_dir=out\n",
    )
    .unwrap();
    ok(dir.path(), &["gen"]);
    ok(dir.path(), &["train"]);
    dir
}

#[test]
fn evaluation_is_reproducible_and_self_describing() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["eval"]);
    let first = fs::read(d.join("out/results.txt")).unwrap();
    let stdout = ok(d, &["eval"]);
    assert_eq!(first, fs::read(d.join("out/results.txt")).unwrap());
    assert!(
        stdout.contains("aupr=") && stdout.contains("wrote out/results.txt"),
        "{stdout}"
    );

    let text = String::from_utf8(first).unwrap();
    for key in owseg::config::KEYS {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("{key}="))),
            "results lack {key}"
        );
    }
    let sha = text
        .lines()
        .find_map(|l| l.strip_prefix("checkpoint_sha256="))
        .unwrap();
    let train = fs::read_to_string(d.join("out/train.txt")).unwrap();
    assert!(train.contains(&format!("checkpoint_sha256={sha}")));
    assert_eq!(fs::read_dir(d.join("out/scores")).unwrap().count(), 3);
    assert_eq!(fs::read_dir(d.join("out/masks")).unwrap().count(), 3);
}

#[test]
fn ablation_and_open_world_commands() {
    let dir = workspace();
    let d = dir.path();
    let stdout = ok(d, &["ablate"]);
    let rows = stdout.lines().filter(|l| l.contains(".aupr=")).count();
    assert_eq!(rows, 8, "{stdout}");
    let table = stdout
        .lines()
        .skip_while(|l| !l.starts_with("strategy"))
        .skip(1)
        .take_while(|l| !l.starts_with("wrote"));
    assert_eq!(table.count(), 8, "{stdout}");

    let stdout = ok(d, &["discover", "--set", "eta=0.9"]);
    assert!(stdout.contains("n_u="), "{stdout}");
    assert!(fs::read_to_string(d.join("out/discover.txt"))
        .unwrap()
        .contains("eta=0.9"));
    let stdout = ok(d, &["similarity"]);
    assert!(stdout.contains("similarity.ring.gaussian_acc="), "{stdout}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), "no_such_key=1\n").unwrap();
    assert_eq!(owseg(d, &["config"]).status.code(), Some(1));
    fs::write(d.join("small.cfg"), "K=9\n").unwrap();
    assert_eq!(owseg(d, &["config"]).status.code(), Some(1));
    fs::write(d.join("small.cfg"), "out_dir=out\n").unwrap();
    assert_eq!(owseg(d, &["config", "--set", "lr"]).status.code(), Some(1));
    // Evaluating without a dataset or checkpoint is an I/O failure.
    assert_eq!(owseg(d, &["eval"]).status.code(), Some(2));

    let out = owseg(d, &["gradcheck"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = owseg(d, &["gradcheck", "--inject-fault", "1.05"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(fs::read_to_string(d.join("out/gradcheck.txt"))
        .unwrap()
        .contains("passed=false"));
}

#[test]
fn config_prints_effective_settings() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), "seed=11\n").unwrap();
    let stdout = ok(dir.path(), &["config", "--set", "strategy=MA"]);
    assert!(
        stdout.contains("seed=11\n") && stdout.contains("strategy=MA\n"),
        "{stdout}"
    );
}
