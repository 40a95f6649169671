use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 7] = [
    "--num_superpixels=16",
    "--window=9",
    "--vae.epochs=1",
    "--vae.max_cubes=64",
    "--gcn.hidden=16",
    "--gcn.output=8",
    "--train.epochs=6",
];

fn spgcc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spgcc"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny(dir: &Path, command: &str) -> Output {
    let mut args = vec![command];
    args.extend(TINY);
    spgcc(dir, &args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_small(dir: &Path) {
    let o = spgcc(dir, &["synth", "--height", "16", "--width", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("DONE stage=synth"));
}

#[test]
fn stages_run_in_order_and_report_done_lines() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path());
    for (stage, artifact) in [
        ("segment", "segmentation.hsil"),
        ("pretrain", "vae.spgv"),
        ("features", "pixel_features.spgf"),
        ("cluster", "cluster_labels.hsil"),
        ("evaluate", "metrics.txt"),
        ("render-map", "cluster_map.ppm"),
    ] {
        let o = tiny(dir.path(), stage);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(stdout(&o).contains(&format!("DONE stage={stage}")), "{}", stdout(&o));
        assert!(dir.path().join(artifact).is_file(), "{artifact}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    for key in ["OA", "AA", "Kappa", "NMI", "ARI", "F1", "Precision", "Recall", "Purity"] {
        assert!(metrics.contains(key), "{key} missing from {metrics}");
    }
}

#[test]
fn missing_artifacts_name_the_command_to_run() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path());
    let o = tiny(dir.path(), "cluster");
    assert_eq!(o.status.code(), Some(10));
    assert!(stderr(&o).contains("run features first"), "{}", stderr(&o));

    let o = tiny(dir.path(), "features");
    assert_eq!(o.status.code(), Some(10));
    assert!(stderr(&o).contains("run pretrain first"), "{}", stderr(&o));

    let empty = tempfile::tempdir().unwrap();
    let o = tiny(empty.path(), "segment");
    assert_eq!(o.status.code(), Some(10));
    assert!(stderr(&o).contains("run synth first"), "{}", stderr(&o));
}

#[test]
fn bad_overrides_are_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let o = spgcc(dir.path(), &["segment", "--train.bogus=1"]);
    assert_eq!(o.status.code(), Some(11), "{}", stderr(&o));
    let o = spgcc(dir.path(), &["segment", "--train.lambda=1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn render_map_writes_a_binary_ppm_of_the_raster_size() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path());
    let out = dir.path().join("truth.ppm");
    let labels = dir.path().join("synth_labels.hsil");
    let o = spgcc(
        dir.path(),
        &[
            "render-map",
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(out).unwrap();
    let header = b"P6\n16 16\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 16 * 16 * 3);
}

#[test]
fn seed_changes_the_synthetic_scene() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path, seed: &str| {
        let o = spgcc(dir, &["--seed", seed, "synth", "--height", "12", "--width", "12"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(dir.join("synth_cube.hsif")).unwrap()
    };
    let (x, y) = (run(a.path(), "1"), run(b.path(), "2"));
    assert_eq!(x.len(), y.len());
    assert_ne!(x, y);
    assert_eq!(run(a.path(), "1"), x);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "num_superpixels = 9\n[train]\ntau = 0.3\n").unwrap();
    synth_small(dir.path());
    let o = spgcc(
        dir.path(),
        &["--config", config.to_str().unwrap(), "segment", "--compactness=2.0"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.contains("superpixels="), "{line}");
}
