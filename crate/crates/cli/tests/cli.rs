use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn sdmim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdmim"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.conf");
    std::fs::write(
        &p,
        "image_height = 64\nimage_width = 64\nhead_dim = 256\nwindow = 2\n\
         epochs = 1\nwarmup_epochs = 0\nn_images = 4\nbatch_size = 2\nout_dir = run\n",
    )
    .unwrap();
    p
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdmim(dir.path(), &["pretrain", "no-such.conf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such.conf"), "{}", stderr(&o));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = sdmim(
        dir.path(),
        &["pretrain", cfg.to_str().unwrap(), "--set", "window=3"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`window`"), "{}", stderr(&o));
    let o = sdmim(
        dir.path(),
        &[
            "pretrain",
            cfg.to_str().unwrap(),
            "--set",
            "learning_rate=1",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = sdmim(
        dir.path(),
        &["pretrain", cfg.to_str().unwrap(), "--variant", "mae"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_pretrain_writes_outputs_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let t0 = Instant::now();
    let o = sdmim(dir.path(), &["pretrain", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(t0.elapsed() < Duration::from_secs(30));
    let run = dir.path().join("run");
    for f in ["metrics.csv", "final.ckpt", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(csv_rows(&run.join("metrics.csv")).len(), 2);
}

#[test]
fn alpha_one_makes_total_equal_l1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = sdmim(
        dir.path(),
        &["pretrain", cfg.to_str().unwrap(), "--set", "alpha=1.0"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("run/metrics.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r[3], r[5], "l1 vs total in {r:?}");
    }
}

#[test]
fn reruns_and_config_echo_reproduce_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = sdmim(
        dir.path(),
        &["pretrain", cfg.to_str().unwrap(), "--set", "seed=5"],
    );
    assert_eq!(o.status.code(), Some(0));
    let first = std::fs::read(dir.path().join("run/final.ckpt")).unwrap();
    let o = sdmim(
        dir.path(),
        &["pretrain", cfg.to_str().unwrap(), "--set", "seed=5"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("run/final.ckpt")).unwrap(),
        first
    );

    let echo = dir.path().join("echo.conf");
    std::fs::copy(dir.path().join("run/config.txt"), &echo).unwrap();
    let o = sdmim(
        dir.path(),
        &["pretrain", echo.to_str().unwrap(), "--set", "out_dir=run2"],
    );
    assert_eq!(o.status.code(), Some(0));
    let second = std::fs::read(dir.path().join("run2/final.ckpt")).unwrap();
    // only the echoed out_dir line in the header may differ
    let strip = |b: &[u8]| -> Vec<u8> {
        let s = String::from_utf8_lossy(b).replace("config out_dir=run2\n", "config out_dir=run\n");
        s.into_bytes()
    };
    assert_eq!(strip(&second), strip(&first));
}

#[test]
fn resume_continues_the_loss_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let c = cfg.to_str().unwrap();
    let o = sdmim(
        dir.path(),
        &["pretrain", c, "--set", "epochs=3", "--set", "out_dir=full"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = sdmim(
        dir.path(),
        &[
            "pretrain",
            c,
            "--set",
            "epochs=3",
            "--set",
            "out_dir=part",
            "--set",
            "checkpoint_every=1",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let o = sdmim(
        dir.path(),
        &[
            "pretrain",
            c,
            "--set",
            "epochs=3",
            "--set",
            "out_dir=resumed",
            "--resume",
            "part/checkpoint-epoch0001.ckpt",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let losses = |p: &str| -> Vec<Vec<String>> {
        csv_rows(&dir.path().join(p).join("metrics.csv"))
            .into_iter()
            .map(|r| r[..6].to_vec())
            .collect()
    };
    let full = losses("full");
    assert_eq!(full.len(), 6);
    assert_eq!(losses("resumed"), full[2..].to_vec());
}

#[test]
fn reconstruct_writes_triptychs_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    assert_eq!(
        sdmim(dir.path(), &["pretrain", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let o = sdmim(
        dir.path(),
        &[
            "generate-data",
            "imgs",
            "--n-images",
            "2",
            "--height",
            "64",
            "--width",
            "64",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let o = sdmim(
        dir.path(),
        &["reconstruct", "run/final.ckpt", "imgs", "out"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let combined = std::fs::read(dir.path().join("out/synth0000.pgm")).unwrap();
    assert!(combined.starts_with(b"P5\n192 64\n255\n"));
    assert!(dir.path().join("out/synth0001_reconstruction.pgm").exists());

    let o = sdmim(dir.path(), &["generate-data", "big", "--n-images", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let o = sdmim(
        dir.path(),
        &["reconstruct", "run/final.ckpt", "big/synth0000.pgm", "out"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = sdmim(
        dir.path(),
        &[
            "reconstruct",
            "run/final.ckpt",
            "big/synth0000.pgm",
            "out",
            "--resize",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = sdmim(dir.path(), &["reconstruct", "missing.ckpt", "imgs", "out"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdmim(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(
        out.contains("end_to_end") && out.contains("matmul"),
        "{out}"
    );
    assert!(!out.contains("FAIL"));
}

#[test]
fn probe_rows_are_independent_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(
        sdmim(dir.path(), &["pretrain", c, "--set", "out_dir=a"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        sdmim(
            dir.path(),
            &["pretrain", c, "--variant", "simmim", "--set", "out_dir=b"]
        )
        .status
        .code(),
        Some(0)
    );
    std::fs::copy(
        dir.path().join("a/final.ckpt"),
        dir.path().join("a_copy.ckpt"),
    )
    .unwrap();
    let probe = |ckpts: &[&str], out: &str| {
        let mut args = vec!["probe"];
        args.extend_from_slice(ckpts);
        args.extend_from_slice(&["--data-seed", "3", "--n-images", "6", "--out", out]);
        let o = sdmim(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        csv_rows(&dir.path().join(out))
    };
    let ab = probe(&["a/final.ckpt", "b/final.ckpt", "a_copy.ckpt"], "ab.csv");
    assert_eq!(ab[0], ab[2]);
    assert_ne!(ab[0][0], ab[1][0]);
    let ba = probe(&["b/final.ckpt", "a/final.ckpt"], "ba.csv");
    assert_eq!(ba[0], ab[1]);
    assert_eq!(ba[1], ab[0]);

    let o = sdmim(dir.path(), &["probe", "missing.ckpt", "--data-seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_data_writes_labeled_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdmim(
        dir.path(),
        &[
            "generate-data",
            "d",
            "--n-images",
            "3",
            "--height",
            "64",
            "--width",
            "64",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    for i in 0..3 {
        assert!(dir.path().join(format!("d/synth{i:04}.pgm")).exists());
        let labels =
            std::fs::read_to_string(dir.path().join(format!("d/synth{i:04}.labels.csv"))).unwrap();
        assert_eq!(labels.lines().count(), 4);
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sdmim(dir.path(), &["pretrain"]).status.code(), Some(2));
    assert_eq!(sdmim(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = sdmim(
        dir.path(),
        &[
            "pretrain",
            cfg.to_str().unwrap(),
            "--set",
            "base_lr=1e38",
            "--set",
            "epochs=3",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}
