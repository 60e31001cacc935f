use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, ImageBuffer, Luma};
use vesselseg_core::checkpoint::save_checkpoint;
use vesselseg_core::synthetic::{phantom, PhantomSpec};
use vesselseg_core::{build_unet, UNetConfig};

fn vesselseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselseg"))
        .args(args)
        .env("VESSELSEG_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let model = build_unet(&UNetConfig {
        depth: 2,
        base_channels: 4,
        init_seed: 11,
        ..UNetConfig::default()
    })
    .unwrap();
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&model, &Default::default(), &path).unwrap();
    path
}

/// Writes phantom image/mask pairs and a manifest listing them.
fn phantom_dataset(dir: &Path, n: usize, size: usize) -> PathBuf {
    let spec = PhantomSpec {
        width: size,
        height: size,
        trees: 3,
        generations: 3,
        root_radius: 2.5,
        ..PhantomSpec::default()
    };
    let mut manifest = String::new();
    for i in 0..n {
        let s = phantom(&spec, i as u64).unwrap();
        let img: GrayImage = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
            Luma([(s.image.pixels().get(x as usize, y as usize) * 255.0).round() as u8])
        });
        let mask: GrayImage = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
            Luma([s.mask.labels().get(x as usize, y as usize) * 255])
        });
        img.save(dir.join(format!("img{i}.png"))).unwrap();
        mask.save(dir.join(format!("img{i}_mask.png"))).unwrap();
        manifest.push_str(&format!("img{i}.png\timg{i}_mask.png\n"));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).unwrap();
    path
}

fn sidecar_value(path: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| {
            l.split_once('=')
                .filter(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| panic!("{key} missing from sidecar:\n{text}"))
}

#[test]
fn no_arguments_is_a_usage_error() {
    let o = vesselseg(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(vesselseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        vesselseg(&["metrics", "--mask", "x.png", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(
        vesselseg(&[
            "eval",
            "--model",
            "m",
            "--manifest",
            "x",
            "--threshold",
            "0.5",
            "--select-on",
            "val"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(vesselseg(&["--help"]).status.code(), Some(0));
    let o = vesselseg(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains(vesselseg_core::VERSION));
}

#[test]
fn segment_writes_map_mask_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    phantom_dataset(dir.path(), 1, 50);
    let out = dir.path().join("map.png");
    let o = vesselseg(&[
        "segment",
        "--model",
        p(&ckpt),
        "--input",
        p(&dir.path().join("img0.png")),
        "--output",
        p(&out),
        "--threshold",
        "0.45",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let map = image::open(&out).unwrap();
    assert!(matches!(map, image::DynamicImage::ImageLuma16(_)));
    assert_eq!((map.width(), map.height()), (50, 50));
    let mask = image::open(dir.path().join("map_mask.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (50, 50));
    assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));

    // the mask is the map thresholded at 0.45
    let map16 = map.to_luma16();
    for (m, b) in map16.pixels().zip(mask.pixels()) {
        let prob = m.0[0] as f64 / 65535.0;
        if (prob - 0.45).abs() > 1e-4 {
            assert_eq!(b.0[0] == 255, prob >= 0.45);
        }
    }

    let sidecar = dir.path().join("map.png.txt");
    assert_eq!(sidecar_value(&sidecar, "threshold"), "0.45");
    assert_eq!(sidecar_value(&sidecar, "checkpoint_id").len(), 12);
    assert_eq!(sidecar_value(&sidecar, "tiled"), "false");
}

#[test]
fn segment_tiled_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    phantom_dataset(dir.path(), 1, 40);
    let out = dir.path().join("t.png");
    let o = vesselseg(&[
        "segment",
        "--model",
        p(&ckpt),
        "--input",
        p(&dir.path().join("img0.png")),
        "--output",
        p(&out),
        "--tiled",
        "--set",
        "tile_width=16",
        "--set",
        "tile_height=16",
        "--set",
        "tile_overlap=4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(sidecar_value(&dir.path().join("t.png.txt"), "tiled"), "true");
    assert_eq!(image::open(&out).unwrap().width(), 40);
}

#[test]
fn threshold_precedence_default_file_flag() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    phantom_dataset(dir.path(), 1, 32);
    let cfg = dir.path().join("seg.cfg");
    std::fs::write(&cfg, "# segmentation settings\nthreshold = 0.3\n").unwrap();
    let input = dir.path().join("img0.png");
    let run = |extra: &[&str]| {
        let out = dir.path().join("m.png");
        let mut args = vec![
            "segment",
            "--model",
            p(&ckpt),
            "--input",
            p(&input),
            "--output",
            p(&out),
        ];
        args.extend_from_slice(extra);
        let o = vesselseg(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        sidecar_value(&dir.path().join("m.png.txt"), "threshold")
    };
    assert_eq!(run(&[]), "0.45");
    assert_eq!(run(&["--config", p(&cfg)]), "0.3");
    assert_eq!(run(&["--config", p(&cfg), "--set", "threshold=0.6"]), "0.6");
}

#[test]
fn unknown_config_key_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "thresold = 0.3\n").unwrap();
    let o = vesselseg(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("thresold"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn train_rejects_mismatched_schedule_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantom_dataset(dir.path(), 3, 32);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "manifest = {}\nepochs = 10\nphases = 5:1e-3\n",
            manifest.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let o = vesselseg(&["train", "--config", p(&cfg), "--output-dir", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("phase"), "{}", stderr(&o));
    assert!(!dir.path().join("out").join("model.ckpt").exists());
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    phantom_dataset(dir.path(), 3, 32);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "manifest = manifest.tsv\n\
         split.train = 1\nsplit.val = 1\nsplit.test = 1\n\
         epochs = 2\nphases = 2:1e-3\nbatch_size = 2\nwindows_per_image = 2\n\
         window_width = 16\nwindow_height = 16\ncheckpoint_every = 1\n\
         model.depth = 2\nmodel.base_channels = 4\n\
         seed.split = 5\nseed.sampling = 6\n\
         augment.enabled = false\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = vesselseg(&["train", "--config", p(&cfg), "--output-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "model.ckpt",
        "history.csv",
        "split.txt",
        "run.cfg",
        "checkpoints/epoch_0001.ckpt",
        "checkpoints/epoch_0002.ckpt",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // the run manifest records every seed, including the generated one
    let manifest = std::fs::read_to_string(out.join("run.cfg")).unwrap();
    let seed_line = |k: &str| manifest.lines().find(|l| l.starts_with(k)).unwrap().to_string();
    assert!(seed_line("seed.split").contains("= 5"));
    assert!(seed_line("seed.sampling").contains("= 6"));
    let init = seed_line("seed.init");
    assert!(!init.contains("auto") && init.contains("generated"), "{init}");

    let report_dir = dir.path().join("report");
    let o = vesselseg(&[
        "eval",
        "--model",
        p(&out.join("model.ckpt")),
        "--manifest",
        p(&dir.path().join("manifest.tsv")),
        "--split",
        p(&out.join("split.txt")),
        "--output",
        p(&report_dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("AUC"), "{}", stdout(&o));
    for f in ["report.txt", "report.csv", "roc.csv", "pr.csv"] {
        assert!(report_dir.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("auc,auprc,sensitivity,specificity,f1,accuracy,threshold"));

    // rerunning from the written manifest with the written split reproduces the model
    let again = dir.path().join("again");
    let o = vesselseg(&[
        "train",
        "--config",
        p(&out.join("run.cfg")),
        "--output-dir",
        p(&again),
        "--set",
        &format!("split_file={}", p(&out.join("split.txt"))),
        "--set",
        &format!("manifest={}", p(&dir.path().join("manifest.tsv"))),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = vesselseg_core::checkpoint::read_checkpoint(out.join("model.ckpt")).unwrap();
    let b = vesselseg_core::checkpoint::read_checkpoint(again.join("model.ckpt")).unwrap();
    assert_eq!(a.model.checkpoint_id(), b.model.checkpoint_id());
}

#[test]
fn eval_fixed_threshold_without_split() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let manifest = phantom_dataset(dir.path(), 2, 32);
    let o = vesselseg(&[
        "eval",
        "--model",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--threshold",
        "0.5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0.5"));
    let o = vesselseg(&[
        "eval",
        "--model",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--select-on",
        "val",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn metrics_prints_density_and_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let filled: GrayImage = ImageBuffer::from_pixel(64, 64, Luma([255]));
    let line: GrayImage = ImageBuffer::from_fn(64, 64, |_, y| Luma([if y == 20 { 255 } else { 0 }]));
    filled.save(dir.path().join("filled.png")).unwrap();
    line.save(dir.path().join("line.png")).unwrap();
    let o = vesselseg(&[
        "metrics",
        "--mask",
        p(&dir.path().join("filled.png")),
        p(&dir.path().join("line.png")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows[0], ["id", "vessel_density", "fractal_dimension", "fit_residual"]);
    assert_eq!(rows[1][0], "filled");
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 1.0);
    assert!((rows[1][2].parse::<f64>().unwrap() - 2.0).abs() < 1e-6);
    assert!((rows[2][1].parse::<f64>().unwrap() - 1.0 / 64.0).abs() < 1e-6);
    assert!((rows[2][2].parse::<f64>().unwrap() - 1.0).abs() < 1e-6);

    let empty: GrayImage = ImageBuffer::from_pixel(64, 64, Luma([0]));
    empty.save(dir.path().join("empty.png")).unwrap();
    let o = vesselseg(&["metrics", "--mask", p(&dir.path().join("empty.png"))]);
    assert_eq!(o.status.code(), Some(1));
}
