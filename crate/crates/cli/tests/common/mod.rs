#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segvoxel::kitti_io::{
    encode_point_cloud, format_lidar_detections, lidar_box_to_camera, CalibMatrices, LabelRecord, Point,
};
use segvoxel::network::ModelConfig;
use segvoxel::train::{synthetic_scene, SyntheticConfig};
use segvoxel::{Box3D, Detection, PointCloud};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_segvoxel")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn segvoxel")
}

/// Run and require exit code 0.
pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "segvoxel {args:?} exited {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn label_for(b: &Box3D, class: &str) -> LabelRecord {
    let (location, rotation_y) = lidar_box_to_camera(b, &CalibMatrices::identity());
    LabelRecord {
        class: class.to_string(),
        truncation: 0.0,
        occlusion: 0,
        alpha: 0.0,
        bbox: [100.0, 100.0, 200.0, 200.0],
        dims: [b.h, b.w, b.l],
        location,
        rotation_y,
        score: None,
    }
}

/// Input files shared by the CLI tests.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let golden = PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.5), Point::new(4.0, 5.0, 6.0, 0.1)]);
        std::fs::write(p.join("golden.bin"), encode_point_cloud(&golden)).unwrap();
        std::fs::write(p.join("golden.cfg"), "voxel.range_max=70.4,40,7\n").unwrap();

        let toy = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scene = synthetic_scene(&toy.voxel, &SyntheticConfig::default(), &mut rng);
        std::fs::write(p.join("scene.bin"), encode_point_cloud(&scene.cloud)).unwrap();
        let gt: Vec<Detection> = scene.boxes.iter().map(|b| Detection::new(*b, 1.0)).collect();
        std::fs::write(p.join("boxes.txt"), format_lidar_detections(&gt)).unwrap();

        // Small widths and a zero score threshold keep the network fast while
        // still producing detections to compare.
        std::fs::write(
            p.join("small.cfg"),
            "sce.width=8\nhead.width=8\ntrain.steps=3\nsynthetic.scenes=3\ndetect.score_threshold=0\ndetect.pre_nms=40\n",
        )
        .unwrap();

        let a = Box3D::new(10.0, 0.0, -1.0, 1.6, 3.9, 1.5, 0.0);
        let dets = [Detection::new(a, 0.9), Detection::new(Box3D { x: 10.3, ..a }, 0.8), Detection::new(Box3D { x: 20.0, ..a }, 0.7)];
        std::fs::write(p.join("dets.txt"), format_lidar_detections(&dets)).unwrap();

        // Perfect detections over three frames.
        for sub in ["gt", "det"] {
            std::fs::create_dir_all(p.join(sub)).unwrap();
        }
        for f in 0..3 {
            let b = Box3D::new(8.0 + 7.0 * f as f64, -2.0 + f as f64, -0.9, 1.6, 3.9, 1.5, 0.3 * f as f64);
            let name = format!("{f:06}.txt");
            std::fs::write(p.join("gt").join(&name), label_for(&b, "Car").to_line() + "\n").unwrap();
            std::fs::write(p.join("det").join(&name), format_lidar_detections(&[Detection::new(b, 0.9 - 0.1 * f as f64)])).unwrap();
        }
        Fixture { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

/// Bench rows with the timing column removed.
pub fn bench_skeleton(stdout: &[u8]) -> String {
    String::from_utf8_lossy(stdout)
        .lines()
        .map(|l| l.split_whitespace().next().unwrap_or("").to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every subcommand run once into `out` with `threads` workers. Returns each
/// subcommand's name with its stdout and output file bytes; bench timings are
/// stripped since they vary from run to run.
pub fn run_all(fx: &Fixture, out: &Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    let t = threads.to_string();
    let o = |n: &str| out.join(n).display().to_string();
    let read = |n: &str| std::fs::read(out.join(n)).unwrap_or_else(|e| panic!("{n}: {e}"));
    let small = fx.arg("small.cfg");
    let mut results = Vec::new();
    let mut record = |name: &str, stdout: Vec<u8>, files: &[&str]| {
        let mut bytes = stdout;
        for f in files {
            bytes.extend(read(f));
        }
        results.push((name.to_string(), bytes));
    };

    let r = run_ok(&["--threads", &t, "--config", &fx.arg("golden.cfg"), "voxelize", "--input", &fx.arg("golden.bin"), "--output", &o("grid.txt")]);
    record("voxelize", r.stdout, &["grid.txt"]);

    let r = run_ok(&["--threads", &t, "--preset", "toy", "masks", "--input", &fx.arg("scene.bin"), "--boxes", &fx.arg("boxes.txt"), "--output-dir", &o("masks")]);
    record("masks", r.stdout, &["masks/mask_voxel.pgm", "masks/mask_box.pgm"]);

    let r = run_ok(&["--threads", &t, "--preset", "toy", "--config", &small, "train-toy", "--output-dir", &o("train")]);
    record("train-toy", r.stdout, &["train/loss.csv", "train/checkpoint.bin"]);

    let r = run_ok(&[
        "--threads", &t, "--preset", "toy", "--config", &small, "forward", "--input", &fx.arg("scene.bin"), "--checkpoint", &o("train/checkpoint.bin"),
        "--output", &o("raw.txt"), "--kitti", &o("raw_kitti.txt"),
    ]);
    record("forward", r.stdout, &["raw.txt", "raw_kitti.txt"]);

    let r = run_ok(&["--threads", &t, "nms", "--input", &o("raw.txt"), "--output", &o("nms.txt")]);
    record("nms", r.stdout, &["nms.txt"]);

    let r = run_ok(&["--threads", &t, "eval", "--gt-dir", &fx.arg("gt"), "--det-dir", &fx.arg("det"), "--kv", &o("eval.kv")]);
    record("eval", r.stdout, &["eval.kv"]);

    let r = run_ok(&[
        "--threads", &t, "--preset", "toy", "render-bev", "--input", &fx.arg("scene.bin"), "--boxes", &fx.arg("boxes.txt"), "--dets", &o("nms.txt"),
        "--output", &o("bev.ppm"),
    ]);
    record("render-bev", r.stdout, &["bev.ppm"]);

    let r = run_ok(&["--threads", &t, "--preset", "toy", "--config", &small, "bench"]);
    record("bench", bench_skeleton(&r.stdout).into_bytes(), &[]);

    let r = run_ok(&["--threads", &t, "dump-config"]);
    record("dump-config", r.stdout, &[]);
    results
}
