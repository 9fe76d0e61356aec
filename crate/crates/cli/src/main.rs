//! `segvoxel` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Diagnostics go to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use segvoxel::box_geom::Box3D;
use segvoxel::config::RunConfig;
use segvoxel::eval_metrics::{evaluate, gts_from_labels, ApMode, EvalFrame};
use segvoxel::kitti_io::{
    camera_box_to_lidar, format_lidar_detections, read_calib, read_labels, read_lidar_detections, read_point_cloud, write_detections,
    CalibMatrices,
};
use segvoxel::network::{apply_nms, decode_candidates, Network};
use segvoxel::nn_core::{read_checkpoint, write_checkpoint, Graph, Mode, ParamStore};
use segvoxel::seg_context::{make_mask, MaskKind};
use segvoxel::train::{
    moving_average_end, moving_average_start, prepare_examples, recalibrate_bn, seg_iou, synthetic_dataset, synthetic_scene, train,
    LossReport,
};
use segvoxel::{Error, PointCloud};

#[derive(Parser)]
#[command(name = "segvoxel", version, about = "Voxel-based LiDAR car detection")]
struct Cli {
    /// Worker threads (default: all cores); results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key=value` configuration file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration the file overrides.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Voxel,
    Box,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Voxelize a point cloud and dump the sparse grid.
    Voxelize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rasterize ground-truth boxes into BEV foreground masks (PGM).
    Masks {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        gt: GtArgs,
        #[arg(long, value_enum, default_value_t = MaskArg::Both)]
        kind: MaskArg,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Run the network and write scored boxes before NMS.
    Forward {
        #[arg(long)]
        input: PathBuf,
        /// Parameters from `train-toy`; freshly initialized from the seed if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Also write the detections as a KITTI result file.
        #[arg(long)]
        kitti: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Train on the synthetic toy dataset; writes a checkpoint and loss trace.
    TrainToy {
        #[arg(long)]
        output_dir: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Oriented NMS over a detections file.
    Nms {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate detections against KITTI labels.
    Eval {
        /// Directory of `NNNNNN.txt` label files.
        #[arg(long)]
        gt_dir: PathBuf,
        /// Directory of detection files with matching names; missing files mean no detections.
        #[arg(long)]
        det_dir: PathBuf,
        /// Directory of calibration files with matching names; identity if absent.
        #[arg(long)]
        calib_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Write the key-value dump here in addition to the table on stdout.
        #[arg(long)]
        kv: Option<PathBuf>,
    },
    /// Draw points, ground truth (green) and detections (red) as a PPM image.
    RenderBev {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        gt: GtArgs,
        #[arg(long)]
        dets: Option<PathBuf>,
        /// Pixel edge in meters.
        #[arg(long, default_value_t = 0.1)]
        resolution: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Time the pipeline stages on one scene.
    Bench {
        /// Point cloud; a synthetic scene from the data seed if absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Print the full configuration.
    DumpConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    R11,
    R40,
}

#[derive(clap::Args)]
struct GtArgs {
    /// KITTI label file (Car rows are used).
    #[arg(long, conflicts_with = "boxes")]
    labels: Option<PathBuf>,
    /// Calibration for `--labels`; identity if absent.
    #[arg(long = "gt-calib")]
    gt_calib: Option<PathBuf>,
    /// LiDAR-frame box file, one `x y z w l h theta` per line.
    #[arg(long)]
    boxes: Option<PathBuf>,
}

impl GtArgs {
    fn load(&self) -> Result<Vec<Box3D>, Error> {
        if let Some(p) = &self.boxes {
            return Ok(read_lidar_detections(p)?.into_iter().map(|d| d.bbox).collect());
        }
        let Some(p) = &self.labels else { return Ok(Vec::new()) };
        let calib = load_calib(self.gt_calib.as_deref())?;
        read_labels(p)?
            .iter()
            .filter(|l| l.class == "Car")
            .map(|l| camera_box_to_lidar(l, &calib))
            .collect()
    }
}

fn load_calib(path: Option<&Path>) -> Result<CalibMatrices, Error> {
    path.map_or_else(|| Ok(CalibMatrices::identity()), read_calib)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let base = match cli.preset {
        Preset::Default => RunConfig::default(),
        Preset::Toy => RunConfig::toy(),
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, base).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Config(other.to_string()),
        })?,
        None => base,
    };
    match cli.cmd {
        Cmd::Voxelize { input, output } => {
            let grid = segvoxel::voxel_grid::voxelize(&read_point_cloud(&input)?, &cfg.model.voxel)?;
            emit(output.as_deref(), grid.dump())
        }
        Cmd::Masks { input, gt, kind, output_dir } => {
            let grid = segvoxel::voxel_grid::voxelize(&read_point_cloud(&input)?, &cfg.model.voxel)?;
            let boxes = gt.load()?;
            let kinds = match kind {
                MaskArg::Voxel => vec![MaskKind::Voxel],
                MaskArg::Box => vec![MaskKind::Box],
                MaskArg::Both => vec![MaskKind::Voxel, MaskKind::Box],
            };
            for k in kinds {
                let mask = make_mask(&grid, &cfg.model.voxel, &boxes, k, cfg.model.bev_stride())?;
                write(&output_dir.join(format!("mask_{k}.pgm")), mask.to_pgm())?;
                println!("{k} {} foreground of {} cells", mask.foreground(), mask.labels.len());
            }
            Ok(())
        }
        Cmd::Forward {
            input,
            checkpoint,
            output,
            kitti,
            calib,
        } => {
            let mut store = ParamStore::new();
            let net = Network::new(cfg.model.clone(), &mut store, cfg.seed)?;
            if let Some(p) = &checkpoint {
                read_checkpoint(p, &mut store)?;
            }
            let grid = net.voxelize(&read_point_cloud(&input)?)?;
            let dets = net.raw_detections(&store, &grid, &cfg.detect)?;
            write(&output, format_lidar_detections(&dets))?;
            if let Some(k) = &kitti {
                write_detections(k, &dets, &load_calib(calib.as_deref())?)?;
            }
            println!("{} detections", dets.len());
            Ok(())
        }
        Cmd::TrainToy { output_dir, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
                cfg.validate()?;
            }
            train_toy(&cfg, &output_dir)
        }
        Cmd::Nms { input, output } => {
            let dets = apply_nms(read_lidar_detections(&input)?, &cfg.detect);
            write(&output, format_lidar_detections(&dets))?;
            println!("{} detections kept", dets.len());
            Ok(())
        }
        Cmd::Eval {
            gt_dir,
            det_dir,
            calib_dir,
            mode,
            kv,
        } => {
            if let Some(m) = mode {
                cfg.eval.mode = match m {
                    ModeArg::R11 => ApMode::R11,
                    ModeArg::R40 => ApMode::R40,
                };
            }
            let frames = load_frames(&gt_dir, &det_dir, calib_dir.as_deref())?;
            let res = evaluate(&frames, &cfg.eval)?;
            print!("{}", res.table());
            if let Some(p) = &kv {
                write(p, res.key_values())?;
            }
            Ok(())
        }
        Cmd::RenderBev {
            input,
            gt,
            dets,
            resolution,
            output,
        } => {
            let cloud = read_point_cloud(&input)?;
            let boxes = gt.load()?;
            let dets: Vec<Box3D> = match &dets {
                Some(p) => read_lidar_detections(p)?.into_iter().map(|d| d.bbox).collect(),
                None => Vec::new(),
            };
            write(&output, render_bev(&cloud, &boxes, &dets, &cfg, resolution)?)
        }
        Cmd::Bench { input, repeat } => bench(&cfg, input.as_deref(), repeat.max(1)),
        Cmd::DumpConfig => {
            print!("{}", cfg.dump());
            Ok(())
        }
    }
}

fn emit(path: Option<&Path>, text: String) -> Result<(), Error> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train_toy(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let mut store = ParamStore::new();
    let net = Network::new(cfg.model.clone(), &mut store, cfg.seed)?;
    let scenes = synthetic_dataset(&cfg.model.voxel, &cfg.synthetic, cfg.scenes, cfg.data_seed);
    let examples = prepare_examples(&net, &scenes, &cfg.train)?;
    let trace = train(&net, &mut store, &examples, &cfg.train)?;
    recalibrate_bn(&net, &mut store, &examples)?;
    let mut csv = format!("{}\n", LossReport::CSV_HEADER);
    for (i, r) in trace.iter().enumerate() {
        csv.push_str(&r.csv_row(i));
        csv.push('\n');
    }
    write(&out.join("loss.csv"), csv)?;
    write_checkpoint(out.join("checkpoint.bin"), &store)?;
    write(&out.join("config.txt"), cfg.dump())?;
    let window = 10.min(trace.len());
    println!(
        "steps {} loss {:.6} -> {:.6} (mean of {window}) seg_iou {:.6}",
        trace.len(),
        moving_average_start(&trace, window),
        moving_average_end(&trace, window),
        seg_iou(&net, &store, &examples, Mode::Eval)?
    );
    Ok(())
}

fn load_frames(gt_dir: &Path, det_dir: &Path, calib_dir: Option<&Path>) -> Result<Vec<EvalFrame>, Error> {
    let mut names: Vec<String> = fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".txt"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| {
            let calib = match calib_dir {
                Some(d) => read_calib(d.join(n))?,
                None => CalibMatrices::identity(),
            };
            let gts = gts_from_labels(&read_labels(gt_dir.join(n))?, &calib)?;
            let det_path = det_dir.join(n);
            let dets = if det_path.exists() { read_lidar_detections(&det_path)? } else { Vec::new() };
            Ok(EvalFrame { dets, gts })
        })
        .collect()
}

/// Binary pixmap (`P6`): rows run from far (top) to near along x, columns
/// from left (+y) to right (−y).
fn render_bev(cloud: &PointCloud, gts: &[Box3D], dets: &[Box3D], cfg: &RunConfig, res: f64) -> Result<Vec<u8>, Error> {
    if !(res > 0.0 && res.is_finite()) {
        return Err(Error::Config(format!("resolution must be > 0, got {res}")));
    }
    let (lo, hi) = (cfg.model.voxel.range_min, cfg.model.voxel.range_max);
    let rows = ((hi[0] - lo[0]) / res).ceil() as usize;
    let cols = ((hi[1] - lo[1]) / res).ceil() as usize;
    let mut img = vec![0u8; rows * cols * 3];
    let to_px = |x: f64, y: f64| -> (f64, f64) { ((hi[0] - x) / res, (hi[1] - y) / res) };
    let mut put = |r: i64, c: i64, rgb: [u8; 3]| {
        if (0..rows as i64).contains(&r) && (0..cols as i64).contains(&c) {
            let i = (r as usize * cols + c as usize) * 3;
            img[i..i + 3].copy_from_slice(&rgb);
        }
    };
    for p in &cloud.points {
        let (r, c) = to_px(p.x, p.y);
        let v = (80.0 + 175.0 * p.intensity.clamp(0.0, 1.0)).round() as u8;
        put(r.floor() as i64, c.floor() as i64, [v, v, v]);
    }
    for (boxes, rgb) in [(gts, [0, 255, 0]), (dets, [255, 0, 0])] {
        for b in boxes {
            let corners = b.bev_corners();
            for k in 0..4 {
                let (a, z) = (to_px(corners[k][0], corners[k][1]), to_px(corners[(k + 1) % 4][0], corners[(k + 1) % 4][1]));
                let steps = ((z.0 - a.0).abs().max((z.1 - a.1).abs()).ceil() as usize).max(1);
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    put((a.0 + t * (z.0 - a.0)).floor() as i64, (a.1 + t * (z.1 - a.1)).floor() as i64, rgb);
                }
            }
        }
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend(img);
    Ok(out)
}

fn bench(cfg: &RunConfig, input: Option<&Path>, repeat: usize) -> Result<(), Error> {
    let cloud = match input {
        Some(p) => read_point_cloud(p)?,
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.data_seed);
            synthetic_scene(&cfg.model.voxel, &cfg.synthetic, &mut rng).cloud
        }
    };
    let mut store = ParamStore::new();
    let net = Network::new(cfg.model.clone(), &mut store, cfg.seed)?;
    let mut totals = [0.0f64; 5];
    let mut kept = 0;
    for _ in 0..repeat {
        let t = Instant::now();
        let grid = net.voxelize(&cloud)?;
        totals[0] += t.elapsed().as_secs_f64();

        let mut g = Graph::inference();
        let t = Instant::now();
        let plan = net.plan(std::slice::from_ref(&grid))?;
        let bev = net.encoder.forward(&mut g, &mut store, std::slice::from_ref(&grid), &plan, Mode::Eval)?;
        totals[1] += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let sce = net.sce.forward(&mut g, &mut store, bev, Mode::Eval)?;
        totals[2] += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let parts = net.head.forward(&mut g, &mut store, sce.reweighted, Mode::Eval)?;
        let fused = net.fuse(&g, &segvoxel::network::NetOutput { bev, sce, parts })?;
        let cands = decode_candidates(&fused, &net.cfg.anchor_grid()?, 0, &cfg.detect)?;
        totals[3] += t.elapsed().as_secs_f64();

        let t = Instant::now();
        kept = apply_nms(cands, &cfg.detect).len();
        totals[4] += t.elapsed().as_secs_f64();
    }
    let names = ["voxelize", "VFE", "SCE", "head", "NMS"];
    let mut s = format!("{} points, {} runs, {} detections\n{:<10}{:>12}\n", cloud.len(), repeat, kept, "stage", "ms");
    for (n, t) in names.iter().zip(totals) {
        let _ = writeln!(s, "{n:<10}{:>12.3}", 1e3 * t / repeat as f64);
    }
    let _ = writeln!(s, "{:<10}{:>12.3}", "total", 1e3 * totals.iter().sum::<f64>() / repeat as f64);
    print!("{s}");
    Ok(())
}
