//! Command-line interface: pseudo-label generation, occupancy evaluation,
//! the fusion demo pipeline, loss gradient checks, fixture generation, and
//! plain voxelization.
//!
//! Exit codes: 0 success, 1 assertion/metric failure, 2 usage or IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use occukit::config::RunConfig;
use occukit::fixtures::{write_fixture, FixtureKind};
use occukit::fusion::{
    gcf, image_lift, laf, occupancy_head, pillar_encode, rhs, temporal_fuse, BlockWeights,
    ClassProbs, Tensor,
};
use occukit::geometry::{CameraModel, RigidPose};
use occukit::grid::{voxelize_points, FeaturePlane, GridSpec, VoxelGrid};
use occukit::io;
use occukit::losses::gradient_check;
use occukit::metrics::evaluate;
use occukit::pseudolabel::FrameInput;

#[derive(Parser)]
#[command(name = "occukit", version, about = "Occupancy grid toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an occupancy pseudo-label grid from a scene directory.
    GenLabels {
        /// Scene directory with poses.json, cameras.json, boxes.json,
        /// frame_<id>.mopc clouds and mask_<id>_<camera>.mosm masks.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output occupancy grid (MOCG).
        #[arg(long)]
        out: PathBuf,
        /// Also write a top-down class image.
        #[arg(long)]
        dump_bev_pgm: Option<PathBuf>,
    },
    /// Compare an occupancy grid against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Ground-truth classes to skip (repeatable).
        #[arg(long)]
        ignore: Vec<u8>,
        /// JSON report destination.
        #[arg(long)]
        report: PathBuf,
        /// Config supplying the class-name table (defaults to the
        /// surround-view table).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the fusion pipeline on a scene fixture and emit a grid plus
    /// per-class probabilities.
    FuseDemo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Scene directory with poses.json, cameras.json, radar_<id>.mopc
        /// and features_<id>.mobw.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probability dump destination (defaults to <out>.probs.mobw).
        #[arg(long)]
        probs: Option<PathBuf>,
        #[arg(long)]
        dump_bev_pgm: Option<PathBuf>,
    },
    /// Check analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Write a synthetic scene fixture.
    MakeFixture {
        /// One of: plane+car, rain-noise, two-frame-motion.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Approximate point count (0 uses the kind's default).
        #[arg(long, default_value_t = 0)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelize a labeled point cloud into an occupancy grid.
    Voxelize {
        /// Input cloud (.mopc, or .csv with a header row).
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_bev_pgm: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// OCCUKIT_THREADS caps internal parallelism; 1 is the single-threaded
/// reference mode. Results are byte-identical across settings.
fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("OCCUKIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .with_context(|| format!("OCCUKIT_THREADS must be a positive integer, got {raw:?}"))?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenLabels {
            scene,
            config,
            out,
            dump_bev_pgm,
        } => cmd_gen_labels(&scene, &config, &out, dump_bev_pgm.as_deref()),
        Command::Eval {
            pred,
            gt,
            ignore,
            report,
            config,
        } => cmd_eval(&pred, &gt, &ignore, &report, config.as_deref()),
        Command::FuseDemo {
            config,
            weights,
            scene,
            out,
            probs,
            dump_bev_pgm,
        } => cmd_fuse_demo(
            &config,
            &weights,
            &scene,
            &out,
            probs.as_deref(),
            dump_bev_pgm.as_deref(),
        ),
        Command::Gradcheck { seed, trials } => cmd_gradcheck(seed, trials),
        Command::MakeFixture {
            kind,
            seed,
            points,
            out,
        } => {
            let kind: FixtureKind = kind.parse()?;
            write_fixture(kind, seed, points, &out)?;
            println!("wrote {} fixture to {}", fixture_name(kind), out.display());
            Ok(0)
        }
        Command::Voxelize {
            cloud,
            config,
            out,
            dump_bev_pgm,
        } => cmd_voxelize(&cloud, &config, &out, dump_bev_pgm.as_deref()),
    }
}

fn fixture_name(kind: FixtureKind) -> &'static str {
    match kind {
        FixtureKind::PlaneCar => "plane+car",
        FixtureKind::RainNoise => "rain-noise",
        FixtureKind::TwoFrameMotion => "two-frame-motion",
    }
}

fn write_grid_outputs(grid: &VoxelGrid, out: &Path, pgm: Option<&Path>) -> Result<()> {
    io::write_mocg(grid, out)?;
    if let Some(pgm) = pgm {
        io::write_bev_pgm(grid, pgm)?;
    }
    Ok(())
}

fn cmd_gen_labels(scene: &Path, config: &Path, out: &Path, pgm: Option<&Path>) -> Result<u8> {
    let config = RunConfig::load(config)?;
    let spec = config.grid_spec()?;
    let poses = io::read_poses_json(&scene.join("poses.json"))?;
    let cams = io::read_cameras_json(&scene.join("cameras.json"))?;
    let boxes = io::read_boxes_json(&scene.join("boxes.json"))?;

    let mut ordered = poses;
    ordered.sort_by_key(|(id, _)| *id);
    let mut frames = Vec::with_capacity(ordered.len());
    for (frame_id, pose) in ordered {
        let cloud = io::read_mopc(&scene.join(format!("frame_{frame_id}.mopc")))?;
        let masks = cams
            .iter()
            .map(|cam| io::read_mosm(&scene.join(format!("mask_{frame_id}_{}.mosm", cam.name))))
            .collect::<occukit::Result<Vec<_>>>()?;
        frames.push(FrameInput {
            frame_id,
            cloud,
            boxes: boxes
                .iter()
                .filter(|b| b.frame_id == frame_id)
                .cloned()
                .collect(),
            masks,
            pose,
        });
    }

    let (grid, stats) = occukit::pseudolabel::run_pipeline(
        &frames,
        &cams,
        &spec,
        config.class_count(),
        &config.pseudolabel,
    )?;
    eprintln!(
        "gen-labels: extracted {} object points, removed {} noise points, \
         labeled {} static points, {} occupied voxels",
        stats.extracted_points, stats.filtered_points, stats.labeled_points, stats.occupied_voxels
    );
    write_grid_outputs(&grid, out, pgm)?;
    Ok(0)
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    ignore: &[u8],
    report_path: &Path,
    config: Option<&Path>,
) -> Result<u8> {
    let pred = io::read_mocg(pred)?;
    let gt = io::read_mocg(gt)?;
    let classes = match config {
        Some(path) => RunConfig::load(path)?.classes,
        None => RunConfig::default().classes,
    };
    let report = evaluate(&pred, &gt, ignore, &classes)?;
    let json = serde_json::to_vec_pretty(&report).context("serializing report")?;
    io::write_atomic(report_path, &json)?;
    println!("sc_iou {:.6} miou {:.6}", report.sc_iou, report.miou);
    Ok(0)
}

fn load_feature_planes(path: &Path, cams: &[CameraModel]) -> Result<Vec<FeaturePlane>> {
    let bundle = BlockWeights::read(path)?;
    cams.iter()
        .map(|cam| {
            let tensor: &Tensor = bundle.get(&cam.name).with_context(|| {
                format!("features for camera {} in {}", cam.name, path.display())
            })?;
            let dims = tensor.dims();
            if dims.len() != 3 {
                bail!(
                    "feature tensor {} in {} has dims {dims:?}, expected (C, H, W)",
                    cam.name,
                    path.display()
                );
            }
            Ok(FeaturePlane::from_vec(
                dims[0],
                dims[1],
                dims[2],
                tensor.data().to_vec(),
            )?)
        })
        .collect()
}

fn cmd_fuse_demo(
    config: &Path,
    weights: &Path,
    scene: &Path,
    out: &Path,
    probs_out: Option<&Path>,
    pgm: Option<&Path>,
) -> Result<u8> {
    let config = RunConfig::load(config)?;
    let spec = config.grid_spec()?;
    let fusion = &config.fusion;
    if spec.volume_dims() != (fusion.height, fusion.width, fusion.depth) {
        bail!(
            "grid volume dims {:?} do not match the fusion config {:?}",
            spec.volume_dims(),
            (fusion.height, fusion.width, fusion.depth)
        );
    }
    let weights = BlockWeights::read(weights)?;
    let cams = io::read_cameras_json(&scene.join("cameras.json"))?;
    let mut poses = io::read_poses_json(&scene.join("poses.json"))?;
    poses.sort_by_key(|(id, _)| *id);
    if poses.len() < fusion.temporal_frames {
        bail!(
            "scene has {} frames, temporal fusion needs {}",
            poses.len(),
            fusion.temporal_frames
        );
    }
    let window = &poses[poses.len() - fusion.temporal_frames..];

    // Per frame: radar pillars through height attention, image features
    // lifted to the volume, locally then globally fused.
    let mut fused_frames = Vec::with_capacity(window.len());
    for (frame_id, _) in window {
        let radar = io::read_mopc(&scene.join(format!("radar_{frame_id}.mopc")))?;
        let bev = pillar_encode(&radar, &spec, &weights)
            .with_context(|| format!("pillar encoder, frame {frame_id}"))?;
        let f_r = rhs(&bev, &weights, fusion)
            .with_context(|| format!("radar height attention, frame {frame_id}"))?;
        let planes = load_feature_planes(&scene.join(format!("features_{frame_id}.mobw")), &cams)?;
        let f_c = image_lift(&planes, &cams, &spec, &weights, fusion)
            .with_context(|| format!("image lift, frame {frame_id}"))?;
        let (f_laf, _) = laf(&f_c, &f_r, &weights)
            .with_context(|| format!("local fusion, frame {frame_id}"))?;
        let f_m = gcf(&f_laf, &f_c, &f_r, &weights, fusion)
            .with_context(|| format!("global fusion, frame {frame_id}"))?;
        fused_frames.push(f_m);
    }

    // Current frame first, then history, with current-to-past transforms.
    let (_, current_pose) = window.last().expect("window non-empty").clone();
    fused_frames.reverse();
    let rel_poses: Vec<RigidPose> = window[..window.len() - 1]
        .iter()
        .rev()
        .map(|(_, past)| past.inverse().compose(&current_pose))
        .collect();
    let fused =
        temporal_fuse(&fused_frames, &rel_poses, &spec, &weights).context("temporal fusion")?;

    let probs = occupancy_head(&fused, &weights).context("occupancy head")?;
    if probs.num_classes != config.classes.len() {
        bail!(
            "head produces {} classes, config names {}",
            probs.num_classes,
            config.classes.len()
        );
    }
    let grid = probs.argmax_grid(&spec)?;
    write_grid_outputs(&grid, out, pgm)?;
    write_probability_dump(&probs, probs_out, out)?;
    eprintln!(
        "fuse-demo: fused {} frames, {} occupied voxels",
        window.len(),
        grid.occupied_count()
    );
    Ok(0)
}

fn write_probability_dump(probs: &ClassProbs, explicit: Option<&Path>, out: &Path) -> Result<()> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let mut name = out.as_os_str().to_owned();
            name.push(".probs.mobw");
            PathBuf::from(name)
        }
    };
    let mut bundle = BlockWeights::new();
    bundle.insert(
        "class_probs",
        Tensor::new(
            vec![probs.h, probs.w, probs.z, probs.num_classes],
            probs.data.clone(),
        )?,
    )?;
    bundle.write(&path)?;
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize) -> Result<u8> {
    let report = gradient_check(seed, trials)?;
    let mut ok = true;
    for (name, err) in &report {
        let pass = *err < 1e-4;
        ok &= pass;
        println!(
            "{name:10} max relative gradient error {err:.3e} [{}]",
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if ok { 0 } else { 1 })
}

fn cmd_voxelize(cloud: &Path, config: &Path, out: &Path, pgm: Option<&Path>) -> Result<u8> {
    let config = RunConfig::load(config)?;
    let spec: GridSpec = config.grid_spec()?;
    let points = if cloud.extension().is_some_and(|e| e == "csv") {
        io::read_point_cloud_csv(cloud)?
    } else {
        io::read_mopc(cloud)?
    };
    let voxelized = voxelize_points(&points, &spec, config.class_count())?;
    eprintln!(
        "voxelize: {} points into {} occupied voxels",
        points.len(),
        voxelized.grid.occupied_count()
    );
    write_grid_outputs(&voxelized.grid, out, pgm)?;
    Ok(0)
}
