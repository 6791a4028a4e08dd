//! Synthetic scene generators: an analytic ground-plane-plus-car scene, a
//! rain-noise scene with holes, walls and floating clutter, and a
//! multi-frame moving-object scene for the fusion demo. Each kind can be
//! written to disk in the external file formats.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GridConfig, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::{BlockWeights, Tensor};
use crate::geometry::{CameraModel, LabeledPointCloud, RigidPose};
use crate::grid::{FeaturePlane, GridSpec};
use crate::io;
use crate::pseudolabel::{Box3D, SemanticMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    PlaneCar,
    RainNoise,
    TwoFrameMotion,
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane+car" => Ok(FixtureKind::PlaneCar),
            "rain-noise" => Ok(FixtureKind::RainNoise),
            "two-frame-motion" => Ok(FixtureKind::TwoFrameMotion),
            other => Err(Error::invalid(
                "fixture kind",
                format!("{other:?} is not one of plane+car, rain-noise, two-frame-motion"),
            )),
        }
    }
}

/// Grid used by the label-pipeline fixtures: 128 x 48 x 8 cells.
pub fn label_scene_grid() -> GridSpec {
    GridSpec::new((-32.0, 32.0), (-12.0, 12.0), (-1.0, 3.0), 0.5).expect("valid fixture grid")
}

/// Grid used by the fusion demo fixture, matching the default
/// [`FusionConfig`] volume dims.
pub fn demo_grid() -> GridSpec {
    GridSpec::new((-6.0, 6.0), (-4.0, 4.0), (-1.0, 1.0), 0.5).expect("valid fixture grid")
}

/// Camera at `origin` whose optical axis points along `forward`
/// (one of +x, -x, +y, -y in the ego plane), y-down.
fn axis_camera(name: &str, forward: [f64; 2], origin: [f64; 3]) -> CameraModel {
    let rotation = match forward {
        [1.0, 0.0] => Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
        [-1.0, 0.0] => Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0),
        [0.0, 1.0] => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        [0.0, -1.0] => Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 0.0),
        _ => unreachable!("axis cameras only"),
    };
    let o = Vector3::new(origin[0], origin[1], origin[2]);
    let pose = RigidPose::from_parts(rotation, -(rotation * o)).expect("orthonormal");
    CameraModel::new(name, 200.0, 200.0, 240.0, 135.0, 480, 270, pose).expect("valid camera")
}

/// Four surround cameras on the ego, 2 m up. Their combined footprint
/// covers everything outside a 4.5 m radius around the origin.
fn surround_cameras() -> Vec<CameraModel> {
    vec![
        axis_camera("back", [-1.0, 0.0], [0.0, 0.0, 2.0]),
        axis_camera("front", [1.0, 0.0], [0.0, 0.0, 2.0]),
        axis_camera("left", [0.0, 1.0], [0.0, 0.0, 2.0]),
        axis_camera("right", [0.0, -1.0], [0.0, 0.0, 2.0]),
    ]
}

fn uniform_masks(cams: &[CameraModel], class: u8, conf: f32) -> Vec<SemanticMask> {
    cams.iter()
        .map(|cam| {
            let n = (cam.width as usize) * (cam.height as usize);
            SemanticMask::new(cam.name.clone(), cam.width, cam.height, vec![class; n], vec![
                conf; n
            ])
            .expect("valid mask")
        })
        .collect()
}

fn label_scene_config(seed: u64) -> RunConfig {
    RunConfig {
        grid: GridConfig::explicit(&label_scene_grid()),
        seed,
        ..RunConfig::default()
    }
}

pub const PLANE_CLASS: u8 = 8; // drive. surf.
pub const CAR_CLASS: u8 = 1;

/// Analytic scene: a jittered ground plane (class 8) with an ego blind
/// hole, plus one parked car box (class 1) filled with points.
pub struct PlaneCarScene {
    pub config: RunConfig,
    pub cloud: LabeledPointCloud,
    /// True class per point, independent of the pipeline.
    pub truth: Vec<u8>,
    pub boxes: Vec<Box3D>,
    pub cameras: Vec<CameraModel>,
    pub masks: Vec<SemanticMask>,
    pub pose: RigidPose,
}

pub fn plane_car_scene(seed: u64, total_points: usize) -> PlaneCarScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = if total_points == 0 { 20_000 } else { total_points };
    let n_car = (total / 10).max(50);
    let n_plane = total.saturating_sub(n_car);

    let car = Box3D {
        id: 1,
        track_id: 1,
        class_id: CAR_CLASS,
        center: [10.0, 2.0, 0.95],
        size: [4.2, 1.9, 1.5],
        yaw: 0.35,
        frame_id: 0,
    };

    let mut positions = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(total);
    // The cameras cannot see straight down at the ego, so the plane has a
    // central blind hole like a real scan.
    let hole_radius = 4.5f64;
    while positions.len() < n_plane {
        let x: f64 = rng.gen_range(-30.0..30.0);
        let y: f64 = rng.gen_range(-9.5..9.5);
        if (x * x + y * y).sqrt() <= hole_radius {
            continue;
        }
        positions.push([x, y, rng.gen_range(-0.02..0.02)]);
        truth.push(PLANE_CLASS);
    }
    for _ in 0..n_car {
        let local = [
            rng.gen_range(-car.size[0] / 2.0 + 1e-3..car.size[0] / 2.0 - 1e-3),
            rng.gen_range(-car.size[1] / 2.0 + 1e-3..car.size[1] / 2.0 - 1e-3),
            rng.gen_range(-car.size[2] / 2.0 + 1e-3..car.size[2] / 2.0 - 1e-3),
        ];
        positions.push(car.to_world(local));
        truth.push(CAR_CLASS);
    }

    let cameras = surround_cameras();
    let masks = uniform_masks(&cameras, PLANE_CLASS, 0.9);
    PlaneCarScene {
        config: label_scene_config(seed),
        cloud: LabeledPointCloud::from_positions(positions),
        truth,
        boxes: vec![car],
        cameras,
        masks,
        pose: RigidPose::identity(),
    }
}

/// What each point of the rain-noise scene really is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RainPointKind {
    Ground,
    Wall,
    Noise,
}

/// Rain scene: a ground plane with dropout holes, floating clutter above
/// the holes, and a dense vertical wall that must survive filtering.
pub struct RainNoiseScene {
    pub config: RunConfig,
    pub cloud: LabeledPointCloud,
    pub kinds: Vec<RainPointKind>,
    pub boxes: Vec<Box3D>,
    pub cameras: Vec<CameraModel>,
    pub masks: Vec<SemanticMask>,
    pub pose: RigidPose,
}

pub fn rain_noise_scene(seed: u64, total_points: usize) -> RainNoiseScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_plane = if total_points == 0 { 25_000 } else { total_points };

    let hole_centers: [[f64; 2]; 8] = [
        [-25.0, -4.5],
        [-25.0, 4.5],
        [-18.0, -4.5],
        [-11.0, 4.5],
        [-4.0, -4.5],
        [3.0, 4.5],
        [10.0, -4.5],
        [15.0, 4.5],
    ];
    let hole_radius = 2.2f64;

    let mut positions = Vec::new();
    let mut kinds = Vec::new();
    while positions.len() < n_plane {
        let x: f64 = rng.gen_range(-28.0..18.5);
        let y: f64 = rng.gen_range(-9.5..9.5);
        let in_hole = hole_centers
            .iter()
            .any(|c| ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt() <= hole_radius);
        if in_hole {
            continue;
        }
        positions.push([x, y, rng.gen_range(-0.01..0.01)]);
        kinds.push(RainPointKind::Ground);
    }

    // Dense wall at x = 20, clear of the plane's neighborhoods and well
    // above the noise height band.
    let mut y = -5.0;
    while y <= 5.0 {
        let mut z = 0.35;
        while z <= 2.2 {
            positions.push([20.0, y, z]);
            kinds.push(RainPointKind::Wall);
            z += 0.12;
        }
        y += 0.12;
    }

    // Four isolated floaters per hole, mutually 1.1 m apart and over a
    // meter from any plane point: zero neighbors each.
    for c in hole_centers {
        for (dx, dy) in [(-0.55, -0.55), (0.55, -0.55), (-0.55, 0.55), (0.55, 0.55)] {
            positions.push([c[0] + dx, c[1] + dy, rng.gen_range(0.08..0.25)]);
            kinds.push(RainPointKind::Noise);
        }
    }

    let cameras = surround_cameras();
    let masks = uniform_masks(&cameras, PLANE_CLASS, 0.9);
    RainNoiseScene {
        config: label_scene_config(seed),
        cloud: LabeledPointCloud::from_positions(positions),
        kinds,
        boxes: Vec::new(),
        cameras,
        masks,
        pose: RigidPose::identity(),
    }
}

/// One frame of the fusion demo scene.
pub struct MotionFrame {
    pub frame_id: u64,
    pub pose: RigidPose,
    pub radar: LabeledPointCloud,
    /// Per-camera synthetic feature planes, keyed by camera name.
    pub features: Vec<(String, FeaturePlane)>,
}

/// Multi-frame fusion demo: static radar background, one moving cluster,
/// synthetic image features, and seeded weights for both three-frame and
/// single-frame fusion.
pub struct MotionScene {
    pub config: RunConfig,
    pub frames: Vec<MotionFrame>,
    pub cameras: Vec<CameraModel>,
    pub weights: BlockWeights,
    /// Weights for single-frame fusion: identical except the temporal stem
    /// only consumes the current frame's channel block.
    pub weights_t1: BlockWeights,
}

fn demo_cameras() -> Vec<CameraModel> {
    let make = |name: &str, forward: [f64; 2]| {
        let rotation = match forward {
            [1.0, 0.0] => Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            _ => Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0),
        };
        let o = Vector3::new(0.0, 0.0, 1.5);
        let pose = RigidPose::from_parts(rotation, -(rotation * o)).expect("orthonormal");
        CameraModel::new(name, 40.0, 40.0, 48.0, 32.0, 96, 64, pose).expect("valid camera")
    };
    vec![make("back", [-1.0, 0.0]), make("front", [1.0, 0.0])]
}

/// Demo weights: the seeded init rescaled so every convolution and linear
/// map has roughly unit RMS gain. The raw init attenuates signals by
/// orders of magnitude per layer, which would leave the demo head reading
/// only its biases.
fn demo_weights(cfg: &crate::fusion::FusionConfig, seed: u64) -> Result<BlockWeights> {
    let mut w = BlockWeights::init(cfg, seed)?;
    let names: Vec<String> = w.names().map(str::to_string).collect();
    for name in names {
        let tensor = w.get_mut(&name)?;
        let dims = tensor.dims().to_vec();
        let fan_in = if name.ends_with(".kernel") && dims.len() == 5 {
            dims[1] * 27
        } else if name.ends_with(".weight") && dims.len() == 2 {
            dims[1]
        } else {
            continue;
        };
        let factor = 1.0 / (crate::fusion::INIT_STD * (fan_in as f64).sqrt());
        for v in tensor.data_mut() {
            *v *= factor;
        }
    }
    Ok(w)
}

pub fn motion_scene(seed: u64) -> MotionScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = RunConfig {
        grid: GridConfig::explicit(&demo_grid()),
        seed,
        ..RunConfig::default()
    };
    let fusion = &config.fusion;
    let cameras = demo_cameras();

    // Static background in world coordinates.
    let background: Vec<[f64; 3]> = (0..150)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius = rng.gen_range(2.5..5.5);
            [
                radius * angle.cos(),
                radius * angle.sin() * 0.6,
                rng.gen_range(-0.8..0.8),
            ]
        })
        .collect();

    let mut frames = Vec::new();
    for k in 0..3u64 {
        let ego_x = 0.6 * k as f64;
        let pose = RigidPose::from_translation([ego_x, 0.0, 0.0]);
        // Cluster moving +x at 0.8 m/frame in world coordinates.
        let cluster_x = 1.0 + 0.8 * k as f64;
        let mut positions = Vec::new();
        let mut velocities = Vec::new();
        for &p in &background {
            positions.push([p[0] - ego_x, p[1], p[2]]);
            velocities.push([0.0, 0.0]);
        }
        for _ in 0..30 {
            positions.push([
                cluster_x - ego_x + rng.gen_range(-0.3..0.3),
                1.0 + rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.5),
            ]);
            velocities.push([0.8, 0.0]);
        }
        let n = positions.len();
        let mut radar = LabeledPointCloud::from_positions(positions);
        radar
            .set_radar_channels(
                velocities,
                (0..n).map(|_| rng.gen_range(5.0..25.0)).collect(),
                (0..n).map(|_| rng.gen_range(1.0..12.0)).collect(),
                vec![0.1 * k as f64; n],
            )
            .expect("same length");

        let features = cameras
            .iter()
            .map(|cam| {
                let plane = FeaturePlane::from_fn(fusion.channels, 12, 18, |_, _, _| {
                    rng.gen_range(-1.0..1.0)
                });
                (cam.name.clone(), plane)
            })
            .collect();
        frames.push(MotionFrame {
            frame_id: k,
            pose,
            radar,
            features,
        });
    }

    let weights = demo_weights(fusion, seed).expect("valid config");
    // Single-frame variant: same parameters, temporal stem sliced down to
    // the current frame's channels.
    let mut weights_t1 = weights.clone();
    let c = fusion.channels;
    let full = weights.get("temporal.conv0.kernel").expect("present");
    let mut sliced = Tensor::zeros(vec![c, c, 3, 3, 3]);
    for co in 0..c {
        for ci in 0..c {
            for tap in 0..27 {
                let src = (co * (fusion.temporal_frames * c) + ci) * 27 + tap;
                let dst = (co * c + ci) * 27 + tap;
                sliced.data_mut()[dst] = full.data()[src];
            }
        }
    }
    *weights_t1.get_mut("temporal.conv0.kernel").expect("present") = sliced;

    MotionScene {
        config,
        frames,
        cameras,
        weights,
        weights_t1,
    }
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

#[allow(clippy::too_many_arguments)]
fn write_label_scene(
    dir: &Path,
    config: &RunConfig,
    cloud: &LabeledPointCloud,
    boxes: &[Box3D],
    cameras: &[CameraModel],
    masks: &[SemanticMask],
    pose: &RigidPose,
) -> Result<()> {
    ensure_dir(dir)?;
    config.save(&dir.join("config.json"))?;
    io::write_poses_json(&[(0, pose.clone())], &dir.join("poses.json"))?;
    io::write_cameras_json(cameras, &dir.join("cameras.json"))?;
    io::write_boxes_json(boxes, &dir.join("boxes.json"))?;
    io::write_mopc(cloud, &dir.join("frame_0.mopc"))?;
    for mask in masks {
        io::write_mosm(mask, &dir.join(format!("mask_0_{}.mosm", mask.camera)))?;
    }
    Ok(())
}

pub fn write_plane_car(scene: &PlaneCarScene, dir: &Path) -> Result<()> {
    write_label_scene(
        dir,
        &scene.config,
        &scene.cloud,
        &scene.boxes,
        &scene.cameras,
        &scene.masks,
        &scene.pose,
    )
}

pub fn write_rain_noise(scene: &RainNoiseScene, dir: &Path) -> Result<()> {
    write_label_scene(
        dir,
        &scene.config,
        &scene.cloud,
        &scene.boxes,
        &scene.cameras,
        &scene.masks,
        &scene.pose,
    )
}

pub fn write_motion(scene: &MotionScene, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    scene.config.save(&dir.join("config.json"))?;
    let mut config_t1 = scene.config.clone();
    config_t1.fusion.temporal_frames = 1;
    config_t1.save(&dir.join("config_t1.json"))?;

    let poses: Vec<(u64, RigidPose)> = scene
        .frames
        .iter()
        .map(|f| (f.frame_id, f.pose.clone()))
        .collect();
    io::write_poses_json(&poses, &dir.join("poses.json"))?;
    io::write_cameras_json(&scene.cameras, &dir.join("cameras.json"))?;
    for frame in &scene.frames {
        io::write_mopc(&frame.radar, &dir.join(format!("radar_{}.mopc", frame.frame_id)))?;
        let mut bundle = BlockWeights::new();
        for (name, plane) in &frame.features {
            bundle.insert(
                name.clone(),
                Tensor::new(
                    vec![plane.channels, plane.h, plane.w],
                    plane.data().to_vec(),
                )?,
            )?;
        }
        bundle.write(&dir.join(format!("features_{}.mobw", frame.frame_id)))?;
    }
    scene.weights.write(&dir.join("weights.mobw"))?;
    scene.weights_t1.write(&dir.join("weights_t1.mobw"))?;
    Ok(())
}

/// Generate and write a fixture scene. `points == 0` uses the kind's
/// default size.
pub fn write_fixture(kind: FixtureKind, seed: u64, points: usize, dir: &Path) -> Result<()> {
    match kind {
        FixtureKind::PlaneCar => write_plane_car(&plane_car_scene(seed, points), dir),
        FixtureKind::RainNoise => write_rain_noise(&rain_noise_scene(seed, points), dir),
        FixtureKind::TwoFrameMotion => write_motion(&motion_scene(seed), dir),
    }
}
