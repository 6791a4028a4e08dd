//! Cross-module integration: drive the public API from scene fixture to
//! labeled grid, through the on-disk formats, and into the metrics.

use occukit::fixtures::{self, plane_car_scene};
use occukit::fusion::{
    gcf, image_lift, laf, occupancy_head, pillar_encode, rhs, temporal_fuse, BlockWeights,
};
use occukit::geometry::RigidPose;
use occukit::grid::FeaturePlane;
use occukit::io;
use occukit::losses;
use occukit::metrics;
use occukit::pseudolabel::{run_pipeline, FrameInput};
use tempfile::tempdir;

#[test]
fn label_pipeline_to_metrics_round_trip() {
    let scene = plane_car_scene(2024, 6000);
    let spec = scene.config.grid_spec().unwrap();
    let frames = vec![FrameInput {
        frame_id: 0,
        cloud: scene.cloud.clone(),
        boxes: scene.boxes.clone(),
        masks: scene.masks.clone(),
        pose: scene.pose.clone(),
    }];
    let (grid, stats) = run_pipeline(
        &frames,
        &scene.cameras,
        &spec,
        scene.config.class_count(),
        &scene.config.pseudolabel,
    )
    .unwrap();
    assert!(stats.occupied_voxels > 0);
    assert_eq!(stats.occupied_voxels, grid.occupied_count());

    // Grid survives the binary format bit-for-bit.
    let dir = tempdir().unwrap();
    let path = dir.path().join("grid.mocg");
    io::write_mocg(&grid, &path).unwrap();
    let back = io::read_mocg(&path).unwrap();
    assert_eq!(back, grid);

    // Self-evaluation is perfect; against an all-free grid SC IoU is
    // undefined on one side and the confusion row sums still hold.
    let report = metrics::evaluate(&grid, &grid, &[], &scene.config.classes).unwrap();
    assert_eq!(report.sc_iou, 1.0);
    assert_eq!(report.miou, 1.0);
    assert_eq!(report.per_class["car"], Some(1.0));
    assert_eq!(report.per_class["pedestrian"], None);
}

#[test]
fn fusion_stack_runs_on_motion_fixture_frames() {
    let scene = fixtures::motion_scene(9);
    let spec = scene.config.grid_spec().unwrap();
    let fusion_cfg = &scene.config.fusion;
    let weights = &scene.weights;

    let mut fused_frames = Vec::new();
    for frame in &scene.frames {
        let bev = pillar_encode(&frame.radar, &spec, weights).unwrap();
        let f_r = rhs(&bev, weights, fusion_cfg).unwrap();
        let planes: Vec<FeaturePlane> = frame.features.iter().map(|(_, p)| p.clone()).collect();
        let f_c = image_lift(&planes, &scene.cameras, &spec, weights, fusion_cfg).unwrap();
        let (f_laf, gates) = laf(&f_c, &f_r, weights).unwrap();
        assert!(gates.all_finite());
        let f_m = gcf(&f_laf, &f_c, &f_r, weights, fusion_cfg).unwrap();
        assert!(f_m.all_finite());
        fused_frames.push(f_m);
    }

    // Current frame last in the fixture; temporal fusion wants it first.
    fused_frames.reverse();
    let current_pose = &scene.frames.last().unwrap().pose;
    let rel_poses: Vec<RigidPose> = scene.frames[..scene.frames.len() - 1]
        .iter()
        .rev()
        .map(|f| f.pose.inverse().compose(current_pose))
        .collect();
    let fused = temporal_fuse(&fused_frames, &rel_poses, &spec, weights).unwrap();
    let probs = occupancy_head(&fused, weights).unwrap();
    assert!(probs.all_finite());

    // The head output feeds the losses directly.
    let labels = vec![0u8; probs.num_voxels()];
    let result = losses::total_loss(&probs.data, probs.num_classes, &labels).unwrap();
    assert!(result.value.is_finite());
    assert_eq!(result.gradient.len(), probs.data.len());
}

#[test]
fn weights_file_round_trips_through_disk() {
    let dir = tempdir().unwrap();
    let cfg = occukit::fusion::FusionConfig::default();
    let weights = BlockWeights::init(&cfg, 31).unwrap();
    let path = dir.path().join("w.mobw");
    weights.write(&path).unwrap();
    assert_eq!(BlockWeights::read(&path).unwrap(), weights);
}
