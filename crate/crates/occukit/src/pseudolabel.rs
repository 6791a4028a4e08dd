//! Pseudo-occupancy-label pipeline: dynamic/static separation with 3D
//! boxes, drivable-region noise filtering, point-image semantic
//! assignment, temporal aggregation, and staged nearest-neighbor matching
//! into a labeled voxel grid.
//!
//! Class id 255 marks points that project into no camera ("unknown"). Such
//! points still occupy voxels but never donate a label; occupied voxels
//! with no labeled donor in reach stay free.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_points, CameraModel, LabeledPointCloud, RigidPose};
use crate::grid::{occupancy_lists, GridSpec, OccupiedVoxel, VoxelGrid};

/// Class id for points visible in no camera.
pub const UNKNOWN_CLASS: u8 = 255;

/// Tunable thresholds of the pipeline. Defaults match the reference
/// configuration; every value can be overridden from the run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudolabelParams {
    /// Neighbors used for per-point PCA normals.
    pub neighbor_k: usize,
    /// Neighbor search radius in meters.
    pub neighbor_radius: f64,
    /// Max angle between a ground normal and +Z, degrees.
    pub ground_normal_max_angle_deg: f64,
    /// Max lambda_min / lambda_mid ratio for a planar neighborhood.
    pub planarity_max: f64,
    /// Non-ground points closer than this to the local ground are noise, meters.
    pub noise_height: f64,
    /// Points with fewer neighbors than this are noise candidates.
    pub min_neighbors: usize,
    /// Stage-2 donor search radius around a voxel center, meters.
    pub stage2_radius: f64,
    /// Dilation of box footprints in the drivable region, meters.
    pub box_margin: f64,
    /// Ego rectangle half length (ahead/behind), meters.
    pub ego_half_length: f64,
    /// Ego rectangle half width (each side), meters.
    pub ego_half_width: f64,
    /// Lateral radius for the local ground height estimate, meters.
    pub ground_search_radius: f64,
}

impl Default for PseudolabelParams {
    fn default() -> Self {
        PseudolabelParams {
            neighbor_k: 16,
            neighbor_radius: 1.0,
            ground_normal_max_angle_deg: 25.0,
            planarity_max: 0.1,
            noise_height: 0.3,
            min_neighbors: 4,
            stage2_radius: 2.0,
            box_margin: 1.5,
            ego_half_length: 30.0,
            ego_half_width: 10.0,
            ground_search_radius: 2.0,
        }
    }
}

/// Oriented 3D bounding box (yaw about +Z).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3D {
    pub id: u64,
    pub track_id: u32,
    pub class_id: u8,
    /// Center (x, y, z) in meters.
    pub center: [f64; 3],
    /// Full extents (l, w, h) in meters.
    pub size: [f64; 3],
    /// Rotation about +Z, radians.
    pub yaw: f64,
    pub frame_id: u64,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::invalid(
                "box",
                format!("box {} has non-positive size {:?}", self.id, self.size),
            ));
        }
        Ok(())
    }

    /// Box-frame coordinates of a world point (inverse yaw about center).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * q[0] - s * q[1] + self.center[0],
            s * q[0] + c * q[1] + self.center[1],
            q[2] + self.center[2],
        ]
    }

    /// Closed-interval membership in box-frame coordinates.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.size[0] / 2.0
            && q[1].abs() <= self.size[1] / 2.0
            && q[2].abs() <= self.size[2] / 2.0
    }

    fn center_dist2(&self, p: [f64; 3]) -> f64 {
        (p[0] - self.center[0]).powi(2)
            + (p[1] - self.center[1]).powi(2)
            + (p[2] - self.center[2]).powi(2)
    }
}

/// Per-pixel class and confidence for one camera.
#[derive(Debug, Clone)]
pub struct SemanticMask {
    pub camera: String,
    pub width: u32,
    pub height: u32,
    pub classes: Vec<u8>,
    pub confidences: Vec<f32>,
}

impl SemanticMask {
    pub fn new(
        camera: String,
        width: u32,
        height: u32,
        classes: Vec<u8>,
        confidences: Vec<f32>,
    ) -> Result<Self> {
        let n = (width as usize) * (height as usize);
        if classes.len() != n || confidences.len() != n {
            return Err(Error::shape(
                "semantic mask",
                format!(
                    "{}x{} mask with {} classes / {} confidences",
                    width,
                    height,
                    classes.len(),
                    confidences.len()
                ),
            ));
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("mask confidence", "values must lie in [0, 1]"));
        }
        Ok(SemanticMask {
            camera,
            width,
            height,
            classes,
            confidences,
        })
    }

    #[inline]
    pub fn at(&self, u: u32, v: u32) -> (u8, f32) {
        let i = (v as usize) * (self.width as usize) + u as usize;
        (self.classes[i], self.confidences[i])
    }
}

/// Yawed rectangle in the working frame, closed containment.
#[derive(Debug, Clone)]
pub struct YawedRect {
    pub cx: f64,
    pub cy: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub yaw: f64,
}

impl YawedRect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let qx = c * dx + s * dy;
        let qy = -s * dx + c * dy;
        qx.abs() <= self.half_x && qy.abs() <= self.half_y
    }
}

/// Coarse drivable region: union of the ego rectangle and dilated box
/// footprints.
#[derive(Debug, Clone)]
pub struct DrivableRegion {
    pub rects: Vec<YawedRect>,
}

impl DrivableRegion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.rects.iter().any(|r| r.contains(x, y))
    }
}

/// Build the drivable region around the ego pose, dilating each box
/// footprint by `params.box_margin`.
pub fn drivable_region(
    ego_pose: &RigidPose,
    boxes: &[Box3D],
    params: &PseudolabelParams,
) -> DrivableRegion {
    let t = ego_pose.translation();
    let mut rects = vec![YawedRect {
        cx: t[0],
        cy: t[1],
        half_x: params.ego_half_length,
        half_y: params.ego_half_width,
        yaw: ego_pose.yaw(),
    }];
    for b in boxes {
        rects.push(YawedRect {
            cx: b.center[0],
            cy: b.center[1],
            half_x: b.size[0] / 2.0 + params.box_margin,
            half_y: b.size[1] / 2.0 + params.box_margin,
            yaw: b.yaw,
        });
    }
    DrivableRegion { rects }
}

/// One box together with the points assigned to it.
#[derive(Debug, Clone)]
pub struct ObjectPoints {
    pub bbox: Box3D,
    pub points: LabeledPointCloud,
}

/// Split a cloud into per-box dynamic points and the static remainder.
///
/// A point belongs to a box iff its box-frame coordinates lie within
/// half-size on every axis (closed). Points inside several boxes go to the
/// box with the nearest center (first box in input order on exact ties).
/// Box points inherit the box class and track id.
pub fn extract_objects(
    pts: &LabeledPointCloud,
    boxes: &[Box3D],
) -> Result<(Vec<ObjectPoints>, LabeledPointCloud)> {
    for b in boxes {
        b.validate()?;
    }
    let mut per_box: Vec<Vec<usize>> = vec![Vec::new(); boxes.len()];
    let mut remainder: Vec<usize> = Vec::new();
    for (i, &p) in pts.positions().iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (bi, b) in boxes.iter().enumerate() {
            if b.contains(p) {
                let d2 = b.center_dist2(p);
                if best.is_none_or(|(bd, _)| d2 < bd) {
                    best = Some((d2, bi));
                }
            }
        }
        match best {
            Some((_, bi)) => per_box[bi].push(i),
            None => remainder.push(i),
        }
    }
    let objects = boxes
        .iter()
        .zip(per_box)
        .map(|(b, indices)| {
            let mut points = pts.select(&indices);
            let n = points.len();
            points.set_semantics(vec![b.class_id; n], vec![1.0; n])?;
            points.set_track_ids(vec![b.track_id; n])?;
            Ok(ObjectPoints {
                bbox: b.clone(),
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((objects, pts.select(&remainder)))
}

// ---------------------------------------------------------------------------
// Spatial hashing
// ---------------------------------------------------------------------------

struct SpatialHash3 {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl SpatialHash3 {
    fn key(cell: f64, p: [f64; 3]) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    fn new(points: &[[f64; 3]], cell: f64) -> Self {
        let mut map: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            map.entry(Self::key(cell, p)).or_default().push(i);
        }
        SpatialHash3 { cell, map }
    }

    /// Visit candidate indices whose cells intersect the closed ball
    /// around `center`; callers must re-check the true distance.
    fn candidates(&self, center: [f64; 3], radius: f64, mut visit: impl FnMut(usize)) {
        let reach = (radius / self.cell).ceil() as i64;
        let (kx, ky, kz) = Self::key(self.cell, center);
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in ids {
                            visit(i);
                        }
                    }
                }
            }
        }
    }
}

struct SpatialHash2 {
    cell: f64,
    map: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialHash2 {
    fn new(points: &[[f64; 3]], indices: &[usize], cell: f64) -> Self {
        let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for &i in indices {
            let p = points[i];
            let key = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
            map.entry(key).or_default().push(i);
        }
        SpatialHash2 { cell, map }
    }

    fn candidates(&self, x: f64, y: f64, radius: f64, mut visit: impl FnMut(usize)) {
        let reach = (radius / self.cell).ceil() as i64;
        let kx = (x / self.cell).floor() as i64;
        let ky = (y / self.cell).floor() as i64;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                if let Some(ids) = self.map.get(&(kx + dx, ky + dy)) {
                    for &i in ids {
                        visit(i);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Noise filtering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct FilterStats {
    pub inside_region: usize,
    pub ground_points: usize,
    pub removed: usize,
}

#[derive(Clone, Copy)]
struct NeighborhoodInfo {
    neighbor_count: usize,
    ground: bool,
}

fn classify_neighborhood(
    i: usize,
    positions: &[[f64; 3]],
    hash: &SpatialHash3,
    params: &PseudolabelParams,
    cos_max_angle: f64,
) -> NeighborhoodInfo {
    let p = positions[i];
    let r2 = params.neighbor_radius * params.neighbor_radius;
    let mut neighbors: Vec<(f64, usize)> = Vec::new();
    hash.candidates(p, params.neighbor_radius, |j| {
        if j == i {
            return;
        }
        let q = positions[j];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d2 <= r2 {
            neighbors.push((d2, j));
        }
    });
    let neighbor_count = neighbors.len();
    neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    neighbors.truncate(params.neighbor_k);

    // PCA over the point plus its nearest neighbors.
    if neighbors.len() + 1 < 3 {
        return NeighborhoodInfo {
            neighbor_count,
            ground: false,
        };
    }
    let mut mean = Vector3::zeros();
    let pts: Vec<Vector3<f64>> = std::iter::once(i)
        .chain(neighbors.iter().map(|&(_, j)| j))
        .map(|j| Vector3::new(positions[j][0], positions[j][1], positions[j][2]))
        .collect();
    for q in &pts {
        mean += q;
    }
    mean /= pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for q in &pts {
        let d = q - mean;
        cov += d * d.transpose();
    }
    cov /= pts.len() as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_min, l_mid) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let normal = eig.eigenvectors.column(order[0]);
    let planar = l_min <= params.planarity_max * l_mid;
    let upright = normal[2].abs() >= cos_max_angle;
    NeighborhoodInfo {
        neighbor_count,
        ground: planar && upright,
    }
}

/// Drop rain-noise points inside the drivable region.
///
/// Points outside the region always pass. Inside it, each point's
/// neighborhood is classified by PCA: planar, upright neighborhoods are
/// GROUND and pass. Non-ground points are removed when they either sit
/// less than `noise_height` above the local ground level or have fewer
/// than `min_neighbors` neighbors. Non-ground points with no ground
/// estimate in reach and enough neighbors pass.
pub fn filter_noise(
    cloud: &LabeledPointCloud,
    region: &DrivableRegion,
    params: &PseudolabelParams,
) -> (LabeledPointCloud, FilterStats) {
    let positions = cloud.positions();
    let n = positions.len();
    let hash = SpatialHash3::new(positions, params.neighbor_radius.max(1e-6));
    let cos_max_angle = params.ground_normal_max_angle_deg.to_radians().cos();

    let inside: Vec<bool> = positions
        .iter()
        .map(|p| region.contains(p[0], p[1]))
        .collect();
    let infos: Vec<NeighborhoodInfo> = (0..n)
        .into_par_iter()
        .map(|i| classify_neighborhood(i, positions, &hash, params, cos_max_angle))
        .collect();

    let ground_indices: Vec<usize> = (0..n).filter(|&i| infos[i].ground).collect();
    let ground_xy = SpatialHash2::new(
        positions,
        &ground_indices,
        params.ground_search_radius.max(1e-6),
    );
    let local_ground_z = |p: [f64; 3]| -> Option<f64> {
        let r2 = params.ground_search_radius * params.ground_search_radius;
        let mut zs: Vec<f64> = Vec::new();
        ground_xy.candidates(p[0], p[1], params.ground_search_radius, |j| {
            let q = positions[j];
            if (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) <= r2 {
                zs.push(q[2]);
            }
        });
        if zs.is_empty() {
            return None;
        }
        let mid = zs.len() / 2;
        let (_, m, _) = zs.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        Some(*m)
    };

    let keep: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !inside[i] || infos[i].ground {
                return true;
            }
            if infos[i].neighbor_count < params.min_neighbors {
                return false;
            }
            match local_ground_z(positions[i]) {
                Some(gz) => positions[i][2] - gz >= params.noise_height,
                None => true,
            }
        })
        .collect();

    let kept_indices: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let stats = FilterStats {
        inside_region: inside.iter().filter(|&&b| b).count(),
        ground_points: ground_indices.len(),
        removed: n - kept_indices.len(),
    };
    (cloud.select(&kept_indices), stats)
}

// ---------------------------------------------------------------------------
// Point-image semantics
// ---------------------------------------------------------------------------

/// Label points by projecting them into all cameras and keeping the most
/// confident mask hit. Ties prefer the smaller ray depth, then the
/// earlier camera name. Points hitting no camera become class 255 with
/// zero confidence.
pub fn assign_semantics(
    cloud: &LabeledPointCloud,
    masks: &[SemanticMask],
    cams: &[CameraModel],
) -> Result<LabeledPointCloud> {
    let mut paired: Vec<(&CameraModel, &SemanticMask)> = Vec::with_capacity(cams.len());
    for cam in cams {
        let mask = masks
            .iter()
            .find(|m| m.camera == cam.name)
            .ok_or_else(|| Error::invalid("masks", format!("no mask for camera {}", cam.name)))?;
        if mask.width != cam.width || mask.height != cam.height {
            return Err(Error::shape(
                "semantic mask",
                format!(
                    "mask for {} is {}x{}, camera is {}x{}",
                    cam.name, mask.width, mask.height, cam.width, cam.height
                ),
            ));
        }
        paired.push((cam, mask));
    }
    paired.sort_by(|a, b| a.0.name.cmp(&b.0.name));

    let n = cloud.len();
    let mut classes = vec![UNKNOWN_CLASS; n];
    let mut confidences = vec![0.0f64; n];
    for (i, &p) in cloud.positions().iter().enumerate() {
        // (confidence, -depth) maximized; camera order breaks exact ties.
        let mut best: Option<(f64, f64, u8)> = None;
        for (cam, mask) in &paired {
            if let Some((u, v, depth)) = cam.project(p) {
                let (class, conf) = mask.at(u.floor() as u32, v.floor() as u32);
                let conf = conf as f64;
                let better = match best {
                    None => true,
                    Some((bc, bd, _)) => conf > bc || (conf == bc && depth < bd),
                };
                if better {
                    best = Some((conf, depth, class));
                }
            }
        }
        if let Some((conf, _, class)) = best {
            classes[i] = class;
            confidences[i] = conf;
        }
    }
    let mut out = cloud.clone();
    out.set_semantics(classes, confidences)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Temporal aggregation
// ---------------------------------------------------------------------------

/// Densify tracked objects across a window of frames.
///
/// `frames` is ordered oldest first; the last entry is the target frame.
/// For every track with a box in the target frame, each frame's points are
/// mapped into that frame's box coordinates, unioned, and placed at the
/// target frame's box pose. Tracks absent from the target frame are
/// dropped. Output is sorted by track id.
pub fn aggregate_dynamic(frames: &[Vec<ObjectPoints>]) -> Result<Vec<ObjectPoints>> {
    let Some((target_frame, history)) = frames.split_last() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let mut target_boxes: Vec<&ObjectPoints> = target_frame.iter().collect();
    target_boxes.sort_by_key(|o| o.bbox.track_id);
    for target in target_boxes {
        let track = target.bbox.track_id;
        let mut local_parts: Vec<LabeledPointCloud> = Vec::new();
        for frame in history.iter().chain(std::iter::once(target_frame)) {
            for obj in frame.iter().filter(|o| o.bbox.track_id == track) {
                let mut local = obj.points.clone();
                let positions: Vec<[f64; 3]> = obj
                    .points
                    .positions()
                    .iter()
                    .map(|&p| obj.bbox.to_local(p))
                    .collect();
                local = replace_positions(local, positions);
                local_parts.push(local);
            }
        }
        let refs: Vec<&LabeledPointCloud> = local_parts.iter().collect();
        let union_local = LabeledPointCloud::concat(&refs);
        let placed: Vec<[f64; 3]> = union_local
            .positions()
            .iter()
            .map(|&q| target.bbox.to_world(q))
            .collect();
        out.push(ObjectPoints {
            bbox: target.bbox.clone(),
            points: replace_positions(union_local, placed),
        });
    }
    Ok(out)
}

fn replace_positions(cloud: LabeledPointCloud, positions: Vec<[f64; 3]>) -> LabeledPointCloud {
    let mut out = LabeledPointCloud::from_positions(positions);
    if let Some(v) = cloud.velocities() {
        let (a, s, t) = (
            cloud.amplitudes().map(<[f64]>::to_vec),
            cloud.snrs().map(<[f64]>::to_vec),
            cloud.timestamps().map(<[f64]>::to_vec),
        );
        if let (Some(a), Some(s), Some(t)) = (a, s, t) {
            out.set_radar_channels(v.to_vec(), a, s, t).expect("same length");
        }
    }
    if let (Some(c), Some(conf)) = (cloud.classes(), cloud.confidences()) {
        out.set_semantics(c.to_vec(), conf.to_vec()).expect("same length");
    }
    if let Some(t) = cloud.track_ids() {
        out.set_track_ids(t.to_vec()).expect("same length");
    }
    out
}

/// Transform each frame's labeled static points to the global frame and
/// concatenate.
pub fn aggregate_static(
    per_frame: &[LabeledPointCloud],
    poses: &[RigidPose],
) -> Result<LabeledPointCloud> {
    if per_frame.len() != poses.len() {
        return Err(Error::CountMismatch(format!(
            "{} static clouds for {} poses",
            per_frame.len(),
            poses.len()
        )));
    }
    let transformed: Vec<LabeledPointCloud> = per_frame
        .iter()
        .zip(poses)
        .map(|(cloud, pose)| transform_points(cloud, pose))
        .collect();
    let refs: Vec<&LabeledPointCloud> = transformed.iter().collect();
    Ok(LabeledPointCloud::concat(&refs))
}

// ---------------------------------------------------------------------------
// Staged nearest-neighbor matching
// ---------------------------------------------------------------------------

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Two-pass voxel labeling over a voxelized concatenation of
/// `[dynamic, static]` points (`occupied` point indices refer to that
/// concatenation, dynamic first).
///
/// Stage 1: a voxel containing any dynamic point takes the class of its
/// nearest contained dynamic point (center-to-point distance, ties to the
/// smaller point index). Stage 2: every other occupied voxel takes the
/// class of the nearest static, non-unknown point within
/// `params.stage2_radius` of its center, or stays free when none exists.
pub fn staged_nearest_neighbor(
    occupied: &[OccupiedVoxel],
    dynamic: &LabeledPointCloud,
    statics: &LabeledPointCloud,
    spec: &GridSpec,
    class_count: u32,
    params: &PseudolabelParams,
) -> Result<VoxelGrid> {
    let n_dyn = dynamic.len();
    let dyn_classes = dynamic
        .classes()
        .ok_or_else(|| Error::invalid("dynamic points", "class labels required"))?;
    let stat_classes = statics
        .classes()
        .ok_or_else(|| Error::invalid("static points", "class labels required"))?;
    for &c in dyn_classes {
        if (c as u32) >= class_count {
            return Err(Error::invalid(
                "dynamic class",
                format!("class {c} >= class count {class_count}"),
            ));
        }
    }
    for &c in stat_classes {
        if c != UNKNOWN_CLASS && (c as u32) >= class_count {
            return Err(Error::invalid(
                "static class",
                format!("class {c} >= class count {class_count}"),
            ));
        }
    }

    let labeled_static: Vec<usize> = (0..statics.len())
        .filter(|&i| stat_classes[i] != UNKNOWN_CLASS)
        .collect();
    let stat_hash = SpatialHash3::new(statics.positions(), params.stage2_radius.max(1e-6));
    let labeled_mask: Vec<bool> = {
        let mut mask = vec![false; statics.len()];
        for &i in &labeled_static {
            mask[i] = true;
        }
        mask
    };
    let r2 = params.stage2_radius * params.stage2_radius;

    let labels: Vec<(usize, u8)> = occupied
        .par_iter()
        .map(|voxel| {
            let (ix, iy, iz) = voxel.index;
            let center = spec.voxel_center(ix, iy, iz);
            // Stage 1: contained dynamic points take priority.
            let mut best_dyn: Option<(f64, usize)> = None;
            for &pi in &voxel.point_indices {
                if pi < n_dyn {
                    let d2 = dist2(center, dynamic.positions()[pi]);
                    let better = best_dyn.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && pi < bi));
                    if better {
                        best_dyn = Some((d2, pi));
                    }
                }
            }
            if let Some((_, pi)) = best_dyn {
                return (voxel.linear, dyn_classes[pi]);
            }
            // Stage 2: nearest labeled static point within the search radius.
            let mut best_stat: Option<(f64, usize)> = None;
            stat_hash.candidates(center, params.stage2_radius, |si| {
                if !labeled_mask[si] {
                    return;
                }
                let d2 = dist2(center, statics.positions()[si]);
                if d2 <= r2 {
                    let better =
                        best_stat.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && si < bi));
                    if better {
                        best_stat = Some((d2, si));
                    }
                }
            });
            match best_stat {
                Some((_, si)) => (voxel.linear, stat_classes[si]),
                None => (voxel.linear, 0),
            }
        })
        .collect();

    let mut grid = VoxelGrid::new(spec.clone(), class_count)?;
    for (linear, label) in labels {
        grid.set_linear(linear, label)?;
    }
    Ok(grid)
}

/// One frame of pipeline input, all point data in that frame's ego
/// coordinates.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame_id: u64,
    pub cloud: LabeledPointCloud,
    pub boxes: Vec<Box3D>,
    pub masks: Vec<SemanticMask>,
    /// Ego-to-global pose of this frame.
    pub pose: RigidPose,
}

/// Per-stage counters reported by [`run_pipeline`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineStats {
    /// Points assigned to boxes across all frames.
    pub extracted_points: usize,
    /// Static points removed as rain noise.
    pub filtered_points: usize,
    /// Static points that received a camera label.
    pub labeled_points: usize,
    /// Occupied voxels in the output grid.
    pub occupied_voxels: usize,
}

/// The whole pipeline over a window of frames, labeling the last frame:
/// per frame, split points by boxes, filter noise inside the drivable
/// region, and label the statics from the camera masks; then aggregate
/// dynamics by track and statics globally, and generate the occupancy
/// grid in the last frame's ego coordinates.
pub fn run_pipeline(
    frames: &[FrameInput],
    cams: &[CameraModel],
    spec: &GridSpec,
    class_count: u32,
    params: &PseudolabelParams,
) -> Result<(VoxelGrid, PipelineStats)> {
    let Some(current) = frames.last() else {
        return Err(Error::CountMismatch("no frames to label".to_string()));
    };
    let mut stats = PipelineStats::default();
    let mut per_frame_objects = Vec::with_capacity(frames.len());
    let mut per_frame_static = Vec::with_capacity(frames.len());
    let mut poses = Vec::with_capacity(frames.len());
    for frame in frames {
        let (objects, s_ele) = extract_objects(&frame.cloud, &frame.boxes)?;
        stats.extracted_points += objects.iter().map(|o| o.points.len()).sum::<usize>();

        // Points are in ego coordinates, so the ego sits at the origin.
        let region = drivable_region(&RigidPose::identity(), &frame.boxes, params);
        let (clean, filter_stats) = filter_noise(&s_ele, &region, params);
        stats.filtered_points += filter_stats.removed;

        let labeled = assign_semantics(&clean, &frame.masks, cams)?;
        stats.labeled_points += labeled
            .classes()
            .map(|cs| cs.iter().filter(|&&c| c != UNKNOWN_CLASS).count())
            .unwrap_or(0);

        per_frame_objects.push(objects);
        per_frame_static.push(labeled);
        poses.push(frame.pose.clone());
    }

    let dynamic = aggregate_dynamic(&per_frame_objects)?;
    let static_global = aggregate_static(&per_frame_static, &poses)?;
    let grid = generate_occupancy(
        &static_global,
        &dynamic,
        &current.pose,
        spec,
        class_count,
        params,
    )?;
    stats.occupied_voxels = grid.occupied_count();
    Ok((grid, stats))
}

/// Algorithm output stage: bring aggregated statics into the current
/// frame, concatenate with aggregated dynamics, voxelize, and run staged
/// matching.
pub fn generate_occupancy(
    static_global: &LabeledPointCloud,
    dynamic_objects: &[ObjectPoints],
    current_pose: &RigidPose,
    spec: &GridSpec,
    class_count: u32,
    params: &PseudolabelParams,
) -> Result<VoxelGrid> {
    let static_local = transform_points(static_global, &current_pose.inverse());
    let dyn_clouds: Vec<&LabeledPointCloud> =
        dynamic_objects.iter().map(|o| &o.points).collect();
    let dynamic = LabeledPointCloud::concat(&dyn_clouds);

    let mut all_positions = dynamic.positions().to_vec();
    all_positions.extend_from_slice(static_local.positions());
    let occupied = occupancy_lists(&all_positions, spec);
    staged_nearest_neighbor(&occupied, &dynamic, &static_local, spec, class_count, params)
}
