//! Rigid transforms, pinhole projection, labeled point clouds, and the
//! bilinear/trilinear sampling kernels shared by fusion and pseudo-labeling.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::grid::{FeaturePlane, FeatureVolume};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// SE(3) transform stored as a 4x4 homogeneous matrix with an orthonormal
/// rotation block (det +1) and a (0,0,0,1) last row.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidPose {
    matrix: Matrix4<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            matrix: Matrix4::identity(),
        }
    }

    /// Validates the rigid-transform invariants before accepting the matrix.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose", "non-finite matrix entries"));
        }
        let last = matrix.row(3);
        if (last[0], last[1], last[2], last[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(Error::invalid("pose", "last row must be (0,0,0,1)"));
        }
        let r = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = r * r.transpose() - Matrix3::identity();
        if gram.iter().any(|v| v.abs() > ORTHONORMAL_TOL) {
            return Err(Error::invalid("pose", "rotation block is not orthonormal"));
        }
        if (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid("pose", "rotation determinant must be +1"));
        }
        Ok(RigidPose { matrix })
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        RigidPose::from_matrix(m)
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        RigidPose { matrix: m }
    }

    /// Rotation by `yaw` about +Z composed with a translation.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        RigidPose::from_parts(rotation, Vector3::new(t[0], t[1], t[2]))
            .expect("yaw rotation is orthonormal")
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Heading extracted from the rotation block.
    pub fn yaw(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.matrix;
        [
            r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2] + r[(0, 3)],
            r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2] + r[(1, 3)],
            r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2] + r[(2, 3)],
        ]
    }

    /// `a.compose(&b)` applies `b` first: `(a ∘ b)(p) = a(b(p))`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Rigid inverse via transpose, which keeps the rotation block exactly
    /// orthonormal.
    pub fn inverse(&self) -> RigidPose {
        let r = self.rotation();
        let t = self.translation();
        let rt = r.transpose();
        let ti = -(rt * t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&ti);
        RigidPose { matrix: m }
    }
}

/// Zero-skew pinhole camera: intrinsics plus an extrinsic pose mapping
/// ego/world coordinates into the camera frame.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsics: RigidPose,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        extrinsics: RigidPose,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::invalid(
                "camera",
                "principal point must lie inside the image",
            ));
        }
        Ok(CameraModel {
            name: name.into(),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsics,
        })
    }

    /// Project a world/ego point. Returns `(u, v, depth)` iff the point is
    /// in front of the camera and lands inside the image.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let pc = self.extrinsics.apply(p);
        let z = pc[2];
        if z <= 0.0 {
            return None;
        }
        let u = self.fx * pc[0] / z + self.cx;
        let v = self.fy * pc[1] / z + self.cy;
        if u < 0.0 || u >= self.width as f64 || v < 0.0 || v >= self.height as f64 {
            return None;
        }
        Some((u, v, z))
    }

    /// Camera-frame point reconstructed from a pixel and depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ]
    }
}

/// Points with optional per-point attribute columns. A column, when
/// present, covers every point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointCloud {
    positions: Vec<[f64; 3]>,
    velocities: Option<Vec<[f64; 2]>>,
    amplitudes: Option<Vec<f64>>,
    snrs: Option<Vec<f64>>,
    timestamps: Option<Vec<f64>>,
    classes: Option<Vec<u8>>,
    confidences: Option<Vec<f64>>,
    track_ids: Option<Vec<u32>>,
}

impl LabeledPointCloud {
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Self {
        LabeledPointCloud {
            positions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn velocities(&self) -> Option<&[[f64; 2]]> {
        self.velocities.as_deref()
    }

    pub fn amplitudes(&self) -> Option<&[f64]> {
        self.amplitudes.as_deref()
    }

    pub fn snrs(&self) -> Option<&[f64]> {
        self.snrs.as_deref()
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    pub fn classes(&self) -> Option<&[u8]> {
        self.classes.as_deref()
    }

    pub fn confidences(&self) -> Option<&[f64]> {
        self.confidences.as_deref()
    }

    pub fn track_ids(&self) -> Option<&[u32]> {
        self.track_ids.as_deref()
    }

    pub fn has_radar_channels(&self) -> bool {
        self.velocities.is_some()
            && self.amplitudes.is_some()
            && self.snrs.is_some()
            && self.timestamps.is_some()
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.positions.len() {
            return Err(Error::CountMismatch(format!(
                "{what}: {len} values for {} points",
                self.positions.len()
            )));
        }
        Ok(())
    }

    pub fn set_radar_channels(
        &mut self,
        velocities: Vec<[f64; 2]>,
        amplitudes: Vec<f64>,
        snrs: Vec<f64>,
        timestamps: Vec<f64>,
    ) -> Result<()> {
        self.check_len(velocities.len(), "velocities")?;
        self.check_len(amplitudes.len(), "amplitudes")?;
        self.check_len(snrs.len(), "snrs")?;
        self.check_len(timestamps.len(), "timestamps")?;
        self.velocities = Some(velocities);
        self.amplitudes = Some(amplitudes);
        self.snrs = Some(snrs);
        self.timestamps = Some(timestamps);
        Ok(())
    }

    pub fn set_semantics(&mut self, classes: Vec<u8>, confidences: Vec<f64>) -> Result<()> {
        self.check_len(classes.len(), "classes")?;
        self.check_len(confidences.len(), "confidences")?;
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("confidence", "values must lie in [0, 1]"));
        }
        self.classes = Some(classes);
        self.confidences = Some(confidences);
        Ok(())
    }

    pub fn set_track_ids(&mut self, track_ids: Vec<u32>) -> Result<()> {
        self.check_len(track_ids.len(), "track ids")?;
        self.track_ids = Some(track_ids);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud", "non-finite position"));
        }
        Ok(())
    }

    /// Gather a sub-cloud by point index, preserving all columns.
    pub fn select(&self, indices: &[usize]) -> LabeledPointCloud {
        fn gather<T: Copy>(col: &Option<Vec<T>>, indices: &[usize]) -> Option<Vec<T>> {
            col.as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect())
        }
        LabeledPointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            velocities: gather(&self.velocities, indices),
            amplitudes: gather(&self.amplitudes, indices),
            snrs: gather(&self.snrs, indices),
            timestamps: gather(&self.timestamps, indices),
            classes: gather(&self.classes, indices),
            confidences: gather(&self.confidences, indices),
            track_ids: gather(&self.track_ids, indices),
        }
    }

    /// Concatenate clouds. Optional columns survive only if present in
    /// every input.
    pub fn concat(clouds: &[&LabeledPointCloud]) -> LabeledPointCloud {
        fn merge<T: Copy>(
            clouds: &[&LabeledPointCloud],
            get: impl Fn(&LabeledPointCloud) -> Option<&Vec<T>>,
        ) -> Option<Vec<T>> {
            if clouds.iter().all(|c| get(c).is_some()) {
                Some(
                    clouds
                        .iter()
                        .flat_map(|c| get(c).unwrap().iter().copied())
                        .collect(),
                )
            } else {
                None
            }
        }
        LabeledPointCloud {
            positions: clouds
                .iter()
                .flat_map(|c| c.positions.iter().copied())
                .collect(),
            velocities: merge(clouds, |c| c.velocities.as_ref()),
            amplitudes: merge(clouds, |c| c.amplitudes.as_ref()),
            snrs: merge(clouds, |c| c.snrs.as_ref()),
            timestamps: merge(clouds, |c| c.timestamps.as_ref()),
            classes: merge(clouds, |c| c.classes.as_ref()),
            confidences: merge(clouds, |c| c.confidences.as_ref()),
            track_ids: merge(clouds, |c| c.track_ids.as_ref()),
        }
    }
}

/// Apply a rigid transform to every position; all other attributes are
/// carried through unchanged.
pub fn transform_points(pts: &LabeledPointCloud, pose: &RigidPose) -> LabeledPointCloud {
    let mut out = pts.clone();
    for p in &mut out.positions {
        *p = pose.apply(*p);
    }
    out
}

/// Per-point projection into a camera; `None` entries are behind the
/// camera or outside the image.
pub fn project_to_image(
    pts: &LabeledPointCloud,
    cam: &CameraModel,
) -> Vec<Option<(f64, f64, f64)>> {
    pts.positions.iter().map(|&p| cam.project(p)).collect()
}

/// Features sampled at continuous positions: `n` rows of `channels`
/// values, plus a per-position out-of-bounds flag. Out-of-bounds rows are
/// zero.
#[derive(Debug, Clone)]
pub struct Samples {
    pub channels: usize,
    pub features: Vec<f64>,
    pub out_of_bounds: Vec<bool>,
}

impl Samples {
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn len(&self) -> usize {
        self.out_of_bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out_of_bounds.is_empty()
    }
}

/// Corner indices and interpolation weight along one axis. Valid for
/// positions in `[0, dim-1]`; integer endpoints get a degenerate weight.
fn axis_corners(p: f64, dim: usize) -> Option<(usize, usize, f64)> {
    let max = (dim - 1) as f64;
    if !p.is_finite() || p < 0.0 || p > max {
        return None;
    }
    if dim == 1 {
        return Some((0, 0, 0.0));
    }
    let lo = (p.floor() as usize).min(dim - 2);
    Some((lo, lo + 1, p - lo as f64))
}

/// Trilinear sample of one `(h, w, z)` position; returns the C-vector and
/// whether the position was out of bounds.
pub fn trilinear_sample_one(vol: &FeatureVolume, pos: (f64, f64, f64)) -> (Vec<f64>, bool) {
    let corners = (
        axis_corners(pos.0, vol.h),
        axis_corners(pos.1, vol.w),
        axis_corners(pos.2, vol.z),
    );
    let ((h0, h1, th), (w0, w1, tw), (z0, z1, tz)) = match corners {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return (vec![0.0; vol.channels], true),
    };
    let mut out = vec![0.0; vol.channels];
    for (h, wh) in [(h0, 1.0 - th), (h1, th)] {
        for (w, ww) in [(w0, 1.0 - tw), (w1, tw)] {
            for (z, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                let weight = wh * ww * wz;
                if weight == 0.0 {
                    continue;
                }
                for (c, o) in out.iter_mut().enumerate() {
                    *o += weight * vol.get(c, h, w, z);
                }
            }
        }
    }
    (out, false)
}

/// Trilinear interpolation of the 8 surrounding cells at each `(h, w, z)`
/// position, in the volume's continuous index space.
pub fn trilinear_sample(vol: &FeatureVolume, positions: &[(f64, f64, f64)]) -> Samples {
    let mut features = Vec::with_capacity(positions.len() * vol.channels);
    let mut out_of_bounds = Vec::with_capacity(positions.len());
    for &pos in positions {
        let (f, oob) = trilinear_sample_one(vol, pos);
        features.extend_from_slice(&f);
        out_of_bounds.push(oob);
    }
    Samples {
        channels: vol.channels,
        features,
        out_of_bounds,
    }
}

/// Bilinear sample of one `(h, w)` position on a plane.
pub fn bilinear_sample_one(plane: &FeaturePlane, pos: (f64, f64)) -> (Vec<f64>, bool) {
    let corners = (axis_corners(pos.0, plane.h), axis_corners(pos.1, plane.w));
    let ((h0, h1, th), (w0, w1, tw)) = match corners {
        (Some(a), Some(b)) => (a, b),
        _ => return (vec![0.0; plane.channels], true),
    };
    let mut out = vec![0.0; plane.channels];
    for (h, wh) in [(h0, 1.0 - th), (h1, th)] {
        for (w, ww) in [(w0, 1.0 - tw), (w1, tw)] {
            let weight = wh * ww;
            if weight == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += weight * plane.get(c, h, w);
            }
        }
    }
    (out, false)
}

/// 2D analogue of [`trilinear_sample`].
pub fn bilinear_sample(plane: &FeaturePlane, positions: &[(f64, f64)]) -> Samples {
    let mut features = Vec::with_capacity(positions.len() * plane.channels);
    let mut out_of_bounds = Vec::with_capacity(positions.len());
    for &pos in positions {
        let (f, oob) = bilinear_sample_one(plane, pos);
        features.extend_from_slice(&f);
        out_of_bounds.push(oob);
    }
    Samples {
        channels: plane.channels,
        features,
        out_of_bounds,
    }
}
