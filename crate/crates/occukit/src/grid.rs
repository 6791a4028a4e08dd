//! Metric voxel grid data model: grid specs, dense label grids, dense
//! feature tensors, voxelization, and the height/channel reshapes.
//!
//! Conventions fixed here and relied on by every other module:
//!
//! * Axis intervals are half-open `[min, max)`; voxel index `k` along an
//!   axis is `floor((p - min) / voxel_size)`.
//! * Voxel grid linear index is `((ix * NY) + iy) * NZ + iz`.
//! * Feature volumes are `C x H x W x Z` with `H` along Y, `W` along X and
//!   `Z` along Z, so a grid's volume dims are `(NY, NX, NZ)`.
//! * Continuous index `i` refers to the center of cell `i`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::LabeledPointCloud;

/// Relative tolerance for the extent-is-a-multiple-of-voxel-size check.
const EXTENT_REL_TOL: f64 = 1e-9;

/// Geometry of a dense voxel grid over a metric region.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel_size: f64,
    nx: usize,
    ny: usize,
    nz: usize,
}

fn axis_dim(range: (f64, f64), voxel_size: f64, axis: &str) -> Result<usize> {
    let extent = range.1 - range.0;
    if !extent.is_finite() || extent <= 0.0 {
        return Err(Error::BadGridSpec(format!(
            "{axis} extent must be positive, got {extent}"
        )));
    }
    let n = (extent / voxel_size).round();
    if n < 1.0 || (n * voxel_size - extent).abs() > EXTENT_REL_TOL * extent.abs().max(1.0) {
        return Err(Error::BadGridSpec(format!(
            "{axis} extent {extent} is not a positive multiple of voxel size {voxel_size}"
        )));
    }
    Ok(n as usize)
}

impl GridSpec {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        voxel_size: f64,
    ) -> Result<Self> {
        if !voxel_size.is_finite() || voxel_size <= 0.0 {
            return Err(Error::BadGridSpec(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        let nx = axis_dim(x_range, voxel_size, "x")?;
        let ny = axis_dim(y_range, voxel_size, "y")?;
        let nz = axis_dim(z_range, voxel_size, "z")?;
        Ok(GridSpec {
            x_range,
            y_range,
            z_range,
            voxel_size,
            nx,
            ny,
            nz,
        })
    }

    /// Surround-view preset: x in (-60, 60), y in (-40, 40), z in (-3, 5),
    /// 0.5 m voxels, 240 x 160 x 16 cells.
    pub fn omnihd() -> Self {
        GridSpec::new((-60.0, 60.0), (-40.0, 40.0), (-3.0, 5.0), 0.5).expect("preset is valid")
    }

    /// nuScenes-style preset: x, y in (-50, 50), z in (-3, 5), 0.5 m voxels,
    /// 200 x 200 x 16 cells.
    pub fn nuscenes() -> Self {
        GridSpec::new((-50.0, 50.0), (-50.0, 50.0), (-3.0, 5.0), 0.5).expect("preset is valid")
    }

    /// Small grid for fast tests and demos: 24 x 16 x 4 cells.
    pub fn desk() -> Self {
        GridSpec::new((-6.0, 6.0), (-4.0, 4.0), (-1.0, 1.0), 0.5).expect("preset is valid")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    /// Dims of a feature volume covering this grid: `(H, W, Z) = (NY, NX, NZ)`.
    pub fn volume_dims(&self) -> (usize, usize, usize) {
        (self.ny, self.nx, self.nz)
    }

    pub fn num_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn linear_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny && iz < self.nz);
        (ix * self.ny + iy) * self.nz + iz
    }

    pub fn unravel(&self, linear: usize) -> (usize, usize, usize) {
        let iz = linear % self.nz;
        let rest = linear / self.nz;
        (rest / self.ny, rest % self.ny, iz)
    }

    /// Voxel index of a metric point, or `None` if it falls outside
    /// `[min, max)` on any axis.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let ix = self.axis_index(p[0], self.x_range, self.nx)?;
        let iy = self.axis_index(p[1], self.y_range, self.ny)?;
        let iz = self.axis_index(p[2], self.z_range, self.nz)?;
        Some((ix, iy, iz))
    }

    fn axis_index(&self, v: f64, range: (f64, f64), n: usize) -> Option<usize> {
        if !(range.0..range.1).contains(&v) {
            return None;
        }
        let k = ((v - range.0) / self.voxel_size).floor() as isize;
        // Clamp guards points inside [min, max) whose float quotient lands
        // exactly on n due to rounding.
        Some((k.max(0) as usize).min(n - 1))
    }

    /// Pillar cell of a point from its (x, y) alone; z is unconstrained.
    pub fn xy_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let ix = self.axis_index(x, self.x_range, self.nx)?;
        let iy = self.axis_index(y, self.y_range, self.ny)?;
        Some((ix, iy))
    }

    /// Metric (x, y) center of a pillar cell.
    pub fn cell_center_xy(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_range.0 + (ix as f64 + 0.5) * self.voxel_size,
            self.y_range.0 + (iy as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Metric center of a voxel.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.x_range.0 + (ix as f64 + 0.5) * self.voxel_size,
            self.y_range.0 + (iy as f64 + 0.5) * self.voxel_size,
            self.z_range.0 + (iz as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Continuous volume coordinates `(h, w, z)` of a metric point, where
    /// integer values sit on cell centers. No bounds check.
    pub fn volume_coords(&self, p: [f64; 3]) -> (f64, f64, f64) {
        (
            (p[1] - self.y_range.0) / self.voxel_size - 0.5,
            (p[0] - self.x_range.0) / self.voxel_size - 0.5,
            (p[2] - self.z_range.0) / self.voxel_size - 0.5,
        )
    }
}

/// Dense per-voxel class labels over a [`GridSpec`]. Label 0 is "free".
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    class_count: u32,
    labels: Vec<u8>,
}

impl VoxelGrid {
    /// All-free grid. `class_count` includes the free class and must fit
    /// in the u8 label range.
    pub fn new(spec: GridSpec, class_count: u32) -> Result<Self> {
        if class_count == 0 || class_count > 256 {
            return Err(Error::invalid(
                "class count",
                format!("{class_count} not in 1..=256"),
            ));
        }
        let n = spec.num_voxels();
        Ok(VoxelGrid {
            spec,
            class_count,
            labels: vec![0; n],
        })
    }

    pub fn from_labels(spec: GridSpec, class_count: u32, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != spec.num_voxels() {
            return Err(Error::shape(
                "voxel grid",
                format!(
                    "{} labels for {} voxels",
                    labels.len(),
                    spec.num_voxels()
                ),
            ));
        }
        let mut grid = VoxelGrid::new(spec, class_count)?;
        for (i, &l) in labels.iter().enumerate() {
            if (l as u32) >= class_count {
                return Err(Error::invalid(
                    "voxel label",
                    format!("label {l} at linear index {i} >= class count {class_count}"),
                ));
            }
        }
        grid.labels = labels;
        Ok(grid)
    }

    pub fn class_count(&self) -> u32 {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.spec.linear_index(ix, iy, iz)]
    }

    pub fn set_label(&mut self, ix: usize, iy: usize, iz: usize, label: u8) -> Result<()> {
        self.set_linear(self.spec.linear_index(ix, iy, iz), label)
    }

    pub fn set_linear(&mut self, linear: usize, label: u8) -> Result<()> {
        if (label as u32) >= self.class_count {
            return Err(Error::invalid(
                "voxel label",
                format!("label {label} >= class count {}", self.class_count),
            ));
        }
        self.labels[linear] = label;
        Ok(())
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// One occupied voxel and the indices of the points it contains.
#[derive(Debug, Clone)]
pub struct OccupiedVoxel {
    pub index: (usize, usize, usize),
    pub linear: usize,
    pub point_indices: Vec<usize>,
}

/// Result of [`voxelize_points`]: the labeled grid plus, per occupied
/// voxel, the contained point indices (in input order).
#[derive(Debug, Clone)]
pub struct VoxelizedCloud {
    pub grid: VoxelGrid,
    pub occupied: Vec<OccupiedVoxel>,
}

/// Group point positions into voxels. Returns one entry per occupied
/// voxel, sorted by linear index, with point indices in input order.
pub fn occupancy_lists(positions: &[[f64; 3]], spec: &GridSpec) -> Vec<OccupiedVoxel> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &p) in positions.iter().enumerate() {
        if let Some((ix, iy, iz)) = spec.world_to_voxel(p) {
            map.entry(spec.linear_index(ix, iy, iz)).or_default().push(i);
        }
    }
    let mut occupied: Vec<OccupiedVoxel> = map
        .into_iter()
        .map(|(linear, point_indices)| OccupiedVoxel {
            index: spec.unravel(linear),
            linear,
            point_indices,
        })
        .collect();
    occupied.sort_by_key(|v| v.linear);
    occupied
}

/// Voxelize a labeled cloud: a voxel is occupied iff at least one point
/// falls inside it, and takes the majority class of its points (ties go to
/// the smallest class id).
pub fn voxelize_points(
    pts: &LabeledPointCloud,
    spec: &GridSpec,
    class_count: u32,
) -> Result<VoxelizedCloud> {
    let classes = pts
        .classes()
        .ok_or_else(|| Error::invalid("point cloud", "voxelization requires class labels"))?;
    if let Some(&bad) = classes.iter().find(|&&c| (c as u32) >= class_count) {
        return Err(Error::invalid(
            "point class",
            format!("class {bad} >= class count {class_count}"),
        ));
    }
    let occupied = occupancy_lists(pts.positions(), spec);
    let mut grid = VoxelGrid::new(spec.clone(), class_count)?;
    for voxel in &occupied {
        let mut counts: HashMap<u8, usize> = HashMap::new();
        for &pi in &voxel.point_indices {
            *counts.entry(classes[pi]).or_insert(0) += 1;
        }
        let mut best: Option<(u8, usize)> = None;
        for (&class, &count) in &counts {
            best = match best {
                None => Some((class, count)),
                Some((bc, bn)) => {
                    if count > bn || (count == bn && class < bc) {
                        Some((class, count))
                    } else {
                        Some((bc, bn))
                    }
                }
            };
        }
        let (label, _) = best.expect("occupied voxel has points");
        grid.set_linear(voxel.linear, label)?;
    }
    Ok(VoxelizedCloud { grid, occupied })
}

/// Dense real-valued feature tensor of shape `C x H x W x Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub z: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn zeros(channels: usize, h: usize, w: usize, z: usize) -> Self {
        FeatureVolume {
            channels,
            h,
            w,
            z,
            data: vec![0.0; channels * h * w * z],
        }
    }

    pub fn from_fn(
        channels: usize,
        h: usize,
        w: usize,
        z: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut vol = FeatureVolume::zeros(channels, h, w, z);
        for c in 0..channels {
            for ih in 0..h {
                for iw in 0..w {
                    for iz in 0..z {
                        vol.set(c, ih, iw, iz, f(c, ih, iw, iz));
                    }
                }
            }
        }
        vol
    }

    pub fn from_vec(channels: usize, h: usize, w: usize, z: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * h * w * z {
            return Err(Error::shape(
                "feature volume",
                format!("{} values for {channels}x{h}x{w}x{z}", data.len()),
            ));
        }
        Ok(FeatureVolume {
            channels,
            h,
            w,
            z,
            data,
        })
    }

    #[inline]
    fn offset(&self, c: usize, h: usize, w: usize, z: usize) -> usize {
        ((c * self.h + h) * self.w + w) * self.z + z
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize, z: usize) -> f64 {
        self.data[self.offset(c, h, w, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, z: usize, v: f64) {
        let i = self.offset(c, h, w, z);
        self.data[i] = v;
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.h, self.w, self.z)
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.z)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense real-valued feature tensor of shape `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlane {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl FeaturePlane {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        FeaturePlane {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn from_fn(
        channels: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut plane = FeaturePlane::zeros(channels, h, w);
        for c in 0..channels {
            for ih in 0..h {
                for iw in 0..w {
                    plane.set(c, ih, iw, f(c, ih, iw));
                }
            }
        }
        plane
    }

    pub fn from_vec(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::shape(
                "feature plane",
                format!("{} values for {channels}x{h}x{w}", data.len()),
            ));
        }
        Ok(FeaturePlane {
            channels,
            h,
            w,
            data,
        })
    }

    #[inline]
    fn offset(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.h + h) * self.w + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(c, h, w);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Height-to-channel reshape: `C x H x W x Z` becomes `(C*Z) x H x W` with
/// output channel `c' = c * Z + z`. Pure data movement.
pub fn h2c(vol: &FeatureVolume) -> FeaturePlane {
    let mut plane = FeaturePlane::zeros(vol.channels * vol.z, vol.h, vol.w);
    for c in 0..vol.channels {
        for z in 0..vol.z {
            let cp = c * vol.z + z;
            for h in 0..vol.h {
                for w in 0..vol.w {
                    plane.set(cp, h, w, vol.get(c, h, w, z));
                }
            }
        }
    }
    plane
}

/// Channel-to-height reshape, the exact inverse of [`h2c`].
pub fn c2h(plane: &FeaturePlane, z: usize) -> Result<FeatureVolume> {
    if z == 0 || !plane.channels.is_multiple_of(z) {
        return Err(Error::BadC2hShape {
            channels: plane.channels,
            z,
        });
    }
    let channels = plane.channels / z;
    let mut vol = FeatureVolume::zeros(channels, plane.h, plane.w, z);
    for c in 0..channels {
        for iz in 0..z {
            let cp = c * z + iz;
            for h in 0..plane.h {
                for w in 0..plane.w {
                    vol.set(c, h, w, iz, plane.get(cp, h, w));
                }
            }
        }
    }
    Ok(vol)
}
